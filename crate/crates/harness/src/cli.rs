//! Command-line interface.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use planrl_core::agent::AgentVariant;
use planrl_core::env::{Randomization, TaskId};
use planrl_core::expert::generate_demos;
use planrl_core::heads::{build_supervision_set, train_modenet, train_navnet, SupervisedConfig};
use planrl_core::imitation::{train_bc, BcConfig};
use serde::Serialize;

use crate::config::{resolve, ExperimentConfig};
use crate::error::{io_at, HarnessError, Result};
use crate::fsio::{read_bytes, write_atomic, write_bytes_atomic};
use crate::metrics::{self, AggregateRow, Curve, EvalRow, MetricsRow};
use crate::pipeline;
use crate::plot::{line_chart, Series};

#[derive(Debug, Parser)]
#[command(name = "planrl", version, about = "Planner-gated IL+RL experiments at desk scale")]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed; defaults to the first configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SupervisedKind {
    Bc,
    Modenet,
    Navnet,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out the scripted expert and write a demonstration file.
    GenDemos {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: Option<TaskId>,
        /// Number of trajectories.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample labeled states for the mode and waypoint heads.
    GenLabels {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: Option<TaskId>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the BC policy, ModeNet or NavNet; writes the checkpoint and
    /// `<out>.report.toml`.
    TrainSupervised {
        #[command(flatten)]
        common: Common,
        kind: SupervisedKind,
        /// Demo file for `bc`, label file otherwise.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// One RL training run; writes metrics, evaluation and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<AgentVariant>,
        /// Overrides `agent.steps`.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long)]
        bc: Option<PathBuf>,
        #[arg(long)]
        modenet: Option<PathBuf>,
        #[arg(long)]
        navnet: Option<PathBuf>,
        /// Also write the per-step decision log.
        #[arg(long)]
        log_decisions: bool,
        /// Output directory; defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy evaluation of an agent checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to every configured protocol.
        #[arg(long)]
        protocol: Option<Randomization>,
        #[arg(long)]
        episodes: Option<u64>,
        /// Optional eval CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train several variants over several seeds and aggregate.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds; defaults to the configured list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<AgentVariant>>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the fully resolved config, defaults included.
    ShowConfig {
        #[command(flatten)]
        common: Common,
    },
    /// Render SVG success curves from metrics or aggregate CSVs.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn seed_of(common: &Common, cfg: &ExperimentConfig) -> u64 {
    common.seed.unwrap_or(cfg.seeds[0])
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| HarnessError::Internal(e.to_string()))?;
    write_bytes_atomic(path, text.as_bytes())
}

fn write_metrics_file(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_atomic(path, |w| metrics::write_metrics(w, rows))
}

fn write_eval_file(path: &Path, rows: &[EvalRow]) -> Result<()> {
    write_atomic(path, |w| metrics::write_eval(w, rows))
}

#[derive(Serialize)]
struct BcReportFile {
    kind: &'static str,
    transitions: usize,
    epochs: usize,
    initial_loss: f64,
    final_loss: f64,
}

#[derive(Serialize)]
struct ModeReportFile {
    kind: &'static str,
    samples: usize,
    accuracy: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    tp: usize,
    fp: usize,
    tn: usize,
    fn_: usize,
}

#[derive(Serialize)]
struct NavReportFile {
    kind: &'static str,
    samples: usize,
    holdout: usize,
    mean_waypoint_error: f64,
    max_waypoint_error: f64,
    mean_error_fraction_of_diagonal: f64,
}

#[derive(Serialize)]
struct RunSummary {
    variant: AgentVariant,
    task: TaskId,
    seed: u64,
    total_steps: u64,
    interaction_steps: u64,
    episodes: u64,
    planner_failures: u64,
    final_success_rate: f64,
}

fn report_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".report.toml");
    PathBuf::from(s)
}

/// Runs one parsed command; progress goes to `stdout`.
pub fn execute(cmd: Command, stdout: &mut dyn Write) -> Result<()> {
    let say = |stdout: &mut dyn Write, line: String| -> Result<()> {
        writeln!(stdout, "{line}").map_err(|e| HarnessError::Internal(e.to_string()))
    };
    match cmd {
        Command::GenDemos { common, task, n, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(t) = task {
                cfg.task = t;
                cfg.world = None;
            }
            let seed = seed_of(&common, &cfg);
            let n = n.unwrap_or(cfg.demos.count);
            let demos = generate_demos(&cfg.world(), n, seed, &cfg.demos.expert)?;
            let out = resolve(&out);
            write_atomic(&out, |w| demos.write_to(w).map_err(Into::into))?;
            say(stdout, format!("wrote {} trajectories ({} transitions) to {}", demos.trajectories.len(), demos.transition_count(), out.display()))
        }
        Command::GenLabels { common, task, n, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(t) = task {
                cfg.task = t;
                cfg.world = None;
            }
            let seed = seed_of(&common, &cfg);
            let set = build_supervision_set(&cfg.world(), n.unwrap_or(cfg.label_samples), seed, &cfg.supervision)?;
            let out = resolve(&out);
            write_atomic(&out, |w| set.write_to(w).map_err(Into::into))?;
            say(stdout, format!("wrote {} labeled states ({:.2} interaction) to {}", set.samples.len(), set.positive_fraction(), out.display()))
        }
        Command::TrainSupervised { common, kind, dataset, out } => {
            let cfg = load_config(&common)?;
            let seed = seed_of(&common, &cfg);
            let dataset = resolve(&dataset);
            let out = resolve(&out);
            let sup = SupervisedConfig { seed, ..cfg.supervised.clone() };
            let report = match kind {
                SupervisedKind::Bc => {
                    let demos = pipeline::load_demos(&dataset)?;
                    let (policy, rep) = train_bc(&demos, &BcConfig { seed, ..cfg.bc.clone() })?;
                    write_bytes_atomic(&out, &policy.to_bytes())?;
                    toml::to_string(&BcReportFile {
                        kind: "bc",
                        transitions: demos.transition_count(),
                        epochs: rep.epoch_losses.len(),
                        initial_loss: rep.initial_loss,
                        final_loss: rep.final_loss(),
                    })
                }
                SupervisedKind::Modenet => {
                    let set = pipeline::load_labels(&dataset)?;
                    let (model, rep) = train_modenet(&set, &sup)?;
                    write_bytes_atomic(&out, &model.to_bytes())?;
                    let c = rep.confusion;
                    toml::to_string(&ModeReportFile {
                        kind: "modenet",
                        samples: set.samples.len(),
                        accuracy: rep.accuracy,
                        precision: rep.precision,
                        recall: rep.recall,
                        f1: rep.f1,
                        tp: c.tp,
                        fp: c.fp,
                        tn: c.tn,
                        fn_: c.fn_,
                    })
                }
                SupervisedKind::Navnet => {
                    let set = pipeline::load_labels(&dataset)?;
                    let (model, rep) = train_navnet(&set, &sup)?;
                    write_bytes_atomic(&out, &model.to_bytes())?;
                    toml::to_string(&NavReportFile {
                        kind: "navnet",
                        samples: set.samples.len(),
                        holdout: rep.holdout,
                        mean_waypoint_error: rep.mean_error,
                        max_waypoint_error: rep.max_error,
                        mean_error_fraction_of_diagonal: rep.mean_error_fraction,
                    })
                }
            }
            .map_err(|e| HarnessError::Internal(e.to_string()))?;
            write_bytes_atomic(&report_path(&out), report.as_bytes())?;
            say(stdout, report.trim_end().to_string())
        }
        Command::Train {
            common,
            variant,
            steps,
            demos,
            bc,
            modenet,
            navnet,
            log_decisions,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(n) = steps {
                cfg.agent.steps = n;
            }
            for (slot, path) in [
                (&mut cfg.inputs.demos, demos),
                (&mut cfg.inputs.bc, bc),
                (&mut cfg.inputs.modenet, modenet),
                (&mut cfg.inputs.navnet, navnet),
            ] {
                if path.is_some() {
                    *slot = path;
                }
            }
            let cfg = cfg.validated()?;
            let seed = seed_of(&common, &cfg);
            let dir = resolve(&out.unwrap_or_else(|| cfg.output_dir.clone()));
            let prep = pipeline::prepare(&cfg, seed)?;
            let o = pipeline::run(&cfg, cfg.variant, seed, &prep, log_decisions)?;
            write_metrics_file(&dir.join("metrics.csv"), &o.rows)?;
            write_eval_file(&dir.join("eval.csv"), &o.eval)?;
            write_bytes_atomic(&dir.join("agent.ckpt"), &o.agent.to_bytes())?;
            write_bytes_atomic(&dir.join("config.toml"), cfg.to_toml_string().as_bytes())?;
            write_toml(
                &dir.join("summary.toml"),
                &RunSummary {
                    variant: cfg.variant,
                    task: o.metrics.task,
                    seed,
                    total_steps: o.metrics.total_steps,
                    interaction_steps: o.metrics.interaction_steps,
                    episodes: o.metrics.episodes,
                    planner_failures: o.metrics.planner_failures,
                    final_success_rate: o.metrics.final_success_rate(),
                },
            )?;
            if let Some(log) = &o.decisions {
                write_atomic(&dir.join("decisions.csv"), |w| metrics::write_decisions(w, log))?;
            }
            say(stdout, format!("{} seed {seed}: final training success {:.3}", cfg.variant, o.metrics.final_success_rate()))?;
            for e in &o.eval {
                say(stdout, format!("eval {}: {:.3} over {} episodes", e.protocol, e.success_rate, e.episodes))?;
            }
            say(stdout, format!("wrote {}", dir.display()))
        }
        Command::Eval {
            common,
            checkpoint,
            protocol,
            episodes,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(p) = protocol {
                cfg.eval.protocols = vec![p];
            }
            if let Some(n) = episodes {
                cfg.eval.episodes = n;
            }
            let cfg = cfg.validated()?;
            let seed = seed_of(&common, &cfg);
            let agent = pipeline::load_agent(&resolve(&checkpoint))?;
            let rows = pipeline::evaluate(&agent, &cfg, seed, None);
            for e in &rows {
                say(stdout, format!("{} {}: success_rate={} episodes={} mean_length={:.2}", e.variant, e.protocol, e.success_rate, e.episodes, e.mean_length))?;
            }
            if let Some(out) = out {
                write_eval_file(&resolve(&out), &rows)?;
            }
            Ok(())
        }
        Command::Sweep {
            common,
            seeds,
            variants,
            threads,
            steps,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(v) = variants {
                cfg.variants = v;
            }
            if let Some(t) = threads {
                cfg.threads = t;
            }
            if let Some(n) = steps {
                cfg.agent.steps = n;
            }
            let cfg = cfg.validated()?;
            let dir = resolve(&out.unwrap_or_else(|| cfg.output_dir.clone()));
            let runs = pipeline::sweep(&cfg, &cfg.seeds, &cfg.variants, cfg.threads)?;
            let mut rows = Vec::new();
            let mut evals = Vec::new();
            for r in &runs {
                let run_dir = dir.join("runs").join(r.variant.name()).join(format!("seed-{}", r.seed));
                write_metrics_file(&run_dir.join("metrics.csv"), &r.outcome.rows)?;
                write_bytes_atomic(&run_dir.join("agent.ckpt"), &r.outcome.agent.to_bytes())?;
                rows.extend(r.outcome.rows.iter().cloned());
                evals.extend(r.outcome.eval.iter().cloned());
            }
            let agg = metrics::aggregate(&rows);
            write_metrics_file(&dir.join("metrics.csv"), &rows)?;
            write_eval_file(&dir.join("eval.csv"), &evals)?;
            write_atomic(&dir.join("aggregate.csv"), |w| metrics::write_aggregate(w, &agg))?;
            write_bytes_atomic(&dir.join("config.toml"), cfg.to_toml_string().as_bytes())?;
            for line in sweep_summary(&evals) {
                say(stdout, line)?;
            }
            say(stdout, format!("wrote {}", dir.display()))
        }
        Command::ShowConfig { common } => {
            let cfg = load_config(&common)?;
            say(stdout, cfg.to_toml_string().trim_end().to_string())
        }
        Command::Plot { common: _, inputs, out } => {
            let mut agg: Vec<AggregateRow> = Vec::new();
            for p in &inputs {
                let p = resolve(p);
                let bytes = read_bytes(&p)?;
                match metrics::sniff_schema(&bytes) {
                    Some(metrics::AGGREGATE_SCHEMA) => agg.extend(metrics::read_aggregate(&bytes[..])?),
                    Some(metrics::METRICS_SCHEMA) => agg.extend(metrics::aggregate(&metrics::read_metrics(&bytes[..])?)),
                    other => {
                        return Err(HarnessError::user(format!(
                            "{}: cannot plot schema {:?}",
                            p.display(),
                            other.unwrap_or("<none>")
                        )))
                    }
                }
            }
            let out = resolve(&out);
            let files = write_plots(&agg, &out)?;
            say(stdout, format!("wrote {} plot files to {}", files.len(), out.display()))
        }
    }
}

/// Mean final training and evaluation success per variant and protocol.
fn sweep_summary(evals: &[EvalRow]) -> Vec<String> {
    let mut g: BTreeMap<(AgentVariant, String), Vec<&EvalRow>> = BTreeMap::new();
    for e in evals {
        g.entry((e.variant, e.protocol.to_string())).or_default().push(e);
    }
    g.iter()
        .map(|((v, p), rows)| {
            let (train, _) = metrics::mean_std(&rows.iter().filter_map(|r| r.train_success_rate).collect::<Vec<_>>());
            let (eval, sd) = metrics::mean_std(&rows.iter().map(|r| r.success_rate).collect::<Vec<_>>());
            format!("{v} {p}: train {train:.3} eval {eval:.3} ± {sd:.3} ({} seeds)", rows.len())
        })
        .collect()
}

/// One SVG per (curve, variant) plus one comparison per curve. Returns
/// the written paths.
pub fn write_plots(rows: &[AggregateRow], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut series: BTreeMap<(Curve, AgentVariant), Series> = BTreeMap::new();
    for r in rows {
        series
            .entry((r.curve, r.variant))
            .or_insert_with(|| Series {
                label: r.variant.name().to_string(),
                points: Vec::new(),
            })
            .points
            .push((r.step as f64, r.success_mean, r.success_std));
    }
    if series.is_empty() {
        return Err(HarnessError::user("nothing to plot"));
    }
    std::fs::create_dir_all(dir).map_err(|e| io_at(dir, e))?;
    let title = |c: Curve| match c {
        Curve::Train => "Training success (object randomization)",
        Curve::Eval => "Evaluation success (object and gripper randomization)",
    };
    let mut written = Vec::new();
    for ((curve, variant), s) in &series {
        let mut s = s.clone();
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path = dir.join(format!("{}-{}.svg", curve.name(), variant.name()));
        let svg = line_chart(&format!("{} ({})", title(*curve), variant.name()), "environment steps", "success rate", &[s]);
        write_bytes_atomic(&path, svg.as_bytes())?;
        written.push(path);
    }
    for curve in [Curve::Train, Curve::Eval] {
        let all: Vec<Series> = series.iter().filter(|((c, _), _)| *c == curve).map(|(_, s)| s.clone()).collect();
        if all.is_empty() {
            continue;
        }
        let path = dir.join(format!("{}-comparison.svg", curve.name()));
        write_bytes_atomic(&path, line_chart(title(curve), "environment steps", "success rate", &all).as_bytes())?;
        written.push(path);
    }
    Ok(written)
}
