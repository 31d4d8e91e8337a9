//! In-process stages shared by the CLI commands and the test suites.

use std::io::BufReader;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use planrl_core::agent::{evaluate_agent, Agent, AgentVariant, DecisionRecord, Models, RunMetrics, Trainer};
use planrl_core::expert::{generate_demos, DemoDataset};
use planrl_core::heads::{build_supervision_set, train_modenet, train_navnet, LabeledSet, ModeNet, NavNet, SupervisedConfig};
use planrl_core::imitation::{train_bc, BcConfig, BcPolicy};
use planrl_core::rng;

use crate::config::{resolve, ExperimentConfig};
use crate::error::{io_at, HarnessError, Result};
use crate::metrics::{EvalRow, MetricsRow};

const EVAL_STREAM: u64 = 0xe7a1;
const CURVE_STREAM: u64 = 0xc0de;

/// Demonstrations plus every frozen model a variant may need.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub demos: DemoDataset,
    pub models: Models,
}

pub fn load_demos(path: &Path) -> Result<DemoDataset> {
    let f = std::fs::File::open(path).map_err(|e| io_at(path, e))?;
    DemoDataset::read_from(BufReader::new(f)).map_err(|e| HarnessError::user(format!("{}: {e}", path.display())))
}

pub fn load_labels(path: &Path) -> Result<LabeledSet> {
    let f = std::fs::File::open(path).map_err(|e| io_at(path, e))?;
    LabeledSet::read_from(BufReader::new(f)).map_err(|e| HarnessError::user(format!("{}: {e}", path.display())))
}

fn load_with<T>(path: &Path, parse: impl FnOnce(&[u8]) -> planrl_core::Result<T>) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| io_at(path, e))?;
    parse(&bytes).map_err(|e| HarnessError::user(format!("{}: {e}", path.display())))
}

pub fn load_bc(path: &Path) -> Result<BcPolicy> {
    load_with(path, BcPolicy::from_bytes)
}

pub fn load_modenet(path: &Path) -> Result<ModeNet> {
    load_with(path, ModeNet::from_bytes)
}

pub fn load_navnet(path: &Path) -> Result<NavNet> {
    load_with(path, NavNet::from_bytes)
}

pub fn load_agent(path: &Path) -> Result<Agent> {
    load_with(path, Agent::from_bytes)
}

/// Loads configured inputs and builds the rest from `seed`.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let world = cfg.world();
    let demos = match &cfg.inputs.demos {
        Some(p) => load_demos(&resolve(p))?,
        None => generate_demos(&world, cfg.demos.count, seed, &cfg.demos.expert)?,
    };
    let bc = match &cfg.inputs.bc {
        Some(p) => load_bc(&resolve(p))?,
        None => train_bc(&demos, &BcConfig { seed, ..cfg.bc.clone() })?.0,
    };
    let sup = SupervisedConfig {
        seed,
        ..cfg.supervised.clone()
    };
    let mut labels = None;
    let mut label_set = || -> Result<LabeledSet> {
        if labels.is_none() {
            labels = Some(build_supervision_set(&world, cfg.label_samples, seed, &cfg.supervision)?);
        }
        Ok(labels.clone().expect("just built"))
    };
    let mode = match &cfg.inputs.modenet {
        Some(p) => load_modenet(&resolve(p))?,
        None => train_modenet(&label_set()?, &sup)?.0,
    };
    let nav = match &cfg.inputs.navnet {
        Some(p) => load_navnet(&resolve(p))?,
        None => train_navnet(&label_set()?, &sup)?.0,
    };
    Ok(Prepared {
        demos,
        models: Models {
            bc: Some(bc),
            mode: Some(mode),
            nav: Some(nav),
        },
    })
}

/// Everything one training run produces.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub agent: Agent,
    pub metrics: RunMetrics,
    pub rows: Vec<MetricsRow>,
    pub eval: Vec<EvalRow>,
    pub decisions: Option<Vec<DecisionRecord>>,
}

/// Trains `variant` with prepared inputs, then evaluates under every
/// configured protocol.
pub fn run(cfg: &ExperimentConfig, variant: AgentVariant, seed: u64, prep: &Prepared, log: bool) -> Result<RunOutcome> {
    let mut agent_cfg = cfg.agent.clone();
    agent_cfg.variant = variant;
    let agent = Agent::new(agent_cfg, cfg.world(), prep.models.clone(), seed)?;
    let mut trainer = Trainer::new(agent, &prep.demos, seed)?;
    if log {
        trainer.record_decisions();
    }
    let curve_seed = rng::derive_seed(seed, CURVE_STREAM);
    let mut curve = Vec::new();
    let mut seen = 0;
    while !trainer.finished() {
        trainer.step()?;
        if cfg.eval.interval_episodes > 0 && trainer.intervals().len() > seen {
            seen = trainer.intervals().len();
            let r = evaluate_agent(&trainer.agent, cfg.eval.curve_protocol, cfg.eval.interval_episodes, curve_seed);
            curve.push(r.success_rate);
        }
    }
    let (agent, metrics, decisions) = trainer.run()?;
    if cfg.eval.interval_episodes > 0 && metrics.intervals.len() > curve.len() {
        let r = evaluate_agent(&agent, cfg.eval.curve_protocol, cfg.eval.interval_episodes, curve_seed);
        curve.push(r.success_rate);
    }
    let rows = metrics
        .intervals
        .iter()
        .enumerate()
        .map(|(i, m)| MetricsRow::new(seed, variant, metrics.task, m, curve.get(i).copied()))
        .collect();
    let eval = evaluate(&agent, cfg, seed, Some(metrics.final_success_rate()));
    Ok(RunOutcome {
        agent,
        metrics,
        rows,
        eval,
        decisions,
    })
}

/// Final evaluation rows for a trained agent.
pub fn evaluate(agent: &Agent, cfg: &ExperimentConfig, seed: u64, train_success: Option<f64>) -> Vec<EvalRow> {
    let eval_seed = rng::derive_seed(seed, EVAL_STREAM);
    cfg.eval
        .protocols
        .iter()
        .map(|&p| {
            let r = evaluate_agent(agent, p, cfg.eval.episodes, eval_seed);
            EvalRow {
                seed,
                variant: agent.variant(),
                task: agent.world.task,
                protocol: p,
                episodes: r.episodes,
                success_rate: r.success_rate,
                mean_length: r.mean_length,
                train_success_rate: train_success,
            }
        })
        .collect()
}

/// Runs `jobs` on `threads` isolated workers and returns results in job
/// order, so output never depends on scheduling.
pub fn parallel_map<J, T, F>(jobs: &[J], threads: usize, f: F) -> Vec<T>
where
    J: Sync,
    T: Send,
    F: Fn(&J) -> T + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let out = f(job);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|o| o.expect("every job ran"))
        .collect()
}

/// One (variant, seed) run inside a sweep.
#[derive(Clone, Debug)]
pub struct SweepRun {
    pub variant: AgentVariant,
    pub seed: u64,
    pub outcome: RunOutcome,
}

/// Prepares inputs once per seed, then trains every variant on them.
pub fn sweep(cfg: &ExperimentConfig, seeds: &[u64], variants: &[AgentVariant], threads: usize) -> Result<Vec<SweepRun>> {
    let prepared: Vec<Result<Prepared>> = parallel_map(seeds, threads, |&s| prepare(cfg, s));
    let prepared: Vec<Prepared> = prepared.into_iter().collect::<Result<_>>()?;
    let jobs: Vec<(usize, AgentVariant)> = variants
        .iter()
        .flat_map(|&v| (0..seeds.len()).map(move |i| (i, v)))
        .collect();
    let outs = parallel_map(&jobs, threads, |&(i, v)| {
        log::info!("sweep: {v} seed {}", seeds[i]);
        run(cfg, v, seeds[i], &prepared[i], false)
    });
    jobs.iter()
        .zip(outs)
        .map(|(&(i, v), o)| {
            o.map(|outcome| SweepRun {
                variant: v,
                seed: seeds[i],
                outcome,
            })
        })
        .collect()
}
