//! Versioned CSV tables written by the harness.
//!
//! Every file starts with a `#schema=<name>/<version>` line followed by a
//! regular CSV header. Readers refuse any other schema line.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};

use planrl_core::agent::{AgentVariant, DecisionRecord, IntervalMetrics};
use planrl_core::env::{Randomization, TaskId, ACTION_DIM, RAW_STATE_DIM};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const METRICS_SCHEMA: &str = "planrl-metrics/1";
pub const EVAL_SCHEMA: &str = "planrl-eval/1";
pub const AGGREGATE_SCHEMA: &str = "planrl-aggregate/1";
pub const DECISIONS_SCHEMA: &str = "planrl-decisions/1";

/// One metrics interval of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub variant: AgentVariant,
    pub task: TaskId,
    pub step: u64,
    pub episodes: u64,
    pub success_rate: f64,
    pub il_fraction: f64,
    pub rl_fraction: f64,
    pub nav_fraction: f64,
    pub planner_failures: u64,
    pub mean_episode_length: f64,
    pub mean_return: f64,
    /// Greedy success at the end of the interval, when an evaluation curve
    /// was requested.
    pub eval_success_rate: Option<f64>,
}

impl MetricsRow {
    pub fn new(seed: u64, variant: AgentVariant, task: TaskId, m: &IntervalMetrics, eval: Option<f64>) -> Self {
        MetricsRow {
            seed,
            variant,
            task,
            step: m.step,
            episodes: m.episodes,
            success_rate: m.success_rate(),
            il_fraction: m.il_fraction(),
            rl_fraction: m.rl_fraction(),
            nav_fraction: m.nav_fraction(),
            planner_failures: m.planner_failures,
            mean_episode_length: m.mean_episode_length(),
            mean_return: m.mean_return(),
            eval_success_rate: eval,
        }
    }
}

/// Final evaluation of one trained agent under one protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub seed: u64,
    pub variant: AgentVariant,
    pub task: TaskId,
    pub protocol: Randomization,
    pub episodes: u64,
    pub success_rate: f64,
    pub mean_length: f64,
    /// Final-interval training success of the same run, when known.
    pub train_success_rate: Option<f64>,
}

/// Which curve an aggregate row summarises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Curve {
    /// Interval success while training.
    Train,
    /// Greedy evaluation success at interval ends.
    Eval,
}

impl Curve {
    pub fn name(self) -> &'static str {
        match self {
            Curve::Train => "train",
            Curve::Eval => "eval",
        }
    }
}

/// Mean and spread over seeds at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub variant: AgentVariant,
    pub curve: Curve,
    pub step: u64,
    pub seeds: usize,
    pub success_mean: f64,
    pub success_std: f64,
    pub il_fraction_mean: f64,
    pub il_fraction_std: f64,
    pub nav_fraction_mean: f64,
    pub nav_fraction_std: f64,
}

fn write_table<T: Serialize>(w: &mut impl Write, schema: &str, rows: &[T]) -> Result<()> {
    writeln!(w, "#schema={schema}").map_err(|e| HarnessError::Internal(e.to_string()))?;
    let mut csv = csv::WriterBuilder::new().has_headers(true).from_writer(w);
    if rows.is_empty() {
        return Err(HarnessError::Internal(format!("refusing to write an empty {schema} table")));
    }
    for r in rows {
        csv.serialize(r)?;
    }
    csv.flush().map_err(|e| HarnessError::Internal(e.to_string()))?;
    Ok(())
}

/// Reads the schema line and returns the rest of the input.
fn check_schema<R: Read>(r: R, schema: &str) -> Result<BufReader<R>> {
    let mut r = BufReader::new(r);
    let mut first = String::new();
    r.read_line(&mut first).map_err(|e| HarnessError::user(e.to_string()))?;
    let found = first.trim_end();
    let want = format!("#schema={schema}");
    if found != want {
        return Err(HarnessError::user(format!("schema mismatch: expected `{want}`, found `{found}`")));
    }
    Ok(r)
}

fn read_table<T: DeserializeOwned>(r: impl Read, schema: &str) -> Result<Vec<T>> {
    let r = check_schema(r, schema)?;
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(Into::into)
}

/// Returns the schema named on the first line of `bytes`, if any.
pub fn sniff_schema(bytes: &[u8]) -> Option<&str> {
    let line = bytes.split(|&b| b == b'\n').next()?;
    std::str::from_utf8(line).ok()?.trim_end().strip_prefix("#schema=")
}

/// Steps must increase strictly within each (seed, variant) run.
fn check_monotone(rows: &[MetricsRow]) -> Result<()> {
    let mut last: BTreeMap<(u64, AgentVariant), u64> = BTreeMap::new();
    for r in rows {
        if let Some(prev) = last.insert((r.seed, r.variant), r.step) {
            if r.step <= prev {
                return Err(HarnessError::user(format!(
                    "metrics step {} follows {} for seed {} {}",
                    r.step, prev, r.seed, r.variant
                )));
            }
        }
    }
    Ok(())
}

pub fn write_metrics(w: &mut impl Write, rows: &[MetricsRow]) -> Result<()> {
    check_monotone(rows).map_err(|e| HarnessError::Internal(e.to_string()))?;
    write_table(w, METRICS_SCHEMA, rows)
}

pub fn read_metrics(r: impl Read) -> Result<Vec<MetricsRow>> {
    let rows = read_table(r, METRICS_SCHEMA)?;
    check_monotone(&rows)?;
    Ok(rows)
}

pub fn write_eval(w: &mut impl Write, rows: &[EvalRow]) -> Result<()> {
    write_table(w, EVAL_SCHEMA, rows)
}

pub fn read_eval(r: impl Read) -> Result<Vec<EvalRow>> {
    read_table(r, EVAL_SCHEMA)
}

pub fn write_aggregate(w: &mut impl Write, rows: &[AggregateRow]) -> Result<()> {
    write_table(w, AGGREGATE_SCHEMA, rows)
}

pub fn read_aggregate(r: impl Read) -> Result<Vec<AggregateRow>> {
    read_table(r, AGGREGATE_SCHEMA)
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Groups rows by variant and step and summarises across seeds. The eval
/// curve is emitted only where every contributing row carries a value.
pub fn aggregate(rows: &[MetricsRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(AgentVariant, u64), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.variant, r.step)).or_default().push(r);
    }
    let mut out = Vec::new();
    for curve in [Curve::Train, Curve::Eval] {
        for ((variant, step), g) in &groups {
            let success: Vec<f64> = match curve {
                Curve::Train => g.iter().map(|r| r.success_rate).collect(),
                Curve::Eval => match g.iter().map(|r| r.eval_success_rate).collect::<Option<Vec<_>>>() {
                    Some(v) => v,
                    None => continue,
                },
            };
            let il: Vec<f64> = g.iter().map(|r| r.il_fraction).collect();
            let nav: Vec<f64> = g.iter().map(|r| r.nav_fraction).collect();
            let (success_mean, success_std) = mean_std(&success);
            let (il_fraction_mean, il_fraction_std) = mean_std(&il);
            let (nav_fraction_mean, nav_fraction_std) = mean_std(&nav);
            out.push(AggregateRow {
                variant: *variant,
                curve,
                step: *step,
                seeds: g.len(),
                success_mean,
                success_std,
                il_fraction_mean,
                il_fraction_std,
                nav_fraction_mean,
                nav_fraction_std,
            });
        }
    }
    out.sort_by_key(|r| (r.variant, r.curve, r.step));
    out
}

/// Per-step decision log, one row per environment step.
pub fn write_decisions(w: &mut impl Write, log: &[DecisionRecord]) -> Result<()> {
    let io = |e: std::io::Error| HarnessError::Internal(e.to_string());
    writeln!(w, "#schema={DECISIONS_SCHEMA}").map_err(io)?;
    let mut csv = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["t", "episode", "mode", "source", "q_il", "q_rl"].map(String::from).to_vec();
    header.extend((0..RAW_STATE_DIM).map(|i| format!("s{i}")));
    header.extend((0..ACTION_DIM).map(|i| format!("a{i}")));
    header.push("reward".into());
    header.extend((0..RAW_STATE_DIM).map(|i| format!("n{i}")));
    header.push("terminal".into());
    header.push("episode_end".into());
    csv.write_record(&header)?;
    let opt = |q: Option<f64>| q.map(|v| v.to_string()).unwrap_or_default();
    for d in log {
        let mut row = vec![
            d.t.to_string(),
            d.episode.to_string(),
            d.mode.index().to_string(),
            d.source.name().to_string(),
            opt(d.q_il),
            opt(d.q_rl),
        ];
        row.extend(d.state.to_raw().iter().map(f64::to_string));
        row.extend(d.action.0.iter().map(f64::to_string));
        row.push(d.reward.to_string());
        row.extend(d.next.to_raw().iter().map(f64::to_string));
        row.push((d.terminal as u8).to_string());
        row.push((d.episode_end as u8).to_string());
        csv.write_record(&row)?;
    }
    csv.flush().map_err(io)?;
    Ok(())
}
