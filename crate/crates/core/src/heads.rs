//! Mode classifier and waypoint regressor.
//!
//! Both heads are trained on rule-generated labels from mixed expert and
//! random rollouts, then frozen. Mode 0 means "far from anything relevant,
//! hand control to the planner"; mode 1 means "interact".

use std::fmt;
use std::io::{BufRead, Read, Write};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::env::{self, Action, Randomization, State, TaskId, World, OBS_DIM, RAW_STATE_DIM};
use crate::error::{Error, Result};
use crate::expert::{expert_action, random_action, ExpertParams};
use crate::geom::{self, Aabb, Vec3};
use crate::imitation::{observation_rows, Normalizer};
use crate::rng;
use crate::tensor::{Activation, Adam, Mlp};

const MODE_MAGIC: &[u8; 8] = b"PLRLMOD\x01";
const NAV_MAGIC: &[u8; 8] = b"PLRLNAV\x01";
const LABEL_HEADER: &str = "#planrl-labels v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Motion planning toward a waypoint.
    Navigate,
    /// Fine control near the object or goal.
    Interact,
}

impl Mode {
    pub fn index(self) -> usize {
        match self {
            Mode::Navigate => 0,
            Mode::Interact => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Mode> {
        match i {
            0 => Ok(Mode::Navigate),
            1 => Ok(Mode::Interact),
            _ => Err(Error::format("mode", format!("{i} is not 0 or 1"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// What the gripper should be heading for: the goal while holding, else the object.
pub fn relevant_target(s: &State) -> Vec3 {
    if s.held {
        s.goal
    } else {
        s.object
    }
}

/// Closed threshold: distance exactly `d_thresh` is interaction.
pub fn mode_label(s: &State, d_thresh: f64) -> Mode {
    if geom::dist(s.gripper, relevant_target(s)) <= d_thresh {
        Mode::Interact
    } else {
        Mode::Navigate
    }
}

pub fn waypoint_label(s: &State, h_offset: f64, workspace: &Aabb) -> Vec3 {
    workspace.clamp(geom::add(relevant_target(s), [0.0, 0.0, h_offset]))
}

/// Label thresholds as fractions of the workspace size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelConfig {
    /// `d_thresh` as a fraction of the workspace diagonal.
    pub mode_distance_fraction: f64,
    /// `h_offset` as a fraction of the workspace height.
    pub waypoint_height_fraction: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            mode_distance_fraction: 0.1,
            waypoint_height_fraction: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelParams {
    pub d_thresh: f64,
    pub h_offset: f64,
}

impl LabelParams {
    pub fn for_world(world: &World, cfg: &LabelConfig) -> Result<LabelParams> {
        let p = LabelParams {
            d_thresh: cfg.mode_distance_fraction * world.diagonal(),
            h_offset: cfg.waypoint_height_fraction * world.workspace.size()[2],
        };
        if !(p.d_thresh > 0.0 && p.h_offset > 0.0) {
            return Err(Error::Config("label thresholds must be positive".into()));
        }
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledSample {
    pub state: State,
    pub mode: Mode,
    pub waypoint: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub task: TaskId,
    pub params: LabelParams,
    pub workspace: Aabb,
    pub samples: Vec<LabeledSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisionConfig {
    pub labels: LabelConfig,
    pub randomization: Randomization,
    /// Per-episode probabilities of replacing the expert action with a
    /// random one, cycled over episodes.
    pub random_mix: Vec<f64>,
    /// Candidate pool size as a multiple of the requested sample count.
    pub pool_factor: usize,
    pub min_positive: f64,
    pub max_positive: f64,
    pub expert: ExpertParams,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        SupervisionConfig {
            labels: LabelConfig::default(),
            randomization: Randomization::ObjectAndGripper,
            random_mix: vec![0.0, 0.2, 0.5, 1.0],
            pool_factor: 3,
            min_positive: 0.2,
            max_positive: 0.8,
            expert: ExpertParams::default(),
        }
    }
}

/// Samples `n` labeled states from mixed expert/random rollouts. The share
/// of interaction labels is pushed into `[min_positive, max_positive]` by
/// stratified selection.
pub fn build_supervision_set(world: &World, n: usize, seed: u64, cfg: &SupervisionConfig) -> Result<LabeledSet> {
    if n == 0 {
        return Err(Error::Dataset("need at least one sample".into()));
    }
    if cfg.random_mix.is_empty() || !(cfg.min_positive <= cfg.max_positive) {
        return Err(Error::Config("invalid supervision mixing settings".into()));
    }
    let params = LabelParams::for_world(world, &cfg.labels)?;
    let want_pos_lo = (cfg.min_positive * n as f64).ceil() as usize;
    let want_neg_lo = n - ((cfg.max_positive * n as f64).floor() as usize).min(n);
    let pool_target = n * cfg.pool_factor.max(1);
    let max_episodes = 20 * pool_target / world.geometry.horizon.max(1) as usize + 200;

    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut episode = 0u64;
    while pos.len() + neg.len() < pool_target || pos.len() < want_pos_lo || neg.len() < want_neg_lo {
        if episode as usize >= max_episodes {
            return Err(Error::Dataset(format!(
                "could not collect a balanced set: {} interaction / {} navigation states",
                pos.len(),
                neg.len()
            )));
        }
        let ep_seed = rng::derive_seed(seed, episode);
        let mix = cfg.random_mix[episode as usize % cfg.random_mix.len()];
        let mut act_rng = rng::stream(ep_seed, 7);
        let mut s = env::reset(world, ep_seed, cfg.randomization);
        loop {
            let sample = LabeledSample {
                state: s,
                mode: mode_label(&s, params.d_thresh),
                waypoint: waypoint_label(&s, params.h_offset, &world.workspace),
            };
            match sample.mode {
                Mode::Interact => pos.push(sample),
                Mode::Navigate => neg.push(sample),
            }
            let a: Action = if act_rng.random::<f64>() < mix {
                random_action(&mut act_rng)
            } else {
                expert_action(&s, world, &cfg.expert)
            };
            let out = env::step(&s, a, world);
            if out.done {
                break;
            }
            s = out.state;
        }
        episode += 1;
    }

    let mut pick_rng = rng::stream(seed, 8);
    pos.shuffle(&mut pick_rng);
    neg.shuffle(&mut pick_rng);
    let natural = pos.len() as f64 / (pos.len() + neg.len()) as f64;
    let frac = natural.clamp(cfg.min_positive, cfg.max_positive);
    let n_pos = ((frac * n as f64).round() as usize).clamp(want_pos_lo, n - want_neg_lo);
    let mut samples: Vec<LabeledSample> = pos[..n_pos].to_vec();
    samples.extend_from_slice(&neg[..n - n_pos]);
    samples.shuffle(&mut pick_rng);
    Ok(LabeledSet {
        task: world.task,
        params,
        workspace: world.workspace,
        samples,
    })
}

impl LabeledSet {
    pub fn positive_fraction(&self) -> f64 {
        let pos = self.samples.iter().filter(|s| s.mode == Mode::Interact).count();
        pos as f64 / self.samples.len().max(1) as f64
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{LABEL_HEADER}")?;
        writeln!(w, "#task {}", self.task)?;
        writeln!(w, "#state_dim {RAW_STATE_DIM}")?;
        writeln!(w, "#d_thresh {}", self.params.d_thresh)?;
        writeln!(w, "#h_offset {}", self.params.h_offset)?;
        let b = self.workspace;
        writeln!(
            w,
            "#workspace {},{},{},{},{},{}",
            b.min[0], b.min[1], b.min[2], b.max[0], b.max[1], b.max[2]
        )?;
        writeln!(w, "#count {}", self.samples.len())?;
        let mut cols = vec!["i".to_string()];
        cols.extend((0..RAW_STATE_DIM).map(|i| format!("s{i}")));
        cols.extend(["mode", "w0", "w1", "w2"].map(String::from));
        writeln!(w, "{}", cols.join(","))?;
        for (i, smp) in self.samples.iter().enumerate() {
            let mut row = vec![i.to_string()];
            row.extend(smp.state.to_raw().iter().map(|v| v.to_string()));
            row.push(smp.mode.to_string());
            row.extend(smp.waypoint.iter().map(|v| v.to_string()));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let bad = |m: &str| Error::format("label file", m.to_string());
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines.next().ok_or_else(|| bad("unexpected end of file"))?.map_err(Error::from)
        };
        if next()? != LABEL_HEADER {
            return Err(bad("missing or unsupported header"));
        }
        let meta = |line: String, key: &str| -> Result<String> {
            line.strip_prefix(&format!("#{key} "))
                .map(str::to_owned)
                .ok_or_else(|| Error::format("label file", format!("expected #{key}")))
        };
        let float = |s: &str| -> Result<f64> { s.parse().map_err(|_| bad("number")) };
        let task: TaskId = meta(next()?, "task")?.parse()?;
        if meta(next()?, "state_dim")? != RAW_STATE_DIM.to_string() {
            return Err(bad("unsupported state_dim"));
        }
        let d_thresh = float(&meta(next()?, "d_thresh")?)?;
        let h_offset = float(&meta(next()?, "h_offset")?)?;
        let ws: Vec<f64> = meta(next()?, "workspace")?
            .split(',')
            .map(float)
            .collect::<Result<_>>()?;
        if ws.len() != 6 {
            return Err(bad("workspace needs 6 numbers"));
        }
        let workspace = Aabb::new([ws[0], ws[1], ws[2]], [ws[3], ws[4], ws[5]]);
        let count: usize = meta(next()?, "count")?.parse().map_err(|_| bad("count"))?;
        let _columns = next()?;
        let mut samples = Vec::with_capacity(count);
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 1 + RAW_STATE_DIM + 4 {
                return Err(bad("wrong field count"));
            }
            let raw: Vec<f64> = f[1..=RAW_STATE_DIM].iter().map(|v| float(v)).collect::<Result<_>>()?;
            let mode = Mode::from_index(f[1 + RAW_STATE_DIM].parse().map_err(|_| bad("mode"))?)?;
            let w: Vec<f64> = f[2 + RAW_STATE_DIM..].iter().map(|v| float(v)).collect::<Result<_>>()?;
            samples.push(LabeledSample {
                state: State::from_raw(&raw)?,
                mode,
                waypoint: [w[0], w[1], w[2]],
            });
        }
        if samples.len() != count {
            return Err(bad("row count disagrees with #count"));
        }
        Ok(LabeledSet {
            task,
            params: LabelParams { d_thresh, h_offset },
            workspace,
            samples,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            epochs: 150,
            lr: 1e-3,
            batch_size: 64,
            hidden: vec![64, 64],
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierReport {
    pub confusion: Confusion,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassifierReport {
    /// Metrics from confusion counts; a zero denominator gives 0.
    pub fn from_confusion(c: Confusion) -> Result<Self> {
        let total = c.tp + c.fp + c.tn + c.fn_;
        if total == 0 {
            return Err(Error::Dataset("no predictions to score".into()));
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Ok(ClassifierReport {
            confusion: c,
            accuracy: ratio(c.tp + c.tn, total),
            precision,
            recall,
            f1,
        })
    }
}

/// Interaction is the positive class.
pub fn classifier_metrics(predictions: &[Mode], labels: &[Mode]) -> Result<ClassifierReport> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: predictions.len(),
        });
    }
    let mut c = Confusion::default();
    for (p, l) in predictions.iter().zip(labels) {
        match (p, l) {
            (Mode::Interact, Mode::Interact) => c.tp += 1,
            (Mode::Interact, Mode::Navigate) => c.fp += 1,
            (Mode::Navigate, Mode::Navigate) => c.tn += 1,
            (Mode::Navigate, Mode::Interact) => c.fn_ += 1,
        }
    }
    ClassifierReport::from_confusion(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NavReport {
    pub holdout: usize,
    pub mean_error: f64,
    pub max_error: f64,
    /// Mean error over the workspace diagonal.
    pub mean_error_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModeNet {
    pub net: Mlp,
    pub norm: Normalizer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NavNet {
    pub net: Mlp,
    pub norm: Normalizer,
    pub workspace: Aabb,
}

/// Softmax probability of interaction.
pub fn interaction_probability(model: &ModeNet, s: &State) -> f64 {
    let l = logits(model, s);
    1.0 / (1.0 + (l[0] - l[1]).exp())
}

fn logits(model: &ModeNet, s: &State) -> Vec<f64> {
    let x = model.norm.apply(&s.observation());
    model.net.forward(&x).expect("mode net built for observation size")
}

/// Argmax over the two logits; a tie picks interaction.
pub fn predict_mode(model: &ModeNet, s: &State) -> Mode {
    let l = logits(model, s);
    if l[1] >= l[0] {
        Mode::Interact
    } else {
        Mode::Navigate
    }
}

pub fn predict_waypoint(model: &NavNet, s: &State) -> Vec3 {
    let x = model.norm.apply(&s.observation());
    let out = model.net.forward(&x).expect("nav net built for observation size");
    model.workspace.clamp([out[0], out[1], out[2]])
}

fn split(set: &LabeledSet, cfg: &SupervisedConfig) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    if set.samples.is_empty() {
        return Err(Error::Dataset("labeled set is empty".into()));
    }
    if !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(Error::Config("holdout_fraction must be in [0, 1)".into()));
    }
    let mut order: Vec<usize> = (0..set.samples.len()).collect();
    order.shuffle(&mut rng::stream(cfg.seed, 3));
    let n_hold = (set.samples.len() as f64 * cfg.holdout_fraction).round() as usize;
    let n_train = (set.samples.len() - n_hold).max(1);
    let pick = |ix: &[usize]| ix.iter().map(|&i| set.samples[i]).collect::<Vec<_>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

fn new_net(out: usize, hidden: &[usize], rng: &mut rng::Rng) -> Mlp {
    let mut sizes = vec![OBS_DIM];
    sizes.extend_from_slice(hidden);
    sizes.push(out);
    Mlp::new(&sizes, Activation::Relu, Activation::Identity, rng)
}

/// Minibatch Adam where `grad_fn(pred, rows)` returns the output gradient.
fn fit(
    net: &mut Mlp,
    x: &Array2<f64>,
    cfg: &SupervisedConfig,
    grad_fn: impl Fn(&Array2<f64>, &[usize]) -> Array2<f64>,
) -> Result<()> {
    let mut adam = Adam::new(net);
    let mut shuffle_rng = rng::stream(cfg.seed, 2);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let xb = x.select(Axis(0), chunk);
            let trace = net.forward_trace(xb.view())?;
            let g = grad_fn(trace.output(), chunk);
            let (grads, _) = net.backward_batch(&trace, g.view())?;
            adam.step(net, &grads, cfg.lr)?;
        }
    }
    Ok(())
}

fn fit_normalizer(samples: &[LabeledSample]) -> Result<Normalizer> {
    let obs: Vec<[f64; OBS_DIM]> = samples.iter().map(|s| s.state.observation()).collect();
    Normalizer::fit(obs.iter().map(|o| &o[..]))
}

/// Cross-entropy training on the 80% split; the report scores the rest.
pub fn train_modenet(set: &LabeledSet, cfg: &SupervisedConfig) -> Result<(ModeNet, ClassifierReport)> {
    let (train, hold) = split(set, cfg)?;
    let has = |m: Mode| train.iter().any(|s| s.mode == m);
    if !has(Mode::Interact) || !has(Mode::Navigate) {
        return Err(Error::Dataset("mode training data contains a single class".into()));
    }
    let norm = fit_normalizer(&train)?;
    let x = observation_rows(train.iter().map(|s| &s.state), &norm);
    let labels: Vec<usize> = train.iter().map(|s| s.mode.index()).collect();
    let mut net = new_net(2, &cfg.hidden, &mut rng::stream(cfg.seed, 1));
    fit(&mut net, &x, cfg, |logits, rows| {
        let n = rows.len() as f64;
        let mut g = Array2::zeros((rows.len(), 2));
        for (k, &i) in rows.iter().enumerate() {
            let (l0, l1) = (logits[[k, 0]], logits[[k, 1]]);
            let p1 = 1.0 / (1.0 + (l0 - l1).exp());
            let p = [1.0 - p1, p1];
            for c in 0..2 {
                let y = if labels[i] == c { 1.0 } else { 0.0 };
                g[[k, c]] = (p[c] - y) / n;
            }
        }
        g
    })?;
    let model = ModeNet { net, norm };
    let scored = if hold.is_empty() { &train } else { &hold };
    let preds: Vec<Mode> = scored.iter().map(|s| predict_mode(&model, &s.state)).collect();
    let truth: Vec<Mode> = scored.iter().map(|s| s.mode).collect();
    let report = classifier_metrics(&preds, &truth)?;
    Ok((model, report))
}

/// Mean-squared-error training on the 80% split; the report scores the rest.
pub fn train_navnet(set: &LabeledSet, cfg: &SupervisedConfig) -> Result<(NavNet, NavReport)> {
    let (train, hold) = split(set, cfg)?;
    let norm = fit_normalizer(&train)?;
    let x = observation_rows(train.iter().map(|s| &s.state), &norm);
    let y = Array2::from_shape_fn((train.len(), 3), |(i, j)| train[i].waypoint[j]);
    let mut net = new_net(3, &cfg.hidden, &mut rng::stream(cfg.seed, 1));
    fit(&mut net, &x, cfg, |pred, rows| {
        let n = rows.len() as f64;
        Array2::from_shape_fn((rows.len(), 3), |(k, j)| 2.0 * (pred[[k, j]] - y[[rows[k], j]]) / n)
    })?;
    let model = NavNet {
        net,
        norm,
        workspace: set.workspace,
    };
    let scored = if hold.is_empty() { &train } else { &hold };
    let errors: Vec<f64> = scored
        .iter()
        .map(|s| geom::dist(predict_waypoint(&model, &s.state), s.waypoint))
        .collect();
    let mean_error = errors.iter().sum::<f64>() / errors.len() as f64;
    let report = NavReport {
        holdout: scored.len(),
        mean_error,
        max_error: errors.iter().cloned().fold(0.0, f64::max),
        mean_error_fraction: mean_error / set.workspace.diagonal(),
    };
    Ok((model, report))
}

fn write_workspace(w: &mut impl Write, b: &Aabb) -> Result<()> {
    codec::write_f64s(w, b.min.iter().chain(&b.max).copied())
}

impl ModeNet {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MODE_MAGIC)?;
        self.net.write_to(w)?;
        self.norm.write_to(w)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        codec::expect_magic(r, MODE_MAGIC, "mode checkpoint")?;
        let net = Mlp::read_from(r)?;
        let norm = Normalizer::read_from(r)?;
        if net.input_dim() != OBS_DIM || net.output_dim() != 2 || norm.dim() != OBS_DIM {
            return Err(Error::format("mode checkpoint", "unexpected dimensions"));
        }
        Ok(ModeNet { net, norm })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        ModeNet::read_from(&mut bytes)
    }
}

impl NavNet {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(NAV_MAGIC)?;
        self.net.write_to(w)?;
        self.norm.write_to(w)?;
        write_workspace(w, &self.workspace)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        codec::expect_magic(r, NAV_MAGIC, "nav checkpoint")?;
        let net = Mlp::read_from(r)?;
        let norm = Normalizer::read_from(r)?;
        let v = codec::read_f64s(r, 6)?;
        let workspace = Aabb::new([v[0], v[1], v[2]], [v[3], v[4], v[5]]);
        if net.input_dim() != OBS_DIM || net.output_dim() != 3 || norm.dim() != OBS_DIM || !workspace.is_valid() {
            return Err(Error::format("nav checkpoint", "unexpected dimensions"));
        }
        Ok(NavNet { net, norm, workspace })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        NavNet::read_from(&mut bytes)
    }
}
