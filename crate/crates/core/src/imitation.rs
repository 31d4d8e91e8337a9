//! Behaviour cloning: a deterministic MLP policy fit to demonstrated actions
//! by minibatch Adam on the mean squared error.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::env::{Action, State, ACTION_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::expert::DemoDataset;
use crate::rng;
use crate::tensor::{Activation, Adam, Gradients, Mlp};

const BC_MAGIC: &[u8; 8] = b"PLRLBC\x00\x01";

/// Per-feature standardisation fitted on a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population statistics; near-constant features keep unit scale.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        let first = rows.first().ok_or_else(|| Error::Dataset("no rows to normalise".into()))?;
        let dim = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in &rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd < 1e-6 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Normalizer { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn apply_rows(&self, x: &mut Array2<f64>) {
        for mut row in x.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        codec::write_u32(w, self.dim() as u32)?;
        codec::write_f64s(w, self.mean.iter().copied())?;
        codec::write_f64s(w, self.std.iter().copied())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let dim = codec::read_u32(r)? as usize;
        if dim > 1 << 16 {
            return Err(Error::format("normaliser", "dimension too large"));
        }
        let mean = codec::read_f64s(r, dim)?;
        let std = codec::read_f64s(r, dim)?;
        Ok(Normalizer { mean, std })
    }
}

/// Observation matrix (one row per state), normalised.
pub(crate) fn observation_rows<'a>(states: impl IntoIterator<Item = &'a State>, norm: &Normalizer) -> Array2<f64> {
    let obs: Vec<[f64; OBS_DIM]> = states.into_iter().map(State::observation).collect();
    let mut x = Array2::from_shape_fn((obs.len(), OBS_DIM), |(i, j)| obs[i][j]);
    norm.apply_rows(&mut x);
    x
}

#[derive(Clone, Debug, PartialEq)]
pub struct BcPolicy {
    pub net: Mlp,
    pub norm: Normalizer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BcConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            epochs: 300,
            lr: 1e-3,
            batch_size: 64,
            hidden: vec![64, 64],
            seed: 0,
        }
    }
}

/// Per-epoch full-dataset losses.
#[derive(Clone, Debug, PartialEq)]
pub struct BcReport {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

impl BcReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

impl BcPolicy {
    pub fn new(norm: Normalizer, hidden: &[usize], rng: &mut rng::Rng) -> Self {
        let mut sizes = vec![OBS_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(ACTION_DIM);
        BcPolicy {
            net: Mlp::new(&sizes, Activation::Relu, Activation::Tanh, rng),
            norm,
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(BC_MAGIC)?;
        self.net.write_to(w)?;
        self.norm.write_to(w)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        codec::expect_magic(r, BC_MAGIC, "bc checkpoint")?;
        let net = Mlp::read_from(r)?;
        let norm = Normalizer::read_from(r)?;
        if net.input_dim() != OBS_DIM || net.output_dim() != ACTION_DIM || norm.dim() != OBS_DIM {
            return Err(Error::format("bc checkpoint", "unexpected dimensions"));
        }
        Ok(BcPolicy { net, norm })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        BcPolicy::read_from(&mut cursor)
    }
}

/// Deterministic action: the mean of the isotropic Gaussian policy.
pub fn bc_act(policy: &BcPolicy, s: &State) -> Action {
    let x = policy.norm.apply(&s.observation());
    let out = policy.net.forward(&x).expect("bc policy built for observation size");
    Action::from_slice(&out)
}

fn action_rows<'a>(actions: impl IntoIterator<Item = &'a Action>) -> Array2<f64> {
    let a: Vec<&Action> = actions.into_iter().collect();
    Array2::from_shape_fn((a.len(), ACTION_DIM), |(i, j)| a[i].0[j])
}

/// Mean over the batch of `‖μψ(s) − a‖²`.
pub fn bc_loss(policy: &BcPolicy, batch: &[(State, Action)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Dataset("empty batch".into()));
    }
    let x = observation_rows(batch.iter().map(|(s, _)| s), &policy.norm);
    let y = action_rows(batch.iter().map(|(_, a)| a));
    let pred = policy.net.forward_batch(x.view())?;
    Ok(mse(&pred, &y))
}

fn mse(pred: &Array2<f64>, target: &Array2<f64>) -> f64 {
    let diff = pred - target;
    diff.mapv(|v| v * v).sum() / pred.nrows() as f64
}

/// Loss and parameter gradient of [`bc_loss`] on normalised rows.
pub fn bc_loss_grad(net: &Mlp, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<(f64, Gradients)> {
    let trace = net.forward_trace(x)?;
    let pred = trace.output();
    let n = pred.nrows() as f64;
    let diff = pred - &y;
    let loss = diff.mapv(|v| v * v).sum() / n;
    let out_grad = diff.mapv(|v| 2.0 * v / n);
    let (grads, _) = net.backward_batch(&trace, out_grad.view())?;
    Ok((loss, grads))
}

/// Fits a BC policy on every `(state, action)` pair in `dataset`.
pub fn train_bc(dataset: &DemoDataset, cfg: &BcConfig) -> Result<(BcPolicy, BcReport)> {
    let pairs: Vec<(&State, &Action)> = dataset.pairs().collect();
    if pairs.is_empty() {
        return Err(Error::Dataset("demonstration dataset is empty".into()));
    }
    let obs: Vec<[f64; OBS_DIM]> = pairs.iter().map(|(s, _)| s.observation()).collect();
    let norm = Normalizer::fit(obs.iter().map(|o| &o[..]))?;
    let x = observation_rows(pairs.iter().map(|(s, _)| *s), &norm);
    let y = action_rows(pairs.iter().map(|(_, a)| *a));

    let mut init_rng = rng::stream(cfg.seed, 1);
    let mut shuffle_rng = rng::stream(cfg.seed, 2);
    let mut policy = BcPolicy::new(norm, &cfg.hidden, &mut init_rng);
    let mut adam = Adam::new(&policy.net);
    let initial_loss = mse(&policy.net.forward_batch(x.view())?, &y);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let bs = cfg.batch_size.max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(bs) {
            let xb = x.select(ndarray::Axis(0), chunk);
            let yb = y.select(ndarray::Axis(0), chunk);
            let (_, grads) = bc_loss_grad(&policy.net, xb.view(), yb.view())?;
            adam.step(&mut policy.net, &grads, cfg.lr)?;
        }
        epoch_losses.push(mse(&policy.net.forward_batch(x.view())?, &y));
    }
    Ok((
        policy,
        BcReport {
            initial_loss,
            epoch_losses,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{self, Randomization, TaskId, World};
    use crate::expert::{generate_demos, ExpertParams, Trajectory};

    fn tiny_policy(seed: u64) -> BcPolicy {
        let mut r = rng::seeded(seed);
        BcPolicy::new(Normalizer::identity(OBS_DIM), &[8], &mut r)
    }

    fn random_batch(n: usize, seed: u64) -> Vec<(State, Action)> {
        let w = World::default_for(TaskId::PickAndPlace);
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|k| {
                let s = env::reset(&w, seed + k as u64, Randomization::ObjectAndGripper);
                (s, crate::expert::random_action(&mut r))
            })
            .collect()
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let p = tiny_policy(1);
        let batch: Vec<_> = random_batch(5, 3)
            .into_iter()
            .map(|(s, _)| (s, bc_act(&p, &s)))
            .collect();
        assert_eq!(bc_loss(&p, &batch).unwrap(), 0.0);
    }

    #[test]
    fn single_pair_is_squared_distance() {
        let p = tiny_policy(2);
        let (s, a) = random_batch(1, 8)[0];
        let pred = bc_act(&p, &s);
        let want: f64 = (0..ACTION_DIM).map(|i| (pred.0[i] - a.0[i]).powi(2)).sum();
        assert!((bc_loss(&p, &[(s, a)]).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn batch_loss_matches_scalar_oracle() {
        let p = tiny_policy(4);
        let batch = random_batch(8, 21);
        let mut total = 0.0;
        for (s, a) in &batch {
            let pred = bc_act(&p, s);
            let mut sq = 0.0;
            for i in 0..ACTION_DIM {
                let d = pred.0[i] - a.0[i];
                sq += d * d;
            }
            total += sq;
        }
        let oracle = total / batch.len() as f64;
        assert!((bc_loss(&p, &batch).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_is_rejected() {
        assert!(bc_loss(&tiny_policy(0), &[]).is_err());
    }

    #[test]
    fn zero_net_gives_zero_action() {
        let p = BcPolicy {
            net: Mlp::zeros(&[OBS_DIM, 8, ACTION_DIM], Activation::Relu, Activation::Tanh),
            norm: Normalizer::identity(OBS_DIM),
        };
        let s = env::reset(&World::default_for(TaskId::ReachLift), 0, Randomization::None);
        assert_eq!(bc_act(&p, &s), Action::zero());
    }

    #[test]
    fn nll_and_mse_gradients_are_proportional() {
        // Unit-variance Gaussian NLL is ½‖μ − a‖² + const, so its gradient is
        // (μ − a) while the MSE gradient is 2(μ − a)/n.
        let p = tiny_policy(6);
        let batch = random_batch(6, 30);
        let x = observation_rows(batch.iter().map(|(s, _)| s), &p.norm);
        let y = action_rows(batch.iter().map(|(_, a)| a));
        let (_, mse_grad) = bc_loss_grad(&p.net, x.view(), y.view()).unwrap();
        let trace = p.net.forward_trace(x.view()).unwrap();
        let nll_out = (trace.output() - &y).mapv(|v| v / batch.len() as f64);
        let (nll_grad, _) = p.net.backward_batch(&trace, nll_out.view()).unwrap();
        for (m, n) in mse_grad.flat().iter().zip(nll_grad.flat()) {
            assert!((m - 2.0 * n).abs() <= 1e-12 * (1.0 + m.abs()));
        }
    }

    #[test]
    fn memorises_single_state() {
        let w = World::default_for(TaskId::ReachLift);
        let s0 = env::reset(&w, 0, Randomization::None);
        let s1 = env::step(&s0, Action([0.3, -0.2, 0.5, 0.8]), &w).state;
        let ds = DemoDataset {
            task: TaskId::ReachLift,
            trajectories: vec![Trajectory {
                seed: 0,
                states: vec![s0, s1],
                actions: vec![Action([0.3, -0.2, 0.5, 0.8])],
                rewards: vec![0.0],
                success: true,
            }],
        };
        let cfg = BcConfig {
            epochs: 400,
            lr: 1e-2,
            batch_size: 1,
            hidden: vec![16],
            seed: 1,
        };
        let (_, report) = train_bc(&ds, &cfg).unwrap();
        assert!(report.final_loss() < 1e-4, "{}", report.final_loss());
    }

    #[test]
    fn loss_non_increasing_on_one_trajectory() {
        let w = World::default_for(TaskId::ReachLift);
        let ds = generate_demos(&w, 1, 5, &ExpertParams::default()).unwrap();
        let cfg = BcConfig {
            epochs: 60,
            lr: 1e-4,
            batch_size: usize::MAX,
            hidden: vec![32, 32],
            seed: 2,
        };
        let (_, report) = train_bc(&ds, &cfg).unwrap();
        let mut prev = report.initial_loss;
        for &l in &report.epoch_losses {
            assert!(l <= prev, "{l} > {prev}");
            prev = l;
        }
    }

    #[test]
    fn reach_lift_training_reduces_loss_tenfold() {
        let w = World::default_for(TaskId::ReachLift);
        let ds = generate_demos(&w, 10, 7, &ExpertParams::default()).unwrap();
        let (_, report) = train_bc(&ds, &BcConfig::default()).unwrap();
        assert!(
            report.final_loss() * 10.0 <= report.initial_loss,
            "{} vs {}",
            report.final_loss(),
            report.initial_loss
        );
    }

    #[test]
    fn training_is_deterministic_and_checkpoint_round_trips() {
        let w = World::default_for(TaskId::ReachLift);
        let ds = generate_demos(&w, 2, 1, &ExpertParams::default()).unwrap();
        let cfg = BcConfig {
            epochs: 5,
            ..BcConfig::default()
        };
        let (a, _) = train_bc(&ds, &cfg).unwrap();
        let (b, _) = train_bc(&ds, &cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(BcPolicy::from_bytes(&a.to_bytes()).unwrap(), a);
    }

    #[test]
    fn actions_stay_in_box() {
        let p = tiny_policy(9);
        for (s, _) in random_batch(50, 77) {
            let mut s = s;
            s.gripper = [50.0, -80.0, 30.0];
            assert!(bc_act(&p, &s).in_box());
        }
    }
}
