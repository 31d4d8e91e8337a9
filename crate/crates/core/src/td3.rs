//! TD3 with a critic ensemble, a demo-seeded replay buffer, clipped
//! target-policy smoothing and delayed actor updates.

use std::io::{Read, Write};
use std::sync::mpsc::{channel, Receiver, Sender};

use ndarray::{s, Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::env::{Action, State, ACTION_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::expert::DemoDataset;
use crate::rng;
use crate::tensor::{ema_update, Activation, Adam, Gradients, Mlp};

const TD3_MAGIC: &[u8; 8] = b"PLRLTD3\x01";
pub const CRITIC_INPUT: usize = OBS_DIM + ACTION_DIM;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorLoss {
    /// `−Q₁(s, π(s))`.
    #[default]
    Critic1,
    /// `−min over a freshly sampled pair`.
    PairMin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Td3Config {
    /// Ensemble size E.
    pub critics: usize,
    /// Critic minibatch steps G per update round.
    pub critic_updates: usize,
    /// An update round runs every U interaction steps.
    pub update_every: usize,
    pub explore_std: f64,
    pub target_noise_std: f64,
    pub noise_clip: f64,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub policy_delay: usize,
    pub capacity: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub hidden: Vec<usize>,
    pub actor_loss: ActorLoss,
    /// Probability that a minibatch row is drawn from the demo region.
    /// Zero means plain uniform sampling over the whole buffer.
    pub demo_fraction: f64,
}

impl Default for Td3Config {
    fn default() -> Self {
        Td3Config {
            critics: 2,
            critic_updates: 1,
            update_every: 2,
            explore_std: 0.1,
            target_noise_std: 0.2,
            noise_clip: 0.5,
            gamma: 0.99,
            tau: 0.01,
            batch_size: 256,
            policy_delay: 2,
            capacity: 100_000,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            hidden: vec![64, 64],
            actor_loss: ActorLoss::Critic1,
            demo_fraction: 0.0,
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.critics < 2 {
            return bad("at least two critics are required");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.noise_clip > 0.0) || !(self.explore_std >= 0.0) || !(self.target_noise_std >= 0.0) {
            return bad("noise clip must be positive and noise stds non-negative");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.update_every == 0 || self.policy_delay == 0 || self.capacity == 0 {
            return bad("batch size, update frequency, policy delay and capacity must be positive");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.demo_fraction) {
            return bad("demo_fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

/// `(s, a, r, s', done)`; `done` marks a true termination only, so horizon
/// cut-offs still bootstrap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub state: State,
    pub action: Action,
    pub reward: f64,
    pub next: State,
    pub done: bool,
}

/// Ring buffer with a protected prefix of demonstration transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    demos: Vec<Transition>,
    ring: Vec<Transition>,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            demos: Vec::new(),
            ring: Vec::new(),
            head: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.demos.len() + self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn demo_len(&self) -> usize {
        self.demos.len()
    }

    pub fn demos(&self) -> &[Transition] {
        &self.demos
    }

    /// Online transitions, oldest first.
    pub fn online(&self) -> impl Iterator<Item = &Transition> {
        let (a, b) = self.ring.split_at(self.head.min(self.ring.len()));
        b.iter().chain(a)
    }

    pub fn get(&self, i: usize) -> &Transition {
        if i < self.demos.len() {
            &self.demos[i]
        } else {
            &self.ring[i - self.demos.len()]
        }
    }

    /// Adds demonstrations to the protected region. Must precede online pushes.
    pub fn seed(&mut self, demos: &DemoDataset) -> Result<()> {
        let requested = self.demos.len() + demos.transition_count();
        if requested >= self.capacity {
            return Err(Error::BufferCapacity {
                capacity: self.capacity,
                requested,
            });
        }
        if !self.ring.is_empty() {
            return Err(Error::Config("demonstrations must be added before online data".into()));
        }
        self.demos.extend(demos.transitions().map(|t| Transition {
            state: t.state,
            action: t.action,
            reward: t.reward,
            next: t.next,
            done: t.terminal,
        }));
        Ok(())
    }

    pub fn push(&mut self, t: Transition) {
        let room = self.capacity - self.demos.len();
        if self.ring.len() < room {
            self.ring.push(t);
        } else {
            self.ring[self.head] = t;
        }
        self.head = (self.head + 1) % room;
    }

    /// Row indices for one minibatch, drawn with replacement.
    pub fn sample_indices(&self, n: usize, demo_fraction: f64, rng: &mut rng::Rng) -> Vec<usize> {
        let len = self.len();
        let d = self.demos.len();
        (0..n)
            .map(|_| {
                if demo_fraction > 0.0 && d > 0 && d < len {
                    if rng.random::<f64>() < demo_fraction {
                        rng.random_range(0..d)
                    } else {
                        rng.random_range(d..len)
                    }
                } else {
                    rng.random_range(0..len)
                }
            })
            .collect()
    }
}

/// Column-stacked minibatch tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    pub next_obs: Array2<f64>,
    pub dones: Vec<bool>,
}

impl Batch {
    pub fn from_transitions<'a>(ts: impl IntoIterator<Item = &'a Transition>) -> Batch {
        let ts: Vec<&Transition> = ts.into_iter().collect();
        let n = ts.len();
        let mut obs = Array2::zeros((n, OBS_DIM));
        let mut next_obs = Array2::zeros((n, OBS_DIM));
        let mut actions = Array2::zeros((n, ACTION_DIM));
        for (i, t) in ts.iter().enumerate() {
            obs.row_mut(i).assign(&ndarray::ArrayView1::from(&t.state.observation()));
            next_obs.row_mut(i).assign(&ndarray::ArrayView1::from(&t.next.observation()));
            actions.row_mut(i).assign(&ndarray::ArrayView1::from(&t.action.0));
        }
        Batch {
            obs,
            actions,
            rewards: ts.iter().map(|t| t.reward).collect(),
            next_obs,
            dones: ts.iter().map(|t| t.done).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

pub fn concat_sa(obs: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64> {
    ndarray::concatenate(ndarray::Axis(1), &[obs, actions]).expect("row counts agree")
}

pub fn new_actor(hidden: &[usize], rng: &mut rng::Rng) -> Mlp {
    let mut sizes = vec![OBS_DIM];
    sizes.extend_from_slice(hidden);
    sizes.push(ACTION_DIM);
    Mlp::new(&sizes, Activation::Relu, Activation::Tanh, rng)
}

pub fn new_critic(hidden: &[usize], rng: &mut rng::Rng) -> Mlp {
    let mut sizes = vec![CRITIC_INPUT];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    Mlp::new(&sizes, Activation::Relu, Activation::Identity, rng)
}

/// Two distinct indices drawn uniformly from `0..e`.
pub fn sample_pair(e: usize, rng: &mut rng::Rng) -> [usize; 2] {
    let i = rng.random_range(0..e);
    let mut j = rng.random_range(0..e - 1);
    if j >= i {
        j += 1;
    }
    [i, j]
}

/// `clip(π(s) + N(0, σ²), −1, 1)`, per dimension.
pub fn explore_action(actor: &Mlp, obs: &[f64], std: f64, rng: &mut rng::Rng) -> Action {
    let mut a = actor.forward(obs).expect("actor built for observation size");
    if std > 0.0 {
        for v in &mut a {
            let z: f64 = StandardNormal.sample(rng);
            *v += std * z;
        }
    }
    Action::from_slice(&a).clipped()
}

/// `y = r + (1 − done)·γ·min_{i∈K} Q'_i(s', clip(π'(s') + clip(ε', −c, c), −1, 1))`
/// with the smoothing noise `ε'` given explicitly, one row per sample.
#[allow(clippy::too_many_arguments)]
pub fn td_target(
    rewards: &[f64],
    dones: &[bool],
    next_obs: ArrayView2<f64>,
    actor_target: &Mlp,
    critic_targets: &[Mlp],
    pair: [usize; 2],
    gamma: f64,
    noise: ArrayView2<f64>,
    noise_clip: f64,
) -> Result<Vec<f64>> {
    let n = rewards.len();
    if dones.len() != n || next_obs.nrows() != n || noise.dim() != (n, ACTION_DIM) {
        return Err(Error::ShapeMismatch("td target inputs disagree in length".into()));
    }
    if pair[0] == pair[1] || pair.iter().any(|&k| k >= critic_targets.len()) {
        return Err(Error::Config(format!("invalid critic pair {pair:?}")));
    }
    let mut a = actor_target.forward_batch(next_obs)?;
    ndarray::Zip::from(&mut a)
        .and(&noise)
        .for_each(|a, &e| *a = (*a + e.clamp(-noise_clip, noise_clip)).clamp(-1.0, 1.0));
    let sa = concat_sa(next_obs, a.view());
    let q0 = critic_targets[pair[0]].forward_batch(sa.view())?;
    let q1 = critic_targets[pair[1]].forward_batch(sa.view())?;
    Ok((0..n)
        .map(|i| {
            let bootstrap = if dones[i] { 0.0 } else { gamma * q0[[i, 0]].min(q1[[i, 0]]) };
            rewards[i] + bootstrap
        })
        .collect())
}

/// Mean squared TD error and its parameter gradient.
pub fn critic_loss_grad(critic: &Mlp, sa: ArrayView2<f64>, targets: &[f64]) -> Result<(f64, Gradients)> {
    let trace = critic.forward_trace(sa)?;
    let q = trace.output();
    let n = targets.len() as f64;
    let mut loss = 0.0;
    let mut g = Array2::zeros((targets.len(), 1));
    for (i, &y) in targets.iter().enumerate() {
        let d = q[[i, 0]] - y;
        loss += d * d;
        g[[i, 0]] = 2.0 * d / n;
    }
    let (grads, _) = critic.backward_batch(&trace, g.view())?;
    Ok((loss / n, grads))
}

/// `L(θ) = −mean Q(s, π_θ(s))` and its gradient through the critic.
pub fn actor_loss_grad(actor: &Mlp, critic: &Mlp, obs: ArrayView2<f64>) -> Result<(f64, Gradients)> {
    actor_loss_grad_multi(actor, &[critic], obs)
}

/// Same as [`actor_loss_grad`] but scores each row by the smallest of
/// several critics; the gradient flows through the minimising critic.
pub fn actor_loss_grad_multi(actor: &Mlp, critics: &[&Mlp], obs: ArrayView2<f64>) -> Result<(f64, Gradients)> {
    let n = obs.nrows();
    let a_trace = actor.forward_trace(obs)?;
    let sa = concat_sa(obs, a_trace.output().view());
    let mut best: Vec<(f64, usize)> = vec![(f64::INFINITY, 0); n];
    let mut traces = Vec::with_capacity(critics.len());
    for (k, c) in critics.iter().enumerate() {
        let t = c.forward_trace(sa.view())?;
        for (i, b) in best.iter_mut().enumerate() {
            let q = t.output()[[i, 0]];
            if q < b.0 {
                *b = (q, k);
            }
        }
        traces.push(t);
    }
    let loss = -best.iter().map(|b| b.0).sum::<f64>() / n as f64;
    let mut d_action = Array2::zeros((n, ACTION_DIM));
    for (k, (c, t)) in critics.iter().zip(&traces).enumerate() {
        let mut g = Array2::zeros((n, 1));
        let mut any = false;
        for (i, b) in best.iter().enumerate() {
            if b.1 == k {
                g[[i, 0]] = -1.0 / n as f64;
                any = true;
            }
        }
        if any {
            let (_, d_input) = c.backward_batch(t, g.view())?;
            d_action += &d_input.slice(s![.., OBS_DIM..]);
        }
    }
    let (grads, _) = actor.backward_batch(&a_trace, d_action.view())?;
    Ok((loss, grads))
}

/// Emitted after every critic minibatch step.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateDiagnostics {
    pub critic_step: u64,
    pub pair: [usize; 2],
    pub critic_loss: f64,
    pub mean_target: f64,
    pub actor_loss: Option<f64>,
}

/// Actor, critic ensemble, their EMA targets and optimiser state.
#[derive(Debug)]
pub struct Td3 {
    pub cfg: Td3Config,
    pub actor: Mlp,
    pub actor_target: Mlp,
    pub critics: Vec<Mlp>,
    pub critic_targets: Vec<Mlp>,
    actor_opt: Adam,
    critic_opts: Vec<Adam>,
    critic_steps: u64,
    rng: rng::Rng,
    diagnostics: Option<Sender<UpdateDiagnostics>>,
}

impl Clone for Td3 {
    fn clone(&self) -> Self {
        Td3 {
            cfg: self.cfg.clone(),
            actor: self.actor.clone(),
            actor_target: self.actor_target.clone(),
            critics: self.critics.clone(),
            critic_targets: self.critic_targets.clone(),
            actor_opt: self.actor_opt.clone(),
            critic_opts: self.critic_opts.clone(),
            critic_steps: self.critic_steps,
            rng: self.rng.clone(),
            diagnostics: None,
        }
    }
}

impl PartialEq for Td3 {
    fn eq(&self, o: &Self) -> bool {
        self.cfg == o.cfg
            && self.actor == o.actor
            && self.actor_target == o.actor_target
            && self.critics == o.critics
            && self.critic_targets == o.critic_targets
            && self.actor_opt == o.actor_opt
            && self.critic_opts == o.critic_opts
            && self.critic_steps == o.critic_steps
            && self.rng == o.rng
    }
}

impl Td3 {
    /// Networks from `init_seed`; minibatch, pair and smoothing draws from `update_seed`.
    pub fn new(cfg: Td3Config, init_seed: u64, update_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = rng::seeded(init_seed);
        let actor = new_actor(&cfg.hidden, &mut init);
        let critics: Vec<Mlp> = (0..cfg.critics).map(|_| new_critic(&cfg.hidden, &mut init)).collect();
        Ok(Td3 {
            actor_target: actor.clone(),
            critic_targets: critics.clone(),
            actor_opt: Adam::new(&actor),
            critic_opts: critics.iter().map(Adam::new).collect(),
            actor,
            critics,
            critic_steps: 0,
            rng: rng::seeded(update_seed),
            cfg,
            diagnostics: None,
        })
    }

    pub fn critic_steps(&self) -> u64 {
        self.critic_steps
    }

    /// Diagnostics stream; can be drained from any thread.
    pub fn subscribe(&mut self) -> Receiver<UpdateDiagnostics> {
        let (tx, rx) = channel();
        self.diagnostics = Some(tx);
        rx
    }

    /// One update round: G critic steps, a delayed actor step, target sync.
    pub fn update(&mut self, buffer: &ReplayBuffer) -> Result<Vec<UpdateDiagnostics>> {
        if buffer.len() < self.cfg.batch_size {
            return Ok(Vec::new());
        }
        let mut out = Vec::with_capacity(self.cfg.critic_updates);
        for _ in 0..self.cfg.critic_updates {
            let ix = buffer.sample_indices(self.cfg.batch_size, self.cfg.demo_fraction, &mut self.rng);
            let batch = Batch::from_transitions(ix.iter().map(|&i| buffer.get(i)));
            let d = self.update_on_batch(&batch)?;
            if let Some(tx) = &self.diagnostics {
                let _ = tx.send(d.clone());
            }
            out.push(d);
        }
        Ok(out)
    }

    /// Critic step on a given batch, plus the actor step and target sync
    /// when the policy delay is due.
    pub fn update_on_batch(&mut self, batch: &Batch) -> Result<UpdateDiagnostics> {
        let n = batch.len();
        let pair = sample_pair(self.cfg.critics, &mut self.rng);
        let noise = Array2::from_shape_fn((n, ACTION_DIM), |_| {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            self.cfg.target_noise_std * z
        });
        let y = td_target(
            &batch.rewards,
            &batch.dones,
            batch.next_obs.view(),
            &self.actor_target,
            &self.critic_targets,
            pair,
            self.cfg.gamma,
            noise.view(),
            self.cfg.noise_clip,
        )?;
        let sa = concat_sa(batch.obs.view(), batch.actions.view());
        let mut critic_loss = 0.0;
        for (c, opt) in self.critics.iter_mut().zip(&mut self.critic_opts) {
            let (loss, grads) = critic_loss_grad(c, sa.view(), &y)?;
            opt.step(c, &grads, self.cfg.critic_lr)?;
            critic_loss += loss;
        }
        critic_loss /= self.critics.len() as f64;
        self.critic_steps += 1;

        let mut actor_loss = None;
        if self.critic_steps % self.cfg.policy_delay as u64 == 0 {
            let (loss, grads) = match self.cfg.actor_loss {
                ActorLoss::Critic1 => actor_loss_grad(&self.actor, &self.critics[0], batch.obs.view())?,
                ActorLoss::PairMin => {
                    let p = sample_pair(self.cfg.critics, &mut self.rng);
                    let cs = [&self.critics[p[0]], &self.critics[p[1]]];
                    actor_loss_grad_multi(&self.actor, &cs, batch.obs.view())?
                }
            };
            self.actor_opt.step(&mut self.actor, &grads, self.cfg.actor_lr)?;
            actor_loss = Some(loss);
            self.sync_targets()?;
        }
        Ok(UpdateDiagnostics {
            critic_step: self.critic_steps,
            pair,
            critic_loss,
            mean_target: y.iter().sum::<f64>() / n.max(1) as f64,
            actor_loss,
        })
    }

    pub fn sync_targets(&mut self) -> Result<()> {
        ema_update(&mut self.actor_target, &self.actor, self.cfg.tau)?;
        for (t, c) in self.critic_targets.iter_mut().zip(&self.critics) {
            ema_update(t, c, self.cfg.tau)?;
        }
        Ok(())
    }

    /// `min_{i∈pair} Q_i(s, a)` using the online critics.
    pub fn pair_q(&self, obs: &[f64], action: &Action, pair: [usize; 2]) -> f64 {
        let mut sa = obs.to_vec();
        sa.extend_from_slice(&action.0);
        pair.iter()
            .map(|&k| self.critics[k].forward(&sa).expect("critic input size")[0])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(TD3_MAGIC)?;
        let cfg = toml::to_string(&self.cfg).map_err(|e| Error::Config(e.to_string()))?;
        codec::write_bytes(w, cfg.as_bytes())?;
        self.actor.write_to(w)?;
        self.actor_target.write_to(w)?;
        self.actor_opt.write_to(w)?;
        codec::write_u32(w, self.critics.len() as u32)?;
        for ((c, t), o) in self.critics.iter().zip(&self.critic_targets).zip(&self.critic_opts) {
            c.write_to(w)?;
            t.write_to(w)?;
            o.write_to(w)?;
        }
        codec::write_u64(w, self.critic_steps)?;
        write_rng(w, &self.rng)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        codec::expect_magic(r, TD3_MAGIC, "td3 checkpoint")?;
        let text = String::from_utf8(codec::read_bytes(r, 1 << 20)?)
            .map_err(|_| Error::format("td3 checkpoint", "config is not utf-8"))?;
        let cfg: Td3Config = toml::from_str(&text).map_err(|e| Error::format("td3 checkpoint", e.to_string()))?;
        let actor = Mlp::read_from(r)?;
        let actor_target = Mlp::read_from(r)?;
        let actor_opt = Adam::read_from(r, &actor)?;
        let e = codec::read_u32(r)? as usize;
        if e != cfg.critics {
            return Err(Error::format("td3 checkpoint", "critic count disagrees with config"));
        }
        let mut critics = Vec::with_capacity(e);
        let mut critic_targets = Vec::with_capacity(e);
        let mut critic_opts = Vec::with_capacity(e);
        for _ in 0..e {
            let c = Mlp::read_from(r)?;
            critic_targets.push(Mlp::read_from(r)?);
            critic_opts.push(Adam::read_from(r, &c)?);
            critics.push(c);
        }
        let critic_steps = codec::read_u64(r)?;
        let rng = read_rng(r)?;
        if actor.input_dim() != OBS_DIM
            || actor.output_dim() != ACTION_DIM
            || !actor.same_shape(&actor_target)
            || critics
                .iter()
                .zip(&critic_targets)
                .any(|(c, t)| c.input_dim() != CRITIC_INPUT || c.output_dim() != 1 || !c.same_shape(t))
        {
            return Err(Error::format("td3 checkpoint", "unexpected network shapes"));
        }
        Ok(Td3 {
            cfg,
            actor,
            actor_target,
            critics,
            critic_targets,
            actor_opt,
            critic_opts,
            critic_steps,
            rng,
            diagnostics: None,
        })
    }
}

pub(crate) fn write_rng(w: &mut impl Write, r: &rng::Rng) -> Result<()> {
    codec::write_bytes(w, &r.get_seed())?;
    codec::write_u64(w, r.get_stream())?;
    let pos = r.get_word_pos();
    codec::write_u64(w, pos as u64)?;
    codec::write_u64(w, (pos >> 64) as u64)
}

pub(crate) fn read_rng(r: &mut impl Read) -> Result<rng::Rng> {
    use rand::SeedableRng;
    let seed: [u8; 32] = codec::read_bytes(r, 32)?
        .try_into()
        .map_err(|_| Error::format("rng state", "seed must be 32 bytes"))?;
    let stream = codec::read_u64(r)?;
    let lo = codec::read_u64(r)? as u128;
    let hi = codec::read_u64(r)? as u128;
    let mut g = rng::Rng::from_seed(seed);
    g.set_stream(stream);
    g.set_word_pos(lo | (hi << 64));
    Ok(g)
}
