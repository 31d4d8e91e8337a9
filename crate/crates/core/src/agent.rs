//! The gated agent: each step the mode head picks between planner-driven
//! navigation and interaction, where a behaviour-cloned proposal and the TD3
//! actor compete on critic value. Baseline variants switch parts off.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::env::{self, Action, Randomization, State, TaskId, World};
use crate::error::{Error, Result};
use crate::expert::{expert_action, random_action, DemoDataset, ExpertParams};
use crate::geom::{self, Vec3};
use crate::heads::{self, LabelConfig, LabelParams, Mode, ModeNet, NavNet};
use crate::imitation::{bc_act, BcPolicy};
use crate::planner::{self, Path, PlannerConfig};
use crate::rng;
use crate::td3::{explore_action, read_rng, sample_pair, write_rng, ReplayBuffer, Td3, Td3Config, Transition};

const AGENT_MAGIC: &[u8; 8] = b"PLRLAGT\x01";

const STREAM_INIT: u64 = 1;
const STREAM_UPDATE: u64 = 2;
const STREAM_EXPLORE: u64 = 3;
const STREAM_PAIR: u64 = 4;
const STREAM_EPISODE: u64 = 5;
const STREAM_PLAN: u64 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgentVariant {
    #[serde(rename = "PLANRL")]
    Planrl,
    #[serde(rename = "IBRL")]
    Ibrl,
    #[serde(rename = "RL_MN")]
    RlMn,
    #[serde(rename = "RL")]
    Rl,
}

impl AgentVariant {
    pub const ALL: [AgentVariant; 4] = [AgentVariant::Planrl, AgentVariant::Ibrl, AgentVariant::RlMn, AgentVariant::Rl];

    pub fn name(self) -> &'static str {
        match self {
            AgentVariant::Planrl => "PLANRL",
            AgentVariant::Ibrl => "IBRL",
            AgentVariant::RlMn => "RL_MN",
            AgentVariant::Rl => "RL",
        }
    }

    pub fn uses_bc(self) -> bool {
        matches!(self, AgentVariant::Planrl | AgentVariant::Ibrl)
    }

    pub fn uses_heads(self) -> bool {
        matches!(self, AgentVariant::Planrl | AgentVariant::RlMn)
    }

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Result<Self> {
        Self::ALL
            .get(t as usize)
            .copied()
            .ok_or_else(|| Error::format("agent checkpoint", format!("unknown variant tag {t}")))
    }
}

impl fmt::Display for AgentVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AgentVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "PLANRL" => Ok(AgentVariant::Planrl),
            "IBRL" => Ok(AgentVariant::Ibrl),
            "RL_MN" => Ok(AgentVariant::RlMn),
            "RL" => Ok(AgentVariant::Rl),
            _ => Err(Error::Config(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "NAV")]
    Nav,
    #[serde(rename = "IL")]
    Il,
    #[serde(rename = "RL")]
    Rl,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Nav => "NAV",
            Source::Il => "IL",
            Source::Rl => "RL",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NAV" => Ok(Source::Nav),
            "IL" => Ok(Source::Il),
            "RL" => Ok(Source::Rl),
            _ => Err(Error::format("source", s.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionDecision {
    pub mode: Mode,
    pub waypoint: Option<Vec3>,
    pub action: Action,
    pub source: Source,
    pub q_il: Option<f64>,
    pub q_rl: Option<f64>,
    pub pair: Option<[usize; 2]>,
    pub planner_failed: bool,
}

/// Picks IL only when its score is strictly higher.
pub fn arbitrate(q_il: Option<f64>, q_rl: f64) -> Source {
    match q_il {
        Some(q) if q > q_rl => Source::Il,
        _ => Source::Rl,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub variant: AgentVariant,
    /// Step budget N.
    pub steps: u64,
    /// Metrics interval in environment steps.
    pub interval: u64,
    /// Count only interaction-mode steps against the budget.
    pub count_interaction_only: bool,
    /// Also store navigation transitions in the replay buffer.
    pub store_nav_transitions: bool,
    pub randomization: Randomization,
    /// Leaving interaction needs distance above this multiple of `d_thresh`.
    pub hysteresis: f64,
    /// Replan once the gripper strays this many step lengths from the path.
    pub corridor_steps: f64,
    pub labels: LabelConfig,
    pub td3: Td3Config,
    pub planner: PlannerConfig,
    /// Accepted for compatibility and ignored.
    pub complexity_fn: Option<String>,
    /// Override the mode head (used to check variant reductions).
    pub force_mode: Option<Mode>,
    /// Drop the behaviour-cloned proposal even if a policy is loaded.
    pub disable_bc: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            variant: AgentVariant::Planrl,
            steps: 30_000,
            interval: 1000,
            count_interaction_only: false,
            store_nav_transitions: false,
            randomization: Randomization::ObjectPos,
            hysteresis: 1.5,
            corridor_steps: 2.0,
            labels: LabelConfig::default(),
            td3: Td3Config::default(),
            planner: PlannerConfig::default(),
            complexity_fn: None,
            force_mode: None,
            disable_bc: false,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        self.td3.validate()?;
        self.planner.validate()?;
        if self.interval == 0 {
            return Err(Error::Config("interval must be positive".into()));
        }
        if !(self.hysteresis >= 1.0) || !(self.corridor_steps > 0.0) {
            return Err(Error::Config("hysteresis must be >= 1 and corridor positive".into()));
        }
        Ok(())
    }
}

/// Frozen supervised models.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Models {
    pub bc: Option<BcPolicy>,
    pub mode: Option<ModeNet>,
    pub nav: Option<NavNet>,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct NavState {
    path: Option<Path>,
    planned_for: Option<Vec3>,
    prev_mode: Option<Mode>,
    phase_held: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub cfg: AgentConfig,
    pub world: World,
    pub models: Models,
    pub td3: Td3,
    labels: LabelParams,
    explore_rng: rng::Rng,
    pair_rng: rng::Rng,
    plan_seed: u64,
    plans: u64,
    nav: NavState,
    /// Positive factor applied to critic scores during arbitration only.
    pub q_scale: f64,
}

impl Agent {
    pub fn new(cfg: AgentConfig, world: World, models: Models, seed: u64) -> Result<Self> {
        cfg.validate()?;
        world.validate()?;
        let v = cfg.variant;
        if v.uses_bc() && !cfg.disable_bc && models.bc.is_none() {
            return Err(Error::Config(format!("{v} needs a behaviour-cloned policy")));
        }
        let needs_mode = v.uses_heads() && cfg.force_mode.is_none();
        let needs_nav = match cfg.force_mode {
            Some(Mode::Navigate) => true,
            Some(Mode::Interact) => false,
            None => v.uses_heads(),
        };
        if (needs_mode && models.mode.is_none()) || (needs_nav && models.nav.is_none()) {
            return Err(Error::Config(format!("{v} needs trained mode and waypoint heads")));
        }
        if let Some(g) = &cfg.complexity_fn {
            log::warn!("complexity function `{g}` is accepted but has no effect");
        }
        let labels = LabelParams::for_world(&world, &cfg.labels)?;
        let td3 = Td3::new(
            cfg.td3.clone(),
            rng::derive_seed(seed, STREAM_INIT),
            rng::derive_seed(seed, STREAM_UPDATE),
        )?;
        Ok(Agent {
            cfg,
            world,
            models,
            td3,
            labels,
            explore_rng: rng::stream(seed, STREAM_EXPLORE),
            pair_rng: rng::stream(seed, STREAM_PAIR),
            plan_seed: rng::derive_seed(seed, STREAM_PLAN),
            plans: 0,
            nav: NavState::default(),
            q_scale: 1.0,
        })
    }

    pub fn variant(&self) -> AgentVariant {
        self.cfg.variant
    }

    pub fn label_params(&self) -> LabelParams {
        self.labels
    }

    /// Clears per-episode navigation memory.
    pub fn reset_episode(&mut self) {
        self.nav = NavState::default();
    }

    /// A copy for greedy evaluation with its own arbitration stream.
    pub fn for_evaluation(&self, seed: u64) -> Agent {
        let mut a = self.clone();
        a.explore_rng = rng::stream(seed, STREAM_EXPLORE);
        a.pair_rng = rng::stream(seed, STREAM_PAIR);
        a.plan_seed = rng::derive_seed(seed, STREAM_PLAN);
        a.plans = 0;
        a.reset_episode();
        a
    }

    fn uses_il(&self) -> bool {
        self.cfg.variant.uses_bc() && !self.cfg.disable_bc && self.models.bc.is_some()
    }

    fn decide_mode(&mut self, s: &State) -> Mode {
        if let Some(m) = self.cfg.force_mode {
            return m;
        }
        if !self.cfg.variant.uses_heads() {
            return Mode::Interact;
        }
        let model = self.models.mode.as_ref().expect("checked at construction");
        let mut mode = heads::predict_mode(model, s);
        if self.nav.phase_held != s.held {
            self.nav.phase_held = s.held;
            self.nav.prev_mode = None;
        }
        if mode == Mode::Navigate && self.nav.prev_mode == Some(Mode::Interact) {
            let d = geom::dist(s.gripper, heads::relevant_target(s));
            if d <= self.cfg.hysteresis * self.labels.d_thresh {
                mode = Mode::Interact;
            }
        }
        self.nav.prev_mode = Some(mode);
        mode
    }

    /// Per-step action selection.
    pub fn act(&mut self, s: &State, train: bool) -> ActionDecision {
        let mode = self.decide_mode(s);
        match mode {
            Mode::Navigate => self.navigate(s),
            Mode::Interact => self.interact(s, train),
        }
    }

    fn navigate(&mut self, s: &State) -> ActionDecision {
        let nav = self.models.nav.as_ref().expect("checked at construction");
        let wp = heads::predict_waypoint(nav, s);
        let tol = self.cfg.planner.waypoint_tolerance;
        let corridor = self.cfg.corridor_steps * self.world.max_step();
        let stale = match (&self.nav.path, self.nav.planned_for) {
            (Some(path), Some(old)) => geom::dist(old, wp) > tol || off_corridor(s.gripper, path, corridor),
            _ => true,
        };
        let mut failed = false;
        if stale {
            let pcfg = PlannerConfig {
                seed: rng::derive_seed(self.plan_seed, self.plans),
                ..self.cfg.planner.clone()
            };
            self.plans += 1;
            match planner::plan(s.gripper, wp, &self.world, &pcfg) {
                Ok(p) => {
                    self.nav.path = Some(p);
                    self.nav.planned_for = Some(wp);
                }
                Err(_) => {
                    self.nav.path = None;
                    self.nav.planned_for = None;
                    failed = true;
                }
            }
        }
        let action = match &self.nav.path {
            Some(p) => planner::nav_action(s, p, &self.world),
            None => planner::direct_action(s.gripper, wp, self.world.max_step(), if s.held { -1.0 } else { 1.0 }),
        };
        ActionDecision {
            mode: Mode::Navigate,
            waypoint: Some(wp),
            action,
            source: Source::Nav,
            q_il: None,
            q_rl: None,
            pair: None,
            planner_failed: failed,
        }
    }

    fn interact(&mut self, s: &State, train: bool) -> ActionDecision {
        self.nav.path = None;
        self.nav.planned_for = None;
        let obs = s.observation();
        let std = if train { self.td3.cfg.explore_std } else { 0.0 };
        let a_rl = explore_action(&self.td3.actor, &obs, std, &mut self.explore_rng);
        let a_il = if self.uses_il() {
            Some(bc_act(self.models.bc.as_ref().expect("checked"), s))
        } else {
            None
        };
        let pair = sample_pair(self.td3.cfg.critics, &mut self.pair_rng);
        let q_rl = self.q_scale * self.td3.pair_q(&obs, &a_rl, pair);
        let q_il = a_il.map(|a| self.q_scale * self.td3.pair_q(&obs, &a, pair));
        let source = arbitrate(q_il, q_rl);
        let action = match source {
            Source::Il => a_il.expect("IL chosen only when proposed"),
            _ => a_rl,
        };
        ActionDecision {
            mode: Mode::Interact,
            waypoint: None,
            action,
            source,
            q_il,
            q_rl: Some(q_rl),
            pair: Some(pair),
            planner_failed: false,
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(AGENT_MAGIC)?;
        codec::write_u8(w, self.cfg.variant.tag())?;
        let cfg = toml::to_string(&self.cfg).map_err(|e| Error::Config(e.to_string()))?;
        codec::write_bytes(w, cfg.as_bytes())?;
        codec::write_bytes(w, self.world.to_toml_string().as_bytes())?;
        codec::write_u8(w, self.models.bc.is_some() as u8)?;
        if let Some(m) = &self.models.bc {
            m.write_to(w)?;
        }
        codec::write_u8(w, self.models.mode.is_some() as u8)?;
        if let Some(m) = &self.models.mode {
            m.write_to(w)?;
        }
        codec::write_u8(w, self.models.nav.is_some() as u8)?;
        if let Some(m) = &self.models.nav {
            m.write_to(w)?;
        }
        self.td3.write_to(w)?;
        write_rng(w, &self.explore_rng)?;
        write_rng(w, &self.pair_rng)?;
        codec::write_u64(w, self.plan_seed)?;
        codec::write_u64(w, self.plans)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        codec::expect_magic(r, AGENT_MAGIC, "agent checkpoint")?;
        let variant = AgentVariant::from_tag(codec::read_u8(r)?)?;
        let text = |r: &mut _| -> Result<String> {
            String::from_utf8(codec::read_bytes(r, 1 << 22)?).map_err(|_| Error::format("agent checkpoint", "not utf-8"))
        };
        let cfg: AgentConfig =
            toml::from_str(&text(r)?).map_err(|e| Error::format("agent checkpoint", e.to_string()))?;
        if cfg.variant != variant {
            return Err(Error::format("agent checkpoint", "variant tag disagrees with config"));
        }
        let world = World::from_toml_str(&text(r)?)?;
        let flag = |r: &mut _| -> Result<bool> { Ok(codec::read_u8(r)? != 0) };
        let bc = if flag(r)? { Some(BcPolicy::read_from(r)?) } else { None };
        let mode = if flag(r)? { Some(ModeNet::read_from(r)?) } else { None };
        let nav = if flag(r)? { Some(NavNet::read_from(r)?) } else { None };
        let td3 = Td3::read_from(r)?;
        let explore_rng = read_rng(r)?;
        let pair_rng = read_rng(r)?;
        let plan_seed = codec::read_u64(r)?;
        let plans = codec::read_u64(r)?;
        let labels = LabelParams::for_world(&world, &cfg.labels)?;
        Ok(Agent {
            cfg,
            world,
            models: Models { bc, mode, nav },
            td3,
            labels,
            explore_rng,
            pair_rng,
            plan_seed,
            plans,
            nav: NavState::default(),
            q_scale: 1.0,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Agent::read_from(&mut bytes)
    }
}

fn off_corridor(p: Vec3, path: &Path, corridor: f64) -> bool {
    let d = match path.points.len() {
        1 => geom::dist(p, path.points[0]),
        _ => path
            .points
            .windows(2)
            .map(|w| geom::point_segment_distance(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min),
    };
    d > corridor
}

/// One row of the per-step decision log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecisionRecord {
    pub t: u64,
    pub episode: u64,
    pub mode: Mode,
    pub source: Source,
    pub q_il: Option<f64>,
    pub q_rl: Option<f64>,
    pub state: State,
    pub action: Action,
    pub reward: f64,
    pub next: State,
    /// True termination.
    pub terminal: bool,
    pub episode_end: bool,
}

/// Aggregates over one metrics interval.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IntervalMetrics {
    /// Environment steps taken at the end of the interval.
    pub step: u64,
    pub steps: u64,
    pub episodes: u64,
    pub successes: u64,
    pub il_steps: u64,
    pub rl_steps: u64,
    pub nav_steps: u64,
    pub planner_failures: u64,
    pub episode_length_sum: u64,
    pub return_sum: f64,
    pub critic_updates: u64,
}

impl IntervalMetrics {
    fn ratio(a: u64, b: u64) -> f64 {
        if b == 0 {
            0.0
        } else {
            a as f64 / b as f64
        }
    }

    /// Share of episodes ending in this interval that succeeded (0 if none ended).
    pub fn success_rate(&self) -> f64 {
        Self::ratio(self.successes, self.episodes)
    }

    pub fn il_fraction(&self) -> f64 {
        Self::ratio(self.il_steps, self.il_steps + self.rl_steps)
    }

    pub fn rl_fraction(&self) -> f64 {
        Self::ratio(self.rl_steps, self.il_steps + self.rl_steps)
    }

    pub fn nav_fraction(&self) -> f64 {
        Self::ratio(self.nav_steps, self.steps)
    }

    pub fn mean_episode_length(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.episode_length_sum as f64 / self.episodes as f64
        }
    }

    pub fn mean_return(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.return_sum / self.episodes as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub variant: AgentVariant,
    pub task: TaskId,
    pub seed: u64,
    pub intervals: Vec<IntervalMetrics>,
    pub total_steps: u64,
    pub interaction_steps: u64,
    pub episodes: u64,
    pub planner_failures: u64,
    /// Kept out of the CSV so that runs stay byte-comparable.
    pub wall_clock_secs: f64,
}

impl RunMetrics {
    pub fn final_success_rate(&self) -> f64 {
        self.intervals.last().map_or(0.0, IntervalMetrics::success_rate)
    }
}

/// Per-interval share of interaction steps that executed the IL proposal.
pub fn il_fraction_curve(m: &RunMetrics) -> Vec<f64> {
    m.intervals.iter().map(IntervalMetrics::il_fraction).collect()
}

/// Step-by-step driver of one training run.
pub struct Trainer {
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    seed: u64,
    state: State,
    episode: u64,
    episode_len: u64,
    episode_return: f64,
    t: u64,
    interaction_steps: u64,
    current: IntervalMetrics,
    intervals: Vec<IntervalMetrics>,
    episodes: u64,
    planner_failures: u64,
    log: Option<Vec<DecisionRecord>>,
}

impl Trainer {
    pub fn new(agent: Agent, demos: &DemoDataset, seed: u64) -> Result<Self> {
        if demos.task != agent.world.task {
            return Err(Error::Config(format!(
                "demonstrations are for {} but the world is {}",
                demos.task, agent.world.task
            )));
        }
        let mut buffer = ReplayBuffer::new(agent.td3.cfg.capacity);
        buffer.seed(demos)?;
        let state = env::reset(&agent.world, episode_seed(seed, 0), agent.cfg.randomization);
        Ok(Trainer {
            agent,
            buffer,
            seed,
            state,
            episode: 0,
            episode_len: 0,
            episode_return: 0.0,
            t: 0,
            interaction_steps: 0,
            current: IntervalMetrics::default(),
            intervals: Vec::new(),
            episodes: 0,
            planner_failures: 0,
            log: None,
        })
    }

    pub fn record_decisions(&mut self) {
        self.log = Some(Vec::new());
    }

    pub fn decisions(&self) -> Option<&[DecisionRecord]> {
        self.log.as_deref()
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn interaction_steps(&self) -> u64 {
        self.interaction_steps
    }

    pub fn intervals(&self) -> &[IntervalMetrics] {
        &self.intervals
    }

    fn budget_used(&self) -> u64 {
        if self.agent.cfg.count_interaction_only {
            self.interaction_steps
        } else {
            self.t
        }
    }

    pub fn finished(&self) -> bool {
        // navigation-only runs cannot spend an interaction budget; cap them
        self.budget_used() >= self.agent.cfg.steps || self.t >= self.agent.cfg.steps.saturating_mul(20)
    }

    /// One environment step, including storage and any scheduled update.
    pub fn step(&mut self) -> Result<ActionDecision> {
        let s = self.state;
        let d = self.agent.act(&s, true);
        let out = env::step(&s, d.action, &self.agent.world);
        self.t += 1;
        self.current.steps += 1;
        let interacting = d.mode == Mode::Interact;
        if interacting || self.agent.cfg.store_nav_transitions {
            self.buffer.push(Transition {
                state: s,
                action: d.action,
                reward: out.reward,
                next: out.state,
                done: out.success,
            });
        }
        match d.source {
            Source::Nav => self.current.nav_steps += 1,
            Source::Il => self.current.il_steps += 1,
            Source::Rl => self.current.rl_steps += 1,
        }
        if d.planner_failed {
            self.current.planner_failures += 1;
            self.planner_failures += 1;
        }
        if interacting {
            self.interaction_steps += 1;
            if self.t % self.agent.cfg.td3.update_every as u64 == 0 {
                let diags = self.agent.td3.update(&self.buffer)?;
                self.current.critic_updates += diags.len() as u64;
            }
        }
        self.episode_len += 1;
        self.episode_return += out.reward;
        if let Some(log) = &mut self.log {
            log.push(DecisionRecord {
                t: self.t,
                episode: self.episode,
                mode: d.mode,
                source: d.source,
                q_il: d.q_il,
                q_rl: d.q_rl,
                state: s,
                action: d.action,
                reward: out.reward,
                next: out.state,
                terminal: out.success,
                episode_end: out.done,
            });
        }
        if out.done {
            self.current.episodes += 1;
            self.current.successes += out.success as u64;
            self.current.episode_length_sum += self.episode_len;
            self.current.return_sum += self.episode_return;
            self.episodes += 1;
            self.episode += 1;
            self.episode_len = 0;
            self.episode_return = 0.0;
            self.agent.reset_episode();
            self.state = env::reset(
                &self.agent.world,
                episode_seed(self.seed, self.episode),
                self.agent.cfg.randomization,
            );
        } else {
            self.state = out.state;
        }
        if self.t % self.agent.cfg.interval == 0 {
            self.close_interval();
        }
        Ok(d)
    }

    fn close_interval(&mut self) {
        let mut m = std::mem::take(&mut self.current);
        m.step = self.t;
        self.intervals.push(m);
    }

    /// Runs the remaining budget and returns the metrics.
    pub fn run(mut self) -> Result<(Agent, RunMetrics, Option<Vec<DecisionRecord>>)> {
        let start = Instant::now();
        while !self.finished() {
            self.step()?;
        }
        if self.current.steps > 0 {
            self.close_interval();
        }
        let metrics = RunMetrics {
            variant: self.agent.cfg.variant,
            task: self.agent.world.task,
            seed: self.seed,
            intervals: self.intervals,
            total_steps: self.t,
            interaction_steps: self.interaction_steps,
            episodes: self.episodes,
            planner_failures: self.planner_failures,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        };
        Ok((self.agent, metrics, self.log))
    }
}

fn episode_seed(seed: u64, episode: u64) -> u64 {
    rng::derive_seed(rng::derive_seed(seed, STREAM_EPISODE), episode)
}

/// Builds the agent and runs the full training loop.
pub fn train(
    cfg: AgentConfig,
    world: World,
    models: Models,
    demos: &DemoDataset,
    seed: u64,
) -> Result<(Agent, RunMetrics)> {
    let agent = Agent::new(cfg, world, models, seed)?;
    let (agent, metrics, _) = Trainer::new(agent, demos, seed)?.run()?;
    Ok((agent, metrics))
}

/// Anything that maps states to actions for evaluation.
pub trait Controller {
    fn act(&mut self, s: &State) -> Action;

    fn reset(&mut self) {}
}

impl Controller for Agent {
    fn act(&mut self, s: &State) -> Action {
        Agent::act(self, s, false).action
    }

    fn reset(&mut self) {
        self.reset_episode();
    }
}

pub struct ExpertController {
    pub world: World,
    pub params: ExpertParams,
}

impl Controller for ExpertController {
    fn act(&mut self, s: &State) -> Action {
        expert_action(s, &self.world, &self.params)
    }
}

pub struct RandomController {
    pub rng: rng::Rng,
}

impl RandomController {
    pub fn new(seed: u64) -> Self {
        RandomController { rng: rng::seeded(seed) }
    }
}

impl Controller for RandomController {
    fn act(&mut self, _: &State) -> Action {
        random_action(&mut self.rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub episodes: u64,
    pub successes: u64,
    pub success_rate: f64,
    pub mean_length: f64,
}

/// Runs `episodes` episodes under the given reset protocol.
pub fn evaluate(
    controller: &mut dyn Controller,
    world: &World,
    protocol: Randomization,
    episodes: u64,
    seed: u64,
) -> EvalReport {
    let mut successes = 0;
    let mut length = 0;
    for k in 0..episodes {
        controller.reset();
        let mut s = env::reset(world, rng::derive_seed(rng::derive_seed(seed, 0xe7a1), k), protocol);
        loop {
            let out = env::step(&s, controller.act(&s), world);
            length += 1;
            s = out.state;
            if out.done {
                successes += out.success as u64;
                break;
            }
        }
    }
    EvalReport {
        episodes,
        successes,
        success_rate: if episodes == 0 { 0.0 } else { successes as f64 / episodes as f64 },
        mean_length: if episodes == 0 { 0.0 } else { length as f64 / episodes as f64 },
    }
}

/// Greedy evaluation of a trained agent on a private copy.
pub fn evaluate_agent(agent: &Agent, protocol: Randomization, episodes: u64, seed: u64) -> EvalReport {
    let mut a = agent.for_evaluation(seed);
    let world = a.world.clone();
    evaluate(&mut a, &world, protocol, episodes, seed)
}
