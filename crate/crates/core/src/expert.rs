//! Scripted experts and demonstration datasets.
//!
//! The experts are closed-loop proportional controllers that walk through
//! task phases (approach above the object, descend, grasp, carry or lift).
//! When the straight line to the current target is blocked they transit at a
//! safe height above every obstacle.

use std::io::{BufRead, Write};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{self, Action, Randomization, State, TaskId, World, ACTION_DIM, RAW_STATE_DIM};
use crate::error::{Error, Result};
use crate::geom::{self, Vec3};
use crate::rng;

const DEMO_HEADER: &str = "#planrl-demos v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertParams {
    /// Proportional gain, in units of the per-step displacement limit.
    pub gain: f64,
    /// Height above the object from which the gripper descends.
    pub approach_height: f64,
    /// Clearance kept above the tallest obstacle while transiting.
    pub safe_margin: f64,
    /// Horizontal alignment tolerance before descending.
    pub xy_tolerance: f64,
    /// Std of translation noise added on pick-and-place demonstrations.
    pub pick_place_noise: f64,
    /// Reset protocol used when collecting demonstrations.
    pub randomization: Randomization,
}

impl Default for ExpertParams {
    fn default() -> Self {
        ExpertParams {
            gain: 1.0,
            approach_height: 0.06,
            safe_margin: 0.08,
            xy_tolerance: 0.01,
            pick_place_noise: 0.15,
            randomization: Randomization::ObjectPos,
        }
    }
}

/// Deterministic expert action for `s`.
pub fn expert_action(s: &State, world: &World, params: &ExpertParams) -> Action {
    let g = &world.geometry;
    let p = s.gripper;
    let (target, grip) = match world.task {
        TaskId::ReachLift | TaskId::PickAndPlace => {
            if s.held {
                let goal = match world.task {
                    TaskId::ReachLift => geom::add(s.goal, [0.0, 0.0, 0.02]),
                    _ => s.goal,
                };
                (transit(p, goal, world, params), -1.0)
            } else {
                let above = geom::add(s.object, [0.0, 0.0, params.approach_height]);
                if xy_dist(p, s.object) > params.xy_tolerance {
                    (transit(p, above, world, params), 1.0)
                } else if geom::dist(p, s.object) <= 0.75 * g.grasp_distance {
                    (s.object, -1.0)
                } else {
                    (s.object, 1.0)
                }
            }
        }
        TaskId::PushToGoal => (push_target(s, world, params), 1.0),
    };
    let delta = geom::sub(target, p);
    let translation = geom::scale(delta, params.gain / world.max_step());
    let m = translation.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let translation = if m > 1.0 {
        geom::scale(translation, 1.0 / m)
    } else {
        translation
    };
    Action([translation[0], translation[1], translation[2], grip]).clipped()
}

fn xy_dist(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Next intermediate target on the way to `target`, rising over obstacles if needed.
fn transit(p: Vec3, target: Vec3, world: &World, params: &ExpertParams) -> Vec3 {
    let margin = 2.0 * world.collision_resolution;
    let inflated: Vec<_> = world.obstacles.iter().map(|o| o.inflate(margin)).collect();
    if !geom::segment_hits(p, target, &inflated, world.collision_resolution) {
        return target;
    }
    let safe_z = world
        .obstacles
        .iter()
        .map(|o| o.max[2])
        .fold(world.workspace.min[2], f64::max)
        + params.safe_margin;
    let safe_z = safe_z.min(world.workspace.max[2]);
    if xy_dist(p, target) > params.xy_tolerance && p[2] < safe_z - 1e-3 {
        [p[0], p[1], safe_z]
    } else {
        [target[0], target[1], safe_z.max(p[2])]
    }
}

fn push_target(s: &State, world: &World, params: &ExpertParams) -> Vec3 {
    let g = &world.geometry;
    let p = s.gripper;
    let o = s.object;
    let to_goal = [s.goal[0] - o[0], s.goal[1] - o[1]];
    let remaining = (to_goal[0].powi(2) + to_goal[1].powi(2)).sqrt();
    let dir = if remaining > 1e-9 {
        [to_goal[0] / remaining, to_goal[1] / remaining]
    } else {
        [1.0, 0.0]
    };
    let rel = [o[0] - p[0], o[1] - p[1]];
    let along = rel[0] * dir[0] + rel[1] * dir[1];
    let lateral = (rel[0] * dir[1] - rel[1] * dir[0]).abs();
    let level = (p[2] - o[2]).abs() < 0.015;
    let in_contact = level && along > 0.0 && lateral < 0.012 && along < g.contact_distance + 0.03;
    if in_contact {
        let advance = remaining.min(0.03);
        let standoff = g.contact_distance - advance;
        return [o[0] - dir[0] * standoff, o[1] - dir[1] * standoff, o[2]];
    }
    let behind = [
        o[0] - dir[0] * (g.contact_distance + 0.025),
        o[1] - dir[1] * (g.contact_distance + 0.025),
        o[2],
    ];
    if xy_dist(p, behind) > 0.015 {
        let above = geom::add(behind, [0.0, 0.0, params.approach_height + 0.02]);
        // stay above the object while lining up
        if p[2] < o[2] + params.approach_height && xy_dist(p, behind) > 0.015 {
            return [p[0], p[1], above[2]];
        }
        transit(p, above, world, params)
    } else {
        behind
    }
}

/// One recorded episode: `states.len() == actions.len() + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub states: Vec<State>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub success: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// A demonstration transition `(s, a, r, s', terminal)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DemoTransition {
    pub state: State,
    pub action: Action,
    pub reward: f64,
    pub next: State,
    /// True termination (task solved), not horizon truncation.
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoDataset {
    pub task: TaskId,
    pub trajectories: Vec<Trajectory>,
}

impl DemoDataset {
    pub fn transition_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn transitions(&self) -> impl Iterator<Item = DemoTransition> + '_ {
        self.trajectories.iter().flat_map(|tr| {
            (0..tr.len()).map(move |t| DemoTransition {
                state: tr.states[t],
                action: tr.actions[t],
                reward: tr.rewards[t],
                next: tr.states[t + 1],
                terminal: tr.rewards[t] > 0.0,
            })
        })
    }

    /// All `(state, action)` pairs.
    pub fn pairs(&self) -> impl Iterator<Item = (&State, &Action)> {
        self.trajectories
            .iter()
            .flat_map(|tr| tr.states.iter().zip(&tr.actions))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "{DEMO_HEADER}")?;
        writeln!(w, "#task {}", self.task)?;
        writeln!(w, "#state_dim {RAW_STATE_DIM}")?;
        writeln!(w, "#action_dim {ACTION_DIM}")?;
        writeln!(w, "#count {}", self.trajectories.len())?;
        let seeds: Vec<String> = self.trajectories.iter().map(|t| t.seed.to_string()).collect();
        writeln!(w, "#seeds {}", seeds.join(","))?;
        let flags: Vec<&str> = self
            .trajectories
            .iter()
            .map(|t| if t.success { "1" } else { "0" })
            .collect();
        writeln!(w, "#success {}", flags.join(","))?;
        let mut cols = vec!["traj".to_string(), "t".to_string()];
        cols.extend((0..RAW_STATE_DIM).map(|i| format!("s{i}")));
        cols.extend((0..ACTION_DIM).map(|i| format!("a{i}")));
        cols.push("reward".into());
        cols.push("done".into());
        writeln!(w, "{}", cols.join(","))?;
        for (k, tr) in self.trajectories.iter().enumerate() {
            for t in 0..tr.states.len() {
                let mut row = vec![k.to_string(), t.to_string()];
                row.extend(tr.states[t].to_raw().iter().map(|v| v.to_string()));
                if t < tr.len() {
                    row.extend(tr.actions[t].0.iter().map(|v| v.to_string()));
                    row.push(tr.rewards[t].to_string());
                    row.push(if t + 1 == tr.len() { "1" } else { "0" }.into());
                } else {
                    // terminal state row: no action follows it
                    row.extend(std::iter::repeat_n(String::new(), ACTION_DIM + 2));
                }
                writeln!(w, "{}", row.join(","))?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let bad = |m: String| Error::format("demo file", m);
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| bad("unexpected end of file".into()))?
                .map_err(Error::from)
        };
        if next()? != DEMO_HEADER {
            return Err(bad("missing or unsupported header".into()));
        }
        let meta = |line: String, key: &str| -> Result<String> {
            line.strip_prefix(&format!("#{key} "))
                .map(str::to_owned)
                .ok_or_else(|| bad(format!("expected #{key}")))
        };
        let task: TaskId = meta(next()?, "task")?.parse()?;
        let sdim: usize = meta(next()?, "state_dim")?.parse().map_err(|_| bad("state_dim".into()))?;
        let adim: usize = meta(next()?, "action_dim")?.parse().map_err(|_| bad("action_dim".into()))?;
        if sdim != RAW_STATE_DIM || adim != ACTION_DIM {
            return Err(bad(format!("unsupported dims {sdim}/{adim}")));
        }
        let count: usize = meta(next()?, "count")?.parse().map_err(|_| bad("count".into()))?;
        let seeds: Vec<u64> = split_list(&meta(next()?, "seeds")?)
            .map(|s| s.parse().map_err(|_| bad("seed list".into())))
            .collect::<Result<_>>()?;
        let flags: Vec<bool> = split_list(&meta(next()?, "success")?).map(|s| s == "1").collect();
        if seeds.len() != count || flags.len() != count {
            return Err(bad("metadata lengths disagree with count".into()));
        }
        let _columns = next()?;

        let mut trajectories: Vec<Trajectory> = (0..count)
            .map(|k| Trajectory {
                seed: seeds[k],
                states: Vec::new(),
                actions: Vec::new(),
                rewards: Vec::new(),
                success: flags[k],
            })
            .collect();
        let mut closed = vec![false; count];
        for line in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 2 + RAW_STATE_DIM + ACTION_DIM + 2 {
                return Err(bad(format!("row has {} fields", fields.len())));
            }
            let k: usize = fields[0].parse().map_err(|_| bad("traj index".into()))?;
            let t: usize = fields[1].parse().map_err(|_| bad("step index".into()))?;
            let tr = trajectories.get_mut(k).ok_or_else(|| bad(format!("traj {k} out of range")))?;
            if closed[k] || t != tr.states.len() {
                return Err(bad(format!("rows out of order at traj {k} step {t}")));
            }
            let raw = parse_floats(&fields[2..2 + RAW_STATE_DIM]).ok_or_else(|| bad("state".into()))?;
            tr.states.push(State::from_raw(&raw)?);
            let rest = &fields[2 + RAW_STATE_DIM..];
            if rest.iter().all(|f| f.is_empty()) {
                closed[k] = true;
                continue;
            }
            let a = parse_floats(&rest[..ACTION_DIM]).ok_or_else(|| bad("action".into()))?;
            tr.actions.push(Action::from_slice(&a));
            tr.rewards
                .push(rest[ACTION_DIM].parse().map_err(|_| bad("reward".into()))?);
        }
        if closed.iter().any(|c| !c) {
            return Err(bad("trajectory without terminal row".into()));
        }
        Ok(DemoDataset { task, trajectories })
    }
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').filter(|p| !p.is_empty())
}

fn parse_floats(fields: &[&str]) -> Option<Vec<f64>> {
    fields.iter().map(|f| f.parse().ok()).collect()
}

const NOISE_STREAM: u64 = 0x6e6f_6973_65;

/// Runs the expert from a reset with `seed`. Pick-and-place rollouts carry
/// seed-controlled translation noise.
pub fn rollout_expert(world: &World, seed: u64, randomization: Randomization, params: &ExpertParams) -> Trajectory {
    let mut noise_rng = rng::stream(seed, NOISE_STREAM);
    let noise = Normal::new(0.0, params.pick_place_noise.max(0.0)).expect("finite std");
    let noisy = world.task == TaskId::PickAndPlace && params.pick_place_noise > 0.0;
    let mut s = env::reset(world, seed, randomization);
    let mut tr = Trajectory {
        seed,
        states: vec![s],
        actions: Vec::new(),
        rewards: Vec::new(),
        success: false,
    };
    loop {
        let mut a = expert_action(&s, world, params);
        if noisy {
            for v in &mut a.0[..3] {
                *v += noise.sample(&mut noise_rng);
            }
            a = a.clipped();
        }
        let out = env::step(&s, a, world);
        tr.actions.push(a);
        tr.rewards.push(out.reward);
        tr.states.push(out.state);
        s = out.state;
        if out.done {
            tr.success = out.success;
            return tr;
        }
    }
}

/// Collects exactly `n` successful expert trajectories. Failed rollouts are
/// discarded; gives up after `10 n + 20` attempts.
pub fn generate_demos(world: &World, n: usize, seed: u64, params: &ExpertParams) -> Result<DemoDataset> {
    if n == 0 {
        return Err(Error::DemoGeneration("need at least one demonstration".into()));
    }
    let budget = 10 * n + 20;
    let mut trajectories = Vec::with_capacity(n);
    for attempt in 0..budget as u64 {
        let ep_seed = rng::derive_seed(seed, attempt);
        let tr = rollout_expert(world, ep_seed, params.randomization, params);
        if tr.success {
            trajectories.push(tr);
            if trajectories.len() == n {
                return Ok(DemoDataset {
                    task: world.task,
                    trajectories,
                });
            }
        }
    }
    Err(Error::DemoGeneration(format!(
        "only {} of {n} successful rollouts within {budget} attempts",
        trajectories.len()
    )))
}

/// Random-action controller, used as an untrained floor and for data mixing.
pub fn random_action(rng: &mut rng::Rng) -> Action {
    Action(std::array::from_fn(|_| rng.random_range(-1.0..=1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open_world(task: TaskId) -> World {
        let mut w = World::default_for(task);
        w.obstacles.clear();
        w
    }

    #[test]
    fn far_gripper_heads_above_object() {
        let w = open_world(TaskId::ReachLift);
        let s = env::reset(&w, 0, Randomization::None);
        let a = expert_action(&s, &w, &ExpertParams::default());
        let above = geom::add(s.object, [0.0, 0.0, 0.06]);
        assert!(geom::dot(a.translation(), geom::sub(above, s.gripper)) > 0.0);
        assert!(a.in_box());
    }

    #[test]
    fn at_goal_with_object_is_still() {
        let w = World::default_for(TaskId::PickAndPlace);
        let mut s = env::reset(&w, 0, Randomization::None);
        s.held = true;
        s.gripper = s.goal;
        s.object = s.goal;
        let a = expert_action(&s, &w, &ExpertParams::default());
        assert!(geom::norm(a.translation()) < 1e-12);
    }

    #[test]
    fn expert_solves_each_task() {
        let params = ExpertParams::default();
        for task in TaskId::ALL {
            let w = World::default_for(task);
            let wins = (0..100)
                .filter(|&k| rollout_expert(&w, k, Randomization::ObjectPos, &params).success)
                .count();
            assert!(wins >= 95, "{task}: {wins}/100");
        }
    }

    #[test]
    fn expert_handles_gripper_randomisation() {
        let params = ExpertParams::default();
        for task in TaskId::ALL {
            let w = World::default_for(task);
            let wins = (0..100)
                .filter(|&k| rollout_expert(&w, k, Randomization::ObjectAndGripper, &params).success)
                .count();
            assert!(wins >= 95, "{task}: {wins}/100");
        }
    }

    #[test]
    fn demos_are_exact_and_successful() {
        let w = World::default_for(TaskId::ReachLift);
        let d = generate_demos(&w, 10, 42, &ExpertParams::default()).unwrap();
        assert_eq!(d.trajectories.len(), 10);
        assert!(d.trajectories.iter().all(|t| t.success));
        assert_eq!(d.to_bytes(), generate_demos(&w, 10, 42, &ExpertParams::default()).unwrap().to_bytes());
    }

    #[test]
    fn pick_and_place_twenty() {
        let w = World::default_for(TaskId::PickAndPlace);
        let d = generate_demos(&w, 20, 3, &ExpertParams::default()).unwrap();
        assert_eq!(d.trajectories.len(), 20);
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let w = World::default_for(TaskId::PickAndPlace);
        let d = generate_demos(&w, 3, 9, &ExpertParams::default()).unwrap();
        let bytes = d.to_bytes();
        let back = DemoDataset::read_from(&bytes[..]).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn zero_demos_is_an_error() {
        let w = World::default_for(TaskId::ReachLift);
        assert!(generate_demos(&w, 0, 1, &ExpertParams::default()).is_err());
    }

    #[test]
    fn unreachable_count_reports_failure() {
        let mut w = World::default_for(TaskId::ReachLift);
        w.geometry.horizon = 3;
        assert!(matches!(
            generate_demos(&w, 2, 1, &ExpertParams::default()),
            Err(Error::DemoGeneration(_))
        ));
    }
}
