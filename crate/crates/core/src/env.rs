//! Deterministic kinematic manipulation tasks with sparse 0/1 reward.
//!
//! The gripper is a point that moves by clipped position deltas. Objects are
//! grasped magnetically, pushed kinematically (push task only) and fall to
//! the nearest support when released. Static axis-aligned obstacles block
//! motion but never end an episode.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Aabb, Vec3};
use crate::rng;

pub const ACTION_DIM: usize = 4;
/// Length of [`State::to_raw`].
pub const RAW_STATE_DIM: usize = 12;
/// Length of [`State::observation`].
pub const OBS_DIM: usize = 17;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskId {
    ReachLift,
    PushToGoal,
    PickAndPlace,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::ReachLift, TaskId::PushToGoal, TaskId::PickAndPlace];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::ReachLift => "ReachLift",
            TaskId::PushToGoal => "PushToGoal",
            TaskId::PickAndPlace => "PickAndPlace",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            TaskId::ReachLift => 0,
            TaskId::PushToGoal => 1,
            TaskId::PickAndPlace => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.tag() == tag)
            .ok_or_else(|| Error::format("task tag", tag.to_string()))
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown task '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Randomization {
    None,
    ObjectPos,
    ObjectAndGripper,
}

impl FromStr for Randomization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Randomization::None),
            "objectpos" | "object" => Ok(Randomization::ObjectPos),
            "objectandgripper" | "object-and-gripper" => Ok(Randomization::ObjectAndGripper),
            _ => Err(Error::Config(format!("unknown randomization '{s}'"))),
        }
    }
}

impl fmt::Display for Randomization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Randomization::None => "None",
            Randomization::ObjectPos => "ObjectPos",
            Randomization::ObjectAndGripper => "ObjectAndGripper",
        };
        f.write_str(s)
    }
}

/// Per-task geometry and thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskGeometry {
    pub object_half_extent: f64,
    /// ε_goal; success is `distance <= goal_tolerance`.
    pub goal_tolerance: f64,
    /// ε_grasp.
    pub grasp_distance: f64,
    /// h_lift for the lift task.
    pub lift_height: f64,
    /// Horizontal gripper/object separation maintained while pushing.
    pub contact_distance: f64,
    /// Whether the gripper pushes the object on contact.
    pub pushable: bool,
    /// Episode horizon H.
    pub horizon: u32,
    pub gripper_start: Vec3,
    /// Canonical object position; z is replaced by the resting height.
    pub object_start: Vec3,
    /// Goal position; ignored by the lift task, which derives its goal from the object.
    pub goal: Vec3,
    /// Region for object randomisation (xy range used; z ignored).
    pub object_region: Aabb,
    /// Region for gripper randomisation.
    pub gripper_region: Aabb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct World {
    pub task: TaskId,
    pub workspace: Aabb,
    pub obstacles: Vec<Aabb>,
    /// Per-step displacement limit as a fraction of the workspace diagonal.
    pub step_fraction: f64,
    /// δ_col: sample spacing for segment collision checks.
    pub collision_resolution: f64,
    pub geometry: TaskGeometry,
}

impl World {
    /// Built-in unit-cube world for each task.
    pub fn default_for(task: TaskId) -> World {
        let he = 0.025;
        let geometry = match task {
            TaskId::ReachLift => TaskGeometry {
                object_half_extent: he,
                goal_tolerance: 0.05,
                grasp_distance: 0.04,
                lift_height: 0.1,
                contact_distance: 0.045,
                pushable: false,
                horizon: 120,
                gripper_start: [0.15, 0.5, 0.45],
                object_start: [0.72, 0.5, he],
                goal: [0.72, 0.5, he + 0.1],
                object_region: Aabb::new([0.6, 0.25, 0.0], [0.85, 0.75, 0.0]),
                gripper_region: Aabb::new([0.05, 0.1, 0.1], [0.3, 0.9, 0.9]),
            },
            TaskId::PushToGoal => TaskGeometry {
                object_half_extent: he,
                goal_tolerance: 0.05,
                grasp_distance: 0.04,
                lift_height: 0.1,
                contact_distance: 0.045,
                pushable: true,
                horizon: 200,
                gripper_start: [0.15, 0.5, 0.3],
                object_start: [0.58, 0.4, he],
                goal: [0.8, 0.6, he],
                object_region: Aabb::new([0.52, 0.3, 0.0], [0.65, 0.5, 0.0]),
                gripper_region: Aabb::new([0.05, 0.1, 0.1], [0.3, 0.9, 0.9]),
            },
            TaskId::PickAndPlace => TaskGeometry {
                object_half_extent: he,
                goal_tolerance: 0.05,
                grasp_distance: 0.04,
                lift_height: 0.1,
                contact_distance: 0.045,
                pushable: false,
                horizon: 300,
                gripper_start: [0.15, 0.5, 0.45],
                object_start: [0.62, 0.3, he],
                goal: [0.825, 0.75, 0.12 + he],
                object_region: Aabb::new([0.55, 0.2, 0.0], [0.7, 0.45, 0.0]),
                gripper_region: Aabb::new([0.05, 0.1, 0.1], [0.3, 0.9, 0.9]),
            },
        };
        let obstacles = match task {
            TaskId::ReachLift => vec![Aabb::new([0.40, 0.0, 0.0], [0.48, 1.0, 0.40])],
            TaskId::PushToGoal => vec![Aabb::new([0.30, 0.35, 0.0], [0.40, 0.65, 0.5])],
            TaskId::PickAndPlace => vec![
                Aabb::new([0.40, 0.1, 0.0], [0.46, 0.9, 0.5]),
                Aabb::new([0.75, 0.65, 0.0], [0.9, 0.85, 0.12]),
            ],
        };
        World {
            task,
            workspace: Aabb::unit(),
            obstacles,
            step_fraction: 0.02,
            collision_resolution: 0.005,
            geometry,
        }
    }

    /// δ_max: the largest per-axis displacement of one step.
    pub fn max_step(&self) -> f64 {
        self.step_fraction * self.workspace.diagonal()
    }

    pub fn diagonal(&self) -> f64 {
        self.workspace.diagonal()
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if !self.workspace.is_valid() {
            return Err(Error::Config("workspace bounds are invalid".into()));
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !o.is_valid() || !self.workspace.contains_box(o) {
                return Err(Error::Config(format!("obstacle {i} is not inside the workspace")));
            }
        }
        let positive = [
            ("goal_tolerance", g.goal_tolerance),
            ("grasp_distance", g.grasp_distance),
            ("lift_height", g.lift_height),
            ("contact_distance", g.contact_distance),
            ("object_half_extent", g.object_half_extent),
            ("step_fraction", self.step_fraction),
            ("collision_resolution", self.collision_resolution),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if g.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if !self.workspace.contains(g.gripper_start) || self.in_obstacle(g.gripper_start) {
            return Err(Error::Config("gripper start is not free".into()));
        }
        if !self.workspace.covers_xy(g.object_start) {
            return Err(Error::Config("object start outside workspace".into()));
        }
        if !g.gripper_region.is_valid() || !self.workspace.contains_box(&g.gripper_region) {
            return Err(Error::Config("gripper region outside workspace".into()));
        }
        if !g.object_region.is_valid()
            || !self.workspace.covers_xy(g.object_region.min)
            || !self.workspace.covers_xy(g.object_region.max)
        {
            return Err(Error::Config("object region outside workspace".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<World> {
        let world: World = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        world.validate()?;
        Ok(world)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("world serialises")
    }

    pub fn in_obstacle(&self, p: Vec3) -> bool {
        self.obstacles.iter().any(|o| o.contains(p))
    }

    /// Height of the object centre when resting at `xy`.
    pub fn rest_height(&self, xy: Vec3) -> f64 {
        self.support_below(xy, f64::INFINITY) + self.geometry.object_half_extent
    }

    /// Top of the highest obstacle under `p` whose top is not above `z_max`, or the floor.
    fn support_below(&self, p: Vec3, z_max: f64) -> f64 {
        self.obstacles
            .iter()
            .filter(|o| o.covers_xy(p) && o.max[2] <= z_max + 1e-12)
            .map(|o| o.max[2])
            .fold(self.workspace.min[2], f64::max)
    }
}

/// True iff any sample along `[p0, p1]` at spacing `<= resolution` lies in an obstacle.
pub fn segment_collides(p0: Vec3, p1: Vec3, world: &World, resolution: f64) -> bool {
    geom::segment_hits(p0, p1, &world.obstacles, resolution)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Action(pub [f64; ACTION_DIM]);

impl Action {
    pub fn zero() -> Self {
        Action([0.0; ACTION_DIM])
    }

    pub fn from_slice(v: &[f64]) -> Self {
        let mut a = [0.0; ACTION_DIM];
        a.copy_from_slice(&v[..ACTION_DIM]);
        Action(a)
    }

    /// Component-wise clip into `[-1, 1]`. NaN components become 0.
    pub fn clipped(self) -> Self {
        Action(self.0.map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) }))
    }

    pub fn translation(&self) -> Vec3 {
        [self.0[0], self.0[1], self.0[2]]
    }

    pub fn gripper(&self) -> f64 {
        self.0[3]
    }

    pub fn in_box(&self) -> bool {
        self.0.iter().all(|v| (-1.0..=1.0).contains(v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct State {
    pub gripper: Vec3,
    /// Gripper opening in `[0, 1]`.
    pub width: f64,
    pub object: Vec3,
    pub goal: Vec3,
    pub held: bool,
    pub step: u32,
}

impl State {
    /// Raw encoding used by the dataset files:
    /// `gripper(3), width, object(3), goal(3), held, step`.
    pub fn to_raw(&self) -> [f64; RAW_STATE_DIM] {
        let g = self.gripper;
        let o = self.object;
        let t = self.goal;
        [
            g[0],
            g[1],
            g[2],
            self.width,
            o[0],
            o[1],
            o[2],
            t[0],
            t[1],
            t[2],
            if self.held { 1.0 } else { 0.0 },
            self.step as f64,
        ]
    }

    pub fn from_raw(v: &[f64]) -> Result<State> {
        if v.len() != RAW_STATE_DIM {
            return Err(Error::DimensionMismatch {
                expected: RAW_STATE_DIM,
                got: v.len(),
            });
        }
        if v[11] < 0.0 || v[11].fract() != 0.0 || v[11] > u32::MAX as f64 {
            return Err(Error::format("state", "step index must be a non-negative integer"));
        }
        Ok(State {
            gripper: [v[0], v[1], v[2]],
            width: v[3],
            object: [v[4], v[5], v[6]],
            goal: [v[7], v[8], v[9]],
            held: v[10] != 0.0,
            step: v[11] as u32,
        })
    }

    /// Network input features: raw pose data plus object-relative and goal-relative offsets.
    pub fn observation(&self) -> [f64; OBS_DIM] {
        let rel = geom::sub(self.object, self.gripper);
        let to_goal = geom::sub(self.goal, self.object);
        let g = self.gripper;
        let o = self.object;
        let t = self.goal;
        [
            g[0],
            g[1],
            g[2],
            self.width,
            o[0],
            o[1],
            o[2],
            t[0],
            t[1],
            t[2],
            if self.held { 1.0 } else { 0.0 },
            rel[0],
            rel[1],
            rel[2],
            to_goal[0],
            to_goal[1],
            to_goal[2],
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub state: State,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    /// The straight move was blocked and the gripper slid axis-wise instead.
    pub collided: bool,
}

/// Samples an initial state. Deterministic in `seed`.
pub fn reset(world: &World, seed: u64, randomization: Randomization) -> State {
    let g = &world.geometry;
    let mut rng = rng::seeded(seed);
    let object_xy = match randomization {
        Randomization::None => g.object_start,
        Randomization::ObjectPos | Randomization::ObjectAndGripper => loop {
            let p = g.object_region.sample(&mut rng);
            if !object_blocked(world, p) {
                break p;
            }
        },
    };
    let object = [object_xy[0], object_xy[1], world.rest_height(object_xy)];
    let gripper = match randomization {
        Randomization::ObjectAndGripper => loop {
            let p = g.gripper_region.sample(&mut rng);
            let clear = !world.obstacles.iter().any(|o| o.inflate(0.02).contains(p));
            if clear && geom::dist(p, object) > 2.0 * g.grasp_distance {
                break p;
            }
        },
        _ => g.gripper_start,
    };
    let goal = match world.task {
        TaskId::ReachLift => [object[0], object[1], object[2] + g.lift_height],
        _ => g.goal,
    };
    State {
        gripper,
        width: 1.0,
        object,
        goal,
        held: false,
        step: 0,
    }
}

fn object_blocked(world: &World, xy: Vec3) -> bool {
    let he = world.geometry.object_half_extent;
    world.obstacles.iter().any(|o| o.inflate(he).covers_xy(xy))
}

pub fn success(s: &State, world: &World) -> bool {
    match world.task {
        TaskId::ReachLift => s.held && s.object[2] >= s.goal[2],
        TaskId::PushToGoal | TaskId::PickAndPlace => {
            geom::dist(s.object, s.goal) <= world.geometry.goal_tolerance
        }
    }
}

/// Advances one step. Pure and deterministic.
pub fn step(s: &State, action: Action, world: &World) -> Step {
    let a = action.clipped();
    let g = &world.geometry;
    let delta = geom::scale(a.translation(), world.max_step());
    let start = s.gripper;
    let target = world.workspace.clamp(geom::add(start, delta));
    let res = world.collision_resolution;

    let (gripper, collided) = if !segment_collides(start, target, world, res) {
        (target, false)
    } else {
        let mut p = start;
        for axis in 0..3 {
            let mut q = p;
            q[axis] = target[axis];
            if !segment_collides(p, q, world, res) {
                p = q;
            }
        }
        (p, true)
    };

    let mut object = s.object;
    let mut held = s.held;
    if !held && g.pushable {
        const SUBSTEPS: usize = 4;
        for k in 1..=SUBSTEPS {
            let prev = geom::lerp(start, gripper, (k - 1) as f64 / SUBSTEPS as f64);
            let gk = geom::lerp(start, gripper, k as f64 / SUBSTEPS as f64);
            object = push(world, prev, gk, object);
        }
    }

    let cmd = a.gripper();
    let width = (cmd + 1.0) / 2.0;
    if held && cmd > 0.0 {
        held = false;
        object[2] = world.support_below(object, object[2]) + g.object_half_extent;
    } else if !held && cmd < 0.0 && geom::dist(gripper, object) <= g.grasp_distance {
        held = true;
    }
    if held {
        object = [gripper[0], gripper[1], gripper[2].max(g.object_half_extent)];
    }

    let next = State {
        gripper,
        width,
        object,
        goal: s.goal,
        held,
        step: s.step + 1,
    };
    let ok = success(&next, world);
    Step {
        state: next,
        reward: if ok { 1.0 } else { 0.0 },
        done: ok || next.step >= g.horizon,
        success: ok,
        collided,
    }
}

/// Moves the object horizontally so it keeps `contact_distance` from the gripper.
fn push(world: &World, prev: Vec3, gripper: Vec3, object: Vec3) -> Vec3 {
    let g = &world.geometry;
    if (gripper[2] - object[2]).abs() > g.object_half_extent + 0.02 {
        return object;
    }
    let dx = object[0] - gripper[0];
    let dy = object[1] - gripper[1];
    let d = (dx * dx + dy * dy).sqrt();
    if d >= g.contact_distance {
        return object;
    }
    let (ux, uy) = if d > 1e-9 {
        (dx / d, dy / d)
    } else {
        let mx = gripper[0] - prev[0];
        let my = gripper[1] - prev[1];
        let m = (mx * mx + my * my).sqrt();
        if m <= 1e-12 {
            return object;
        }
        (mx / m, my / m)
    };
    let moved = [
        gripper[0] + ux * g.contact_distance,
        gripper[1] + uy * g.contact_distance,
        object[2],
    ];
    let inside = world.workspace.covers_xy(moved);
    let blocked = world
        .obstacles
        .iter()
        .any(|o| o.inflate(g.object_half_extent).contains(moved));
    if inside && !blocked {
        moved
    } else {
        object
    }
}
