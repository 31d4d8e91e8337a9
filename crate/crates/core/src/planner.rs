//! Batch-sampled roadmap planner with informed resampling, plus a path
//! shortcutter and a follower that turns a path into per-step actions.
//!
//! Each batch adds uniformly sampled free points to a roadmap, links every
//! pair closer than the connection radius whose segment is free, and runs A*
//! from start to goal. Once a solution exists, later batches sample only the
//! prolate spheroid of points that could still shorten it.

use std::io::Write;

use petgraph::algo::astar;
use petgraph::graph::{NodeIndex, UnGraph};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::{Action, State, World};
use crate::error::{Error, Result};
use crate::geom::{self, Aabb, Vec3};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub batch_size: usize,
    pub batches: usize,
    pub goal_bias: f64,
    pub connection_radius: f64,
    /// Allowed distance between the last path point and the query goal.
    pub waypoint_tolerance: f64,
    /// Sample spacing for segment collision checks.
    pub collision_resolution: f64,
    /// Greedy shortcut passes applied to the best path.
    pub shortcut_iterations: usize,
    pub seed: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            batch_size: 150,
            batches: 4,
            goal_bias: 0.05,
            connection_radius: 0.25,
            waypoint_tolerance: 0.02,
            collision_resolution: 0.005,
            shortcut_iterations: 50,
            seed: 0,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if self.batch_size == 0
            || self.batches == 0
            || !pos(self.connection_radius)
            || !pos(self.waypoint_tolerance)
            || !pos(self.collision_resolution)
            || !(0.0..=1.0).contains(&self.goal_bias)
        {
            return Err(Error::Config("planner settings must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    pub points: Vec<Vec3>,
}

impl Path {
    pub fn length(&self) -> f64 {
        geom::polyline_length(&self.points)
    }

    pub fn start(&self) -> Vec3 {
        self.points[0]
    }

    pub fn end(&self) -> Vec3 {
        *self.points.last().expect("paths are nonempty")
    }

    /// Vertex dump, one `x,y,z` row per point.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "x,y,z")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", p[0], p[1], p[2])?;
        }
        Ok(())
    }
}

/// Best path plus the incumbent length after every batch (`inf` before the
/// first solution).
#[derive(Clone, Debug, PartialEq)]
pub struct PlanReport {
    pub path: Path,
    pub goal: Vec3,
    pub batch_lengths: Vec<f64>,
    pub roadmap_size: usize,
}

/// Segment validity. Roadmap edges keep a clearance of one resolution step so
/// that any sub-segment the simulator samples stays outside the obstacles;
/// segments touching the query endpoints only need to be free.
struct Checker<'a> {
    world: &'a World,
    inflated: Vec<Aabb>,
    resolution: f64,
}

impl<'a> Checker<'a> {
    fn new(world: &'a World, resolution: f64) -> Self {
        Checker {
            world,
            inflated: world.obstacles.iter().map(|b| b.inflate(resolution)).collect(),
            resolution,
        }
    }

    fn point_clear(&self, p: Vec3) -> bool {
        self.world.workspace.contains(p) && !self.inflated.iter().any(|b| b.contains(p))
    }

    fn free(&self, a: Vec3, b: Vec3, relaxed: bool) -> bool {
        if relaxed {
            !geom::segment_hits(a, b, &self.world.obstacles, self.resolution)
        } else {
            !geom::segment_hits(a, b, &self.inflated, self.resolution)
        }
    }
}

/// Pushes `goal` out of any obstacle through the nearest face (plus a small
/// clearance), then back into the workspace.
pub fn project_goal(goal: Vec3, world: &World, clearance: f64) -> Vec3 {
    let mut g = world.workspace.clamp(goal);
    for _ in 0..4 {
        let Some(b) = world.obstacles.iter().find(|b| b.contains(g)) else {
            break;
        };
        let mut best = (f64::INFINITY, 0, 0.0);
        for axis in 0..3 {
            for target in [b.min[axis] - clearance, b.max[axis] + clearance] {
                let d = (target - g[axis]).abs();
                let inside_ws = target >= world.workspace.min[axis] && target <= world.workspace.max[axis];
                if inside_ws && d < best.0 {
                    best = (d, axis, target);
                }
            }
        }
        if !best.0.is_finite() {
            break;
        }
        g[best.1] = best.2;
    }
    g
}

pub fn plan(start: Vec3, goal: Vec3, world: &World, cfg: &PlannerConfig) -> Result<Path> {
    plan_detailed(start, goal, world, cfg).map(|r| r.path)
}

pub fn plan_detailed(start: Vec3, goal: Vec3, world: &World, cfg: &PlannerConfig) -> Result<PlanReport> {
    cfg.validate()?;
    let checker = Checker::new(world, cfg.collision_resolution);
    if !world.workspace.contains(start) || world.in_obstacle(start) {
        return Err(Error::PlanFailed("start is not collision-free".into()));
    }
    let goal = project_goal(goal, world, cfg.collision_resolution * 2.0);
    if world.in_obstacle(goal) {
        return Err(Error::PlanFailed("goal could not be moved out of obstacles".into()));
    }
    let single = |points| PlanReport {
        path: Path { points },
        goal,
        batch_lengths: Vec::new(),
        roadmap_size: 0,
    };
    if start == goal {
        return Ok(single(vec![start]));
    }
    if checker.free(start, goal, true) {
        return Ok(single(vec![start, goal]));
    }

    let mut rng = rng::seeded(cfg.seed);
    let mut graph: UnGraph<Vec3, f64> = UnGraph::new_undirected();
    let s_ix = graph.add_node(start);
    let g_ix = graph.add_node(goal);
    let c_min = geom::dist(start, goal);
    let frame = Frame::new(start, goal);
    let mut best: Option<Path> = None;
    let mut history = Vec::with_capacity(cfg.batches);

    for _ in 0..cfg.batches {
        let c_best = best.as_ref().map(Path::length);
        let mut added = Vec::with_capacity(cfg.batch_size);
        let mut attempts = 0;
        while added.len() < cfg.batch_size && attempts < cfg.batch_size * 50 {
            attempts += 1;
            let p = if rng.random::<f64>() < cfg.goal_bias {
                geom::add(goal, scale_ball(&mut rng, cfg.connection_radius))
            } else if let Some(c) = c_best {
                frame.sample(&mut rng, c, c_min)
            } else {
                world.workspace.sample(&mut rng)
            };
            if checker.point_clear(p) {
                added.push(graph.add_node(p));
            }
        }
        for &n in &added {
            let p = graph[n];
            let neighbours: Vec<NodeIndex> = graph
                .node_indices()
                .filter(|&m| m < n)
                .filter(|&m| geom::dist(p, graph[m]) <= cfg.connection_radius)
                .collect();
            for m in neighbours {
                let q = graph[m];
                let relaxed = m == s_ix || m == g_ix;
                if checker.free(p, q, relaxed) {
                    graph.add_edge(n, m, geom::dist(p, q));
                }
            }
        }
        let found = astar(&graph, s_ix, |n| n == g_ix, |e| *e.weight(), |n| geom::dist(graph[n], goal));
        if let Some((cost, nodes)) = found {
            if c_best.is_none_or(|c| cost < c) {
                let raw = Path {
                    points: nodes.iter().map(|&n| graph[n]).collect(),
                };
                let shortened = greedy_shortcut(&raw, &checker);
                best = Some(if shortened.length() <= raw.length() { shortened } else { raw });
            }
        }
        history.push(best.as_ref().map_or(f64::INFINITY, Path::length));
    }
    let mut path = best.ok_or_else(|| {
        Error::PlanFailed(format!("no path after {} batches of {}", cfg.batches, cfg.batch_size))
    })?;
    if cfg.shortcut_iterations > 0 {
        path = shortcut_with(&path, &checker, cfg.shortcut_iterations, cfg.seed);
        if let Some(last) = history.last_mut() {
            *last = last.min(path.length());
        }
    }
    Ok(PlanReport {
        path,
        goal,
        batch_lengths: history,
        roadmap_size: graph.node_count(),
    })
}

fn scale_ball(rng: &mut rng::Rng, r: f64) -> Vec3 {
    geom::scale(unit_ball(rng), r)
}

fn unit_ball(rng: &mut rng::Rng) -> Vec3 {
    loop {
        let p: Vec3 = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
        if geom::dot(p, p) <= 1.0 {
            return p;
        }
    }
}

/// Orthonormal frame whose first axis runs from start to goal.
struct Frame {
    center: Vec3,
    axes: [Vec3; 3],
}

impl Frame {
    fn new(a: Vec3, b: Vec3) -> Self {
        let d = geom::sub(b, a);
        let n = geom::norm(d);
        let e1 = if n > 0.0 { geom::scale(d, 1.0 / n) } else { [1.0, 0.0, 0.0] };
        let least = (0..3)
            .min_by(|&i, &j| e1[i].abs().total_cmp(&e1[j].abs()))
            .unwrap_or(0);
        let mut helper = [0.0; 3];
        helper[least] = 1.0;
        let e2 = geom::cross(e1, helper);
        let e2 = geom::scale(e2, 1.0 / geom::norm(e2));
        let e3 = geom::cross(e1, e2);
        Frame {
            center: geom::lerp(a, b, 0.5),
            axes: [e1, e2, e3],
        }
    }

    /// Uniform point in the spheroid of total focal-path length `c_best`.
    fn sample(&self, rng: &mut rng::Rng, c_best: f64, c_min: f64) -> Vec3 {
        let r1 = c_best / 2.0;
        let r2 = (c_best * c_best - c_min * c_min).max(0.0).sqrt() / 2.0;
        let u = unit_ball(rng);
        let mut p = self.center;
        for (k, r) in [r1, r2, r2].into_iter().enumerate() {
            p = geom::add(p, geom::scale(self.axes[k], u[k] * r));
        }
        p
    }
}

fn greedy_shortcut(path: &Path, checker: &Checker) -> Path {
    let pts = &path.points;
    if pts.len() <= 2 {
        return path.clone();
    }
    let last = pts.len() - 1;
    let mut out = vec![pts[0]];
    let mut i = 0;
    while i < last {
        let mut j = last;
        while j > i + 1 {
            let relaxed = i == 0 || j == last;
            if checker.free(pts[i], pts[j], relaxed) {
                break;
            }
            j -= 1;
        }
        out.push(pts[j]);
        i = j;
    }
    Path { points: out }
}

fn shortcut_with(path: &Path, checker: &Checker, iterations: usize, seed: u64) -> Path {
    let mut pts = path.points.clone();
    let mut rng = rng::stream(seed, 0x5c);
    for _ in 0..iterations {
        if pts.len() <= 2 {
            break;
        }
        let i = rng.random_range(0..pts.len() - 2);
        let j = rng.random_range(i + 2..pts.len());
        let relaxed = i == 0 || j == pts.len() - 1;
        let direct = geom::dist(pts[i], pts[j]);
        let via = geom::polyline_length(&pts[i..=j]);
        if direct < via && checker.free(pts[i], pts[j], relaxed) {
            pts.drain(i + 1..j);
        }
    }
    let random_pass = Path { points: pts };
    let greedy = greedy_shortcut(&random_pass, checker);
    if greedy.length() <= random_pass.length() {
        greedy
    } else {
        random_pass
    }
}

/// Replaces random sub-chains with straight segments when they are free.
/// Never returns a longer path.
pub fn shortcut(path: &Path, world: &World, iterations: usize, seed: u64, resolution: f64) -> Path {
    let checker = Checker::new(world, resolution);
    let out = shortcut_with(path, &checker, iterations, seed);
    if out.length() <= path.length() {
        out
    } else {
        path.clone()
    }
}

/// Index of the furthest path vertex visible from `p` in a straight free line.
pub fn furthest_reachable(p: Vec3, path: &Path, world: &World) -> Option<usize> {
    (0..path.points.len())
        .rev()
        .find(|&k| !crate::env::segment_collides(p, path.points[k], world, world.collision_resolution))
}

/// Proportional step toward the furthest visible path vertex, scaled
/// uniformly into the action box. The gripper opens unless it is carrying
/// the object.
pub fn nav_action(s: &State, path: &Path, world: &World) -> Action {
    let p = s.gripper;
    let target = match furthest_reachable(p, path, world) {
        Some(k) => path.points[k],
        None => *path
            .points
            .iter()
            .min_by(|a, b| geom::dist(p, **a).total_cmp(&geom::dist(p, **b)))
            .expect("paths are nonempty"),
    };
    let grip = if s.held { -1.0 } else { 1.0 };
    direct_action(p, target, world.max_step(), grip)
}

/// Translation `(target − p) / δ_max`, shrunk uniformly so every component
/// lies in `[-1, 1]`.
pub fn direct_action(p: Vec3, target: Vec3, max_step: f64, grip: f64) -> Action {
    let mut t = geom::scale(geom::sub(target, p), 1.0 / max_step);
    let m = t.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if m > 1.0 {
        t = geom::scale(t, 1.0 / m);
    }
    Action([t[0], t[1], t[2], grip])
}
