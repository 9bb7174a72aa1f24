//! Deterministic 2D manipulation worlds with low-resolution rendering.
//!
//! * `PushWorld`: carry blocks to goal positions (approach, grip, transport,
//!   release).
//! * `TraceWorld`: draw a "word", a sequence of waypoints visited in order,
//!   leaving a trail on the canvas.
//!
//! The goal of every instance is the terminal state reached by the scripted
//! expert, so the goal image is always a frame the expert actually renders.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensorcore::Tensor;

pub type Vec2 = [f64; 2];

pub const AGENT_INTENSITY: f64 = 1.0;
pub const BLOCK_INTENSITY: f64 = 0.6;
pub const TRAIL_INTENSITY: f64 = 0.3;
pub const AGENT_RADIUS: f64 = 0.06;
pub const BLOCK_RADIUS: f64 = 0.11;
pub const TRAIL_HALF_WIDTH: f64 = 0.03;

/// Proprio vector length: `[x, y, carrying]`.
pub const PROPRIO_DIM: usize = 3;
/// Action vector length: `[dx/a_max, dy/a_max, grip]`.
pub const ACTION_DIM: usize = 3;

const RESET_ATTEMPTS: usize = 64;
const LIBRARY_SIZE: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Push,
    Trace,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Push => "push",
            Task::Trace => "trace",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LengthClass {
    Short,
    Medium,
    Long,
}

impl LengthClass {
    pub const ALL: [LengthClass; 3] = [LengthClass::Short, LengthClass::Medium, LengthClass::Long];

    pub fn waypoints(self) -> usize {
        match self {
            LengthClass::Short => 3,
            LengthClass::Medium => 5,
            LengthClass::Long => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LengthClass::Short => "short",
            LengthClass::Medium => "medium",
            LengthClass::Long => "long",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Id,
    Ood,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Id => "id",
            Variant::Ood => "ood",
        }
    }
}

/// Out-of-domain switches. All off = in-domain.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OodFlags {
    /// Blocks spawn in the border band outside the in-domain square.
    pub shifted_spawn: bool,
    /// Blocks render as squares instead of discs.
    pub novel_shape: bool,
    /// Extra blocks that must stay where they are.
    pub distractors: usize,
    /// Draw fresh waypoint patterns instead of the fixed library.
    pub fresh_patterns: bool,
}

impl OodFlags {
    pub fn any(&self) -> bool {
        self.shifted_spawn || self.novel_shape || self.distractors > 0 || self.fresh_patterns
    }

    /// Default OOD split per task.
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Push => OodFlags {
                shifted_spawn: true,
                ..OodFlags::default()
            },
            Task::Trace => OodFlags {
                fresh_patterns: true,
                ..OodFlags::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub task: Task,
    /// Render resolution `G` (images are `G × G`).
    pub resolution: usize,
    pub a_max: f64,
    pub success_eps: f64,
    pub contact_radius: f64,
    pub blocks: usize,
    /// Step budget for the scripted expert.
    pub t_max: usize,
    /// TraceWorld word length; `None` draws a class uniformly.
    pub length_class: Option<LengthClass>,
    pub library_seed: u64,
    /// Bound on the teleport offset of [`inject_disturbance`].
    pub disturbance: f64,
    pub ood: OodFlags,
}

impl EnvConfig {
    pub fn push() -> Self {
        EnvConfig {
            task: Task::Push,
            resolution: 16,
            a_max: 0.1,
            success_eps: 0.1,
            contact_radius: 0.08,
            blocks: 1,
            t_max: 60,
            length_class: None,
            library_seed: 2024,
            disturbance: 0.15,
            ood: OodFlags::default(),
        }
    }

    pub fn trace() -> Self {
        EnvConfig {
            task: Task::Trace,
            a_max: 0.06,
            success_eps: 0.08,
            blocks: 0,
            t_max: 120,
            length_class: None,
            ..EnvConfig::push()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.ood = match variant {
            Variant::Id => OodFlags::default(),
            Variant::Ood => OodFlags::for_task(self.task),
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(Error::Config(format!("resolution must be ≥ 8, got {}", self.resolution)));
        }
        if self.success_eps.is_nan() || self.success_eps <= 0.0 {
            return Err(Error::Config("success_eps must be > 0".into()));
        }
        if self.a_max.is_nan() || self.a_max <= 0.0 {
            return Err(Error::Config("a_max must be > 0".into()));
        }
        if self.task == Task::Push && self.blocks == 0 {
            return Err(Error::Config("push task needs at least one block".into()));
        }
        if self.disturbance < 0.0 {
            return Err(Error::Config("disturbance bound must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        format!(
            "{}-G{}-a{}-e{}-c{}-b{}-T{}-L{}-lib{}-ood{}{}{}{}",
            self.task.name(),
            self.resolution,
            self.a_max,
            self.success_eps,
            self.contact_radius,
            self.blocks,
            self.t_max,
            self.length_class.map(LengthClass::name).unwrap_or("any"),
            self.library_seed,
            self.ood.shifted_spawn as u8,
            self.ood.novel_shape as u8,
            self.ood.distractors,
            self.ood.fresh_patterns as u8,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub agent: Vec2,
    pub blocks: Vec<Vec2>,
    pub carrying: Option<usize>,
    /// Agent positions so far; drawn as the TraceWorld trail.
    pub trail: Vec<Vec2>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Action {
    pub delta: Vec2,
    /// Desired gripper state: closed while true.
    pub grip: bool,
}

impl Action {
    pub fn stay(grip: bool) -> Self {
        Action {
            delta: [0.0, 0.0],
            grip,
        }
    }

    /// Network representation `[dx/a_max, dy/a_max, ±1]`.
    pub fn to_vector(&self, a_max: f64) -> [f64; ACTION_DIM] {
        [
            self.delta[0] / a_max,
            self.delta[1] / a_max,
            if self.grip { 1.0 } else { -1.0 },
        ]
    }

    /// Inverse of [`Action::to_vector`], clipping motion to `a_max`.
    pub fn from_vector(v: &[f64], a_max: f64) -> Self {
        Action {
            delta: [
                (v[0] * a_max).clamp(-a_max, a_max),
                (v[1] * a_max).clamp(-a_max, a_max),
            ],
            grip: v[2] > 0.0,
        }
    }

    pub fn clipped(self, a_max: f64) -> Self {
        Action {
            delta: [
                self.delta[0].clamp(-a_max, a_max),
                self.delta[1].clamp(-a_max, a_max),
            ],
            grip: self.grip,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub image: Tensor,
    /// `[x, y, carrying]`.
    pub proprio: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoalSpec {
    pub state: WorldState,
    pub image: Tensor,
    /// TraceWorld word; empty for PushWorld.
    pub waypoints: Vec<Vec2>,
    /// Blocks that count toward success (distractors excluded).
    pub targets: Vec<usize>,
    pub length_class: Option<LengthClass>,
}

fn dist(a: Vec2, b: Vec2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clamp_unit(p: Vec2) -> Vec2 {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Vec2 {
    [rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

/// In-domain spawn square for blocks and goals.
pub const ID_REGION: (f64, f64) = (0.25, 0.75);
/// Outer band used by shifted spawns.
pub const OOD_BAND: (f64, f64) = (0.06, 0.94);

pub fn in_id_region(p: Vec2) -> bool {
    let (lo, hi) = ID_REGION;
    p.iter().all(|&c| (lo..=hi).contains(&c))
}

fn sample_ood_band(rng: &mut ChaCha8Rng) -> Vec2 {
    loop {
        let p = uniform_in(rng, OOD_BAND.0, OOD_BAND.1);
        if !in_id_region(p) {
            return p;
        }
    }
}

pub fn observe(s: &WorldState, cfg: &EnvConfig) -> Observation {
    Observation {
        image: render(s, cfg),
        proprio: Tensor::vector(vec![
            s.agent[0],
            s.agent[1],
            if s.carrying.is_some() { 1.0 } else { 0.0 },
        ]),
    }
}

/// Samples a solvable instance. The goal is the expert's terminal state.
pub fn reset(cfg: &EnvConfig, seed: u64) -> Result<(WorldState, GoalSpec, Observation)> {
    cfg.validate()?;
    for attempt in 0..RESET_ATTEMPTS {
        let mut r = rng::stream(rng::derive(seed, attempt as u64));
        let (start, proto) = match cfg.task {
            Task::Push => sample_push(cfg, &mut r),
            Task::Trace => sample_trace(cfg, &mut r),
        };
        let Some(goal_state) = run_expert_to_goal(&start, &proto, cfg) else {
            continue;
        };
        let goal = GoalSpec {
            image: render(&goal_state, cfg),
            state: goal_state,
            ..proto
        };
        let obs = observe(&start, cfg);
        return Ok((start, goal, obs));
    }
    Err(Error::Generation(format!(
        "no solvable instance for seed {seed} after {RESET_ATTEMPTS} attempts"
    )))
}

fn sample_push(cfg: &EnvConfig, r: &mut ChaCha8Rng) -> (WorldState, GoalSpec) {
    let (lo, hi) = ID_REGION;
    let n_total = cfg.blocks + cfg.ood.distractors;
    let mut blocks: Vec<Vec2> = Vec::with_capacity(n_total);
    while blocks.len() < n_total {
        let p = if cfg.ood.shifted_spawn && blocks.len() < cfg.blocks {
            sample_ood_band(r)
        } else {
            uniform_in(r, lo, hi)
        };
        if blocks.iter().all(|&b| dist(b, p) > 2.0 * BLOCK_RADIUS) {
            blocks.push(p);
        }
    }
    let mut goals: Vec<Vec2> = Vec::with_capacity(cfg.blocks);
    while goals.len() < cfg.blocks {
        let g = uniform_in(r, lo, hi);
        let i = goals.len();
        let clear_of_others = blocks
            .iter()
            .enumerate()
            .all(|(j, &b)| j == i || dist(b, g) > 2.0 * BLOCK_RADIUS)
            && goals.iter().all(|&o| dist(o, g) > 2.0 * BLOCK_RADIUS);
        if dist(blocks[i], g) > 2.0 * cfg.success_eps && clear_of_others {
            goals.push(g);
        }
    }
    let agent = uniform_in(r, 0.1, 0.9);
    let mut goal_blocks = blocks.clone();
    goal_blocks[..cfg.blocks].copy_from_slice(&goals);
    let start = WorldState {
        agent,
        blocks,
        carrying: None,
        trail: vec![agent],
    };
    let proto = GoalSpec {
        state: WorldState {
            agent,
            blocks: goal_blocks,
            carrying: None,
            trail: Vec::new(),
        },
        image: Tensor::zeros(&[1]),
        waypoints: Vec::new(),
        targets: (0..cfg.blocks).collect(),
        length_class: None,
    };
    (start, proto)
}

/// Deterministic waypoint word for `(seed, class)`.
pub fn sample_word(r: &mut ChaCha8Rng, n: usize) -> Vec<Vec2> {
    let mut pts: Vec<Vec2> = vec![uniform_in(r, 0.15, 0.85)];
    let mut misses = 0;
    while pts.len() < n {
        if misses == 200 {
            // boxed in by earlier strokes; start the word over
            pts = vec![uniform_in(r, 0.15, 0.85)];
            misses = 0;
        }
        misses += 1;
        let last = *pts.last().unwrap();
        let ang: f64 = r.random_range(0.0..std::f64::consts::TAU);
        let len: f64 = r.random_range(0.22..0.4);
        let p = [last[0] + len * ang.cos(), last[1] + len * ang.sin()];
        let inside = p.iter().all(|&c| (0.12..=0.88).contains(&c));
        // keep strokes from revisiting earlier waypoints
        let clear = pts.iter().all(|&q| dist(q, p) > 0.18);
        if inside && clear {
            pts.push(p);
            misses = 0;
        }
    }
    pts
}

/// Word `index` of the fixed in-domain library for a length class.
pub fn library_word(cfg: &EnvConfig, class: LengthClass, index: usize) -> Vec<Vec2> {
    let tag = (class.waypoints() as u64) << 32 | (index % LIBRARY_SIZE) as u64;
    let mut r = rng::stream(rng::derive(cfg.library_seed, tag));
    sample_word(&mut r, class.waypoints())
}

fn sample_trace(cfg: &EnvConfig, r: &mut ChaCha8Rng) -> (WorldState, GoalSpec) {
    let class = cfg
        .length_class
        .unwrap_or_else(|| LengthClass::ALL[r.random_range(0..3)]);
    let word = if cfg.ood.fresh_patterns {
        // fresh draws are kept out of the library index space by the stream
        let mut fresh = rng::stream(rng::derive(r.random(), 0x00f5_e5f5));
        sample_word(&mut fresh, class.waypoints())
    } else {
        library_word(cfg, class, r.random_range(0..LIBRARY_SIZE))
    };
    let agent = word[0];
    let start = WorldState {
        agent,
        blocks: Vec::new(),
        carrying: None,
        trail: vec![agent],
    };
    let proto = GoalSpec {
        state: start.clone(),
        image: Tensor::zeros(&[1]),
        waypoints: word,
        targets: Vec::new(),
        length_class: Some(class),
    };
    (start, proto)
}

fn run_expert_to_goal(start: &WorldState, proto: &GoalSpec, cfg: &EnvConfig) -> Option<WorldState> {
    let mut s = start.clone();
    for _ in 0..cfg.t_max {
        if expert_done(&s, proto, cfg) {
            return Some(s);
        }
        let a = scripted_expert(&s, proto, cfg);
        s = step(&s, &a, cfg);
    }
    expert_done(&s, proto, cfg).then_some(s)
}

fn expert_done(s: &WorldState, g: &GoalSpec, cfg: &EnvConfig) -> bool {
    match cfg.task {
        Task::Push => {
            s.carrying.is_none()
                && g.targets
                    .iter()
                    .all(|&i| dist(s.blocks[i], g.state.blocks[i]) <= 1e-9)
        }
        Task::Trace => waypoint_progress(s, g, cfg) == g.waypoints.len(),
    }
}

/// Applies gripper intent, then motion. Deterministic and total.
pub fn step(s: &WorldState, a: &Action, cfg: &EnvConfig) -> WorldState {
    let a = a.clipped(cfg.a_max);
    let mut next = s.clone();
    match (a.grip, next.carrying) {
        (true, None) => {
            next.carrying = next
                .blocks
                .iter()
                .enumerate()
                .map(|(i, &b)| (i, dist(b, next.agent)))
                .filter(|&(_, d)| d <= cfg.contact_radius)
                .min_by(|x, y| x.1.total_cmp(&y.1))
                .map(|(i, _)| i);
        }
        (false, Some(_)) => next.carrying = None,
        _ => {}
    }
    let old = next.agent;
    next.agent = clamp_unit([old[0] + a.delta[0], old[1] + a.delta[1]]);
    if let Some(i) = next.carrying {
        let moved = [next.agent[0] - old[0], next.agent[1] - old[1]];
        let b = next.blocks[i];
        next.blocks[i] = clamp_unit([b[0] + moved[0], b[1] + moved[1]]);
    }
    if cfg.task == Task::Trace {
        next.trail.push(next.agent);
    }
    next
}

/// Disc coverage of a pixel centre at distance `d` from a disc of radius
/// `radius`, with a one-pixel linear ramp.
fn coverage(d: f64, radius: f64, px: f64) -> f64 {
    (0.5 + (radius - d) / px).clamp(0.0, 1.0)
}

fn seg_dist(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    };
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

/// Grayscale `G × G` rendering; row index is `y`, column index is `x`.
pub fn render(s: &WorldState, cfg: &EnvConfig) -> Tensor {
    let g = cfg.resolution;
    let px = 1.0 / g as f64;
    let mut img = vec![0.0; g * g];
    let square = cfg.ood.novel_shape;
    for row in 0..g {
        for col in 0..g {
            let c = [(col as f64 + 0.5) * px, (row as f64 + 0.5) * px];
            let mut v: f64 = 0.0;
            if cfg.task == Task::Trace {
                for w in s.trail.windows(2) {
                    let cov = coverage(seg_dist(c, w[0], w[1]), TRAIL_HALF_WIDTH, px);
                    v = v.max(TRAIL_INTENSITY * cov);
                }
            }
            for &b in &s.blocks {
                let d = if square {
                    (c[0] - b[0]).abs().max((c[1] - b[1]).abs())
                } else {
                    dist(c, b)
                };
                v = v.max(BLOCK_INTENSITY * coverage(d, BLOCK_RADIUS, px));
            }
            v = v.max(AGENT_INTENSITY * coverage(dist(c, s.agent), AGENT_RADIUS, px));
            img[row * g + col] = v;
        }
    }
    Tensor::matrix(g, g, img).expect("square image")
}

/// Count of word waypoints visited in order along the trail.
pub fn waypoint_progress(s: &WorldState, g: &GoalSpec, cfg: &EnvConfig) -> usize {
    let mut k = 0;
    for &p in &s.trail {
        while k < g.waypoints.len() && dist(p, g.waypoints[k]) <= cfg.success_eps {
            k += 1;
        }
    }
    k
}

pub fn success(s: &WorldState, g: &GoalSpec, cfg: &EnvConfig) -> bool {
    match cfg.task {
        Task::Push => g
            .targets
            .iter()
            .all(|&i| dist(s.blocks[i], g.state.blocks[i]) <= cfg.success_eps),
        Task::Trace => waypoint_progress(s, g, cfg) == g.waypoints.len(),
    }
}

/// Motion toward `target`, scaled so neither axis exceeds `a_max`.
fn toward(from: Vec2, target: Vec2, a_max: f64) -> Vec2 {
    let d = [target[0] - from[0], target[1] - from[1]];
    let m = d[0].abs().max(d[1].abs());
    if m <= a_max {
        d
    } else {
        [d[0] * a_max / m, d[1] * a_max / m]
    }
}

/// Proportional controller toward the current sub-goal.
pub fn scripted_expert(s: &WorldState, g: &GoalSpec, cfg: &EnvConfig) -> Action {
    match cfg.task {
        Task::Push => {
            if let Some(i) = s.carrying {
                let to = g.state.blocks[i];
                if dist(s.blocks[i], to) <= 1e-9 {
                    return Action::stay(false);
                }
                let off = [s.agent[0] - s.blocks[i][0], s.agent[1] - s.blocks[i][1]];
                let target = [to[0] + off[0], to[1] + off[1]];
                return Action {
                    delta: toward(s.agent, target, cfg.a_max),
                    grip: true,
                };
            }
            let pending = g
                .targets
                .iter()
                .copied()
                .find(|&i| dist(s.blocks[i], g.state.blocks[i]) > 1e-9);
            match pending {
                None => Action::stay(false),
                Some(i) if dist(s.agent, s.blocks[i]) <= 1e-9 => Action {
                    delta: toward(s.agent, g.state.blocks[i], cfg.a_max),
                    grip: true,
                },
                Some(i) => Action {
                    delta: toward(s.agent, s.blocks[i], cfg.a_max),
                    grip: false,
                },
            }
        }
        Task::Trace => {
            let k = waypoint_progress(s, g, cfg);
            match g.waypoints.get(k) {
                Some(&wp) => Action {
                    delta: toward(s.agent, wp, cfg.a_max),
                    grip: false,
                },
                None => Action::stay(false),
            }
        }
    }
}

/// Teleports one block by a seeded offset in `[−b, b]²` and drops it if held.
pub fn inject_disturbance(s: &WorldState, cfg: &EnvConfig, seed: u64) -> WorldState {
    let mut next = s.clone();
    if next.blocks.is_empty() || cfg.disturbance == 0.0 {
        return next;
    }
    let mut r = rng::stream(seed);
    let i = r.random_range(0..next.blocks.len());
    let b = cfg.disturbance;
    let off = [r.random_range(-b..=b), r.random_range(-b..=b)];
    let p = next.blocks[i];
    next.blocks[i] = clamp_unit([p[0] + off[0], p[1] + off[1]]);
    if next.carrying == Some(i) {
        next.carrying = None;
    }
    next
}

/// Closed-loop expert rollout from a reset; returns visited states and actions.
pub fn expert_rollout(
    start: &WorldState,
    goal: &GoalSpec,
    cfg: &EnvConfig,
) -> (Vec<WorldState>, Vec<Action>) {
    let mut states = vec![start.clone()];
    let mut actions = Vec::new();
    let mut s = start.clone();
    for _ in 0..cfg.t_max {
        if expert_done(&s, goal, cfg) {
            break;
        }
        let a = scripted_expert(&s, goal, cfg);
        s = step(&s, &a, cfg);
        states.push(s.clone());
        actions.push(a);
    }
    (states, actions)
}
