//! Deterministic top-down tabletop world with a 4-dim pose `(x, y, z, g)`:
//! table coordinates, gripper height and gripper closure, all in `[0, 1]`.
//!
//! Blocks can be grasped, carried, released and pushed with a closed
//! gripper; buttons are pressed by lowering the gripper onto them; drawers
//! open by grasping the handle and pulling towards `-y`.

mod render;
#[cfg(test)]
mod tests;

pub use render::{render_depth, render_rgb, IMG_CHANNELS, IMG_SIZE};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const POSE_DIM: usize = 4;
/// Largest per-step gripper displacement.
pub const V_MAX: f64 = 0.08;
pub const GRASP_RADIUS: f64 = 0.03;
/// Gripper heights at or below this count as "down" for grasping.
pub const GRASP_HEIGHT: f64 = 0.1;
pub const PRESS_HEIGHT: f64 = 0.05;
pub const PRESS_RADIUS: f64 = 0.04;
/// Centre distance kept between a closed gripper and a pushed block.
pub const PUSH_RADIUS: f64 = 0.07;
pub const SUCCESS_TOL: f64 = 0.05;
pub const LIFT_HEIGHT: f64 = 0.5;
pub const DRAWER_TRAVEL: f64 = 0.2;
pub const DRAWER_OPEN: f64 = 0.15;
pub const BLOCK_HEIGHT: f64 = 0.1;
/// Expert episodes are cut off here.
pub const EXPERT_MAX_STEPS: usize = 60;

const MIN_SEPARATION: f64 = 0.16;
const SPAWN_LO: f64 = 0.15;
const SPAWN_HI: f64 = 0.85;
const CARRY_HEIGHT: f64 = 0.3;
const LOW: f64 = 0.04;
const PLACEMENT_TRIES: usize = 1000;
const PUSH_SUBSTEP: f64 = 0.01;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("could not place {0} objects without overlap")]
    Placement(usize),
    #[error("instruction id {0} outside vocabulary")]
    Instruction(usize),
    #[error("unknown task family {0:?}")]
    Family(String),
    #[error("task cannot be solved from this state: {0}")]
    Unreachable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.15, 0.1],
            Color::Green => [0.15, 0.75, 0.2],
            Color::Blue => [0.15, 0.25, 0.9],
            Color::Yellow => [0.95, 0.85, 0.1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Block,
    Button,
    Drawer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskFamily {
    Reach,
    Push,
    Pick,
    Place,
    PressButton,
    OpenDrawer,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 6] = [
        TaskFamily::Reach,
        TaskFamily::Push,
        TaskFamily::Pick,
        TaskFamily::Place,
        TaskFamily::PressButton,
        TaskFamily::OpenDrawer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::Reach => "reach",
            TaskFamily::Push => "push",
            TaskFamily::Pick => "pick",
            TaskFamily::Place => "place",
            TaskFamily::PressButton => "press-button",
            TaskFamily::OpenDrawer => "open-drawer",
        }
    }

    pub fn parse(s: &str) -> Result<Self, WorldError> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| WorldError::Family(s.to_string()))
    }

    fn uses_goal(self) -> bool {
        matches!(self, TaskFamily::Push | TaskFamily::Place)
    }
}

/// Number of templated instructions.
pub const VOCAB_SIZE: usize = 18;

/// All instruction strings; the index is the instruction id.
pub fn instructions() -> Vec<String> {
    let mut v = Vec::with_capacity(VOCAB_SIZE);
    for c in Color::ALL {
        v.push(format!("reach the {} block", c.name()));
    }
    for c in Color::ALL {
        v.push(format!("push the {} block to the goal", c.name()));
    }
    for c in Color::ALL {
        v.push(format!("pick {} block", c.name()));
    }
    for c in Color::ALL {
        v.push(format!("place the {} block on the goal", c.name()));
    }
    v.push("press the button".into());
    v.push("open the drawer".into());
    v
}

/// What to do and with which object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub color: Color,
    pub shape: Shape,
    pub instruction: usize,
    pub tol: f64,
}

impl TaskSpec {
    /// Block tasks take a color; button and drawer tasks ignore it.
    pub fn new(family: TaskFamily, color: Color) -> Self {
        let ci = Color::ALL.iter().position(|&c| c == color).expect("listed color");
        let (shape, instruction) = match family {
            TaskFamily::Reach => (Shape::Block, ci),
            TaskFamily::Push => (Shape::Block, 4 + ci),
            TaskFamily::Pick => (Shape::Block, 8 + ci),
            TaskFamily::Place => (Shape::Block, 12 + ci),
            TaskFamily::PressButton => (Shape::Button, 16),
            TaskFamily::OpenDrawer => (Shape::Drawer, 17),
        };
        let color = if shape == Shape::Block { color } else { Color::Red };
        Self {
            family,
            color,
            shape,
            instruction,
            tol: SUCCESS_TOL,
        }
    }

    pub fn from_instruction(id: usize) -> Result<Self, WorldError> {
        let fam = match id {
            0..=3 => TaskFamily::Reach,
            4..=7 => TaskFamily::Push,
            8..=11 => TaskFamily::Pick,
            12..=15 => TaskFamily::Place,
            16 => TaskFamily::PressButton,
            17 => TaskFamily::OpenDrawer,
            _ => return Err(WorldError::Instruction(id)),
        };
        Ok(Self::new(fam, Color::ALL[id % 4]))
    }

    pub fn text(&self) -> String {
        instructions()[self.instruction].clone()
    }

    /// Every instruction of one family.
    pub fn family_tasks(family: TaskFamily) -> Vec<TaskSpec> {
        match family {
            TaskFamily::PressButton | TaskFamily::OpenDrawer => vec![Self::new(family, Color::Red)],
            _ => Color::ALL.into_iter().map(|c| Self::new(family, c)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub pos: [f64; 2],
    pub held: bool,
    /// Button pressed.
    pub pressed: bool,
    /// Drawer handle position when closed.
    pub origin: [f64; 2],
}

impl Object {
    fn new(shape: Shape, color: Color, pos: [f64; 2]) -> Self {
        Self {
            shape,
            color,
            pos,
            held: false,
            pressed: false,
            origin: pos,
        }
    }

    fn graspable(&self) -> bool {
        matches!(self.shape, Shape::Block | Shape::Drawer)
    }

    pub fn drawer_opening(&self) -> f64 {
        self.origin[1] - self.pos[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    /// `(x, y, z, g)`
    pub pose: [f64; 4],
    pub objects: Vec<Object>,
    /// Index of the task's target in `objects`.
    pub target: usize,
    pub goal: Option<[f64; 2]>,
    pub task: TaskSpec,
    pub step: u32,
    pub seed: u64,
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Fresh episode: target object, distractors and (for push/place) a goal,
/// pairwise at least a fixed separation apart.
pub fn reset(seed: u64, task: &TaskSpec, n_distractors: usize) -> Result<EnvState, WorldError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_points = 1 + n_distractors + usize::from(task.family.uses_goal());
    let mut points: Vec<[f64; 2]> = Vec::with_capacity(n_points);
    let mut tries = 0;
    while points.len() < n_points {
        tries += 1;
        if tries > PLACEMENT_TRIES {
            return Err(WorldError::Placement(n_points));
        }
        let first = points.is_empty();
        let lo_y = if first && task.shape == Shape::Drawer {
            SPAWN_LO + DRAWER_TRAVEL
        } else {
            SPAWN_LO
        };
        let p = [rng.gen_range(SPAWN_LO..SPAWN_HI), rng.gen_range(lo_y..SPAWN_HI)];
        if points.iter().all(|&q| dist2(p, q) >= MIN_SEPARATION) {
            points.push(p);
        }
    }
    let mut objects = vec![Object::new(task.shape, task.color, points[0])];
    let others: Vec<Color> = Color::ALL
        .into_iter()
        .filter(|&c| task.shape != Shape::Block || c != task.color)
        .collect();
    for p in &points[1..1 + n_distractors] {
        let c = others[rng.gen_range(0..others.len())];
        objects.push(Object::new(Shape::Block, c, *p));
    }
    let goal = task.family.uses_goal().then(|| points[n_points - 1]);

    // gripper starts open, hovering, away from the target
    let mut pose;
    loop {
        pose = [
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.1..0.9),
            rng.gen_range(0.25..0.6),
            0.0,
        ];
        if dist2([pose[0], pose[1]], points[0]) >= 0.2 {
            break;
        }
    }
    Ok(EnvState {
        pose,
        objects,
        target: 0,
        goal,
        task: *task,
        step: 0,
        seed,
    })
}

impl EnvState {
    pub fn xy(&self) -> [f64; 2] {
        [self.pose[0], self.pose[1]]
    }

    pub fn held(&self) -> Option<usize> {
        self.objects.iter().position(|o| o.held)
    }

    pub fn target_object(&self) -> &Object {
        &self.objects[self.target]
    }

    /// Moves the gripper towards `target` by at most [`V_MAX`], then applies
    /// grasp/release, carrying, pushing and pressing.
    pub fn step(&mut self, target: [f64; 4]) {
        let mut t = [
            clamp01(target[0]),
            clamp01(target[1]),
            clamp01(target[2]),
            clamp01(target[3]),
        ];
        if let Some(h) = self.held() {
            let o = self.objects[h];
            if o.shape == Shape::Drawer {
                t[0] = o.origin[0];
                t[1] = t[1].clamp(o.origin[1] - DRAWER_TRAVEL, o.origin[1]);
            }
        }
        let d = [t[0] - self.pose[0], t[1] - self.pose[1], t[2] - self.pose[2]];
        let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let s = if len <= V_MAX { 1.0 } else { V_MAX / len };
        let start = self.pose;
        let closing = t[3] >= 0.5;
        let pushing = closing && self.held().is_none();
        // sub-steps so a fast gripper cannot tunnel through a block
        let n_sub = ((len * s) / PUSH_SUBSTEP).ceil().max(1.0) as usize;
        for k in 1..=n_sub {
            let f = s * k as f64 / n_sub as f64;
            for i in 0..3 {
                self.pose[i] = if k == n_sub && s == 1.0 {
                    t[i]
                } else {
                    clamp01(start[i] + d[i] * f)
                };
            }
            if pushing && self.pose[2] <= GRASP_HEIGHT {
                self.push_blocks();
            }
        }

        let was_closed = self.pose[3] >= 0.5;
        self.pose[3] = t[3];
        if !was_closed && closing && self.pose[2] <= GRASP_HEIGHT {
            let xy = self.xy();
            let best = self
                .objects
                .iter()
                .enumerate()
                .filter(|(_, o)| o.graspable() && dist2(o.pos, xy) <= GRASP_RADIUS)
                .min_by(|a, b| dist2(a.1.pos, xy).total_cmp(&dist2(b.1.pos, xy)))
                .map(|(i, _)| i);
            if let Some(i) = best {
                self.objects[i].held = true;
            }
        }
        if was_closed && !closing {
            for o in &mut self.objects {
                o.held = false;
            }
        }

        let xy = self.xy();
        for o in &mut self.objects {
            if o.held {
                o.pos = xy;
            }
            if o.shape == Shape::Button && self.pose[2] <= PRESS_HEIGHT && dist2(o.pos, xy) <= PRESS_RADIUS {
                o.pressed = true;
            }
        }
        self.step += 1;
    }
}

impl EnvState {
    /// Keeps every free block at least [`PUSH_RADIUS`] from a closed, lowered
    /// gripper by shoving it radially outwards.
    fn push_blocks(&mut self) {
        let xy = self.xy();
        for o in &mut self.objects {
            if o.held || o.shape != Shape::Block {
                continue;
            }
            let dd = dist2(o.pos, xy);
            if dd < PUSH_RADIUS {
                let (ux, uy) = if dd > 1e-9 {
                    ((o.pos[0] - xy[0]) / dd, (o.pos[1] - xy[1]) / dd)
                } else {
                    (1.0, 0.0)
                };
                o.pos = [
                    (xy[0] + ux * PUSH_RADIUS).clamp(0.02, 0.98),
                    (xy[1] + uy * PUSH_RADIUS).clamp(0.02, 0.98),
                ];
            }
        }
    }
}

/// Functional form of [`EnvState::step`].
pub fn step(state: &EnvState, target: [f64; 4]) -> EnvState {
    let mut s = state.clone();
    s.step(target);
    s
}

pub fn check_success(state: &EnvState) -> bool {
    let o = state.target_object();
    let tol = state.task.tol;
    match state.task.family {
        TaskFamily::Reach => dist2(state.xy(), o.pos) <= tol,
        TaskFamily::Push => state.goal.is_some_and(|g| dist2(o.pos, g) <= tol),
        TaskFamily::Pick => o.held && state.pose[2] >= LIFT_HEIGHT,
        TaskFamily::Place => !o.held && state.goal.is_some_and(|g| dist2(o.pos, g) <= tol),
        TaskFamily::PressButton => o.pressed,
        TaskFamily::OpenDrawer => o.drawer_opening() >= DRAWER_OPEN,
    }
}

/// Scripted waypoint policy. Returns the current pose once the task is
/// solved.
pub fn expert_action(state: &EnvState) -> Result<[f64; 4], WorldError> {
    if check_success(state) {
        return Ok(state.pose);
    }
    let o = *state.target_object();
    let xy = state.xy();
    let z = state.pose[2];
    let open = state.pose[3] < 0.5;
    let here = |p: [f64; 2]| dist2(xy, p) <= GRASP_RADIUS * 0.5;
    let goal = || {
        state
            .goal
            .ok_or_else(|| WorldError::Unreachable("task without goal".into()))
    };
    Ok(match state.task.family {
        TaskFamily::Reach => [o.pos[0], o.pos[1], z, 0.0],
        TaskFamily::Pick | TaskFamily::Place | TaskFamily::OpenDrawer => {
            if !o.held {
                if state.held().is_some() {
                    // holding the wrong thing: let go
                    return Ok([xy[0], xy[1], z, 0.0]);
                }
                if !open && !here(o.pos) {
                    return Ok([xy[0], xy[1], z, 0.0]);
                }
                if here(o.pos) && z <= GRASP_HEIGHT {
                    [o.pos[0], o.pos[1], z, 1.0]
                } else {
                    [o.pos[0], o.pos[1], LOW, 0.0]
                }
            } else {
                match state.task.family {
                    TaskFamily::Pick => [xy[0], xy[1], 0.6, 1.0],
                    TaskFamily::Place => {
                        let g = goal()?;
                        if here(g) {
                            if z <= GRASP_HEIGHT {
                                [g[0], g[1], z, 0.0]
                            } else {
                                [g[0], g[1], LOW, 1.0]
                            }
                        } else {
                            [g[0], g[1], CARRY_HEIGHT, 1.0]
                        }
                    }
                    _ => [o.origin[0], o.origin[1] - DRAWER_TRAVEL, z, 1.0],
                }
            }
        }
        TaskFamily::PressButton => {
            if here(o.pos) {
                [o.pos[0], o.pos[1], 0.0, 0.0]
            } else {
                [o.pos[0], o.pos[1], CARRY_HEIGHT.min(z.max(LOW)), 0.0]
            }
        }
        TaskFamily::Push => {
            let g = goal()?;
            let d = dist2(o.pos, g);
            let u = [(g[0] - o.pos[0]) / d, (g[1] - o.pos[1]) / d];
            let behind = [o.pos[0] - u[0] * 0.1, o.pos[1] - u[1] * 0.1];
            // offset of the gripper from the object along and across the push line
            let rel = [o.pos[0] - xy[0], o.pos[1] - xy[1]];
            let along = rel[0] * u[0] + rel[1] * u[1];
            let across = (rel[0] * u[1] - rel[1] * u[0]).abs();
            let low = z <= GRASP_HEIGHT;
            if low && !open && along > 0.03 && across < 0.02 {
                let end = [g[0] - u[0] * PUSH_RADIUS, g[1] - u[1] * PUSH_RADIUS];
                [end[0], end[1], LOW, 1.0]
            } else if here(behind) {
                [behind[0], behind[1], LOW, 1.0]
            } else if low {
                [xy[0], xy[1], CARRY_HEIGHT, 1.0]
            } else {
                [behind[0], behind[1], CARRY_HEIGHT, 1.0]
            }
        }
    })
}

/// Runs the expert from `state` until success or `max_steps`, returning
/// every visited state including the first.
pub fn expert_episode(mut state: EnvState, max_steps: usize) -> Result<(Vec<EnvState>, bool), WorldError> {
    let mut states = vec![state.clone()];
    while !check_success(&state) && states.len() <= max_steps {
        let a = expert_action(&state)?;
        state.step(a);
        states.push(state.clone());
    }
    let ok = check_success(&state);
    Ok((states, ok))
}
