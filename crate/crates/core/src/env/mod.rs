//! Deterministic gridworld navigation: task generation, stepping and
//! egocentric observations.

mod grid;
mod observation;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::EpisodeResult;

pub use grid::{Cell, GridSpec, MapFixture};
pub use observation::{observation_dim, render_observation, Observation, CH_OOB, CH_WALL};

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("invalid grid: {0}")]
    InvalidSpec(String),
    #[error("task generation failed after {0} attempts")]
    GenerationFailed(usize),
    #[error("invalid start pose {0:?}")]
    InvalidStart(AgentPose),
    #[error("goal unreachable from start")]
    Unreachable,
    #[error("step after the episode finished")]
    EpisodeDone,
    #[error("action id {0} out of range")]
    BadAction(usize),
    #[error("map line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    /// Unit step in grid coordinates (`y` grows southwards).
    pub fn delta(self) -> (i32, i32) {
        match self {
            Heading::North => (0, -1),
            Heading::East => (1, 0),
            Heading::South => (0, 1),
            Heading::West => (-1, 0),
        }
    }

    pub fn right(self) -> Heading {
        Heading::ALL[(self as usize + 1) % 4]
    }

    pub fn left(self) -> Heading {
        Heading::ALL[(self as usize + 3) % 4]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    MoveAhead = 0,
    RotateLeft = 1,
    RotateRight = 2,
    /// Stop for ObjectNav, Done for PointNav.
    Stop = 3,
}

pub const NUM_ACTIONS: usize = 4;

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [Action::MoveAhead, Action::RotateLeft, Action::RotateRight, Action::Stop];

    pub fn id(self) -> usize {
        self as usize
    }
}

impl TryFrom<usize> for Action {
    type Error = EnvError;

    fn try_from(v: usize) -> Result<Self, EnvError> {
        Action::ALL.get(v).copied().ok_or(EnvError::BadAction(v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentPose {
    pub cell: Cell,
    pub heading: Heading,
}

impl AgentPose {
    pub fn new(x: i32, y: i32, heading: Heading) -> Self {
        AgentPose { cell: Cell::new(x, y), heading }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    ObjectNav,
    PointNav,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Goal {
    Object(u8),
    Point(Cell),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub goal: Goal,
    pub start: AgentPose,
    pub max_steps: usize,
}

impl TaskInstance {
    pub fn kind(&self) -> TaskKind {
        match self.goal {
            Goal::Object(_) => TaskKind::ObjectNav,
            Goal::Point(_) => TaskKind::PointNav,
        }
    }

    /// Index into the objective vocabulary: the category for ObjectNav, 0 for
    /// PointNav.
    pub fn objective_id(&self) -> usize {
        match self.goal {
            Goal::Object(c) => c as usize,
            Goal::Point(_) => 0,
        }
    }

    /// Cells where a Stop/Done succeeds.
    pub fn success_region(&self, spec: &GridSpec) -> Result<Vec<Cell>, EnvError> {
        match self.goal {
            Goal::Point(c) => Ok(vec![c]),
            Goal::Object(cat) => {
                let o = spec
                    .object(cat)
                    .ok_or_else(|| EnvError::InvalidSpec(format!("object {cat} not placed")))?;
                let mut cells = Vec::with_capacity(9);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let c = Cell::new(o.x + dx, o.y + dy);
                        if spec.is_free(c) {
                            cells.push(c);
                        }
                    }
                }
                Ok(cells)
            }
        }
    }
}

/// Objective vocabulary size for a task family.
pub fn objective_vocab(kind: TaskKind, num_categories: usize) -> usize {
    match kind {
        TaskKind::ObjectNav => num_categories,
        TaskKind::PointNav => 1,
    }
}

/// BFS cell-move distance, `None` when unreachable or either cell is blocked.
pub fn shortest_path_length(spec: &GridSpec, from: Cell, to: Cell) -> Option<u32> {
    if !spec.is_free(from) || !spec.is_free(to) {
        return None;
    }
    let d = spec.distance_field(&[to])[spec.index(from)];
    (d != u32::MAX).then_some(d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub kind: TaskKind,
    pub width: usize,
    pub height: usize,
    pub wall_density: f64,
    pub num_categories: usize,
    pub max_steps: usize,
    pub max_retries: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            kind: TaskKind::PointNav,
            width: 8,
            height: 8,
            wall_density: 0.15,
            num_categories: 4,
            max_steps: 128,
            max_retries: 100,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::InvalidConfig(m));
        if self.width < 4 || self.height < 4 {
            return bad(format!("grid {}x{} smaller than 4x4", self.width, self.height));
        }
        if !(0.0..0.4).contains(&self.wall_density) {
            return bad(format!("wall density {} outside [0, 0.4)", self.wall_density));
        }
        if self.num_categories == 0 || self.num_categories > 10 {
            return bad(format!("object categories {} outside 1..=10", self.num_categories));
        }
        if self.max_steps == 0 {
            return bad("max_steps is 0".into());
        }
        if self.max_retries == 0 {
            return bad("max_retries is 0".into());
        }
        Ok(())
    }
}

/// Samples a layout and a reachable, non-trivial task. Deterministic in
/// `seed`; layouts with an unreachable goal are rejected and redrawn.
pub fn sample_task(cfg: &GeneratorConfig, seed: u64) -> Result<(GridSpec, TaskInstance), EnvError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.width * cfg.height;
    let n_walls = (cfg.wall_density * n as f64).round() as usize;
    for _ in 0..cfg.max_retries {
        let mut spec = GridSpec::empty(cfg.width, cfg.height, cfg.num_categories);
        for i in rand::seq::index::sample(&mut rng, n, n_walls) {
            spec.set_wall(spec.cell_at(i), true)?;
        }
        let mut free = spec.free_cells();
        if free.len() < cfg.num_categories + 2 {
            continue;
        }
        free.shuffle(&mut rng);
        for (cat, &cell) in free.iter().take(cfg.num_categories).enumerate() {
            spec.place_object(cat as u8, cell)?;
        }
        let start_cell = free[rng.gen_range(0..free.len())];
        let heading = Heading::ALL[rng.gen_range(0..4)];
        let goal = match cfg.kind {
            TaskKind::ObjectNav => Goal::Object(rng.gen_range(0..cfg.num_categories) as u8),
            TaskKind::PointNav => Goal::Point(free[rng.gen_range(0..free.len())]),
        };
        let task = TaskInstance { goal, start: AgentPose { cell: start_cell, heading }, max_steps: cfg.max_steps };
        let region = task.success_region(&spec)?;
        let d = spec.distance_field(&region)[spec.index(start_cell)];
        if d == 0 || d == u32::MAX || d as usize > cfg.max_steps {
            continue;
        }
        return Ok((spec, task));
    }
    Err(EnvError::GenerationFailed(cfg.max_retries))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub success: f64,
    pub step: f64,
    pub shaping: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { success: 10.0, step: -0.01, shaping: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Side of the egocentric window; odd, 3 to 9.
    pub window: usize,
    pub reward: RewardConfig,
    /// ObjectNav success additionally needs the object not behind the agent.
    pub require_visibility: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig { window: 5, reward: RewardConfig::default(), require_visibility: false }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(3..=9).contains(&self.window) || self.window.is_multiple_of(2) {
            return Err(EnvError::InvalidConfig(format!("window {} not odd in 3..=9", self.window)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    /// Geodesic distance to the success region after the step.
    pub distance: u32,
}

/// One running episode.
#[derive(Clone, Debug)]
pub struct EnvState {
    spec: Arc<GridSpec>,
    task: TaskInstance,
    cfg: EnvConfig,
    dist: Arc<Vec<u32>>,
    pose: AgentPose,
    steps: usize,
    moves: u32,
    initial_dist: u32,
    min_dist: u32,
    done: bool,
    success: bool,
}

impl EnvState {
    /// Places the agent at the task's start pose.
    pub fn reset(spec: Arc<GridSpec>, task: TaskInstance, cfg: EnvConfig) -> Result<(EnvState, Observation), EnvError> {
        cfg.validate()?;
        if !spec.is_free(task.start.cell) {
            return Err(EnvError::InvalidStart(task.start));
        }
        if let Goal::Point(c) = task.goal {
            if !spec.is_free(c) {
                return Err(EnvError::InvalidSpec(format!("goal {c:?} is not free")));
            }
        }
        let region = task.success_region(&spec)?;
        let dist = spec.distance_field(&region);
        let d0 = dist[spec.index(task.start.cell)];
        if d0 == u32::MAX {
            return Err(EnvError::Unreachable);
        }
        let state = EnvState {
            pose: task.start,
            spec,
            task,
            cfg,
            dist: Arc::new(dist),
            steps: 0,
            moves: 0,
            initial_dist: d0,
            min_dist: d0,
            done: false,
            success: false,
        };
        let obs = state.observation();
        Ok((state, obs))
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let before = self.distance();
        let mut stop = false;
        match action {
            Action::MoveAhead => {
                let (dx, dy) = self.pose.heading.delta();
                let next = Cell::new(self.pose.cell.x + dx, self.pose.cell.y + dy);
                if self.spec.is_free(next) {
                    self.pose.cell = next;
                    self.moves += 1;
                }
            }
            Action::RotateLeft => self.pose.heading = self.pose.heading.left(),
            Action::RotateRight => self.pose.heading = self.pose.heading.right(),
            Action::Stop => stop = true,
        }
        self.steps += 1;
        let after = self.distance();
        self.min_dist = self.min_dist.min(after);
        let r = &self.cfg.reward;
        let mut reward = r.step + r.shaping * (before as f64 - after as f64);
        if stop {
            self.done = true;
            self.success = self.success_predicate();
            if self.success {
                reward += r.success;
            }
        }
        if self.steps >= self.task.max_steps {
            self.done = true;
        }
        Ok(StepResult {
            observation: self.observation(),
            reward,
            done: self.done,
            success: self.success,
            distance: after,
        })
    }

    fn success_predicate(&self) -> bool {
        if self.distance() != 0 {
            return false;
        }
        match self.task.goal {
            Goal::Object(cat) if self.cfg.require_visibility => {
                let o = self.spec.object(cat).expect("checked at reset");
                let (dx, dy) = self.pose.heading.delta();
                (o.x - self.pose.cell.x) * dx + (o.y - self.pose.cell.y) * dy >= 0
            }
            _ => true,
        }
    }

    pub fn observation(&self) -> Observation {
        render_observation(&self.spec, &self.pose, &self.task, self.cfg.window)
    }

    pub fn distance(&self) -> u32 {
        self.dist[self.spec.index(self.pose.cell)]
    }

    pub fn pose(&self) -> AgentPose {
        self.pose
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn spec(&self) -> &Arc<GridSpec> {
        &self.spec
    }

    pub fn task(&self) -> &TaskInstance {
        &self.task
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    /// Summary of the episode so far, for the metrics module.
    pub fn result(&self) -> EpisodeResult {
        EpisodeResult {
            success: self.success,
            path_length: self.moves,
            shortest_length: self.initial_dist,
            final_distance: self.distance(),
            min_distance: self.min_dist,
        }
    }
}
