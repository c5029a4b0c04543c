//! Behavior cloning from shortest-path demonstrations.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    render_observation, sample_task, Action, AgentPose, Cell, EnvConfig, EnvError, EnvState, GeneratorConfig, GridSpec,
    Heading, Observation, TaskInstance,
};
use crate::metrics::MetricsReport;
use crate::model::{NavModel, Segment};
use crate::rl::{evaluate, heldout_tasks, train_task_seed, Agent, Decode, RlError};
use numcore::{adam_step, lr_schedule, AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum IlError {
    #[error("expert: {0}")]
    Expert(String),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("dataset line {line}: {msg}")]
    Dataset { line: usize, msg: String },
    #[error("invalid supervised config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFinite { epoch: usize, detail: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Numeric(#[from] numcore::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A demonstration: the pose before every action, ending with Stop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertTrajectory {
    pub grid: GridSpec,
    pub task: TaskInstance,
    pub poses: Vec<AgentPose>,
    pub actions: Vec<Action>,
}

impl ExpertTrajectory {
    /// Observation before every action.
    pub fn observations(&self, window: usize) -> Vec<Observation> {
        self.poses.iter().map(|p| render_observation(&self.grid, p, &self.task, window)).collect()
    }

    pub fn moves(&self) -> usize {
        self.actions.iter().filter(|a| **a == Action::MoveAhead).count()
    }
}

fn heading_towards(from: Cell, to: Cell) -> Heading {
    match (to.x - from.x, to.y - from.y) {
        (0, -1) => Heading::North,
        (1, 0) => Heading::East,
        (0, 1) => Heading::South,
        _ => Heading::West,
    }
}

/// Rotations that turn `from` into `to`; a half turn is two right turns.
fn rotations(from: Heading, to: Heading) -> Vec<Action> {
    match (to as usize + 4 - from as usize) % 4 {
        0 => vec![],
        1 => vec![Action::RotateRight],
        2 => vec![Action::RotateRight, Action::RotateRight],
        _ => vec![Action::RotateLeft],
    }
}

/// Follows the BFS distance field downhill, preferring to keep the current
/// heading, otherwise neighbors in North, East, South, West order. Each move
/// is preceded by the rotations that face it; the episode ends with Stop.
pub fn expert_trajectory(spec: &GridSpec, task: &TaskInstance) -> Result<ExpertTrajectory, IlError> {
    let region = task.success_region(spec)?;
    let dist = spec.distance_field(&region);
    let mut pose = task.start;
    if !spec.is_free(pose.cell) || dist[spec.index(pose.cell)] == u32::MAX {
        return Err(IlError::Expert(format!("goal unreachable from {:?}", pose.cell)));
    }
    let mut poses = Vec::new();
    let mut actions = Vec::new();
    while dist[spec.index(pose.cell)] > 0 {
        let d = dist[spec.index(pose.cell)];
        let mut options = vec![pose.heading];
        options.extend(Heading::ALL.iter().copied().filter(|h| *h != pose.heading));
        let next = options
            .into_iter()
            .map(|h| {
                let (dx, dy) = h.delta();
                Cell::new(pose.cell.x + dx, pose.cell.y + dy)
            })
            .find(|c| spec.is_free(*c) && dist[spec.index(*c)] == d - 1)
            .ok_or_else(|| IlError::Expert("distance field has no descent".into()))?;
        for a in rotations(pose.heading, heading_towards(pose.cell, next)) {
            poses.push(pose);
            actions.push(a);
            pose.heading = if a == Action::RotateRight { pose.heading.right() } else { pose.heading.left() };
        }
        poses.push(pose);
        actions.push(Action::MoveAhead);
        pose.cell = next;
    }
    poses.push(pose);
    actions.push(Action::Stop);
    if actions.len() > task.max_steps {
        return Err(IlError::Expert(format!("{} actions exceed the {} step limit", actions.len(), task.max_steps)));
    }
    Ok(ExpertTrajectory { grid: spec.clone(), task: task.clone(), poses, actions })
}

/// Replays a fixed action list.
pub struct ScriptedAgent {
    actions: Vec<Action>,
    next: usize,
}

impl ScriptedAgent {
    pub fn new(actions: Vec<Action>) -> Self {
        ScriptedAgent { actions, next: 0 }
    }
}

impl Agent for ScriptedAgent {
    fn begin(&mut self, _state: &EnvState) -> Result<(), RlError> {
        self.next = 0;
        Ok(())
    }

    fn act(&mut self, _state: &EnvState, _obs: &Observation) -> Result<Action, RlError> {
        let a = self.actions.get(self.next).copied().unwrap_or(Action::Stop);
        self.next += 1;
        Ok(a)
    }
}

/// Follows a freshly computed expert path from the start of every episode.
pub struct ExpertAgent {
    inner: ScriptedAgent,
}

impl ExpertAgent {
    pub fn new() -> Self {
        ExpertAgent { inner: ScriptedAgent::new(Vec::new()) }
    }
}

impl Default for ExpertAgent {
    fn default() -> Self {
        Self::new()
    }
}

impl Agent for ExpertAgent {
    fn begin(&mut self, state: &EnvState) -> Result<(), RlError> {
        let t = expert_trajectory(state.spec(), state.task()).map_err(|e| RlError::Hook(e.to_string()))?;
        self.inner = ScriptedAgent::new(t.actions);
        Ok(())
    }

    fn act(&mut self, state: &EnvState, obs: &Observation) -> Result<Action, RlError> {
        self.inner.act(state, obs)
    }
}

/// Writes one JSON object per line.
pub fn write_dataset<W: Write>(mut w: W, trajectories: &[ExpertTrajectory]) -> Result<(), IlError> {
    for t in trajectories {
        serde_json::to_writer(&mut w, t).map_err(|e| IlError::Dataset { line: 0, msg: e.to_string() })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<ExpertTrajectory>, IlError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| IlError::Dataset { line: i + 1, msg: e.to_string() })?);
    }
    Ok(out)
}

/// Demonstrations for `count` training tasks drawn from `seed`.
pub fn generate_dataset(gen: &GeneratorConfig, count: usize, seed: u64) -> Result<Vec<ExpertTrajectory>, IlError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let (spec, task) = sample_task(gen, train_task_seed(rng.next_u64()))?;
            expert_trajectory(&spec, &task)
        })
        .collect()
}

/// Cross-entropy averaged within each sequence, then across sequences.
/// `logits` rows are the concatenated sequences of `lengths`.
pub fn bc_loss(g: &mut Graph, logits: Var, actions: &[usize], lengths: &[usize]) -> Result<Var, IlError> {
    let (n, _) = g.value(logits).rows_cols();
    let total: usize = lengths.iter().sum();
    if actions.len() != n || total != n || lengths.contains(&0) {
        return Err(IlError::Length(format!("{n} logit rows, {} actions, sequence lengths sum {total}", actions.len())));
    }
    let mut w = Vec::with_capacity(n);
    for &len in lengths {
        w.extend(std::iter::repeat_n(-1.0 / (len as f64 * lengths.len() as f64), len));
    }
    let lsm = g.log_softmax(logits)?;
    let picked = g.pick(lsm, actions)?;
    let w = g.constant(Tensor::vector(w)?);
    let weighted = g.mul(picked, w)?;
    Ok(g.sum(weighted)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: f64,
    pub train_tasks: usize,
    pub eval_tasks: usize,
    /// Task draws and minibatch shuffling.
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig { epochs: 20, batch_size: 16, lr: 1e-3, alpha: 1.0, train_tasks: 500, eval_tasks: 200, seed: 1 }
    }
}

/// Per-epoch log of a supervised run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedRow {
    pub epoch: usize,
    pub loss_bc: f64,
    pub loss_causal: Option<f64>,
    pub report: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct SupervisedRun {
    pub rows: Vec<SupervisedRow>,
    pub best_sr: f64,
    pub best_params: ParamStore,
}

impl SupervisedRun {
    pub fn final_report(&self) -> Option<&MetricsReport> {
        self.rows.last().map(|r| &r.report)
    }
}

pub fn trajectory_segment(t: &ExpertTrajectory, window: usize) -> Segment {
    let obs = t.observations(window);
    Segment {
        goal: t.task.objective_id(),
        steps: obs.len(),
        obs: obs.iter().flat_map(|o| o.features()).collect(),
        actions: t.actions.iter().map(|a| a.id()).collect(),
        loss_from: 0,
    }
}

/// `bc + α·causal` for a batch of demonstrations, plus the two terms.
pub fn supervised_loss(
    g: &mut Graph,
    model: &NavModel,
    store: &ParamStore,
    segments: &[Segment],
    alpha: f64,
) -> Result<(Var, Var, Option<Var>), IlError> {
    let trace = model.forward(g, store, segments)?;
    let actions: Vec<usize> = segments.iter().flat_map(|s| s.actions.iter().copied()).collect();
    let lengths: Vec<usize> = segments.iter().map(|s| s.steps).collect();
    let bc = bc_loss(g, trace.logits, &actions, &lengths)?;
    let mut total = bc;
    if let (Some(c), true) = (trace.causal_loss, alpha != 0.0) {
        let s = g.scale(c, alpha)?;
        total = g.add(bc, s)?;
    }
    Ok((total, bc, trace.causal_loss))
}

/// Epochs of shuffled minibatches over the demonstrations, with an
/// evaluation on held-out tasks after each epoch.
pub fn train_supervised(
    model: &NavModel,
    store: &mut ParamStore,
    gen: &GeneratorConfig,
    env_cfg: &EnvConfig,
    cfg: &SupervisedConfig,
    adam_cfg: AdamConfig,
) -> Result<SupervisedRun, IlError> {
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.train_tasks == 0 || cfg.eval_tasks == 0 {
        return Err(IlError::Config("epochs, batch_size, train_tasks and eval_tasks must be positive".into()));
    }
    if !(cfg.lr > 0.0) || !(cfg.alpha >= 0.0) {
        return Err(IlError::Config("lr must be positive and alpha nonnegative".into()));
    }
    let data = generate_dataset(gen, cfg.train_tasks, cfg.seed)?;
    let segments: Vec<Segment> = data.iter().map(|t| trajectory_segment(t, env_cfg.window)).collect();
    let tasks: Vec<(Arc<GridSpec>, TaskInstance)> = heldout_tasks(gen, cfg.eval_tasks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut adam = AdamState::new(store);
    let per_epoch = segments.len().div_ceil(cfg.batch_size);
    let total_steps = (per_epoch * cfg.epochs) as u64;
    let mut order: Vec<usize> = (0..segments.len()).collect();
    let mut run = SupervisedRun { rows: Vec::new(), best_sr: f64::NEG_INFINITY, best_params: store.clone() };
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut bc_sum, mut c_sum, mut has_c) = (0.0, 0.0, false);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Segment> = chunk.iter().map(|&i| segments[i].clone()).collect();
            let mut g = Graph::new();
            let (total, bc, causal) = supervised_loss(&mut g, model, store, &batch, cfg.alpha).map_err(|e| match e {
                IlError::Numeric(numcore::Error::NonFinite(d))
                | IlError::Model(crate::model::ModelError::Numeric(numcore::Error::NonFinite(d))) => {
                    IlError::NonFinite { epoch, detail: d }
                }
                other => other,
            })?;
            g.backward(total, store)?;
            adam_step(store, &mut adam, lr_schedule(step, total_steps, cfg.lr)?, adam_cfg)?;
            step += 1;
            bc_sum += g.item(bc)?;
            if let Some(c) = causal {
                c_sum += g.item(c)?;
                has_c = true;
            }
        }
        let (report, _) = evaluate(model, store, &tasks, env_cfg, Decode::Greedy, Some(0))?;
        log::info!("epoch {epoch} sr {:.3} ne {:?}", report.sr, report.ne);
        if report.sr > run.best_sr {
            run.best_sr = report.sr;
            run.best_params = store.clone();
        }
        run.rows.push(SupervisedRow {
            epoch,
            loss_bc: bc_sum / per_epoch as f64,
            loss_causal: has_c.then_some(c_sum / per_epoch as f64),
            report,
        });
    }
    Ok(run)
}
