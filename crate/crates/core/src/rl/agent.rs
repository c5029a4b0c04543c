use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, AgentPose, EnvConfig, EnvState, GridSpec, Observation, TaskInstance};
use crate::metrics::{EpisodeResult, MetricsReport};
use crate::model::{Memory, NavModel};
use numcore::ParamStore;

use super::RlError;

/// Anything that can drive a gridworld episode.
pub trait Agent {
    fn begin(&mut self, state: &EnvState) -> Result<(), RlError>;
    fn act(&mut self, state: &EnvState, obs: &Observation) -> Result<Action, RlError>;
}

pub enum Decode {
    Greedy,
    Sample(Box<ChaCha8Rng>),
}

/// Inverse-CDF draw from a categorical given log-probabilities.
pub fn sample_categorical(log_probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

/// A model with read-only parameters.
pub struct ModelAgent<'a> {
    model: &'a NavModel,
    store: &'a ParamStore,
    decode: Decode,
    mem: Memory,
    prev: Option<usize>,
}

impl<'a> ModelAgent<'a> {
    pub fn new(model: &'a NavModel, store: &'a ParamStore, decode: Decode) -> Self {
        ModelAgent { model, store, decode, mem: model.begin_episode(), prev: None }
    }
}

impl Agent for ModelAgent<'_> {
    fn begin(&mut self, _state: &EnvState) -> Result<(), RlError> {
        self.mem = self.model.begin_episode();
        self.prev = None;
        Ok(())
    }

    fn act(&mut self, state: &EnvState, obs: &Observation) -> Result<Action, RlError> {
        let out = self.model.act(self.store, &mut self.mem, &obs.features(), state.task().objective_id(), self.prev)?;
        let a = match &mut self.decode {
            Decode::Greedy => out.greedy(),
            Decode::Sample(rng) => sample_categorical(&out.log_probs(), rng),
        };
        self.prev = Some(a);
        Ok(Action::try_from(a)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: usize,
    pub action: Action,
    /// Pose after the action.
    pub pose: AgentPose,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    pub start: AgentPose,
    pub steps: Vec<StepLog>,
    pub result: EpisodeResult,
}

pub fn run_episode(
    agent: &mut dyn Agent,
    spec: Arc<GridSpec>,
    task: TaskInstance,
    cfg: &EnvConfig,
) -> Result<EpisodeLog, RlError> {
    let (mut state, mut obs) = EnvState::reset(spec, task, cfg.clone())?;
    agent.begin(&state)?;
    let start = state.pose();
    let mut steps = Vec::new();
    while !state.is_done() {
        let action = agent.act(&state, &obs)?;
        let r = state.step(action)?;
        steps.push(StepLog { t: steps.len(), action, pose: state.pose(), reward: r.reward, done: r.done });
        obs = r.observation;
    }
    Ok(EpisodeLog { start, steps, result: state.result() })
}

/// Scores `agent` on a fixed task list, in order.
pub fn evaluate_agent(
    agent: &mut dyn Agent,
    tasks: &[(Arc<GridSpec>, TaskInstance)],
    cfg: &EnvConfig,
    osr_threshold: Option<u32>,
) -> Result<(MetricsReport, Vec<EpisodeResult>), RlError> {
    let mut results = Vec::with_capacity(tasks.len());
    for (spec, task) in tasks {
        results.push(run_episode(agent, spec.clone(), task.clone(), cfg)?.result);
    }
    Ok((MetricsReport::from_results(&results, osr_threshold)?, results))
}

/// Scores a model with greedy decoding (or sampling) on a fixed task list.
pub fn evaluate(
    model: &NavModel,
    store: &ParamStore,
    tasks: &[(Arc<GridSpec>, TaskInstance)],
    cfg: &EnvConfig,
    decode: Decode,
    osr_threshold: Option<u32>,
) -> Result<(MetricsReport, Vec<EpisodeResult>), RlError> {
    let mut agent = ModelAgent::new(model, store, decode);
    evaluate_agent(&mut agent, tasks, cfg, osr_threshold)
}
