use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{Action, AgentPose, EnvConfig, EnvState, GridSpec, TaskInstance};
use crate::metrics::EpisodeResult;
use crate::model::NavModel;
use crate::rl::{run_episode, Decode, ModelAgent};
use numcore::ParamStore;

use super::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub config_hash: String,
    pub seed: u64,
    /// Index into the held-out task list.
    pub task_index: usize,
    pub grid: GridSpec,
    pub task: TaskInstance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpStep {
    pub t: usize,
    pub action: Action,
    /// Pose after the action.
    pub pose: AgentPose,
    pub reward: f64,
    pub done: bool,
    /// Objective id given to the policy.
    pub goal: usize,
}

/// A greedy episode, step by step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDump {
    pub header: DumpHeader,
    pub steps: Vec<DumpStep>,
    pub result: EpisodeResult,
}

impl TrajectoryDump {
    pub fn to_json(&self) -> Result<String, HarnessError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Runs the policy greedily on the header's task and records every step.
pub fn dump_trajectory(
    model: &NavModel,
    store: &ParamStore,
    header: DumpHeader,
    env_cfg: &EnvConfig,
) -> Result<TrajectoryDump, HarnessError> {
    let mut agent = ModelAgent::new(model, store, Decode::Greedy);
    let goal = header.task.objective_id();
    let log = run_episode(&mut agent, Arc::new(header.grid.clone()), header.task.clone(), env_cfg)?;
    let steps = log
        .steps
        .into_iter()
        .map(|s| DumpStep { t: s.t, action: s.action, pose: s.pose, reward: s.reward, done: s.done, goal })
        .collect();
    Ok(TrajectoryDump { header, steps, result: log.result })
}

/// Feeds the recorded actions back through a fresh environment and returns
/// the pose after each one.
pub fn replay_dump(dump: &TrajectoryDump, env_cfg: &EnvConfig) -> Result<Vec<AgentPose>, HarnessError> {
    let (mut state, _) = EnvState::reset(Arc::new(dump.header.grid.clone()), dump.header.task.clone(), env_cfg.clone())?;
    let mut poses = Vec::with_capacity(dump.steps.len());
    for s in &dump.steps {
        state.step(s.action)?;
        poses.push(state.pose());
    }
    Ok(poses)
}
