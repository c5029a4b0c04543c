use rand_chacha::ChaCha8Rng;

use crate::metrics::EpisodeResult;
use crate::model::{Memory, NavModel, Segment};
use numcore::ParamStore;

use super::agent::sample_categorical;
use super::envs::{EnvObs, Environment};
use super::RlError;

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub obs: Vec<f64>,
    pub goal: usize,
    pub action: usize,
    /// Log-probability of `action` under the sampling-time parameters.
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
    /// Per-environment episode counter.
    pub episode: u64,
    /// Step index within the episode.
    pub timestep: usize,
}

/// One environment's share of a rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvRollout {
    /// Earlier steps of the episode that was running when the rollout began;
    /// they are model context only.
    pub context_obs: Vec<f64>,
    pub context_actions: Vec<usize>,
    pub steps: Vec<StepRecord>,
    /// Value of the observation following the last step (0 after a done).
    pub bootstrap_value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBuffer {
    pub envs: Vec<EnvRollout>,
    pub finished: Vec<EpisodeResult>,
    pub episodes_finished: usize,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.envs.iter().map(|e| e.steps.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Splits every environment's steps into per-episode segments. Returns
    /// each segment with the flat step index (environment-major) of every
    /// loss row, i.e. steps `loss_from..`.
    pub fn segments(&self, obs_dim: usize) -> Vec<(Segment, Vec<usize>)> {
        let mut out = Vec::new();
        let mut flat = 0;
        for e in &self.envs {
            let mut i = 0;
            let mut first = true;
            while i < e.steps.len() {
                let mut j = i;
                while j < e.steps.len() && !e.steps[j].done {
                    j += 1;
                }
                let end = (j + 1).min(e.steps.len());
                let (mut obs, mut actions) = if first {
                    (e.context_obs.clone(), e.context_actions.clone())
                } else {
                    (Vec::new(), Vec::new())
                };
                let loss_from = actions.len();
                for s in &e.steps[i..end] {
                    obs.extend_from_slice(&s.obs);
                    actions.push(s.action);
                }
                let steps = obs.len() / obs_dim;
                let rows = (flat + i..flat + end).collect();
                out.push((Segment { goal: e.steps[i].goal, steps, obs, actions, loss_from }, rows));
                first = false;
                i = end;
            }
            flat += e.steps.len();
        }
        out
    }

    pub fn flat_steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.envs.iter().flat_map(|e| e.steps.iter())
    }
}

/// A running environment plus the policy memory of its current episode.
pub struct Worker<E> {
    pub env: E,
    obs: EnvObs,
    mem: Memory,
    prev: Option<usize>,
    hist_obs: Vec<f64>,
    hist_actions: Vec<usize>,
    episode: u64,
}

impl<E: Environment> Worker<E> {
    pub fn new(model: &NavModel, mut env: E) -> Result<Self, RlError> {
        let obs = env.reset()?;
        Ok(Worker {
            env,
            obs,
            mem: model.begin_episode(),
            prev: None,
            hist_obs: Vec::new(),
            hist_actions: Vec::new(),
            episode: 0,
        })
    }
}

/// Runs every worker for `horizon` steps, in worker order at each step,
/// sampling actions from the policy with the shared `rng`.
pub fn collect_rollouts<E: Environment>(
    model: &NavModel,
    store: &ParamStore,
    workers: &mut [Worker<E>],
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutBuffer, RlError> {
    let mut envs: Vec<EnvRollout> = workers
        .iter()
        .map(|w| EnvRollout {
            context_obs: w.hist_obs.clone(),
            context_actions: w.hist_actions.clone(),
            steps: Vec::with_capacity(horizon),
            bootstrap_value: 0.0,
        })
        .collect();
    let mut finished = Vec::new();
    let mut episodes_finished = 0;
    for _ in 0..horizon {
        for (w, roll) in workers.iter_mut().zip(envs.iter_mut()) {
            let timestep = w.mem.steps();
            let out = model.act(store, &mut w.mem, &w.obs.features, w.obs.goal, w.prev)?;
            let lp = out.log_probs();
            let action = sample_categorical(&lp, rng);
            let tr = w.env.step(action)?;
            roll.steps.push(StepRecord {
                obs: w.obs.features.clone(),
                goal: w.obs.goal,
                action,
                log_prob: lp[action],
                reward: tr.reward,
                value: out.value,
                done: tr.done,
                episode: w.episode,
                timestep,
            });
            if tr.done {
                episodes_finished += 1;
                finished.extend(tr.episode);
                w.obs = w.env.reset()?;
                w.mem = model.begin_episode();
                w.prev = None;
                w.hist_obs.clear();
                w.hist_actions.clear();
                w.episode += 1;
            } else {
                w.hist_obs.extend_from_slice(&w.obs.features);
                w.hist_actions.push(action);
                w.obs = tr.obs;
                w.prev = Some(action);
            }
        }
    }
    for (w, roll) in workers.iter().zip(envs.iter_mut()) {
        if roll.steps.last().is_some_and(|s| !s.done) {
            let mut mem = w.mem.clone();
            roll.bootstrap_value = model.act(store, &mut mem, &w.obs.features, w.obs.goal, w.prev)?.value;
        }
    }
    Ok(RolloutBuffer { envs, finished, episodes_finished })
}
