use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{
    objective_vocab, observation_dim, sample_task, Action, EnvConfig, EnvState, GeneratorConfig, GridSpec, TaskInstance,
};
use crate::metrics::EpisodeResult;

use super::RlError;

/// What the policy sees at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvObs {
    pub features: Vec<f64>,
    pub goal: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    /// Observation after the step; meaningless when `done`.
    pub obs: EnvObs,
    pub reward: f64,
    pub done: bool,
    /// Navigation summary of a finished episode, when the environment has one.
    pub episode: Option<EpisodeResult>,
}

/// Episodic environment driven by the PPO trainer.
pub trait Environment {
    fn obs_dim(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn num_goals(&self) -> usize;
    /// Longest possible episode.
    fn max_steps(&self) -> usize;
    /// Starts a new episode.
    fn reset(&mut self) -> Result<EnvObs, RlError>;
    fn step(&mut self, action: usize) -> Result<Transition, RlError>;
}

/// Seeds of held-out evaluation tasks have the top bit set; training
/// tasks never do.
pub fn eval_task_seed(i: u64) -> u64 {
    (1 << 63) | i
}

pub fn train_task_seed(raw: u64) -> u64 {
    raw >> 1
}

/// The fixed held-out task list.
pub fn heldout_tasks(gen: &GeneratorConfig, count: usize) -> Result<Vec<(Arc<GridSpec>, TaskInstance)>, RlError> {
    (0..count as u64)
        .map(|i| {
            let (spec, task) = sample_task(gen, eval_task_seed(i))?;
            Ok((Arc::new(spec), task))
        })
        .collect()
}

/// Gridworld navigation with a fresh procedurally generated task per
/// episode.
pub struct NavEnv {
    gen: GeneratorConfig,
    cfg: EnvConfig,
    rng: ChaCha8Rng,
    state: Option<EnvState>,
}

impl NavEnv {
    pub fn new(gen: GeneratorConfig, cfg: EnvConfig, seed: u64) -> Result<NavEnv, RlError> {
        gen.validate()?;
        cfg.validate()?;
        Ok(NavEnv { gen, cfg, rng: ChaCha8Rng::seed_from_u64(seed), state: None })
    }

    pub fn state(&self) -> Option<&EnvState> {
        self.state.as_ref()
    }

    fn obs_of(state: &EnvState, features: Vec<f64>) -> EnvObs {
        EnvObs { features, goal: state.task().objective_id() }
    }
}

impl Environment for NavEnv {
    fn obs_dim(&self) -> usize {
        observation_dim(self.gen.kind, self.cfg.window, self.gen.num_categories)
    }

    fn num_actions(&self) -> usize {
        crate::env::NUM_ACTIONS
    }

    fn num_goals(&self) -> usize {
        objective_vocab(self.gen.kind, self.gen.num_categories)
    }

    fn max_steps(&self) -> usize {
        self.gen.max_steps
    }

    fn reset(&mut self) -> Result<EnvObs, RlError> {
        let seed = train_task_seed(self.rng.next_u64());
        let (spec, task) = sample_task(&self.gen, seed)?;
        let (state, obs) = EnvState::reset(Arc::new(spec), task, self.cfg.clone())?;
        let o = Self::obs_of(&state, obs.features());
        self.state = Some(state);
        Ok(o)
    }

    fn step(&mut self, action: usize) -> Result<Transition, RlError> {
        let state = self.state.as_mut().ok_or_else(|| RlError::Config("step before reset".into()))?;
        let r = state.step(Action::try_from(action)?)?;
        Ok(Transition {
            obs: EnvObs { features: r.observation.features(), goal: state.task().objective_id() },
            reward: r.reward,
            done: r.done,
            episode: r.done.then(|| state.result()),
        })
    }
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Five states in a row; action 1 moves right, action 0 left (clamped).
/// Reaching the last state pays 1 and ends the episode, so always moving
/// right is optimal under any discount below 1.
pub struct ChainEnv {
    pos: usize,
    steps: usize,
}

impl ChainEnv {
    pub const STATES: usize = 5;
    pub const MAX_STEPS: usize = 20;

    pub fn new() -> Self {
        ChainEnv { pos: 0, steps: 0 }
    }
}

impl Default for ChainEnv {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for ChainEnv {
    fn obs_dim(&self) -> usize {
        Self::STATES
    }

    fn num_actions(&self) -> usize {
        2
    }

    fn num_goals(&self) -> usize {
        1
    }

    fn max_steps(&self) -> usize {
        Self::MAX_STEPS
    }

    fn reset(&mut self) -> Result<EnvObs, RlError> {
        self.pos = 0;
        self.steps = 0;
        Ok(EnvObs { features: one_hot(Self::STATES, 0), goal: 0 })
    }

    fn step(&mut self, action: usize) -> Result<Transition, RlError> {
        match action {
            0 => self.pos = self.pos.saturating_sub(1),
            1 => self.pos += 1,
            a => return Err(RlError::Config(format!("chain action {a}"))),
        }
        self.steps += 1;
        let goal = self.pos == Self::STATES - 1;
        Ok(Transition {
            obs: EnvObs { features: one_hot(Self::STATES, self.pos.min(Self::STATES - 1)), goal: 0 },
            reward: if goal { 1.0 } else { 0.0 },
            done: goal || self.steps >= Self::MAX_STEPS,
            episode: None,
        })
    }
}

/// Two contexts, two arms, one step per episode; the arm matching the
/// context pays 1.
pub struct BanditEnv {
    rng: ChaCha8Rng,
    context: usize,
}

impl BanditEnv {
    pub fn new(seed: u64) -> Self {
        BanditEnv { rng: ChaCha8Rng::seed_from_u64(seed), context: 0 }
    }

    pub fn context(&self) -> usize {
        self.context
    }
}

impl Environment for BanditEnv {
    fn obs_dim(&self) -> usize {
        2
    }

    fn num_actions(&self) -> usize {
        2
    }

    fn num_goals(&self) -> usize {
        1
    }

    fn max_steps(&self) -> usize {
        1
    }

    fn reset(&mut self) -> Result<EnvObs, RlError> {
        self.context = self.rng.gen_range(0..2);
        Ok(EnvObs { features: one_hot(2, self.context), goal: 0 })
    }

    fn step(&mut self, action: usize) -> Result<Transition, RlError> {
        if action >= 2 {
            return Err(RlError::Config(format!("bandit arm {action}")));
        }
        Ok(Transition {
            obs: EnvObs { features: one_hot(2, self.context), goal: 0 },
            reward: if action == self.context { 1.0 } else { 0.0 },
            done: true,
            episode: None,
        })
    }
}
