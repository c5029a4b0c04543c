use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{EnvConfig, GeneratorConfig, RewardConfig, TaskKind};
use crate::il::SupervisedConfig;
use crate::model::{Backbone, CausalInput, ModelConfig, Positional};
use crate::rl::{AdamConfigSerde, PpoConfig};

use super::HarnessError;

/// Every tunable of an experiment as one flat table. Missing keys take the
/// defaults listed on each field; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Seed used when the command line gives none. Default 1.
    pub seed: u64,

    /// `pointnav` or `objectnav`. Default `pointnav`.
    pub task: TaskKind,
    /// Default 8.
    pub grid_width: usize,
    /// Default 8.
    pub grid_height: usize,
    /// Fraction of cells drawn as walls. Default 0.15.
    pub wall_density: f64,
    /// Object categories placed on every grid. Default 4.
    pub num_categories: usize,
    /// Episode step limit and model context length. Default 128.
    pub max_steps: usize,
    /// Task redraws before generation gives up. Default 100.
    pub max_retries: usize,
    /// Side of the egocentric window. Default 5.
    pub window: usize,
    /// Bonus for a successful Stop. Default 10.
    pub reward_success: f64,
    /// Added every step. Default -0.01.
    pub reward_step: f64,
    /// Multiplies the per-step decrease of geodesic distance. Default 0.5.
    pub reward_shaping: f64,
    /// ObjectNav success also needs the object not behind the agent. Default false.
    pub require_visibility: bool,

    /// Default 64.
    pub d_model: usize,
    /// Transformer layers. Default 1.
    pub layers: usize,
    /// Attention heads. Default 4.
    pub heads: usize,
    /// Default 128.
    pub ffn_dim: usize,
    /// `transformer`, `recurrent` or `feedforward`. Default `transformer`.
    pub backbone: Backbone,
    /// `learned` or `sinusoidal`. Default `learned`.
    pub positional: Positional,
    /// Default true.
    pub encoder_trainable: bool,
    /// Next-state prediction head and its loss. Default true.
    pub causal_module: bool,
    /// Stop gradients through the prediction target. Default true.
    pub causal_detach: bool,
    /// `pre` or `post` backbone features feed the prediction head. Default `pre`.
    pub causal_input: CausalInput,
    /// Default 1e-5.
    pub ln_eps: f64,

    /// Default 0.99.
    pub gamma: f64,
    /// Default 0.95.
    pub gae_lambda: f64,
    /// Default 0.2.
    pub clip: f64,
    /// Passes over each rollout. Default 4.
    pub ppo_epochs: usize,
    /// Default 4.
    pub minibatches: usize,
    /// Default 0.5.
    pub value_coef: f64,
    /// Default 0.01.
    pub entropy_coef: f64,
    /// Steps per environment per rollout. Default 128.
    pub horizon: usize,
    /// Parallel environments. Default 8.
    pub num_envs: usize,
    /// Environment step budget. Default 2000000.
    pub total_steps: u64,
    /// Environment steps between evaluations. Default 50000.
    pub eval_every: u64,
    /// Initial learning rate, decayed linearly to 0. Default 1e-4.
    pub lr: f64,
    /// Default 0.9.
    pub adam_beta1: f64,
    /// Default 0.999.
    pub adam_beta2: f64,
    /// Default 1e-8.
    pub adam_eps: f64,
    /// Weight of the next-state prediction loss. Default 1.
    pub alpha: f64,
    /// End training at the first evaluation with at least this SR. Default unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_at_sr: Option<f64>,

    /// Default 20.
    pub il_epochs: usize,
    /// Demonstrations per minibatch. Default 16.
    pub il_batch_size: usize,
    /// Default 1e-3.
    pub il_lr: f64,
    /// Demonstrations in the training set. Default 500.
    pub il_train_tasks: usize,

    /// Held-out tasks per evaluation. Default 200.
    pub eval_episodes: usize,
    /// Seeds of an ablation. Default 1 to 5.
    pub seeds: Vec<u64>,
    /// Variants of an ablation, in order. Default the five RL variants.
    pub variants: Vec<String>,
    /// Trailing moving-average window of learning curves. Default 1.
    pub curve_window: usize,
}

impl Default for Config {
    fn default() -> Self {
        let gen = GeneratorConfig::default();
        let env = EnvConfig::default();
        let model = ModelConfig::new(1, 1, 1);
        let ppo = PpoConfig::default();
        let il = SupervisedConfig::default();
        Config {
            seed: 1,
            task: gen.kind,
            grid_width: gen.width,
            grid_height: gen.height,
            wall_density: gen.wall_density,
            num_categories: gen.num_categories,
            max_steps: gen.max_steps,
            max_retries: gen.max_retries,
            window: env.window,
            reward_success: env.reward.success,
            reward_step: env.reward.step,
            reward_shaping: env.reward.shaping,
            require_visibility: env.require_visibility,
            d_model: model.d_model,
            layers: model.layers,
            heads: model.heads,
            ffn_dim: model.ffn_dim,
            backbone: model.backbone,
            positional: model.positional,
            encoder_trainable: model.encoder_trainable,
            causal_module: model.causal_module,
            causal_detach: model.causal_detach,
            causal_input: model.causal_input,
            ln_eps: model.ln_eps,
            gamma: ppo.gamma,
            gae_lambda: ppo.gae_lambda,
            clip: ppo.clip,
            ppo_epochs: ppo.epochs,
            minibatches: ppo.minibatches,
            value_coef: ppo.value_coef,
            entropy_coef: ppo.entropy_coef,
            horizon: ppo.horizon,
            num_envs: ppo.num_envs,
            total_steps: ppo.total_steps,
            eval_every: ppo.eval_every,
            lr: ppo.lr,
            adam_beta1: ppo.adam.beta1,
            adam_beta2: ppo.adam.beta2,
            adam_eps: ppo.adam.eps,
            alpha: ppo.alpha,
            stop_at_sr: ppo.stop_at_sr,
            il_epochs: il.epochs,
            il_batch_size: il.batch_size,
            il_lr: il.lr,
            il_train_tasks: il.train_tasks,
            eval_episodes: 200,
            seeds: (1..=5).collect(),
            variants: super::RL_VARIANTS.iter().map(|v| v.name.to_string()).collect(),
            curve_window: 1,
        }
    }
}

impl Config {
    pub fn from_toml(s: &str) -> Result<Config, HarnessError> {
        let cfg: Config = toml::from_str(s).map_err(|e| HarnessError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            kind: self.task,
            width: self.grid_width,
            height: self.grid_height,
            wall_density: self.wall_density,
            num_categories: self.num_categories,
            max_steps: self.max_steps,
            max_retries: self.max_retries,
        }
    }

    pub fn env(&self) -> EnvConfig {
        EnvConfig {
            window: self.window,
            reward: RewardConfig { success: self.reward_success, step: self.reward_step, shaping: self.reward_shaping },
            require_visibility: self.require_visibility,
        }
    }

    pub fn model(&self) -> ModelConfig {
        let gen = self.generator();
        ModelConfig {
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            max_steps: self.max_steps,
            backbone: self.backbone,
            positional: self.positional,
            encoder_trainable: self.encoder_trainable,
            causal_module: self.causal_module,
            causal_detach: self.causal_detach,
            causal_input: self.causal_input,
            ln_eps: self.ln_eps,
            ..ModelConfig::new(
                crate::env::observation_dim(gen.kind, self.window, gen.num_categories),
                crate::env::NUM_ACTIONS,
                crate::env::objective_vocab(gen.kind, gen.num_categories),
            )
        }
    }

    pub fn ppo(&self) -> PpoConfig {
        PpoConfig {
            gamma: self.gamma,
            gae_lambda: self.gae_lambda,
            clip: self.clip,
            epochs: self.ppo_epochs,
            minibatches: self.minibatches,
            value_coef: self.value_coef,
            entropy_coef: self.entropy_coef,
            horizon: self.horizon,
            num_envs: self.num_envs,
            total_steps: self.total_steps,
            eval_every: self.eval_every,
            lr: self.lr,
            adam: AdamConfigSerde { beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps },
            alpha: self.alpha,
            stop_at_sr: self.stop_at_sr,
        }
    }

    pub fn supervised(&self, seed: u64) -> SupervisedConfig {
        SupervisedConfig {
            epochs: self.il_epochs,
            batch_size: self.il_batch_size,
            lr: self.il_lr,
            alpha: self.alpha,
            train_tasks: self.il_train_tasks,
            eval_tasks: self.eval_episodes,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.generator().validate()?;
        self.env().validate()?;
        self.model().validate()?;
        self.ppo().validate()?;
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.eval_episodes == 0 {
            return bad("eval_episodes must be positive");
        }
        if self.il_epochs == 0 || self.il_batch_size == 0 || self.il_train_tasks == 0 || !(self.il_lr > 0.0) {
            return bad("il_epochs, il_batch_size, il_train_tasks and il_lr must be positive");
        }
        if self.curve_window == 0 {
            return bad("curve_window must be positive");
        }
        if self.horizon > self.max_steps {
            return bad("horizon must not exceed max_steps");
        }
        for v in &self.variants {
            super::find_variant(v)?;
        }
        Ok(())
    }
}

/// Reads a TOML config; an empty file yields all defaults.
pub fn load_config(path: &Path) -> Result<Config, HarnessError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("reading {}: {e}", path.display())))?;
    Config::from_toml(&text)
}

/// Keys whose values differ between two configs, sorted.
pub fn config_diff(a: &Config, b: &Config) -> Result<Vec<String>, HarnessError> {
    let ta = as_table(a)?;
    let tb = as_table(b)?;
    let mut keys: Vec<&String> = ta.keys().chain(tb.keys()).collect();
    keys.sort();
    keys.dedup();
    Ok(keys.into_iter().filter(|k| ta.get(*k) != tb.get(*k)).cloned().collect())
}

pub(crate) fn as_table(cfg: &Config) -> Result<toml::Table, HarnessError> {
    toml::Table::try_from(cfg).map_err(|e| HarnessError::Config(e.to_string()))
}

pub(crate) fn from_table(t: toml::Table) -> Result<Config, HarnessError> {
    let cfg: Config = t.try_into().map_err(|e: toml::de::Error| HarnessError::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
