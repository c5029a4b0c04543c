//! The navigation policy: visual encoder, objective/action embeddings,
//! feature post-processing, a sequence backbone (interleaved causal
//! transformer, gated recurrent unit, or none), actor/critic heads and the
//! next-state prediction module.

mod checkpoint;
mod forward;
mod inference;

use numcore::{init_rng, ParamId, ParamStore, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointManifest, StoredTensor};
pub use forward::{build_token_sequence, causal_loss, causal_mask, ForwardTrace, Modality, Segment, TokenSequence};
pub use inference::{Memory, PolicyOutput};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{what} id {id} outside vocabulary of {size}")]
    OutOfVocab { what: &'static str, id: usize, size: usize },
    #[error("input shape: {0}")]
    Shape(String),
    #[error("sequence of {len} steps exceeds the maximum of {max}")]
    TooLong { len: usize, max: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numeric(#[from] numcore::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Transformer,
    Recurrent,
    /// Per-step features straight into the heads; for small test problems.
    Feedforward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CausalInput {
    /// Post-processed per-step features, before the backbone.
    Pre,
    /// Transformer outputs.
    Post,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    Learned,
    Sinusoidal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub num_actions: usize,
    pub num_objectives: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Longest episode the positional table covers.
    pub max_steps: usize,
    pub backbone: Backbone,
    pub positional: Positional,
    pub encoder_trainable: bool,
    /// Registers the next-state prediction head.
    pub causal_module: bool,
    pub causal_detach: bool,
    pub causal_input: CausalInput,
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn new(obs_dim: usize, num_actions: usize, num_objectives: usize) -> Self {
        ModelConfig {
            obs_dim,
            num_actions,
            num_objectives,
            d_model: 64,
            layers: 1,
            heads: 4,
            ffn_dim: 128,
            max_steps: 128,
            backbone: Backbone::Transformer,
            positional: Positional::Learned,
            encoder_trainable: true,
            causal_module: true,
            causal_detach: true,
            causal_input: CausalInput::Pre,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.obs_dim == 0 || self.num_actions == 0 || self.num_objectives == 0 {
            return bad("obs_dim, num_actions and num_objectives must be positive".into());
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.max_steps == 0 {
            return bad("max_steps is 0".into());
        }
        if self.backbone == Backbone::Transformer && (self.layers == 0 || self.ffn_dim == 0) {
            return bad("transformer needs at least one layer and a feed-forward width".into());
        }
        if self.causal_input == CausalInput::Post && self.backbone != Backbone::Transformer {
            return bad("post-backbone causal input needs the transformer backbone".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wqkv: ParamId,
    bqkv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct GruParams {
    wx: ParamId,
    bx: ParamId,
    u: ParamId,
    bh: ParamId,
}

/// Parameter handles, grouped by module.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub(crate) enc_w1: ParamId,
    pub(crate) enc_b1: ParamId,
    pub(crate) enc_w2: ParamId,
    pub(crate) enc_b2: ParamId,
    pub(crate) objective: ParamId,
    /// `num_actions + 1` rows; the last is the "no previous action" input
    /// of the recurrent backbone.
    pub(crate) action: ParamId,
    pub(crate) post_w: ParamId,
    pub(crate) post_b: ParamId,
    pub(crate) pos: Option<ParamId>,
    pub(crate) modality: Option<ParamId>,
    pub(crate) layers: Vec<LayerParams>,
    pub(crate) gru: Option<GruParams>,
    pub(crate) actor_w: ParamId,
    pub(crate) actor_b: ParamId,
    pub(crate) critic_w: ParamId,
    pub(crate) critic_b: ParamId,
    pub(crate) causal_w: Option<ParamId>,
    pub(crate) causal_b: Option<ParamId>,
}

impl ModelParams {
    pub fn encoder(&self) -> [ParamId; 4] {
        [self.enc_w1, self.enc_b1, self.enc_w2, self.enc_b2]
    }

    pub fn causal(&self) -> Option<[ParamId; 2]> {
        Some([self.causal_w?, self.causal_b?])
    }
}

#[derive(Clone, Debug)]
pub struct NavModel {
    pub cfg: ModelConfig,
    pub params: ModelParams,
    /// Fixed sinusoidal table when `positional` is sinusoidal.
    sinusoid: Option<Tensor>,
}

enum Init {
    /// `U(-s/sqrt(fan_in), s/sqrt(fan_in))` with fan-in the first axis.
    Uniform(f64),
    Range(f64),
    Zeros,
    Ones,
}

fn init_tensor(seed: u64, name: &str, shape: Vec<usize>, init: Init) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Uniform(s) => {
            let a = s / (shape[0] as f64).sqrt();
            let mut rng = init_rng(seed, name);
            (0..n).map(|_| rng.gen_range(-a..a)).collect()
        }
        Init::Range(a) => {
            let mut rng = init_rng(seed, name);
            (0..n).map(|_| rng.gen_range(-a..a)).collect()
        }
    };
    Ok(Tensor::new(shape, data)?)
}

fn sinusoid_table(rows: usize, d: usize) -> Result<Tensor> {
    let mut data = vec![0.0; rows * d];
    for t in 0..rows {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = t as f64 * freq;
            data[t * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Ok(Tensor::matrix(rows, d, data)?)
}

impl NavModel {
    /// Registers every parameter in `store`. Each tensor is drawn from its
    /// own stream keyed by `(seed, name)`, so toggling optional modules does
    /// not change the others.
    pub fn new(cfg: ModelConfig, seed: u64, store: &mut ParamStore) -> Result<NavModel> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut reg = |name: &str, shape: Vec<usize>, init: Init| -> Result<ParamId> {
            let t = init_tensor(seed, name, shape, init)?;
            Ok(store.register(name, t)?)
        };
        let enc_w1 = reg("encoder.w1", vec![cfg.obs_dim, d], Init::Uniform(1.0))?;
        let enc_b1 = reg("encoder.b1", vec![d], Init::Zeros)?;
        let enc_w2 = reg("encoder.w2", vec![d, d], Init::Uniform(1.0))?;
        let enc_b2 = reg("encoder.b2", vec![d], Init::Zeros)?;
        let objective = reg("objective.table", vec![cfg.num_objectives, d], Init::Range(1.0))?;
        let action = reg("action.table", vec![cfg.num_actions + 1, d], Init::Range(1.0))?;
        let post_w = reg("post.w", vec![2 * d, d], Init::Uniform(1.0))?;
        let post_b = reg("post.b", vec![d], Init::Zeros)?;
        let (mut pos, mut modality, mut layers, mut gru) = (None, None, Vec::new(), None);
        match cfg.backbone {
            Backbone::Transformer => {
                if cfg.positional == Positional::Learned {
                    pos = Some(reg("pos.table", vec![cfg.max_steps, d], Init::Range(0.1))?);
                }
                modality = Some(reg("modality.table", vec![2, d], Init::Range(0.1))?);
                for l in 0..cfg.layers {
                    let p = |s: &str| format!("layer{l}.{s}");
                    layers.push(LayerParams {
                        ln1_g: reg(&p("ln1.g"), vec![d], Init::Ones)?,
                        ln1_b: reg(&p("ln1.b"), vec![d], Init::Zeros)?,
                        wqkv: reg(&p("attn.wqkv"), vec![d, 3 * d], Init::Uniform(1.0))?,
                        bqkv: reg(&p("attn.bqkv"), vec![3 * d], Init::Zeros)?,
                        wo: reg(&p("attn.wo"), vec![d, d], Init::Uniform(1.0))?,
                        bo: reg(&p("attn.bo"), vec![d], Init::Zeros)?,
                        ln2_g: reg(&p("ln2.g"), vec![d], Init::Ones)?,
                        ln2_b: reg(&p("ln2.b"), vec![d], Init::Zeros)?,
                        ff1_w: reg(&p("ff1.w"), vec![d, cfg.ffn_dim], Init::Uniform(1.0))?,
                        ff1_b: reg(&p("ff1.b"), vec![cfg.ffn_dim], Init::Zeros)?,
                        ff2_w: reg(&p("ff2.w"), vec![cfg.ffn_dim, d], Init::Uniform(1.0))?,
                        ff2_b: reg(&p("ff2.b"), vec![d], Init::Zeros)?,
                    });
                }
            }
            Backbone::Recurrent => {
                gru = Some(GruParams {
                    wx: reg("gru.wx", vec![d, 3 * d], Init::Uniform(1.0))?,
                    bx: reg("gru.bx", vec![3 * d], Init::Zeros)?,
                    u: reg("gru.u", vec![d, 3 * d], Init::Uniform(1.0))?,
                    bh: reg("gru.bh", vec![3 * d], Init::Zeros)?,
                });
            }
            Backbone::Feedforward => {}
        }
        let actor_w = reg("actor.w", vec![d, cfg.num_actions], Init::Uniform(0.01))?;
        let actor_b = reg("actor.b", vec![cfg.num_actions], Init::Zeros)?;
        let critic_w = reg("critic.w", vec![d, 1], Init::Uniform(1.0))?;
        let critic_b = reg("critic.b", vec![1], Init::Zeros)?;
        let (mut causal_w, mut causal_b) = (None, None);
        if cfg.causal_module {
            causal_w = Some(reg("causal.w", vec![2 * d, d], Init::Uniform(1.0))?);
            causal_b = Some(reg("causal.b", vec![d], Init::Zeros)?);
        }
        let params = ModelParams {
            enc_w1,
            enc_b1,
            enc_w2,
            enc_b2,
            objective,
            action,
            post_w,
            post_b,
            pos,
            modality,
            layers,
            gru,
            actor_w,
            actor_b,
            critic_w,
            critic_b,
            causal_w,
            causal_b,
        };
        if !cfg.encoder_trainable {
            for id in params.encoder() {
                store.set_trainable(id, false);
            }
        }
        let sinusoid = match (cfg.backbone, cfg.positional) {
            (Backbone::Transformer, Positional::Sinusoidal) => Some(sinusoid_table(cfg.max_steps, d)?),
            _ => None,
        };
        Ok(NavModel { cfg, params, sinusoid })
    }

    pub fn set_causal_trainable(&self, store: &mut ParamStore, trainable: bool) {
        if let Some(ids) = self.params.causal() {
            for id in ids {
                store.set_trainable(id, trainable);
            }
        }
    }

    pub(crate) fn check_goal(&self, goal: usize) -> Result<()> {
        if goal >= self.cfg.num_objectives {
            return Err(ModelError::OutOfVocab { what: "objective", id: goal, size: self.cfg.num_objectives });
        }
        Ok(())
    }

    pub(crate) fn check_action(&self, a: usize) -> Result<()> {
        if a >= self.cfg.num_actions {
            return Err(ModelError::OutOfVocab { what: "action", id: a, size: self.cfg.num_actions });
        }
        Ok(())
    }
}
