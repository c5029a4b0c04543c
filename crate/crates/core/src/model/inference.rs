//! Step-by-step policy evaluation for rollouts, without a graph. Keys and
//! values of earlier tokens are kept per layer; the recurrent backbone keeps
//! its hidden state. Numerically this matches [`NavModel::forward`] on the
//! same prefix up to matrix-product rounding.

use numcore::kernels::{self, affine, gelu, layer_norm_row};
use numcore::ParamStore;

use super::forward::Modality;
use super::{Backbone, ModelError, NavModel, Result};

/// Per-episode backbone state.
#[derive(Clone, Debug, Default)]
pub struct Memory {
    steps: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    hidden: Vec<f64>,
}

impl Memory {
    /// Number of observations consumed so far.
    pub fn steps(&self) -> usize {
        self.steps
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub logits: Vec<f64>,
    pub value: f64,
}

impl PolicyOutput {
    pub fn log_probs(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.logits.len()];
        kernels::log_softmax_row(&self.logits, &mut out);
        out
    }

    /// First index of the largest logit.
    pub fn greedy(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = i;
            }
        }
        best
    }
}

fn add_into(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

impl NavModel {
    pub fn begin_episode(&self) -> Memory {
        let d = self.cfg.d_model;
        match self.cfg.backbone {
            Backbone::Transformer => Memory {
                steps: 0,
                keys: vec![Vec::new(); self.cfg.layers],
                values: vec![Vec::new(); self.cfg.layers],
                hidden: Vec::new(),
            },
            Backbone::Recurrent => Memory { steps: 0, keys: Vec::new(), values: Vec::new(), hidden: vec![0.0; d] },
            Backbone::Feedforward => Memory::default(),
        }
    }

    /// Post-processed feature of one observation.
    fn state_feature(&self, store: &ParamStore, obs: &[f64], goal: usize) -> Vec<f64> {
        let p = &self.params;
        let d = self.cfg.d_model;
        let v = |id| store.value(id).data();
        let mut h = affine(obs, v(p.enc_w1), v(p.enc_b1), 1, self.cfg.obs_dim, d);
        h.iter_mut().for_each(|x| *x = gelu(*x));
        let mut cat = affine(&h, v(p.enc_w2), v(p.enc_b2), 1, d, d);
        cat.extend_from_slice(&v(p.objective)[goal * d..(goal + 1) * d]);
        let mut out = affine(&cat, v(p.post_w), v(p.post_b), 1, 2 * d, d);
        out.iter_mut().for_each(|x| *x = gelu(*x));
        out
    }

    fn action_row<'s>(&self, store: &'s ParamStore, a: usize) -> &'s [f64] {
        let d = self.cfg.d_model;
        &store.value(self.params.action).data()[a * d..(a + 1) * d]
    }

    /// Runs one token through every layer, appending its keys and values.
    fn push_token(&self, store: &ParamStore, mem: &mut Memory, emb: &[f64], t: usize, m: Modality) -> Result<Vec<f64>> {
        let d = self.cfg.d_model;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let v = |id| store.value(id).data();
        let mut x = emb.to_vec();
        match (self.params.pos, &self.sinusoid) {
            (Some(id), _) => add_into(&mut x, &v(id)[t * d..(t + 1) * d]),
            (None, Some(table)) => add_into(&mut x, table.row(t)),
            (None, None) => return Err(ModelError::Config("transformer without positional encoding".into())),
        }
        let mod_id = self.params.modality.ok_or_else(|| ModelError::Config("no modality table".into()))?;
        add_into(&mut x, &v(mod_id)[m as usize * d..(m as usize + 1) * d]);
        let mut h = vec![0.0; d];
        for (l, lp) in self.params.layers.iter().enumerate() {
            layer_norm_row(&x, v(lp.ln1_g), v(lp.ln1_b), self.cfg.ln_eps, &mut h);
            let qkv = affine(&h, v(lp.wqkv), v(lp.bqkv), 1, d, 3 * d);
            mem.keys[l].extend_from_slice(&qkv[d..2 * d]);
            mem.values[l].extend_from_slice(&qkv[2 * d..]);
            let n = mem.keys[l].len() / d;
            let allowed = vec![true; n];
            let mut probs = vec![0.0; n];
            let mut mixed = vec![0.0; d];
            let (ks, vs) = (&mem.keys[l], &mem.values[l]);
            for hd in 0..heads {
                let c0 = hd * dh;
                kernels::attend_row(
                    &qkv[c0..c0 + dh],
                    n,
                    &allowed,
                    |j| &ks[j * d + c0..j * d + c0 + dh],
                    |j| &vs[j * d + c0..j * d + c0 + dh],
                    scale,
                    &mut probs,
                    &mut mixed[c0..c0 + dh],
                )
                .ok_or(numcore::Error::FullyMasked(n - 1))?;
            }
            let a = affine(&mixed, v(lp.wo), v(lp.bo), 1, d, d);
            add_into(&mut x, &a);
            layer_norm_row(&x, v(lp.ln2_g), v(lp.ln2_b), self.cfg.ln_eps, &mut h);
            let mut f = affine(&h, v(lp.ff1_w), v(lp.ff1_b), 1, d, self.cfg.ffn_dim);
            f.iter_mut().for_each(|z| *z = gelu(*z));
            let f = affine(&f, v(lp.ff2_w), v(lp.ff2_b), 1, self.cfg.ffn_dim, d);
            add_into(&mut x, &f);
        }
        Ok(x)
    }

    /// Consumes the next observation of an episode and returns the policy
    /// and value at that step. `prev_action` is the action taken after the
    /// previous observation and must be `None` exactly at the first step.
    pub fn act(
        &self,
        store: &ParamStore,
        mem: &mut Memory,
        obs: &[f64],
        goal: usize,
        prev_action: Option<usize>,
    ) -> Result<PolicyOutput> {
        if obs.len() != self.cfg.obs_dim {
            return Err(ModelError::Shape(format!("observation width {}, expected {}", obs.len(), self.cfg.obs_dim)));
        }
        self.check_goal(goal)?;
        if let Some(a) = prev_action {
            self.check_action(a)?;
        }
        if prev_action.is_some() != (mem.steps > 0) {
            return Err(ModelError::Shape(format!("previous action given as {prev_action:?} at step {}", mem.steps)));
        }
        let t = mem.steps;
        if t >= self.cfg.max_steps {
            return Err(ModelError::TooLong { len: t + 1, max: self.cfg.max_steps });
        }
        let d = self.cfg.d_model;
        let hs = self.state_feature(store, obs, goal);
        let feat = match self.cfg.backbone {
            Backbone::Feedforward => hs,
            Backbone::Transformer => {
                if let Some(a) = prev_action {
                    let emb = self.action_row(store, a).to_vec();
                    self.push_token(store, mem, &emb, t - 1, Modality::Action)?;
                }
                self.push_token(store, mem, &hs, t, Modality::Visual)?
            }
            Backbone::Recurrent => {
                let gp = self.params.gru.as_ref().ok_or_else(|| ModelError::Config("no recurrent parameters".into()))?;
                let mut x = hs;
                add_into(&mut x, self.action_row(store, prev_action.unwrap_or(self.cfg.num_actions)));
                let v = |id| store.value(id).data();
                let gx = affine(&x, v(gp.wx), v(gp.bx), 1, d, 3 * d);
                let gh = affine(&mem.hidden, v(gp.u), v(gp.bh), 1, d, 3 * d);
                let (h, ..) = kernels::gru_cell(&gx, &gh, &mem.hidden);
                mem.hidden.clone_from(&h);
                h
            }
        };
        mem.steps += 1;
        let v = |id| store.value(id).data();
        let logits = affine(&feat, v(self.params.actor_w), v(self.params.actor_b), 1, d, self.cfg.num_actions);
        let value = affine(&feat, v(self.params.critic_w), v(self.params.critic_b), 1, d, 1)[0];
        for &l in logits.iter().chain(std::iter::once(&value)) {
            if !l.is_finite() {
                return Err(numcore::Error::NonFinite("policy head".into()).into());
            }
        }
        Ok(PolicyOutput { logits, value })
    }
}
