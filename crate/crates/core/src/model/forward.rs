use std::collections::HashMap;
use std::sync::Arc;

use numcore::{AttentionBlock, Graph, Mask, ParamStore, Tensor, Var};

use super::{Backbone, CausalInput, ModelError, NavModel, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Visual = 0,
    Action = 1,
}

/// Token layout of one episode prefix: `s0, a0, s1, a1, ...`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    /// `(modality, timestep)` per token, in attention order.
    pub tokens: Vec<(Modality, usize)>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn timesteps(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.1).collect()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.tokens.iter().map(|t| t.0).collect()
    }
}

/// Interleaves `states` visual tokens with `actions` action tokens. The
/// action count must be `states - 1` (current action not yet taken) or
/// `states`.
pub fn build_token_sequence(states: usize, actions: usize) -> Result<TokenSequence> {
    if states == 0 || (actions + 1 != states && actions != states) {
        return Err(ModelError::Shape(format!("{states} states with {actions} actions")));
    }
    let mut tokens = Vec::with_capacity(states + actions);
    for t in 0..states {
        tokens.push((Modality::Visual, t));
        if t < actions {
            tokens.push((Modality::Action, t));
        }
    }
    Ok(TokenSequence { tokens })
}

/// Attention mask over an interleaved sequence: token `i` sees `j` iff
/// `j <= i`.
pub fn causal_mask(n: usize) -> Mask {
    Mask::lower_triangular(n)
}

/// Mean squared error between predicted and target next-step features.
pub fn causal_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let (ps, ts) = (g.value(pred).shape().to_vec(), g.value(target).shape().to_vec());
    if ps != ts {
        return Err(ModelError::Shape(format!("causal prediction {ps:?} vs target {ts:?}")));
    }
    if g.value(pred).is_empty() {
        return Err(ModelError::Shape("causal loss over zero pairs".into()));
    }
    Ok(g.mse(pred, target)?)
}

/// One episode prefix for a batched forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub goal: usize,
    pub steps: usize,
    /// `steps × obs_dim`, row-major.
    pub obs: Vec<f64>,
    /// Length `steps - 1` or `steps`.
    pub actions: Vec<usize>,
    /// First step whose outputs feed a loss; earlier steps are context. The
    /// next-state pairs start one step earlier so that a transition split
    /// across two batches is counted once.
    pub loss_from: usize,
}

/// Everything computed by [`NavModel::forward`] over a packed batch. Rows
/// of per-step tensors follow the segments in order; `row_offsets[s]` is the
/// first row of segment `s`.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub h_v: Var,
    pub h_a: Option<Var>,
    pub h_v_out: Var,
    pub h_a_out: Option<Var>,
    pub logits: Var,
    pub values: Var,
    pub causal_pred: Option<Var>,
    pub causal_target: Option<Var>,
    pub causal_loss: Option<Var>,
    pub row_offsets: Vec<usize>,
    pub action_offsets: Vec<usize>,
}

impl ForwardTrace {
    pub fn rows(&self) -> usize {
        self.row_offsets.last().copied().unwrap_or(0)
    }
}

impl NavModel {
    /// `n×obs_dim → n×d`: affine, smooth ramp, affine.
    pub fn encode_visual(&self, g: &mut Graph, store: &ParamStore, obs: Var) -> Result<Var> {
        let (_, cols) = g.value(obs).rows_cols();
        if cols != self.cfg.obs_dim {
            return Err(ModelError::Shape(format!("observation width {cols}, expected {}", self.cfg.obs_dim)));
        }
        let p = &self.params;
        let (w1, b1, w2, b2) = (g.param(store, p.enc_w1), g.param(store, p.enc_b1), g.param(store, p.enc_w2), g.param(store, p.enc_b2));
        let h = g.affine(obs, w1, b1)?;
        let h = g.gelu(h)?;
        Ok(g.affine(h, w2, b2)?)
    }

    pub fn embed_objective(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        for &i in ids {
            self.check_goal(i)?;
        }
        let t = g.param(store, self.params.objective);
        Ok(g.gather_rows(t, ids)?)
    }

    pub fn embed_action(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        for &a in ids {
            self.check_action(a)?;
        }
        self.action_rows(g, store, ids)
    }

    /// Action table lookup that also admits the "no previous action" row.
    fn action_rows(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let t = g.param(store, self.params.action);
        Ok(g.gather_rows(t, ids)?)
    }

    /// `gelu([z; h_o]·W + b)`.
    pub fn post_process(&self, g: &mut Graph, store: &ParamStore, z: Var, h_o: Var) -> Result<Var> {
        let d = self.cfg.d_model;
        for v in [z, h_o] {
            if g.value(v).rows_cols().1 != d {
                return Err(ModelError::Shape(format!("post-process input {:?}", g.value(v).shape())));
            }
        }
        let cat = g.concat_cols(z, h_o)?;
        let (w, b) = (g.param(store, self.params.post_w), g.param(store, self.params.post_b));
        let h = g.affine(cat, w, b)?;
        Ok(g.gelu(h)?)
    }

    /// Adds positional and modality embeddings to token rows.
    fn add_position(&self, g: &mut Graph, store: &ParamStore, tokens: Var, seq: &[(Modality, usize)]) -> Result<Var> {
        let steps: Vec<usize> = seq.iter().map(|t| t.1).collect();
        let pos = match (self.params.pos, &self.sinusoid) {
            (Some(id), _) => {
                let table = g.param(store, id);
                g.gather_rows(table, &steps)?
            }
            (None, Some(table)) => {
                let d = self.cfg.d_model;
                let mut data = Vec::with_capacity(steps.len() * d);
                for &t in &steps {
                    data.extend_from_slice(table.row(t));
                }
                g.constant(Tensor::matrix(steps.len(), d, data)?)
            }
            (None, None) => return Err(ModelError::Config("transformer without positional encoding".into())),
        };
        let mod_id = self.params.modality.ok_or_else(|| ModelError::Config("no modality table".into()))?;
        let table = g.param(store, mod_id);
        let tags: Vec<usize> = seq.iter().map(|t| t.0 as usize).collect();
        let m = g.gather_rows(table, &tags)?;
        let x = g.add(tokens, pos)?;
        Ok(g.add(x, m)?)
    }

    /// Pre-norm encoder layers over packed token rows; `blocks` tile the rows
    /// by episode.
    pub fn transformer_encode(&self, g: &mut Graph, store: &ParamStore, x: Var, blocks: &[AttentionBlock]) -> Result<Var> {
        let d = self.cfg.d_model;
        let eps = self.cfg.ln_eps;
        let mut x = x;
        for lp in &self.params.layers {
            let (g1, b1) = (g.param(store, lp.ln1_g), g.param(store, lp.ln1_b));
            let h = g.layer_norm(x, g1, b1, eps)?;
            let (w, b) = (g.param(store, lp.wqkv), g.param(store, lp.bqkv));
            let qkv = g.affine(h, w, b)?;
            let q = g.slice_cols(qkv, 0, d)?;
            let k = g.slice_cols(qkv, d, d)?;
            let v = g.slice_cols(qkv, 2 * d, d)?;
            let a = g.attention(q, k, v, self.cfg.heads, blocks.to_vec())?;
            let (wo, bo) = (g.param(store, lp.wo), g.param(store, lp.bo));
            let a = g.affine(a, wo, bo)?;
            x = g.add(x, a)?;
            let (g2, b2) = (g.param(store, lp.ln2_g), g.param(store, lp.ln2_b));
            let h = g.layer_norm(x, g2, b2, eps)?;
            let (w1, b1) = (g.param(store, lp.ff1_w), g.param(store, lp.ff1_b));
            let f = g.affine(h, w1, b1)?;
            let f = g.gelu(f)?;
            let (w2, b2) = (g.param(store, lp.ff2_w), g.param(store, lp.ff2_b));
            let f = g.affine(f, w2, b2)?;
            x = g.add(x, f)?;
        }
        Ok(x)
    }

    pub fn actor_logits(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.params.actor_w), g.param(store, self.params.actor_b));
        Ok(g.affine(h, w, b)?)
    }

    pub fn critic_value(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.params.critic_w), g.param(store, self.params.critic_b));
        Ok(g.affine(h, w, b)?)
    }

    /// `[h_v; h_a]·W + b`, the predicted next-step visual feature.
    pub fn causal_predict(&self, g: &mut Graph, store: &ParamStore, h_v: Var, h_a: Var) -> Result<Var> {
        let [w, b] = self.params.causal().ok_or_else(|| ModelError::Config("causal module not registered".into()))?;
        if g.value(h_v).shape() != g.value(h_a).shape() {
            return Err(ModelError::Shape(format!("{:?} vs {:?}", g.value(h_v).shape(), g.value(h_a).shape())));
        }
        let cat = g.concat_cols(h_v, h_a)?;
        let (w, b) = (g.param(store, w), g.param(store, b));
        Ok(g.affine(cat, w, b)?)
    }

    fn check_segments(&self, segments: &[Segment]) -> Result<()> {
        if segments.is_empty() {
            return Err(ModelError::Shape("empty batch".into()));
        }
        for s in segments {
            if s.steps == 0 || s.obs.len() != s.steps * self.cfg.obs_dim {
                return Err(ModelError::Shape(format!("segment of {} steps with {} observation values", s.steps, s.obs.len())));
            }
            if s.actions.len() + 1 != s.steps && s.actions.len() != s.steps {
                return Err(ModelError::Shape(format!("{} steps with {} actions", s.steps, s.actions.len())));
            }
            if s.steps > self.cfg.max_steps {
                return Err(ModelError::TooLong { len: s.steps, max: self.cfg.max_steps });
            }
            self.check_goal(s.goal)?;
            for &a in &s.actions {
                self.check_action(a)?;
            }
        }
        Ok(())
    }

    /// Full forward pass over a batch of episode prefixes.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, segments: &[Segment]) -> Result<ForwardTrace> {
        self.check_segments(segments)?;
        let d = self.cfg.d_model;
        let mut row_offsets = vec![0];
        let mut action_offsets = vec![0];
        let mut obs = Vec::new();
        let mut goals = Vec::new();
        let mut actions = Vec::new();
        for s in segments {
            obs.extend_from_slice(&s.obs);
            goals.extend(std::iter::repeat_n(s.goal, s.steps));
            actions.extend_from_slice(&s.actions);
            row_offsets.push(row_offsets.last().unwrap() + s.steps);
            action_offsets.push(action_offsets.last().unwrap() + s.actions.len());
        }
        let n = *row_offsets.last().unwrap();
        let x = g.constant(Tensor::matrix(n, self.cfg.obs_dim, obs)?);
        let z = self.encode_visual(g, store, x)?;
        let h_o = self.embed_objective(g, store, &goals)?;
        let h_v = self.post_process(g, store, z, h_o)?;
        let h_a = if actions.is_empty() { None } else { Some(self.embed_action(g, store, &actions)?) };

        let (h_v_out, h_a_out) = match self.cfg.backbone {
            Backbone::Feedforward => (h_v, None),
            Backbone::Recurrent => (self.recurrent(g, store, segments, h_v, &row_offsets)?, None),
            Backbone::Transformer => {
                let (v, a) = self.transformer(g, store, segments, h_v, h_a, &row_offsets, &action_offsets)?;
                (v, a)
            }
        };
        let logits = self.actor_logits(g, store, h_v_out)?;
        let values = self.critic_value(g, store, h_v_out)?;

        let (mut causal_pred, mut causal_target, mut causal_loss_v) = (None, None, None);
        if self.params.causal().is_some() {
            let (mut cur, mut next, mut act) = (Vec::new(), Vec::new(), Vec::new());
            for (i, s) in segments.iter().enumerate() {
                for t in s.loss_from.saturating_sub(1)..s.steps.saturating_sub(1) {
                    cur.push(row_offsets[i] + t);
                    next.push(row_offsets[i] + t + 1);
                    act.push(action_offsets[i] + t);
                }
            }
            if let (false, Some(h_a)) = (cur.is_empty(), h_a) {
                let (src_v, src_a) = match self.cfg.causal_input {
                    CausalInput::Pre => (h_v, h_a),
                    CausalInput::Post => {
                        (h_v_out, h_a_out.ok_or_else(|| ModelError::Config("no backbone action outputs".into()))?)
                    }
                };
                let pv = g.gather_rows(src_v, &cur)?;
                let pa = g.gather_rows(src_a, &act)?;
                let pred = self.causal_predict(g, store, pv, pa)?;
                let tgt_src = if self.cfg.causal_detach { g.detach(h_v) } else { h_v };
                let target = g.gather_rows(tgt_src, &next)?;
                causal_loss_v = Some(causal_loss(g, pred, target)?);
                causal_pred = Some(pred);
                causal_target = Some(target);
            }
        }
        debug_assert_eq!(g.value(h_v_out).shape(), &[n, d]);
        Ok(ForwardTrace {
            h_v,
            h_a,
            h_v_out,
            h_a_out,
            logits,
            values,
            causal_pred,
            causal_target,
            causal_loss: causal_loss_v,
            row_offsets,
            action_offsets,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn transformer(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        segments: &[Segment],
        h_v: Var,
        h_a: Option<Var>,
        row_offsets: &[usize],
        action_offsets: &[usize],
    ) -> Result<(Var, Option<Var>)> {
        let n = *row_offsets.last().unwrap();
        let mut gather = Vec::new();
        let mut layout = Vec::new();
        let mut visual_pos = vec![0; n];
        let mut action_pos = vec![0; *action_offsets.last().unwrap()];
        let mut blocks = Vec::with_capacity(segments.len());
        let mut masks: HashMap<usize, Arc<Mask>> = HashMap::new();
        for (i, s) in segments.iter().enumerate() {
            let seq = build_token_sequence(s.steps, s.actions.len())?;
            let start = gather.len();
            for &(m, t) in &seq.tokens {
                match m {
                    Modality::Visual => {
                        visual_pos[row_offsets[i] + t] = gather.len();
                        gather.push(row_offsets[i] + t);
                    }
                    Modality::Action => {
                        action_pos[action_offsets[i] + t] = gather.len();
                        gather.push(n + action_offsets[i] + t);
                    }
                }
            }
            layout.extend_from_slice(&seq.tokens);
            let mask = masks.entry(seq.len()).or_insert_with(|| Arc::new(causal_mask(seq.len()))).clone();
            blocks.push(AttentionBlock { start, mask });
        }
        let all = match h_a {
            Some(a) => g.concat_rows(&[h_v, a])?,
            None => h_v,
        };
        let tokens = g.gather_rows(all, &gather)?;
        let x = self.add_position(g, store, tokens, &layout)?;
        let out = self.transformer_encode(g, store, x, &blocks)?;
        let v = g.gather_rows(out, &visual_pos)?;
        let a = if action_pos.is_empty() { None } else { Some(g.gather_rows(out, &action_pos)?) };
        Ok((v, a))
    }

    fn recurrent(&self, g: &mut Graph, store: &ParamStore, segments: &[Segment], h_v: Var, row_offsets: &[usize]) -> Result<Var> {
        let gp = self.params.gru.as_ref().ok_or_else(|| ModelError::Config("no recurrent parameters".into()))?;
        let d = self.cfg.d_model;
        let none = self.cfg.num_actions;
        let mut prev = Vec::new();
        for s in segments {
            prev.push(none);
            prev.extend_from_slice(&s.actions[..s.steps - 1]);
        }
        let pa = self.action_rows(g, store, &prev)?;
        let x = g.add(h_v, pa)?;
        let (wx, bx) = (g.param(store, gp.wx), g.param(store, gp.bx));
        let gx = g.affine(x, wx, bx)?;
        let (u, bh) = (g.param(store, gp.u), g.param(store, gp.bh));

        // Longest segments first, so the active set at step t is a prefix.
        let mut order: Vec<usize> = (0..segments.len()).collect();
        order.sort_by(|&a, &b| segments[b].steps.cmp(&segments[a].steps));
        let max_t = segments[order[0]].steps;
        let mut outs = Vec::with_capacity(max_t);
        let mut base = Vec::with_capacity(max_t);
        let mut h: Option<Var> = None;
        let mut total = 0;
        for t in 0..max_t {
            let active = order.iter().take_while(|&&s| segments[s].steps > t).count();
            let rows: Vec<usize> = order[..active].iter().map(|&s| row_offsets[s] + t).collect();
            let gx_t = g.gather_rows(gx, &rows)?;
            let h_prev = match h {
                None => g.constant(Tensor::zeros(vec![active, d])),
                Some(prev) if g.value(prev).rows_cols().0 == active => prev,
                Some(prev) => {
                    let keep: Vec<usize> = (0..active).collect();
                    g.gather_rows(prev, &keep)?
                }
            };
            let h_t = g.gru_cell(gx_t, h_prev, u, bh)?;
            outs.push(h_t);
            base.push(total);
            total += active;
            h = Some(h_t);
        }
        let all = g.concat_rows(&outs)?;
        let mut rank = vec![0; segments.len()];
        for (r, &s) in order.iter().enumerate() {
            rank[s] = r;
        }
        let mut idx = Vec::with_capacity(total);
        for (i, s) in segments.iter().enumerate() {
            for b in base.iter().take(s.steps) {
                idx.push(b + rank[i]);
            }
        }
        Ok(g.gather_rows(all, &idx)?)
    }
}
