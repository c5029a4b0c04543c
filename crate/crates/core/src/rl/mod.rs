//! Proximal policy optimization with the next-state auxiliary loss.

pub mod agent;
pub mod envs;
mod rollout;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::EnvError;
use crate::metrics::{MetricsError, MetricsReport};
use crate::model::{ModelError, NavModel, Segment};
use numcore::{adam_step, lr_schedule, AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};

pub use agent::{evaluate, evaluate_agent, run_episode, sample_categorical, Agent, Decode, EpisodeLog, ModelAgent, StepLog};
pub use envs::{eval_task_seed, heldout_tasks, train_task_seed, BanditEnv, ChainEnv, EnvObs, Environment, NavEnv, Transition};
pub use rollout::{collect_rollouts, EnvRollout, RolloutBuffer, StepRecord, Worker};

#[derive(Debug, thiserror::Error)]
pub enum RlError {
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("non-finite value at update {update}: {detail}")]
    NonFinite { update: u64, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Numeric(#[from] numcore::Error),
    #[error("{0}")]
    Hook(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub horizon: usize,
    pub num_envs: usize,
    pub total_steps: u64,
    pub eval_every: u64,
    pub lr: f64,
    pub adam: AdamConfigSerde,
    pub alpha: f64,
    /// Stop as soon as an evaluation reaches this success rate.
    pub stop_at_sr: Option<f64>,
}

/// Serializable mirror of [`AdamConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfigSerde {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<AdamConfigSerde> for AdamConfig {
    fn from(a: AdamConfigSerde) -> Self {
        AdamConfig { beta1: a.beta1, beta2: a.beta2, eps: a.eps }
    }
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatches: 4,
            value_coef: 0.5,
            entropy_coef: 0.01,
            horizon: 128,
            num_envs: 8,
            total_steps: 2_000_000,
            eval_every: 50_000,
            lr: 1e-4,
            adam: AdamConfigSerde { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            alpha: 1.0,
            stop_at_sr: None,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::Config(m.into()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(self.gae_lambda > 0.0 && self.gae_lambda <= 1.0) {
            return bad("gamma and lambda must lie in (0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if self.epochs == 0 || self.minibatches == 0 || self.horizon == 0 || self.num_envs == 0 {
            return bad("epochs, minibatches, horizon and num_envs must be positive");
        }
        if self.total_steps < self.batch_steps() || self.eval_every == 0 {
            return bad("total_steps must cover one rollout batch and eval_every must be positive");
        }
        if !(self.lr > 0.0) || !(self.alpha >= 0.0) {
            return bad("lr must be positive and alpha nonnegative");
        }
        Ok(())
    }

    pub fn batch_steps(&self) -> u64 {
        (self.num_envs * self.horizon) as u64
    }
}

/// Generalized advantage estimation over one environment's steps.
///
/// `values` has one entry per step; `last_value` bootstraps the state after
/// the final step.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), RlError> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(RlError::Length(format!("{n} rewards, {} values, {} dones", values.len(), dones.len())));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        adv[t] = delta + gamma * lambda * live * next_adv;
        next_adv = adv[t];
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Shifts and scales to zero mean and unit (population) standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = (*a - mean) / (std + 1e-12);
    }
}

/// `-mean(min(r·A, clip(r, 1-ε, 1+ε)·A))` with `r = exp(new - old)`.
pub fn ppo_surrogate(g: &mut Graph, new_log_probs: Var, old_log_probs: &[f64], advantages: &[f64], clip: f64) -> Result<Var, RlError> {
    let n = g.value(new_log_probs).len();
    if old_log_probs.len() != n || advantages.len() != n {
        return Err(RlError::Length(format!("{n} log-probs, {} old, {} advantages", old_log_probs.len(), advantages.len())));
    }
    let old = g.constant(Tensor::vector(old_log_probs.to_vec())?);
    let adv = g.constant(Tensor::vector(advantages.to_vec())?);
    let diff = g.sub(new_log_probs, old)?;
    let ratio = g.exp(diff)?;
    let s1 = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, 1.0 - clip, 1.0 + clip)?;
    let s2 = g.mul(clipped, adv)?;
    let m = g.minimum(s1, s2)?;
    let mean = g.mean(m)?;
    Ok(g.scale(mean, -1.0)?)
}

/// Loss terms of one minibatch.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub ppo: Var,
    pub value: Var,
    pub entropy: Var,
    pub causal: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossCoefficients {
    pub value: f64,
    pub entropy: f64,
    pub alpha: f64,
}

/// `ppo + c_v·value - c_e·entropy + α·causal`. With `α = 0` the causal term
/// is left out of the graph entirely.
pub fn total_loss(g: &mut Graph, parts: &LossParts, c: LossCoefficients) -> Result<Var, RlError> {
    let v = g.scale(parts.value, c.value)?;
    let e = g.scale(parts.entropy, -c.entropy)?;
    let mut total = g.add(parts.ppo, v)?;
    total = g.add(total, e)?;
    if let (Some(causal), true) = (parts.causal, c.alpha != 0.0) {
        let cl = g.scale(causal, c.alpha)?;
        total = g.add(total, cl)?;
    }
    Ok(total)
}

/// Per-step training targets, indexed like [`RolloutBuffer::flat_steps`].
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Targets {
    /// GAE per environment, then advantage normalization over the batch.
    pub fn from_buffer(buf: &RolloutBuffer, gamma: f64, lambda: f64) -> Result<Targets, RlError> {
        let mut t = Targets { actions: Vec::new(), old_log_probs: Vec::new(), advantages: Vec::new(), returns: Vec::new() };
        for e in &buf.envs {
            let r: Vec<f64> = e.steps.iter().map(|s| s.reward).collect();
            let v: Vec<f64> = e.steps.iter().map(|s| s.value).collect();
            let d: Vec<bool> = e.steps.iter().map(|s| s.done).collect();
            let (adv, ret) = compute_gae(&r, &v, &d, e.bootstrap_value, gamma, lambda)?;
            t.advantages.extend(adv);
            t.returns.extend(ret);
            t.actions.extend(e.steps.iter().map(|s| s.action));
            t.old_log_probs.extend(e.steps.iter().map(|s| s.log_prob));
        }
        normalize_advantages(&mut t.advantages);
        Ok(t)
    }
}

/// Builds the loss terms for a minibatch of segments; `rows[k]` lists the
/// flat target index of every loss row of `segments[k]`.
pub fn minibatch_loss(
    g: &mut Graph,
    model: &NavModel,
    store: &ParamStore,
    segments: &[Segment],
    rows: &[&[usize]],
    targets: &Targets,
    clip: f64,
) -> Result<LossParts, RlError> {
    let trace = model.forward(g, store, segments)?;
    let mut logit_rows = Vec::new();
    let mut idx = Vec::new();
    for (k, s) in segments.iter().enumerate() {
        for (j, &flat) in rows[k].iter().enumerate() {
            logit_rows.push(trace.row_offsets[k] + s.loss_from + j);
            idx.push(flat);
        }
    }
    let n = idx.len();
    let logits = g.gather_rows(trace.logits, &logit_rows)?;
    let lsm = g.log_softmax(logits)?;
    let actions: Vec<usize> = idx.iter().map(|&i| targets.actions[i]).collect();
    let new_lp = g.pick(lsm, &actions)?;
    let old: Vec<f64> = idx.iter().map(|&i| targets.old_log_probs[i]).collect();
    let adv: Vec<f64> = idx.iter().map(|&i| targets.advantages[i]).collect();
    let ppo = ppo_surrogate(g, new_lp, &old, &adv, clip)?;
    let values = g.gather_rows(trace.values, &logit_rows)?;
    let ret = g.constant(Tensor::matrix(n, 1, idx.iter().map(|&i| targets.returns[i]).collect())?);
    let value = g.mse(values, ret)?;
    let p = g.exp(lsm)?;
    let plogp = g.mul(p, lsm)?;
    let s = g.sum(plogp)?;
    let entropy = g.scale(s, -1.0 / n as f64)?;
    Ok(LossParts { ppo, value, entropy, causal: trace.causal_loss })
}

/// Mean loss terms over the minibatches of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub loss_ppo: f64,
    pub loss_value: f64,
    pub loss_causal: Option<f64>,
    pub entropy: f64,
}

/// Balanced minibatches: shuffled segments cut where the cumulative loss-row
/// count crosses multiples of `total / m`.
fn minibatch_groups(sizes: &[usize], m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.shuffle(rng);
    let total: usize = sizes.iter().sum();
    let mut groups = vec![Vec::new(); m];
    let mut cum = 0;
    for k in order {
        let gi = (cum * m / total.max(1)).min(m - 1);
        groups[gi].push(k);
        cum += sizes[k];
    }
    groups.retain(|g| !g.is_empty());
    groups
}

/// One PPO update (epochs × minibatches of Adam steps) on a rollout.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    model: &NavModel,
    store: &mut ParamStore,
    adam: &mut AdamState,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    lr: f64,
    update: u64,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats, RlError> {
    let targets = Targets::from_buffer(buf, cfg.gamma, cfg.gae_lambda)?;
    let segs = buf.segments(model.cfg.obs_dim);
    let sizes: Vec<usize> = segs.iter().map(|(_, r)| r.len()).collect();
    let coeffs = LossCoefficients { value: cfg.value_coef, entropy: cfg.entropy_coef, alpha: cfg.alpha };
    let mut stats = UpdateStats::default();
    let mut causal_sum = 0.0;
    let mut has_causal = false;
    let mut count = 0.0;
    let non_finite = |e: RlError| match e {
        RlError::Numeric(numcore::Error::NonFinite(d)) | RlError::Model(ModelError::Numeric(numcore::Error::NonFinite(d))) => {
            RlError::NonFinite { update, detail: d }
        }
        other => other,
    };
    for _ in 0..cfg.epochs {
        for group in minibatch_groups(&sizes, cfg.minibatches, rng) {
            let batch: Vec<Segment> = group.iter().map(|&k| segs[k].0.clone()).collect();
            let rows: Vec<&[usize]> = group.iter().map(|&k| segs[k].1.as_slice()).collect();
            let mut g = Graph::new();
            let parts = minibatch_loss(&mut g, model, store, &batch, &rows, &targets, cfg.clip).map_err(non_finite)?;
            let total = total_loss(&mut g, &parts, coeffs).map_err(non_finite)?;
            let lv = g.item(total)?;
            if !lv.is_finite() {
                return Err(RlError::NonFinite { update, detail: format!("total loss {lv}") });
            }
            g.backward(total, store).map_err(|e| non_finite(e.into()))?;
            adam_step(store, adam, lr, cfg.adam.into())?;
            stats.loss_ppo += g.item(parts.ppo)?;
            stats.loss_value += g.item(parts.value)?;
            stats.entropy += g.item(parts.entropy)?;
            if let Some(c) = parts.causal {
                causal_sum += g.item(c)?;
                has_causal = true;
            }
            count += 1.0;
        }
    }
    stats.loss_ppo /= count;
    stats.loss_value /= count;
    stats.entropy /= count;
    stats.loss_causal = has_causal.then_some(causal_sum / count);
    Ok(stats)
}

/// One CSV row per evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: u64,
    pub episodes: usize,
    pub sr: f64,
    pub spl: f64,
    pub gd: f64,
    pub loss_ppo: f64,
    pub loss_value: f64,
    pub loss_causal: Option<f64>,
    pub entropy: f64,
    pub lr: f64,
}

impl EvalRow {
    pub const CSV_HEADER: [&'static str; 10] =
        ["step", "episodes", "sr", "spl", "gd", "loss_ppo", "loss_value", "loss_causal", "entropy", "lr"];
}

/// Evaluation and logging callbacks of [`train`].
pub trait TrainHooks {
    fn evaluate(&mut self, model: &NavModel, store: &ParamStore) -> Result<MetricsReport, RlError>;

    /// Called after each evaluation; `new_best` marks a new highest SR.
    fn on_eval(&mut self, _row: &EvalRow, _store: &ParamStore, _new_best: bool) -> Result<(), RlError> {
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub rows: Vec<EvalRow>,
    pub best_sr: f64,
    pub best_step: u64,
    /// Parameters at the highest-SR evaluation (earliest on ties).
    pub best_params: ParamStore,
    pub env_steps: u64,
    pub updates: u64,
}

impl TrainingRun {
    /// Running maximum of the evaluation SR.
    pub fn best_sr_series(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.rows
            .iter()
            .map(|r| {
                best = best.max(r.sr);
                best
            })
            .collect()
    }
}

/// The PPO loop: collect, estimate advantages, update, and evaluate every
/// `eval_every` environment steps and at the end.
pub fn train<E: Environment>(
    model: &NavModel,
    store: &mut ParamStore,
    envs: Vec<E>,
    cfg: &PpoConfig,
    seed: u64,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainingRun, RlError> {
    cfg.validate()?;
    if envs.len() != cfg.num_envs {
        return Err(RlError::Config(format!("{} environments for num_envs {}", envs.len(), cfg.num_envs)));
    }
    for e in &envs {
        if e.max_steps() > model.cfg.max_steps {
            return Err(RlError::Config(format!("episodes of {} steps exceed the model context", e.max_steps())));
        }
        if e.obs_dim() != model.cfg.obs_dim || e.num_actions() != model.cfg.num_actions {
            return Err(RlError::Config("environment and model disagree on observation or action size".into()));
        }
    }
    if cfg.horizon > model.cfg.max_steps {
        return Err(RlError::Config(format!("horizon {} exceeds the model context {}", cfg.horizon, model.cfg.max_steps)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut workers = envs.into_iter().map(|e| Worker::new(model, e)).collect::<Result<Vec<_>, _>>()?;
    let mut adam = AdamState::new(store);
    let batch = cfg.batch_steps();
    // Whole batches only, so the step budget is never exceeded.
    let updates = cfg.total_steps / batch;
    let mut run = TrainingRun {
        rows: Vec::new(),
        best_sr: f64::NEG_INFINITY,
        best_step: 0,
        best_params: store.clone(),
        env_steps: 0,
        updates: 0,
    };
    let mut next_eval = cfg.eval_every;
    for u in 0..updates {
        let lr = lr_schedule(run.env_steps.min(cfg.total_steps), cfg.total_steps, cfg.lr)?;
        let buf = collect_rollouts(model, store, &mut workers, cfg.horizon, &mut rng)?;
        let stats = ppo_update(model, store, &mut adam, &buf, cfg, lr, u, &mut rng)?;
        run.env_steps += batch;
        run.updates += 1;
        let last = u + 1 == updates;
        if run.env_steps >= next_eval || last {
            while next_eval <= run.env_steps {
                next_eval += cfg.eval_every;
            }
            let report = hooks.evaluate(model, store)?;
            let row = EvalRow {
                step: run.env_steps,
                episodes: report.episodes,
                sr: report.sr,
                spl: report.spl,
                gd: report.gd,
                loss_ppo: stats.loss_ppo,
                loss_value: stats.loss_value,
                loss_causal: stats.loss_causal,
                entropy: stats.entropy,
                lr,
            };
            let new_best = row.sr > run.best_sr;
            if new_best {
                run.best_sr = row.sr;
                run.best_step = row.step;
                run.best_params = store.clone();
            }
            log::info!("step {} sr {:.3} spl {:.3} gd {:.3}", row.step, row.sr, row.spl, row.gd);
            hooks.on_eval(&row, store, new_best)?;
            run.rows.push(row);
            if cfg.stop_at_sr.is_some_and(|t| report.sr >= t) {
                break;
            }
        }
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_reward_to_go() {
        let (adv, ret) = compute_gae(&[1.0, 2.0, 3.0], &[0.0; 3], &[false, false, true], 0.0, 1.0, 1.0).unwrap();
        assert_eq!(adv, vec![6.0, 5.0, 3.0]);
        assert_eq!(ret, adv);
    }

    #[test]
    fn gae_single_step() {
        let (adv, _) = compute_gae(&[0.5], &[0.2], &[false], 0.7, 0.9, 0.95).unwrap();
        assert!((adv[0] - (0.5 + 0.9 * 0.7 - 0.2)).abs() < 1e-15);
    }

    #[test]
    fn gae_length_mismatch() {
        assert!(compute_gae(&[1.0], &[0.0, 0.0], &[false], 0.0, 0.9, 0.9).is_err());
    }

    #[test]
    fn groups_cover_every_segment_once() {
        let sizes = [5, 1, 7, 3, 3, 9, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let groups = minibatch_groups(&sizes, 3, &mut rng);
        let mut all: Vec<usize> = groups.concat();
        all.sort();
        assert_eq!(all, (0..sizes.len()).collect::<Vec<_>>());
        assert!(groups.len() <= 3);
    }

    #[test]
    fn config_checks() {
        assert!(PpoConfig::default().validate().is_ok());
        assert!(PpoConfig { gamma: 0.0, ..PpoConfig::default() }.validate().is_err());
        assert!(PpoConfig { clip: 0.0, ..PpoConfig::default() }.validate().is_err());
        assert!(PpoConfig { alpha: -1.0, ..PpoConfig::default() }.validate().is_err());
    }
}
