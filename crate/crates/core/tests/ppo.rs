use catnav::env::{observation_dim, Action, EnvConfig, GeneratorConfig, TaskKind};
use catnav::il::ScriptedAgent;
use catnav::metrics::MetricsReport;
use catnav::model::{Backbone, ModelConfig, NavModel};
use catnav::rl::*;
use numcore::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ff_model(obs: usize, store: &mut ParamStore, seed: u64) -> NavModel {
    let cfg = ModelConfig {
        backbone: Backbone::Feedforward,
        causal_module: false,
        d_model: 16,
        heads: 1,
        ..ModelConfig::new(obs, 2, 1)
    };
    NavModel::new(cfg, seed, store).unwrap()
}

fn sanity_cfg() -> PpoConfig {
    PpoConfig { horizon: 32, num_envs: 4, total_steps: 50_000, eval_every: 5_000, lr: 1e-3, ..PpoConfig::default() }
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Probability of `action` in state `features` for a memoryless model.
fn prob(m: &NavModel, s: &ParamStore, features: &[f64], action: usize) -> f64 {
    let mut mem = m.begin_episode();
    m.act(s, &mut mem, features, 0, None).unwrap().log_probs()[action].exp()
}

struct ChainEval;

impl TrainHooks for ChainEval {
    fn evaluate(&mut self, m: &NavModel, s: &ParamStore) -> Result<MetricsReport, RlError> {
        let optimal = (0..ChainEnv::STATES - 1).all(|st| {
            let mut mem = m.begin_episode();
            m.act(s, &mut mem, &one_hot(ChainEnv::STATES, st), 0, None).unwrap().greedy() == 1
        });
        let v = if optimal { 1.0 } else { 0.0 };
        Ok(MetricsReport { episodes: 1, sr: v, spl: v, gd: 0.0, ne: None, osr: None })
    }
}

struct BanditEval;

impl TrainHooks for BanditEval {
    fn evaluate(&mut self, m: &NavModel, s: &ParamStore) -> Result<MetricsReport, RlError> {
        let p = (0..2).map(|c| prob(m, s, &one_hot(2, c), c)).fold(1.0, f64::min);
        Ok(MetricsReport { episodes: 2, sr: p, spl: p, gd: 0.0, ne: None, osr: None })
    }
}

#[test]
fn chain_reaches_the_optimal_greedy_policy() {
    for seed in 1..=3 {
        let mut store = ParamStore::new();
        let m = ff_model(ChainEnv::STATES, &mut store, seed);
        let envs = (0..4).map(|_| ChainEnv::new()).collect();
        let run = train(&m, &mut store, envs, &sanity_cfg(), seed, &mut ChainEval).unwrap();
        assert!(run.env_steps <= 50_000);
        assert_eq!(run.rows.last().unwrap().sr, 1.0, "seed {seed}: {:?}", run.rows.iter().map(|r| r.sr).collect::<Vec<_>>());
    }
}

#[test]
fn bandit_picks_the_right_arm() {
    for seed in 1..=3 {
        let mut store = ParamStore::new();
        let m = ff_model(2, &mut store, seed);
        let envs = (0..4).map(|i| BanditEnv::new(seed * 10 + i)).collect();
        let run = train(&m, &mut store, envs, &sanity_cfg(), seed, &mut BanditEval).unwrap();
        let p = run.rows.last().unwrap().sr;
        assert!(p > 0.95, "seed {seed}: correct-arm probability {p}");
    }
}

#[test]
fn gae_hand_recursion() {
    let (g, l) = (0.9, 0.8);
    let (adv, ret) = compute_gae(&[1.0, 1.0], &[0.5, 0.5], &[false, false], 0.0, g, l).unwrap();
    let d1 = 1.0 + g * 0.0 - 0.5;
    let d0 = 1.0 + g * 0.5 - 0.5;
    let a1 = d1;
    let a0 = d0 + g * l * a1;
    assert!((adv[1] - a1).abs() < 1e-15 && (adv[0] - a0).abs() < 1e-15);
    assert!((ret[0] - (a0 + 0.5)).abs() < 1e-15 && (ret[1] - (a1 + 0.5)).abs() < 1e-15);
}

#[test]
fn gae_examples() {
    let (adv, _) = compute_gae(&[1.0, 2.0, 3.0], &[0.0; 3], &[false; 3], 0.0, 1.0, 1.0).unwrap();
    assert_eq!(adv, vec![6.0, 5.0, 3.0]);
    let (adv, _) = compute_gae(&[0.5], &[0.2], &[false], 0.7, 0.9, 0.95).unwrap();
    assert!((adv[0] - (0.5 + 0.9 * 0.7 - 0.2)).abs() < 1e-15);
    assert!(compute_gae(&[1.0], &[0.0, 0.0], &[false], 0.0, 0.9, 0.9).is_err());
}

/// `A_t = sum_k (γλ)^k δ_{t+k}`, truncated after the first done.
fn gae_by_sum(r: &[f64], v: &[f64], done: &[bool], last: f64, g: f64, l: f64) -> Vec<f64> {
    let n = r.len();
    let next_v = |t: usize| if t + 1 < n { v[t + 1] } else { last };
    let delta = |t: usize| r[t] + if done[t] { 0.0 } else { g * next_v(t) } - v[t];
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            let mut w = 1.0;
            for (k, &d) in done.iter().enumerate().skip(t) {
                total += w * delta(k);
                if d {
                    break;
                }
                w *= g * l;
            }
            total
        })
        .collect()
}

#[test]
fn surrogate_examples() {
    let eval = |new: &[f64], old: &[f64], adv: &[f64]| {
        let mut g = Graph::new();
        let n = g.constant(Tensor::vector(new.to_vec()).unwrap());
        let l = ppo_surrogate(&mut g, n, old, adv, 0.2).unwrap();
        g.item(l).unwrap()
    };
    // r = 1: the loss is -mean(A).
    assert!((eval(&[-0.3, -1.1], &[-0.3, -1.1], &[0.5, 1.5]) + 1.0).abs() < 1e-15);
    // A = +1, r = 2: the clipped 1.2 wins the min.
    assert!((eval(&[2f64.ln()], &[0.0], &[1.0]) + 1.2).abs() < 1e-12);
    // A = -1, r = 0.5: min(-0.5, -0.8) = -0.8.
    assert!((eval(&[0.5f64.ln()], &[0.0], &[-1.0]) - 0.8).abs() < 1e-12);
    let mut g = Graph::new();
    let n = g.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
    assert!(ppo_surrogate(&mut g, n, &[0.0], &[1.0, 1.0], 0.2).is_err());
}

fn nav_setup(causal: bool, seed: u64) -> (NavModel, ParamStore, GeneratorConfig) {
    let gen = GeneratorConfig { kind: TaskKind::PointNav, ..GeneratorConfig::default() };
    let obs = observation_dim(gen.kind, 5, gen.num_categories);
    let cfg = ModelConfig { d_model: 16, heads: 2, ffn_dim: 32, causal_module: causal, ..ModelConfig::new(obs, 4, 1) };
    let mut store = ParamStore::new();
    let m = NavModel::new(cfg, seed, &mut store).unwrap();
    (m, store, gen)
}

fn nav_workers(m: &NavModel, gen: &GeneratorConfig, n: u64) -> Vec<Worker<NavEnv>> {
    (0..n).map(|i| Worker::new(m, NavEnv::new(gen.clone(), EnvConfig::default(), 100 + i).unwrap()).unwrap()).collect()
}

#[test]
fn rollouts_have_fixed_length_and_replayable_log_probs() {
    let (m, store, gen) = nav_setup(true, 5);
    let collect = |horizon| {
        let mut workers = nav_workers(&m, &gen, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = collect_rollouts(&m, &store, &mut workers, horizon, &mut rng).unwrap();
        let b = collect_rollouts(&m, &store, &mut workers, horizon, &mut rng).unwrap();
        (a, b)
    };
    let (a, b) = collect(40);
    assert_eq!(a.len(), 3 * 40);
    assert!(a.envs.iter().all(|e| e.steps.len() == 40));
    assert_eq!(collect(40), (a.clone(), b.clone()));

    // Recompute every stored log-probability from the episode segments,
    // including the second buffer whose segments start mid-episode.
    for buf in [&a, &b] {
        let stored: Vec<f64> = buf.flat_steps().map(|s| s.log_prob).collect();
        let actions: Vec<usize> = buf.flat_steps().map(|s| s.action).collect();
        let mut seen = 0;
        for (seg, rows) in buf.segments(m.cfg.obs_dim) {
            let mut g = Graph::new();
            let tr = m.forward(&mut g, &store, std::slice::from_ref(&seg)).unwrap();
            let lsm = g.log_softmax(tr.logits).unwrap();
            let lsm = g.value(lsm);
            for (j, &flat) in rows.iter().enumerate() {
                let lp = lsm.row(seg.loss_from + j)[actions[flat]];
                assert!((lp - stored[flat]).abs() <= 1e-12, "{lp} vs {}", stored[flat]);
                seen += 1;
            }
        }
        assert_eq!(seen, buf.len());
    }
}

#[test]
fn causal_weight_enters_linearly() {
    let (m, store, gen) = nav_setup(true, 6);
    let mut workers = nav_workers(&m, &gen, 2);
    let buf = collect_rollouts(&m, &store, &mut workers, 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let targets = Targets::from_buffer(&buf, 0.99, 0.95).unwrap();
    let segs = buf.segments(m.cfg.obs_dim);
    let batch: Vec<_> = segs.iter().map(|s| s.0.clone()).collect();
    let rows: Vec<&[usize]> = segs.iter().map(|s| s.1.as_slice()).collect();
    let grads = |alpha: f64| {
        let mut g = Graph::new();
        let parts = minibatch_loss(&mut g, &m, &store, &batch, &rows, &targets, 0.2).unwrap();
        let l = total_loss(&mut g, &parts, LossCoefficients { value: 0.5, entropy: 0.01, alpha }).unwrap();
        g.gradients(l).unwrap()
    };
    let (g0, g1, g2) = (grads(0.0), grads(1.0), grads(2.0));
    // Params absent from the α=0 graph are the causal head's; their
    // gradient is the causal term alone.
    let base = |id| g0.iter().find(|(i, _)| *i == id).map(|(_, g)| g.clone());
    for ((id, a), (_, b)) in g1.iter().zip(&g2) {
        let z = base(*id).unwrap_or_else(|| vec![0.0; a.len()]);
        for k in 0..a.len() {
            let one = a[k] - z[k];
            let two = b[k] - z[k];
            assert!((two - 2.0 * one).abs() <= 1e-12 * (1.0 + one.abs()), "{}", store.name(*id));
        }
    }
    assert_eq!(g0.len() + 2, g1.len());
}

#[test]
fn stopping_at_once_never_succeeds_and_evaluation_is_read_only() {
    let (m, store, gen) = nav_setup(false, 7);
    let tasks = heldout_tasks(&gen, 20).unwrap();
    let mut stopper = ScriptedAgent::new(vec![Action::Stop]);
    let (r, _) = evaluate_agent(&mut stopper, &tasks, &EnvConfig::default(), Some(0)).unwrap();
    assert_eq!(r.sr, 0.0);
    assert_eq!(r.spl, 0.0);

    let before = store.clone();
    let (a, ra) = evaluate(&m, &store, &tasks, &EnvConfig::default(), Decode::Greedy, None).unwrap();
    let (b, rb) = evaluate(&m, &store, &tasks, &EnvConfig::default(), Decode::Greedy, None).unwrap();
    assert_eq!((a, ra), (b, rb));
    for id in store.ids() {
        assert_eq!(store.value(id), before.value(id));
        assert!(store.grad(id).iter().all(|&x| x == 0.0));
    }
}

struct NavEval {
    tasks: Vec<(std::sync::Arc<catnav::env::GridSpec>, catnav::env::TaskInstance)>,
}

impl TrainHooks for NavEval {
    fn evaluate(&mut self, m: &NavModel, s: &ParamStore) -> Result<MetricsReport, RlError> {
        Ok(evaluate(m, s, &self.tasks, &EnvConfig::default(), Decode::Greedy, None)?.0)
    }
}

fn short_run(causal: bool, alpha: f64) -> (TrainingRun, ParamStore, NavModel) {
    let (m, mut store, gen) = nav_setup(causal, 11);
    if causal && alpha == 0.0 {
        m.set_causal_trainable(&mut store, false);
    }
    let envs = (0..2).map(|i| NavEnv::new(gen.clone(), EnvConfig::default(), 500 + i).unwrap()).collect();
    let cfg = PpoConfig { horizon: 64, num_envs: 2, total_steps: 1024, eval_every: 256, lr: 1e-3, alpha, ..PpoConfig::default() };
    let mut hooks = NavEval { tasks: heldout_tasks(&gen, 10).unwrap() };
    let run = train(&m, &mut store, envs, &cfg, 3, &mut hooks).unwrap();
    (run, store, m)
}

#[test]
fn training_reruns_are_identical_and_best_is_monotone() {
    let (a, sa, _) = short_run(true, 1.0);
    let (b, sb, _) = short_run(true, 1.0);
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.rows.len(), 4);
    for id in sa.ids() {
        assert_eq!(sa.value(id), sb.value(id));
    }
    let best = a.best_sr_series();
    assert!(best.windows(2).all(|w| w[0] <= w[1]));
    assert!(a.rows.iter().all(|r| r.loss_causal.is_some()));
}

#[test]
fn zero_alpha_with_frozen_head_matches_absent_module() {
    let (with, sw, _) = short_run(true, 0.0);
    let (without, so, _) = short_run(false, 0.0);
    assert_eq!(with.rows.len(), without.rows.len());
    for (a, b) in with.rows.iter().zip(&without.rows) {
        assert!(a.loss_causal.is_some());
        assert_eq!(b.loss_causal, None);
        let strip = |r: &EvalRow| EvalRow { loss_causal: None, ..r.clone() };
        assert_eq!(strip(a), strip(b));
    }
    for id in so.ids() {
        let name = so.name(id);
        let x = sw.value(sw.id(name).unwrap()).data();
        assert!(x.iter().zip(so.value(id).data()).all(|(p, q)| p.to_bits() == q.to_bits()), "{name}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gae_matches_the_explicit_sum(
        steps in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, prop::bool::weighted(0.2)), 1..30),
        last in -2.0f64..2.0,
        g in 0.5f64..1.0,
        l in 0.0f64..1.0,
    ) {
        let r: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let v: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let d: Vec<bool> = steps.iter().map(|s| s.2).collect();
        let (adv, ret) = compute_gae(&r, &v, &d, last, g, l).unwrap();
        let want = gae_by_sum(&r, &v, &d, last, g, l);
        for t in 0..r.len() {
            prop_assert!((adv[t] - want[t]).abs() < 1e-10);
            prop_assert!((ret[t] - (want[t] + v[t])).abs() < 1e-10);
        }
    }

    #[test]
    fn normalized_advantages_have_zero_mean_unit_std(adv in prop::collection::vec(-100.0f64..100.0, 2..200)) {
        let spread = adv.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - adv.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let mut a = adv.clone();
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-10);
        prop_assert!((std - 1.0).abs() < 1e-6);
    }
}
