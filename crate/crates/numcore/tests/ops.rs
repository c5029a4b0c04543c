use std::sync::Arc;

use numcore::{
    grad_check, grad_check_fn, AttentionBlock, Error, GradCheckConfig, Graph, Mask, ParamStore, Stencil, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn eval(f: impl FnOnce(&mut Graph) -> numcore::Var) -> Vec<f64> {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.value(v).data().to_vec()
}

fn triple_loop(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i * k + l] * b[l * m + j];
            }
            c[i * m + j] = s;
        }
    }
    c
}

const TOL: f64 = 1e-5;

#[test]
fn affine_identity_cases() {
    let out = eval(|g| {
        let x = g.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let w = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
        g.affine(x, w, b).unwrap()
    });
    assert_eq!(out, vec![1.0, 2.0]);
    let out = eval(|g| {
        let x = g.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let w = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![1.0, 1.0]).unwrap());
        g.affine(x, w, b).unwrap()
    });
    assert_eq!(out, vec![2.0, 3.0]);
}

#[test]
fn affine_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, vec![3, 2]);
    let w = rand_tensor(&mut rng, vec![2, 4]);
    let b = Tensor::zeros(vec![4]);
    let expect = triple_loop(x.data(), w.data(), 3, 2, 4);
    let out = eval(|g| {
        let (x, w, b) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b));
        g.affine(x, w, b).unwrap()
    });
    for (o, e) in out.iter().zip(&expect) {
        assert!((o - e).abs() < 1e-14);
    }
}

#[test]
fn affine_shape_mismatch_is_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(vec![2, 3]));
    let w = g.constant(Tensor::zeros(vec![2, 2]));
    let b = g.constant(Tensor::zeros(vec![2]));
    assert!(matches!(g.affine(x, w, b), Err(Error::Shape(_))));
}

#[test]
fn layer_norm_examples() {
    let ln = |row: Vec<f64>| {
        let d = row.len();
        eval(|g| {
            let x = g.constant(Tensor::vector(row).unwrap());
            let gain = g.constant(Tensor::vector(vec![1.0; d]).unwrap());
            let bias = g.constant(Tensor::zeros(vec![d]));
            g.layer_norm(x, gain, bias, 1e-12).unwrap()
        })
    };
    assert_eq!(ln(vec![1.0, 1.0, 1.0]), vec![0.0, 0.0, 0.0]);
    for (got, want) in ln(vec![-1.0, 1.0]).iter().zip([-1.0, 1.0]) {
        assert!((got - want).abs() < 1e-10);
    }
    for (got, want) in ln(vec![0.0, 2.0]).iter().zip([-1.0, 1.0]) {
        assert!((got - want).abs() < 1e-10);
    }
}

#[test]
fn layer_norm_rejects_empty_rows() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![0], vec![]).unwrap());
    let gain = g.constant(Tensor::new(vec![0], vec![]).unwrap());
    assert!(g.layer_norm(x, gain, gain, 1e-5).is_err());
}

#[test]
fn softmax_masked_examples() {
    let sm = |scores: Vec<f64>, allowed: Vec<bool>| {
        // embed the 1×2 row as the first row of a 2×2 problem
        let mut s = scores.clone();
        s.extend([0.0, 0.0]);
        let mut a = allowed.clone();
        a.extend([true, true]);
        let mask = Mask::new(2, a).unwrap();
        let out = eval(|g| {
            let x = g.constant(Tensor::matrix(2, 2, s).unwrap());
            g.softmax_masked(x, &mask).unwrap()
        });
        out[..2].to_vec()
    };
    assert_eq!(sm(vec![0.0, 0.0], vec![true, true]), vec![0.5, 0.5]);
    assert_eq!(sm(vec![5.0, 9.0], vec![true, false]), vec![1.0, 0.0]);
    let r = sm(vec![2f64.ln(), 0.0], vec![true, true]);
    assert!((r[0] - 2.0 / 3.0).abs() < 1e-15 && (r[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_fully_masked_row_is_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(vec![2, 2]));
    let mask = Mask::new(2, vec![false, false, true, true]).unwrap();
    assert!(matches!(g.softmax_masked(x, &mask), Err(Error::FullyMasked(0))));
}

#[test]
fn backprop_trivial_examples() {
    let mut store = ParamStore::new();
    let x = store.register("x", Tensor::scalar(3.0).unwrap()).unwrap();
    let mut g = Graph::new();
    let xv = g.param(&store, x);
    let y = g.square(xv).unwrap();
    g.backward(y, &mut store).unwrap();
    assert_eq!(store.grad(x), &[6.0]);

    let mut store = ParamStore::new();
    let x = store.register("x", Tensor::vector(vec![0.3, -2.0, 7.0]).unwrap()).unwrap();
    let mut g = Graph::new();
    let xv = g.param(&store, x);
    let s = g.sum(xv).unwrap();
    g.backward(s, &mut store).unwrap();
    assert_eq!(store.grad(x), &[1.0, 1.0, 1.0]);
}

#[test]
fn backprop_rejects_non_scalar_loss() {
    let mut store = ParamStore::new();
    let x = store.register("x", Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
    let mut g = Graph::new();
    let xv = g.param(&store, x);
    assert!(matches!(g.backward(xv, &mut store), Err(Error::NotScalar(_))));
}

#[test]
fn nan_is_a_hard_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(800.0).unwrap());
    assert!(matches!(g.exp(x), Err(Error::NonFinite(_))));
}

fn check(input: Tensor, f: impl Fn(&mut Graph, numcore::Var) -> numcore::Result<numcore::Var>) -> f64 {
    grad_check_fn(input, f, &GradCheckConfig::default()).unwrap().max_rel_error
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, vec![3, 4]);
    let y = rand_tensor(&mut rng, vec![3, 4]);
    type Op = Box<dyn Fn(&mut Graph, numcore::Var) -> numcore::Result<numcore::Var>>;
    let ops: Vec<(&str, Op)> = vec![
        ("gelu", Box::new(|g, v| { let a = g.gelu(v)?; g.sum(a) })),
        ("tanh", Box::new(|g, v| { let a = g.tanh(v)?; g.sum(a) })),
        ("sigmoid", Box::new(|g, v| { let a = g.sigmoid(v)?; g.sum(a) })),
        ("exp", Box::new(|g, v| { let a = g.exp(v)?; g.mean(a) })),
        ("log_softmax", Box::new({
            let y = y.clone();
            move |g, v| { let a = g.log_softmax(v)?; let c = g.constant(y.clone()); let m = g.mul(a, c)?; g.sum(m) }
        })),
        ("mse", Box::new({ let y = y.clone(); move |g, v| { let c = g.constant(y.clone()); g.mse(v, c) } })),
        ("minimum", Box::new({ let y = y.clone(); move |g, v| { let c = g.constant(y.clone()); let m = g.minimum(v, c)?; g.sum(m) } })),
        ("clamp", Box::new(|g, v| { let c = g.clamp(v, -0.5, 0.5)?; let s = g.square(c)?; g.sum(s) })),
        ("pick", Box::new(|g, v| { let p = g.pick(v, &[0, 3, 1])?; let s = g.square(p)?; g.sum(s) })),
        ("gather", Box::new(|g, v| { let r = g.gather_rows(v, &[2, 0, 2])?; let s = g.square(r)?; g.sum(s) })),
        ("slice", Box::new(|g, v| { let r = g.slice_cols(v, 1, 2)?; let s = g.square(r)?; g.sum(s) })),
        ("concat", Box::new(|g, v| {
            let a = g.concat_cols(v, v)?; let b = g.concat_rows(&[a, a])?; let s = g.square(b)?; g.mean(s)
        })),
    ];
    for (name, f) in ops {
        let err = check(x.clone(), f);
        assert!(err < TOL, "{name}: {err}");
    }
}

#[test]
fn matmul_and_affine_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let x = store.register("x", rand_tensor(&mut rng, vec![3, 2])).unwrap();
    let w = store.register("w", rand_tensor(&mut rng, vec![2, 4])).unwrap();
    let b = store.register("b", rand_tensor(&mut rng, vec![4])).unwrap();
    let m = store.register("m", rand_tensor(&mut rng, vec![4, 3])).unwrap();
    let rep = grad_check(
        &mut store,
        |g, s| {
            let (x, w, b, m) = (g.param(s, x), g.param(s, w), g.param(s, b), g.param(s, m));
            let y = g.affine(x, w, b)?;
            let z = g.matmul(y, m)?;
            let t = g.tanh(z)?;
            g.sum(t)
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(rep.max_rel_error < TOL, "{rep:?}");
    assert_eq!(rep.coords_checked, 6 + 8 + 4 + 12);
}

#[test]
fn composed_pipeline_matches_finite_differences() {
    // affine -> layer_norm -> softmax_masked -> MSE
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let x = store.register("x", rand_tensor(&mut rng, vec![3, 5])).unwrap();
    let w = store.register("w", rand_tensor(&mut rng, vec![5, 3])).unwrap();
    let b = store.register("b", rand_tensor(&mut rng, vec![3])).unwrap();
    let gain = store.register("gain", rand_tensor(&mut rng, vec![3])).unwrap();
    let bias = store.register("bias", rand_tensor(&mut rng, vec![3])).unwrap();
    let target = rand_tensor(&mut rng, vec![3, 3]);
    let mask = Mask::lower_triangular(3);
    let rep = grad_check(
        &mut store,
        |g, s| {
            let (xv, wv, bv) = (g_param(g, s, x), g_param(g, s, w), g_param(g, s, b));
            let y = g.affine(xv, wv, bv)?;
            let gn = g.param(s, gain);
            let bn = g.param(s, bias);
            let n = g.layer_norm(y, gn, bn, 1e-5)?;
            let p = g.softmax_masked(n, &mask)?;
            let t = g.constant(target.clone());
            g.mse(p, t)
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(rep.max_rel_error < TOL, "{rep:?}");
}

fn g_param(g: &mut Graph, s: &ParamStore, id: numcore::ParamId) -> numcore::Var {
    g.param(s, id)
}

#[test]
fn attention_gradients_over_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let q = store.register("q", rand_tensor(&mut rng, vec![5, 4])).unwrap();
    let k = store.register("k", rand_tensor(&mut rng, vec![5, 4])).unwrap();
    let v = store.register("v", rand_tensor(&mut rng, vec![5, 4])).unwrap();
    let w = rand_tensor(&mut rng, vec![5, 4]);
    let blocks = vec![
        AttentionBlock { start: 0, mask: Arc::new(Mask::lower_triangular(3)) },
        AttentionBlock { start: 3, mask: Arc::new(Mask::full(2)) },
    ];
    let rep = grad_check(
        &mut store,
        |g, s| {
            let (q, k, v) = (g.param(s, q), g.param(s, k), g.param(s, v));
            let o = g.attention(q, k, v, 2, blocks.clone())?;
            let c = g.constant(w.clone());
            let m = g.mul(o, c)?;
            g.sum(m)
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(rep.max_rel_error < TOL, "{rep:?}");
}

#[test]
fn attention_matches_explicit_composition() {
    // single head: softmax_masked(q kᵀ / sqrt(d)) v
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (q, k, v) = (rand_tensor(&mut rng, vec![3, 2]), rand_tensor(&mut rng, vec![3, 2]), rand_tensor(&mut rng, vec![3, 2]));
    let mask = Mask::lower_triangular(3);
    let fused = eval(|g| {
        let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        g.attention(q, k, v, 1, vec![AttentionBlock { start: 0, mask: Arc::new(mask.clone()) }]).unwrap()
    });
    let mut kt = vec![0.0; 6];
    for i in 0..3 {
        for j in 0..2 {
            kt[j * 3 + i] = k.data()[i * 2 + j];
        }
    }
    let composed = eval(|g| {
        let qv = g.constant(q.clone());
        let ktv = g.constant(Tensor::matrix(2, 3, kt).unwrap());
        let s = g.matmul(qv, ktv).unwrap();
        let s = g.scale(s, 1.0 / 2f64.sqrt()).unwrap();
        let p = g.softmax_masked(s, &mask).unwrap();
        let vv = g.constant(v.clone());
        g.matmul(p, vv).unwrap()
    });
    for (a, b) in fused.iter().zip(&composed) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn gru_cell_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let gx = store.register("gx", rand_tensor(&mut rng, vec![2, 9])).unwrap();
    let h = store.register("h", rand_tensor(&mut rng, vec![2, 3])).unwrap();
    let u = store.register("u", rand_tensor(&mut rng, vec![3, 9])).unwrap();
    let bh = store.register("bh", rand_tensor(&mut rng, vec![9])).unwrap();
    let rep = grad_check(
        &mut store,
        |g, s| {
            let (gx, h, u, bh) = (g.param(s, gx), g.param(s, h), g.param(s, u), g.param(s, bh));
            let h1 = g.gru_cell(gx, h, u, bh)?;
            let h2 = g.gru_cell(gx, h1, u, bh)?;
            let sq = g.square(h2)?;
            g.sum(sq)
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(rep.max_rel_error < TOL, "{rep:?}");
}

#[test]
fn quadratic_bowl_is_exact() {
    let x = Tensor::vector(vec![0.5, -1.5, 2.0]).unwrap();
    let err = check(x, |g, v| {
        let s = g.square(v)?;
        g.sum(s)
    });
    assert!(err < 1e-8, "{err}");
}

#[test]
fn broken_gradient_is_detected() {
    let x = Tensor::vector(vec![0.5, -1.5, 2.0]).unwrap();
    let err = check(x, |g, v| {
        // forward x^2, backward claims 3x
        let y = g.custom_unary(
            v,
            |t| t.data().iter().map(|a| a * a).collect(),
            |x, _y, dy| x.data().iter().zip(dy).map(|(a, d)| 3.0 * a * d).collect(),
        )?;
        g.sum(y)
    });
    assert!(err > 1e-2, "{err}");
}

#[test]
fn random_subset_checks_requested_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&mut rng, vec![10, 10]);
    let cfg = GradCheckConfig { max_coords_per_param: Some(7), seed: 3, ..Default::default() };
    let rep = grad_check_fn(x, |g, v| { let t = g.tanh(v)?; g.sum(t) }, &cfg).unwrap();
    assert_eq!(rep.coords_checked, 7);
    assert!(rep.max_rel_error < TOL);
}

#[test]
fn frozen_params_receive_no_gradient() {
    let mut store = ParamStore::new();
    let a = store.register("a", Tensor::scalar(2.0).unwrap()).unwrap();
    let b = store.register("b", Tensor::scalar(5.0).unwrap()).unwrap();
    store.set_trainable(b, false);
    let mut g = Graph::new();
    let (av, bv) = (g.param(&store, a), g.param(&store, b));
    let y = g.mul(av, bv).unwrap();
    g.backward(y, &mut store).unwrap();
    assert_eq!(store.grad(a), &[5.0]);
    assert_eq!(store.grad(b), &[0.0]);
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut store = ParamStore::new();
        let x = store.register("x", rand_tensor(&mut rng, vec![4, 8])).unwrap();
        let w = store.register("w", rand_tensor(&mut rng, vec![8, 8])).unwrap();
        let mut g = Graph::new();
        let (xv, wv) = (g.param(&store, x), g.param(&store, w));
        let y = g.matmul(xv, wv).unwrap();
        let y = g.gelu(y).unwrap();
        let l = g.mean(y).unwrap();
        g.backward(l, &mut store).unwrap();
        (store.grad(x).to_vec(), store.grad(w).to_vec())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-20.0f64..20.0, 16), bits in prop::collection::vec(any::<bool>(), 16)) {
        let mut allowed = bits.clone();
        for i in 0..4 { allowed[i * 4 + i] = true; }
        let mask = Mask::new(4, allowed.clone()).unwrap();
        let out = eval(|g| {
            let x = g.constant(Tensor::matrix(4, 4, vals.clone()).unwrap());
            g.softmax_masked(x, &mask).unwrap()
        });
        for i in 0..4 {
            let s: f64 = out[i * 4..(i + 1) * 4].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            for j in 0..4 {
                if !allowed[i * 4 + j] { prop_assert_eq!(out[i * 4 + j], 0.0); }
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_standardised(vals in prop::collection::vec(-50.0f64..50.0, 2..12)) {
        let spread = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - vals.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let d = vals.len();
        let out = eval(|g| {
            let x = g.constant(Tensor::vector(vals.clone()).unwrap());
            let gain = g.constant(Tensor::vector(vec![1.0; d]).unwrap());
            let bias = g.constant(Tensor::zeros(vec![d]));
            g.layer_norm(x, gain, bias, 1e-12).unwrap()
        });
        let mean = out.iter().sum::<f64>() / d as f64;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        prop_assert!(mean.abs() < 1e-10);
        prop_assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn five_point_stencil_tolerates_a_coarse_step() {
    // exp has every derivative equal to itself; at step 1e-2 the central
    // formula is off by about h^2/6 while the five-point one is not.
    let x = Tensor::vector(vec![0.3, -0.8]).unwrap();
    let f = |g: &mut Graph, v| {
        let e = g.exp(v)?;
        g.sum(e)
    };
    let central = GradCheckConfig { step: 1e-2, ..Default::default() };
    let five = GradCheckConfig { stencil: Stencil::FivePoint, ..central.clone() };
    let c = grad_check_fn(x.clone(), f, &central).unwrap().max_rel_error;
    let p = grad_check_fn(x, f, &five).unwrap().max_rel_error;
    assert!((c - 1e-4 / 6.0).abs() < 1e-6, "{c}");
    assert!(p < 1e-8, "{p}");
}
