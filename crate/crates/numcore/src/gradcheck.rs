use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Graph, ParamStore, Result, Tensor, Var};

/// Finite-difference formula.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error `O(h^2)`.
    #[default]
    Central,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, error `O(h^4)`;
    /// allows a larger step and so less cancellation.
    FivePoint,
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    pub stencil: Stencil,
    /// Check at most this many coordinates of each parameter, chosen with
    /// `seed`. `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
    /// Denominator floor of the relative error, so near-zero gradients are
    /// compared on an absolute scale.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, stencil: Stencil::Central, max_coords_per_param: None, seed: 0, floor: 1e-6 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares backprop gradients of the scalar built by `f` against central
/// differences for every trainable parameter of `store`.
pub fn grad_check<F>(store: &mut ParamStore, f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        let v = g.item(loss)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("grad_check objective".into()))
        }
    };
    let analytic = {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        g.gradients(loss)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    for (id, grad) in analytic {
        let n = grad.len();
        let coords: Vec<usize> = match cfg.max_coords_per_param {
            Some(k) if k < n => {
                log::info!("grad_check: {} coords of {} ({n} total), seed {}", k, store.name(id), cfg.seed);
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let original = store.value(id).clone();
        for c in coords {
            let mut at = |offset: f64| -> Result<f64> {
                let mut t = original.clone();
                t.data_mut()[c] += offset;
                store.set_value(id, t)?;
                eval(store)
            };
            let h = cfg.step;
            let numeric = match cfg.stencil {
                Stencil::Central => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::FivePoint => (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h),
            };
            store.set_value(id, original.clone())?;
            let err = relative_error(grad[c], numeric, cfg.floor);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((store.name(id).to_string(), c));
                }
            }
        }
    }
    Ok(report)
}

/// Gradient check of a function of one free tensor, for op-level tests.
pub fn grad_check_fn<F>(input: Tensor, f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let id = store.register("x", input)?;
    grad_check(
        &mut store,
        |g, s| {
            let x = g.param(s, id);
            f(g, x)
        },
        cfg,
    )
}
