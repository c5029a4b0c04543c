//! Plain forward kernels on row-major slices.
//!
//! The differentiable graph ops call these for their forward values, and
//! inference paths that bypass the tape call the same functions.

/// `c = a · b` for row-major `a: n×k`, `b: k×m`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    gemm(1.0, a, false, b, false, &mut c, n, k, m);
    c
}

/// `c += alpha · op(a) · op(b)` where `op` optionally transposes.
///
/// Shapes are given for the *logical* product: `op(a)` is `n×k` and
/// `op(b)` is `k×m`; `c` is `n×m`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    alpha: f64,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    n: usize,
    k: usize,
    m: usize,
) {
    if n == 0 || m == 0 || k == 0 {
        return;
    }
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(c.len(), n * m);
    // stored a is n×k (row stride k) or k×n (row stride n) when transposed
    let (rsa, csa) = if a_t { (1, n as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (m as isize, 1) };
    // SAFETY: slice lengths checked above; strides describe in-bounds views.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// `y = x·W + b` for `x: n×d_in`, `W: d_in×d_out`.
pub fn affine(x: &[f64], w: &[f64], b: &[f64], n: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(n * d_out);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    if n == 1 {
        // a single row is faster as a sequence of axpys than through gemm packing
        for (xi, wr) in x.iter().zip(w.chunks_exact(d_out)) {
            if *xi != 0.0 {
                for (yj, wj) in y.iter_mut().zip(wr) {
                    *yj += xi * wj;
                }
            }
        }
        return y;
    }
    gemm(1.0, x, false, w, false, &mut y, n, d_in, d_out);
    y
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form Gaussian error linear unit.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Normalises one row in place into `out`; returns `(mean, 1/std)`.
pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], eps: f64, out: &mut [f64]) -> (f64, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let rstd = 1.0 / (var + eps).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    (mean, rstd)
}

/// Softmax over the allowed entries of one row; disallowed entries are
/// exactly zero. Returns `None` when no entry is allowed.
pub fn softmax_masked_row(scores: &[f64], allowed: &[bool], out: &mut [f64]) -> Option<()> {
    let mut max = f64::NEG_INFINITY;
    for (s, &a) in scores.iter().zip(allowed) {
        if a && *s > max {
            max = *s;
        }
    }
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut total = 0.0;
    for i in 0..scores.len() {
        if allowed[i] {
            let e = (scores[i] - max).exp();
            out[i] = e;
            total += e;
        } else {
            out[i] = 0.0;
        }
    }
    for (o, &a) in out.iter_mut().zip(allowed) {
        if a {
            *o /= total;
        }
    }
    Some(())
}

/// Log-softmax of one row.
pub fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Attention of one query row against `keys`/`values` rows `0..allowed.len()`
/// restricted to allowed positions, for a single head slice.
///
/// `q` is the head slice of the query, `k_rows(j)`/`v_rows(j)` return head
/// slices. Writes probabilities into `probs` and the mixed value into `out`.
#[allow(clippy::too_many_arguments)]
pub fn attend_row<'a, K, V>(
    q: &[f64],
    n: usize,
    allowed: &[bool],
    k_rows: K,
    v_rows: V,
    scale: f64,
    probs: &mut [f64],
    out: &mut [f64],
) -> Option<()>
where
    K: Fn(usize) -> &'a [f64],
    V: Fn(usize) -> &'a [f64],
{
    let mut scores = vec![0.0; n];
    for (j, s) in scores.iter_mut().enumerate() {
        if allowed[j] {
            *s = dot(q, k_rows(j)) * scale;
        }
    }
    softmax_masked_row(&scores, allowed, probs)?;
    out.iter_mut().for_each(|o| *o = 0.0);
    for (j, &p) in probs.iter().enumerate().take(n) {
        if p != 0.0 {
            for (o, v) in out.iter_mut().zip(v_rows(j)) {
                *o += p * v;
            }
        }
    }
    Some(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gated recurrent unit cell on precomputed input projections.
///
/// `gx` holds `x·W_x + b_x` laid out as `[r | z | n]` (3·d wide), `gh` holds
/// `h·U + b_h` in the same layout. Returns `(h_next, r, z, n)`.
pub fn gru_cell(gx: &[f64], gh: &[f64], h: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = h.len();
    let mut r = vec![0.0; d];
    let mut z = vec![0.0; d];
    let mut nn = vec![0.0; d];
    let mut out = vec![0.0; d];
    for i in 0..d {
        r[i] = sigmoid(gx[i] + gh[i]);
        z[i] = sigmoid(gx[d + i] + gh[d + i]);
        nn[i] = (gx[2 * d + i] + r[i] * gh[2 * d + i]).tanh();
        out[i] = (1.0 - z[i]) * nn[i] + z[i] * h[i];
    }
    (out, r, z, nn)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut c = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for l in 0..k {
                    c[i * m + j] += a[i * k + l] * b[l * m + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_transposes_match_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        for (x, y) in c.iter().zip(naive(&a, &b, 2, 3, 4)) {
            assert!((x - y).abs() < 1e-14);
        }

        // a stored transposed (3x2), logical 2x3
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let mut c2 = vec![0.0; 8];
        gemm(1.0, &at, true, &b, false, &mut c2, 2, 3, 4);
        for (x, y) in c2.iter().zip(&c) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
