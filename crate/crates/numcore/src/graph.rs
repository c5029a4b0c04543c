//! Tape-recorded computation graph with reverse-mode differentiation.
//!
//! Ops are appended to a flat node list as they are evaluated, so node order
//! is already a topological order. `backward` walks it in reverse once.

use std::sync::Arc;

use crate::kernels::{self, gemm};
use crate::tensor::check_finite;
use crate::{Error, ParamId, ParamStore, Result, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Square boolean attention mask; `allowed(i, j)` means row `i` may read
/// column `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    n: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(n: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != n * n {
            return Err(Error::Shape(format!("mask of size {n} needs {} entries", n * n)));
        }
        Ok(Mask { n, allowed })
    }

    pub fn full(n: usize) -> Self {
        Mask { n, allowed: vec![true; n * n] }
    }

    /// Row `i` may read every column `j <= i`.
    pub fn lower_triangular(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                allowed[i * n + j] = true;
            }
        }
        Mask { n, allowed }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.n..(i + 1) * self.n]
    }
}

/// A contiguous run of rows that attend only among themselves.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub start: usize,
    pub mask: Arc<Mask>,
}

type CustomBackward = Box<dyn Fn(&Tensor, &Tensor, &[f64]) -> Vec<f64> + Send + Sync>;

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(f64, f64)> },
    SoftmaxMasked(Var),
    LogSoftmax(Var),
    GatherRows { src: Var, idx: Vec<usize> },
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    Pick { x: Var, idx: Vec<usize> },
    Clamp { x: Var, lo: f64, hi: f64 },
    Minimum(Var, Var),
    Attention(Box<AttentionCache>),
    GruCell(Box<GruCache>),
    Custom { x: Var, backward: CustomBackward },
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    blocks: Vec<AttentionBlock>,
    probs: Vec<f64>,
}

struct GruCache {
    gx: Var,
    h: Var,
    u: Var,
    bh: Var,
    gh: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Shape(format!("{op}: {detail}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(op_name, &data)?;
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value: Tensor::from_parts(shape, data), op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that takes no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Constant, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Copies `v`'s value into a new gradient-free node.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    /// Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if id.0 >= self.param_vars.len() {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let needs_grad = store.is_trainable(id);
        self.nodes.push(Node { value: store.value(id).clone(), op: Op::Param(id), needs_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(a).rows_cols();
        let bt = self.value(b);
        if bt.shape().len() != 2 || bt.shape()[0] != k {
            return Err(shape_err("matmul", format!("{:?} x {:?}", self.value(a).shape(), bt.shape())));
        }
        let m = bt.shape()[1];
        let data = kernels::matmul(self.value(a).data(), bt.data(), n, k, m);
        self.push("matmul", vec![n, m], data, Op::MatMul(a, b), &[a, b])
    }

    /// `x·W + b`; a 1-D `x` is treated as one row and yields a 1-D result.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xt = self.value(x);
        let (n, d_in) = xt.rows_cols();
        let wt = self.value(w);
        let bt = self.value(b);
        if wt.shape().len() != 2 || wt.shape()[0] != d_in || bt.len() != wt.shape()[1] {
            return Err(shape_err(
                "affine",
                format!("x {:?}, W {:?}, b {:?}", xt.shape(), wt.shape(), bt.shape()),
            ));
        }
        let d_out = wt.shape()[1];
        let data = kernels::affine(xt.data(), wt.data(), bt.data(), n, d_in, d_out);
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        self.push("affine", shape, data, Op::Affine(x, w, b), &[x, w, b])
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(name, shape, data, op, &[a, b])
    }

    fn map(&mut self, name: &str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| f(*x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(name, shape, data, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("minimum", a, b, Op::Minimum(a, b), f64::min)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("scale", a, Op::Scale(a, c), |x| x * c)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map("gelu", a, Op::Gelu(a), kernels::gelu)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, Op::Sigmoid(a), kernels::sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map("square", a, Op::Square(a), |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map("clamp", a, Op::Clamp { x: a, lo, hi }, |x| x.clamp(lo, hi))
    }

    /// Per-row normalisation over the last axis, then `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xt = self.value(x);
        let (rows, d) = xt.rows_cols();
        if d == 0 || self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(shape_err("layer_norm", format!("x {:?}, gain/bias must have {d} entries", xt.shape())));
        }
        let mut out = vec![0.0; rows * d];
        let mut stats = Vec::with_capacity(rows);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for r in 0..rows {
            stats.push(kernels::layer_norm_row(xt.row(r), g, b, eps, &mut out[r * d..(r + 1) * d]));
        }
        let shape = xt.shape().to_vec();
        self.push("layer_norm", shape, out, Op::LayerNorm { x, gain, bias, stats }, &[x, gain, bias])
    }

    /// Row softmax restricted to `mask`; masked entries come out exactly 0.
    pub fn softmax_masked(&mut self, scores: Var, mask: &Mask) -> Result<Var> {
        let st = self.value(scores);
        let (n, c) = st.rows_cols();
        if n != c || mask.size() != n {
            return Err(shape_err("softmax_masked", format!("scores {:?}, mask {}", st.shape(), mask.size())));
        }
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            kernels::softmax_masked_row(st.row(i), mask.row(i), &mut out[i * n..(i + 1) * n])
                .ok_or(Error::FullyMasked(i))?;
        }
        let shape = st.shape().to_vec();
        self.push("softmax_masked", shape, out, Op::SoftmaxMasked(scores), &[scores])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let (rows, c) = xt.rows_cols();
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            kernels::log_softmax_row(xt.row(r), &mut out[r * c..(r + 1) * c]);
        }
        let shape = xt.shape().to_vec();
        self.push("log_softmax", shape, out, Op::LogSoftmax(x), &[x])
    }

    /// Rows `idx[i]` of `src`, as a new `len(idx)×cols` matrix.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let st = self.value(src);
        let (rows, c) = st.rows_cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(Error::IndexOutOfRange { index: i, len: rows });
            }
            out.extend_from_slice(st.row(i));
        }
        self.push("gather_rows", vec![idx.len(), c], out, Op::GatherRows { src, idx: idx.to_vec() }, &[src])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca) = self.value(a).rows_cols();
        let (nb, cb) = self.value(b).rows_cols();
        if na != nb {
            return Err(shape_err("concat_cols", format!("{na} rows vs {nb} rows")));
        }
        let mut out = Vec::with_capacity(na * (ca + cb));
        for r in 0..na {
            out.extend_from_slice(self.value(a).row(r));
            out.extend_from_slice(self.value(b).row(r));
        }
        let shape = if self.value(a).shape().len() == 1 { vec![ca + cb] } else { vec![na, ca + cb] };
        self.push("concat_cols", shape, out, Op::ConcatCols(a, b), &[a, b])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_rows", "no inputs".into()));
        };
        let c = self.value(first).rows_cols().1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.value(p).rows_cols();
            if pc != c {
                return Err(shape_err("concat_rows", format!("{pc} cols vs {c} cols")));
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        self.push("concat_rows", vec![rows, c], out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.value(x).rows_cols();
        if start + len > c {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {c}")));
        }
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&self.value(x).row(r)[start..start + len]);
        }
        self.push("slice_cols", vec![n, len], out, Op::SliceCols { x, start }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Empty("mean"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", vec![1], vec![s], Op::Mean(x), &[x])
    }

    /// Mean of squared differences over every entry.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// `out[i] = x[i, idx[i]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, c) = self.value(x).rows_cols();
        if idx.len() != n {
            return Err(shape_err("pick", format!("{} indices for {n} rows", idx.len())));
        }
        let mut out = Vec::with_capacity(n);
        for (r, &i) in idx.iter().enumerate() {
            if i >= c {
                return Err(Error::IndexOutOfRange { index: i, len: c });
            }
            out.push(self.value(x).row(r)[i]);
        }
        self.push("pick", vec![n], out, Op::Pick { x, idx: idx.to_vec() }, &[x])
    }

    /// Multi-head masked self-attention over packed rows.
    ///
    /// `q`, `k`, `v` are `N×d`; `blocks` partition the rows into contiguous
    /// runs, each attending only within itself under its mask. The head
    /// outputs are concatenated back into `N×d` (no output projection).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, blocks: Vec<AttentionBlock>) -> Result<Var> {
        let (n, d) = self.value(q).rows_cols();
        if self.value(k).rows_cols() != (n, d) || self.value(v).rows_cols() != (n, d) {
            return Err(shape_err("attention", "q, k, v must share a shape".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("dim {d} not divisible by {heads} heads")));
        }
        let mut cursor = 0;
        for b in &blocks {
            if b.start != cursor {
                return Err(shape_err("attention", "blocks must tile the rows in order".into()));
            }
            cursor += b.mask.size();
        }
        if cursor != n {
            return Err(shape_err("attention", format!("blocks cover {cursor} of {n} rows")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let total: usize = blocks.iter().map(|b| b.mask.size().pow(2)).sum::<usize>() * heads;
        let mut probs = vec![0.0; total];
        let mut out = vec![0.0; n * d];
        let mut off = 0;
        let mut head_out = vec![0.0; dh];
        for b in &blocks {
            let len = b.mask.size();
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..len {
                    let row = b.start + i;
                    let p = &mut probs[off + i * len..off + (i + 1) * len];
                    kernels::attend_row(
                        &qd[row * d + c0..row * d + c0 + dh],
                        len,
                        b.mask.row(i),
                        |j| &kd[(b.start + j) * d + c0..(b.start + j) * d + c0 + dh],
                        |j| &vd[(b.start + j) * d + c0..(b.start + j) * d + c0 + dh],
                        scale,
                        p,
                        &mut head_out,
                    )
                    .ok_or(Error::FullyMasked(i))?;
                    out[row * d + c0..row * d + c0 + dh].copy_from_slice(&head_out);
                }
                off += len * len;
            }
        }
        let cache = AttentionCache { q, k, v, heads, blocks, probs };
        self.push("attention", vec![n, d], out, Op::Attention(Box::new(cache)), &[q, k, v])
    }

    /// One gated-recurrent step for a batch of rows.
    ///
    /// `gx` is the input projection `x·W + b` (`B×3d`, gates ordered
    /// reset, update, candidate), `h` the previous state (`B×d`), `u` the
    /// recurrent weights (`d×3d`) and `bh` their bias.
    pub fn gru_cell(&mut self, gx: Var, h: Var, u: Var, bh: Var) -> Result<Var> {
        let (bsz, d) = self.value(h).rows_cols();
        if self.value(gx).rows_cols() != (bsz, 3 * d)
            || self.value(u).shape() != [d, 3 * d]
            || self.value(bh).len() != 3 * d
        {
            return Err(shape_err("gru_cell", format!("state {:?}", self.value(h).shape())));
        }
        let gh = kernels::affine(self.value(h).data(), self.value(u).data(), self.value(bh).data(), bsz, d, 3 * d);
        let mut out = Vec::with_capacity(bsz * d);
        let (mut rs, mut zs, mut ns) = (Vec::new(), Vec::new(), Vec::new());
        for row in 0..bsz {
            let (o, r, z, nn) = kernels::gru_cell(
                self.value(gx).row(row),
                &gh[row * 3 * d..(row + 1) * 3 * d],
                self.value(h).row(row),
            );
            out.extend(o);
            rs.extend(r);
            zs.extend(z);
            ns.extend(nn);
        }
        let cache = GruCache { gx, h, u, bh, gh, r: rs, z: zs, n: ns };
        self.push("gru_cell", vec![bsz, d], out, Op::GruCell(Box::new(cache)), &[gx, h, u, bh])
    }

    /// Elementwise op with a caller-supplied derivative.
    ///
    /// `backward(x, y, dy)` returns `dx`. Mostly useful for tests of the
    /// gradient checker itself.
    pub fn custom_unary(
        &mut self,
        x: Var,
        forward: impl Fn(&Tensor) -> Vec<f64>,
        backward: impl Fn(&Tensor, &Tensor, &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Result<Var> {
        let data = forward(self.value(x));
        let shape = self.value(x).shape().to_vec();
        if data.len() != self.value(x).len() {
            return Err(shape_err("custom_unary", "forward changed the length".into()));
        }
        self.push("custom_unary", shape, data, Op::Custom { x, backward: Box::new(backward) }, &[x])
    }

    /// Reverse pass from a scalar `loss`; returns per-parameter gradients in
    /// registration order.
    pub fn gradients(&self, loss: Var) -> Result<Vec<(ParamId, Vec<f64>)>> {
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            check_finite("backward", &g)?;
            self.backward_node(node, &g, &mut grads, &mut out)?;
        }
        out.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    /// Reverse pass that adds the parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        for (id, g) in self.gradients(loss)? {
            store.accumulate_grad(id, &g)?;
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Vec<(ParamId, Vec<f64>)>,
    ) -> Result<()> {
        let val = |v: Var| self.value(v).data();
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => out.push((*id, g.to_vec())),
            Op::MatMul(a, b) => {
                let (n, k) = self.value(*a).rows_cols();
                let m = self.value(*b).shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(1.0, g, false, val(*b), true, ga, n, m, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(1.0, val(*a), true, g, false, gb, k, n, m);
                }
            }
            Op::Affine(x, w, b) => {
                let (n, d_in) = self.value(*x).rows_cols();
                let d_out = self.value(*w).shape()[1];
                if let Some(gx) = self.slot(grads, *x) {
                    gemm(1.0, g, false, val(*w), true, gx, n, d_out, d_in);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    gemm(1.0, val(*x), true, g, false, gw, d_in, n, d_out);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for r in 0..n {
                        for (acc, v) in gb.iter_mut().zip(&g[r * d_out..(r + 1) * d_out]) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        if av[i] <= bv[i] {
                            ga[i] += g[i];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        if av[i] > bv[i] {
                            gb[i] += g[i];
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::Gelu(a) => {
                let av = val(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * kernels::gelu_grad(av[i]);
                    }
                }
            }
            Op::Tanh(a) | Op::Sigmoid(a) | Op::Exp(a) => {
                let y = node.value.data();
                let deriv: fn(f64) -> f64 = match &node.op {
                    Op::Tanh(_) => |y| 1.0 - y * y,
                    Op::Sigmoid(_) => |y| y * (1.0 - y),
                    _ => |y| y,
                };
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * deriv(y[i]);
                    }
                }
            }
            Op::Square(a) => {
                let av = val(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += 2.0 * av[i] * g[i];
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..g.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let (rows, d) = self.value(*x).rows_cols();
                let xv = val(*x);
                let gain_v = val(*gain);
                let mut xhat = vec![0.0; rows * d];
                for r in 0..rows {
                    let (mean, rstd) = stats[r];
                    for c in 0..d {
                        xhat[r * d + c] = (xv[r * d + c] - mean) * rstd;
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for r in 0..rows {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gain) {
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let df = d as f64;
                    for r in 0..rows {
                        let rstd = stats[r].1;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..d {
                            let gh = g[r * d + c] * gain_v[c];
                            m1 += gh;
                            m2 += gh * xhat[r * d + c];
                        }
                        m1 /= df;
                        m2 /= df;
                        for c in 0..d {
                            let gh = g[r * d + c] * gain_v[c];
                            gx[r * d + c] += rstd * (gh - m1 - xhat[r * d + c] * m2);
                        }
                    }
                }
            }
            Op::SoftmaxMasked(x) => {
                let (n, _) = node.value.rows_cols();
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..n {
                        let row = i * n..(i + 1) * n;
                        let dotp: f64 = y[row.clone()].iter().zip(&g[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in row {
                            gx[j] += y[j] * (g[j] - dotp);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let (rows, c) = node.value.rows_cols();
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        let s: f64 = g[r * c..(r + 1) * c].iter().sum();
                        for j in r * c..(r + 1) * c {
                            gx[j] += g[j] - y[j].exp() * s;
                        }
                    }
                }
            }
            Op::GatherRows { src, idx } => {
                let c = node.value.rows_cols().1;
                if let Some(gs) = self.slot(grads, *src) {
                    for (r, &i) in idx.iter().enumerate() {
                        for (a, b) in gs[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *a += b;
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (n, ca) = self.value(*a).rows_cols();
                let cb = self.value(*b).rows_cols().1;
                let w = ca + cb;
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..n {
                        for c in 0..ca {
                            ga[r * ca + c] += g[r * w + c];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for r in 0..n {
                        for c in 0..cb {
                            gb[r * cb + c] += g[r * w + ca + c];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, y)| *x += y);
                    }
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                let (n, len) = node.value.rows_cols();
                let c = self.value(*x).rows_cols().1;
                if let Some(gx) = self.slot(grads, *x) {
                    for r in 0..n {
                        for j in 0..len {
                            gx[r * c + start + j] += g[r * len + j];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0] / n);
                }
            }
            Op::Pick { x, idx } => {
                let c = self.value(*x).rows_cols().1;
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        gx[r * c + i] += g[r];
                    }
                }
            }
            Op::Attention(cache) => self.backward_attention(cache, g, grads),
            Op::GruCell(cache) => self.backward_gru(cache, g, grads),
            Op::Custom { x, backward } => {
                let dx = backward(self.value(*x), &node.value, g);
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
                }
            }
        }
        Ok(())
    }

    fn backward_attention(&self, cache: &AttentionCache, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let AttentionCache { q, k, v, heads, blocks, probs } = cache;
        let (_, d) = self.value(*q).rows_cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
        let n = qd.len();
        let mut gq = vec![0.0; n];
        let mut gk = vec![0.0; n];
        let mut gv = vec![0.0; n];
        let mut off = 0;
        for b in blocks {
            let len = b.mask.size();
            let mut dp = vec![0.0; len];
            for h in 0..*heads {
                let c0 = h * dh;
                for i in 0..len {
                    let row = b.start + i;
                    let p = &probs[off + i * len..off + (i + 1) * len];
                    let go = &g[row * d + c0..row * d + c0 + dh];
                    let mut s = 0.0;
                    for j in 0..len {
                        if p[j] != 0.0 {
                            let vj = (b.start + j) * d + c0;
                            dp[j] = kernels::dot(go, &vd[vj..vj + dh]);
                            s += p[j] * dp[j];
                        }
                    }
                    let qi = row * d + c0;
                    for j in 0..len {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - s) * scale;
                        let kj = (b.start + j) * d + c0;
                        for c in 0..dh {
                            gq[qi + c] += ds * kd[kj + c];
                            gk[kj + c] += ds * qd[qi + c];
                            gv[kj + c] += p[j] * go[c];
                        }
                    }
                }
                off += len * len;
            }
        }
        for (var, grad) in [(*q, gq), (*k, gk), (*v, gv)] {
            if let Some(slot) = self.slot(grads, var) {
                slot.iter_mut().zip(&grad).for_each(|(a, b)| *a += b);
            }
        }
    }

    fn backward_gru(&self, cache: &GruCache, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let GruCache { gx, h, u, bh, gh, r, z, n } = cache;
        let (bsz, d) = self.value(*h).rows_cols();
        let hv = self.value(*h).data();
        let mut dgh = vec![0.0; bsz * 3 * d];
        let mut dgx = vec![0.0; bsz * 3 * d];
        let mut dh = vec![0.0; bsz * d];
        for row in 0..bsz {
            for i in 0..d {
                let e = row * d + i;
                let b3 = row * 3 * d;
                let go = g[e];
                let dn = go * (1.0 - z[e]);
                let dz = go * (hv[e] - n[e]);
                dh[e] = go * z[e];
                let dn_pre = dn * (1.0 - n[e] * n[e]);
                let dr = dn_pre * gh[b3 + 2 * d + i];
                let dr_pre = dr * r[e] * (1.0 - r[e]);
                let dz_pre = dz * z[e] * (1.0 - z[e]);
                dgx[b3 + i] = dr_pre;
                dgx[b3 + d + i] = dz_pre;
                dgx[b3 + 2 * d + i] = dn_pre;
                dgh[b3 + i] = dr_pre;
                dgh[b3 + d + i] = dz_pre;
                dgh[b3 + 2 * d + i] = dn_pre * r[e];
            }
        }
        if let Some(s) = self.slot(grads, *gx) {
            s.iter_mut().zip(&dgx).for_each(|(a, b)| *a += b);
        }
        gemm(1.0, &dgh, false, self.value(*u).data(), true, &mut dh, bsz, 3 * d, d);
        if let Some(s) = self.slot(grads, *h) {
            s.iter_mut().zip(&dh).for_each(|(a, b)| *a += b);
        }
        if let Some(s) = self.slot(grads, *u) {
            gemm(1.0, hv, true, &dgh, false, s, d, bsz, 3 * d);
        }
        if let Some(s) = self.slot(grads, *bh) {
            for row in 0..bsz {
                for c in 0..3 * d {
                    s[c] += dgh[row * 3 * d + c];
                }
            }
        }
    }
}
