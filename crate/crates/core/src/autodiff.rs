//! Tape-based automatic differentiation over [`Mat`].
//!
//! A [`Graph`] records every operation with its primal value. Reverse mode
//! ([`Graph::backward`]) walks the tape from a scalar output to the leaves;
//! forward mode ([`Graph::jvp`]) pushes tangents from seeded nodes towards
//! the outputs in tape order. Both use per-op rules written next to each
//! other so that they stay consistent.

use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    L2NormRows { x: Var, eps: f64, norms: Vec<f64> },
    Gelu(Var),
    Sigmoid(Var),
    MaskRows { x: Var, keep: Vec<bool> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_sums(m: &Mat) -> Vec<f64> {
    (0..m.rows()).map(|r| m.row(r).iter().sum()).collect()
}

fn col_sums(m: &Mat) -> Mat {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, x) in out.iter_mut().zip(m.row(r)) {
            *o += x;
        }
    }
    Mat::row_vector(out)
}

fn broadcast_row(row: &Mat, rows: usize, f: impl Fn(f64, f64) -> f64, m: &Mat) -> Mat {
    assert_eq!(row.rows(), 1);
    assert_eq!(row.cols(), m.cols(), "row broadcast column mismatch");
    let mut out = m.clone();
    for r in 0..rows {
        for (o, b) in out.row_mut(r).iter_mut().zip(row.data()) {
            *o = f(*o, *b);
        }
    }
    out
}

/// `y ⊙ (d − rowsum(y ⊙ d))`, the softmax Jacobian applied to `d`.
fn softmax_apply(y: &Mat, d: &Mat) -> Mat {
    let mut out = Mat::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let dr = d.row(r);
        let s: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for ((o, a), b) in out.row_mut(r).iter_mut().zip(yr).zip(dr) {
            *o = a * (b - s);
        }
    }
    out
}

/// Layer-norm Jacobian applied to `d`: `s·(d − mean(d) − y·mean(y ⊙ d))`.
/// The map is symmetric, so it serves both modes.
fn layernorm_apply(y: &Mat, inv_std: &[f64], d: &Mat) -> Mat {
    let n = y.cols() as f64;
    let mut out = Mat::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let dr = d.row(r);
        let md = dr.iter().sum::<f64>() / n;
        let myd = yr.iter().zip(dr).map(|(a, b)| a * b).sum::<f64>() / n;
        let s = inv_std[r];
        for ((o, a), b) in out.row_mut(r).iter_mut().zip(yr).zip(dr) {
            *o = s * (b - md - a * myd);
        }
    }
    out
}

/// Jacobian of `x ↦ x / (‖x‖ + eps)` applied to `d`, row-wise. Symmetric.
fn l2norm_apply(x: &Mat, norms: &[f64], eps: f64, d: &Mat) -> Mat {
    let mut out = Mat::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let n = norms[r];
        let rr = n + eps;
        let xr = x.row(r);
        let dr = d.row(r);
        let xd: f64 = xr.iter().zip(dr).map(|(a, b)| a * b).sum();
        let k = if n > 0.0 { xd / (n * rr * rr) } else { 0.0 };
        for ((o, a), b) in out.row_mut(r).iter_mut().zip(xr).zip(dr) {
            *o = b / rr - a * k;
        }
    }
    out
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

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.data()[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// A leaf that gradients are tracked for.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf without gradient tracking. It may still receive a tangent seed.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// `a + row`, broadcasting a `(1, cols)` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let am = self.value(a);
        let v = broadcast_row(self.value(row), am.rows(), |x, y| x + y, am);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let am = self.value(a);
        let v = broadcast_row(self.value(row), am.rows(), |x, y| x * y, am);
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::AddConst(a), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulNT(a, b), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut y = x.clone();
        for r in 0..y.rows() {
            let row = y.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                s += *e;
            }
            for e in row.iter_mut() {
                *e /= s;
            }
        }
        let ng = self.ng(a);
        self.push(y, Op::Softmax(a), ng)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut y = x.clone();
        for r in 0..y.rows() {
            let row = y.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|e| (e - m).exp()).sum::<f64>().ln();
            for e in row.iter_mut() {
                *e -= lse;
            }
        }
        let ng = self.ng(a);
        self.push(y, Op::LogSoftmax(a), ng)
    }

    /// Row-wise standardization `(x − μ) / sqrt(σ² + eps)` without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.cols() as f64;
        let mut y = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..y.rows() {
            let row = y.row_mut(r);
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|e| (e - mu) * (e - mu)).sum::<f64>() / n;
            let s = 1.0 / (var + eps).sqrt();
            for e in row.iter_mut() {
                *e = (*e - mu) * s;
            }
            inv_std.push(s);
        }
        let ng = self.ng(a);
        self.push(y, Op::LayerNorm { x: a, inv_std }, ng)
    }

    /// Row-wise `x / (‖x‖₂ + eps)`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut y = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..y.rows() {
            let row = y.row_mut(r);
            let n = row.iter().map(|e| e * e).sum::<f64>().sqrt();
            let d = n + eps;
            for e in row.iter_mut() {
                *e /= d;
            }
            norms.push(n);
        }
        let ng = self.ng(a);
        self.push(y, Op::L2NormRows { x: a, eps, norms }, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    /// Rows with `keep[r] == false` are replaced by `fill` and detached.
    pub fn mask_rows(&mut self, a: Var, keep: Vec<bool>, fill: f64) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(keep.len(), v.rows());
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                v.row_mut(r).iter_mut().for_each(|e| *e = fill);
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::MaskRows { x: a, keep }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Mat::concat_rows(&mats);
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        let ng = self.ng(a);
        self.push(v, Op::SliceRows { x: a, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Mat::concat_cols(&mats);
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_cols(start, len);
        let ng = self.ng(a);
        self.push(v, Op::SliceCols { x: a, start }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Mat::scalar(m.sum() / m.len() as f64);
        let ng = self.ng(a);
        self.push(v, Op::Mean(a), ng)
    }

    /// Column means as a `(1, cols)` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        let ng = self.ng(a);
        self.push(v, Op::MeanRows(a), ng)
    }

    /// Reverse-mode gradients of the scalar node `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).shape(), (1, 1), "backward() needs a scalar output");
        self.backward_with(out, Mat::scalar(1.0))
    }

    /// Reverse mode with an explicit output cotangent.
    pub fn backward_with(&self, out: Var, seed: Mat) -> Gradients {
        assert_eq!(seed.shape(), self.value(out).shape());
        let mut grads: Vec<Option<Mat>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.vjp(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn vjp(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*b) {
                    self.acc(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*row) {
                    self.acc(grads, *row, col_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                if self.ng(*a) {
                    let rv = self.value(*row);
                    self.acc(grads, *a, broadcast_row(rv, g.rows(), |x, y| x * y, g));
                }
                if self.ng(*row) {
                    self.acc(grads, *row, col_sums(&g.zip_map(self.value(*a), |x, y| x * y)));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.scale(*s)),
            Op::AddConst(a) => self.acc(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.matmul(self.value(*b)));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Softmax(a) => self.acc(grads, *a, softmax_apply(&node.value, g)),
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let s = row_sums(g);
                let mut out = g.clone();
                for r in 0..out.rows() {
                    for (o, ly) in out.row_mut(r).iter_mut().zip(y.row(r)) {
                        *o -= ly.exp() * s[r];
                    }
                }
                self.acc(grads, *a, out);
            }
            Op::LayerNorm { x, inv_std } => self.acc(grads, *x, layernorm_apply(&node.value, inv_std, g)),
            Op::L2NormRows { x, eps, norms } => {
                self.acc(grads, *x, l2norm_apply(self.value(*x), norms, *eps, g))
            }
            Op::Gelu(a) => self.acc(grads, *a, g.zip_map(self.value(*a), |gg, x| gg * gelu_grad(x))),
            Op::Sigmoid(a) => self.acc(grads, *a, g.zip_map(&node.value, |gg, y| gg * y * (1.0 - y))),
            Op::MaskRows { x, keep } => {
                let mut out = g.clone();
                for (r, &k) in keep.iter().enumerate() {
                    if !k {
                        out.row_mut(r).iter_mut().for_each(|e| *e = 0.0);
                    }
                }
                self.acc(grads, *x, out);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.value(*p).rows();
                    if self.ng(*p) {
                        self.acc(grads, *p, g.slice_rows(start, n));
                    }
                    start += n;
                }
            }
            Op::SliceRows { x, start } => {
                if self.ng(*x) {
                    let src = self.value(*x);
                    let mut out = Mat::zeros(src.rows(), src.cols());
                    let c = src.cols();
                    out.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                    self.acc(grads, *x, out);
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.value(*p).cols();
                    if self.ng(*p) {
                        self.acc(grads, *p, g.slice_cols(start, n));
                    }
                    start += n;
                }
            }
            Op::SliceCols { x, start } => {
                if self.ng(*x) {
                    let src = self.value(*x);
                    let mut out = Mat::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        out.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    self.acc(grads, *x, out);
                }
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.acc(grads, *a, Mat::filled(r, c, g.data()[0]));
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                self.acc(grads, *a, Mat::filled(r, c, g.data()[0] / (r * c) as f64));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.value(*a).shape();
                let mut out = Mat::zeros(r, c);
                let gs = g.scale(1.0 / r as f64);
                for i in 0..r {
                    out.row_mut(i).copy_from_slice(gs.data());
                }
                self.acc(grads, *a, out);
            }
        }
    }

    /// Forward-mode tangent propagation from the seeded nodes.
    ///
    /// Nodes without a seed and without a tangent-carrying input get no
    /// tangent (reported as zero by [`Tangents::get_or_zero`]).
    pub fn jvp(&self, seeds: &[(Var, Mat)]) -> Tangents {
        let mut t: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        let mut first = self.nodes.len();
        for (v, m) in seeds {
            assert_eq!(m.shape(), self.value(*v).shape(), "tangent seed shape mismatch");
            match &mut t[v.0] {
                Some(existing) => existing.add_assign(m),
                slot => *slot = Some(m.clone()),
            }
            first = first.min(v.0);
        }
        for i in first..self.nodes.len() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            if let Some(tan) = self.jvp_node(node, &t) {
                t[i] = Some(tan);
            }
        }
        Tangents { t }
    }

    fn jvp_node(&self, node: &Node, t: &[Option<Mat>]) -> Option<Mat> {
        let tan = |v: &Var| t[v.0].as_ref();
        let zero_like = |v: &Var| {
            let (r, c) = self.value(*v).shape();
            Mat::zeros(r, c)
        };
        match &node.op {
            Op::Leaf => None,
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                match (tan(a), tan(b)) {
                    (None, None) => None,
                    (Some(x), None) => Some(x.clone()),
                    (None, Some(y)) => Some(y.scale(sign)),
                    (Some(x), Some(y)) => Some(x.zip_map(y, |p, q| p + sign * q)),
                }
            }
            Op::Mul(a, b) => {
                if tan(a).is_none() && tan(b).is_none() {
                    return None;
                }
                let mut out = zero_like(a);
                if let Some(da) = tan(a) {
                    out.add_assign(&da.zip_map(self.value(*b), |x, y| x * y));
                }
                if let Some(db) = tan(b) {
                    out.add_assign(&db.zip_map(self.value(*a), |x, y| x * y));
                }
                Some(out)
            }
            Op::AddRow(a, row) => {
                if tan(a).is_none() && tan(row).is_none() {
                    return None;
                }
                let mut out = tan(a).cloned().unwrap_or_else(|| zero_like(a));
                if let Some(dr) = tan(row) {
                    let rows = out.rows();
                    out = broadcast_row(dr, rows, |x, y| x + y, &out);
                }
                Some(out)
            }
            Op::MulRow(a, row) => {
                if tan(a).is_none() && tan(row).is_none() {
                    return None;
                }
                let mut out = zero_like(a);
                if let Some(da) = tan(a) {
                    out.add_assign(&broadcast_row(self.value(*row), da.rows(), |x, y| x * y, da));
                }
                if let Some(dr) = tan(row) {
                    let av = self.value(*a);
                    out.add_assign(&broadcast_row(dr, av.rows(), |x, y| x * y, av));
                }
                Some(out)
            }
            Op::Scale(a, s) => tan(a).map(|d| d.scale(*s)),
            Op::AddConst(a) => tan(a).cloned(),
            Op::MatMul(a, b) => {
                if tan(a).is_none() && tan(b).is_none() {
                    return None;
                }
                let mut out = Mat::zeros(node.value.rows(), node.value.cols());
                if let Some(da) = tan(a) {
                    out.add_assign(&da.matmul(self.value(*b)));
                }
                if let Some(db) = tan(b) {
                    out.add_assign(&self.value(*a).matmul(db));
                }
                Some(out)
            }
            Op::MatMulNT(a, b) => {
                if tan(a).is_none() && tan(b).is_none() {
                    return None;
                }
                let mut out = Mat::zeros(node.value.rows(), node.value.cols());
                if let Some(da) = tan(a) {
                    out.add_assign(&da.matmul_nt(self.value(*b)));
                }
                if let Some(db) = tan(b) {
                    out.add_assign(&self.value(*a).matmul_nt(db));
                }
                Some(out)
            }
            Op::Softmax(a) => tan(a).map(|d| softmax_apply(&node.value, d)),
            Op::LogSoftmax(a) => tan(a).map(|d| {
                let y = &node.value;
                let mut out = d.clone();
                for r in 0..out.rows() {
                    let s: f64 = y.row(r).iter().zip(d.row(r)).map(|(ly, dd)| ly.exp() * dd).sum();
                    out.row_mut(r).iter_mut().for_each(|o| *o -= s);
                }
                out
            }),
            Op::LayerNorm { x, inv_std } => tan(x).map(|d| layernorm_apply(&node.value, inv_std, d)),
            Op::L2NormRows { x, eps, norms } => tan(x).map(|d| l2norm_apply(self.value(*x), norms, *eps, d)),
            Op::Gelu(a) => tan(a).map(|d| d.zip_map(self.value(*a), |dd, x| dd * gelu_grad(x))),
            Op::Sigmoid(a) => tan(a).map(|d| d.zip_map(&node.value, |dd, y| dd * y * (1.0 - y))),
            Op::MaskRows { x, keep } => tan(x).map(|d| {
                let mut out = d.clone();
                for (r, &k) in keep.iter().enumerate() {
                    if !k {
                        out.row_mut(r).iter_mut().for_each(|e| *e = 0.0);
                    }
                }
                out
            }),
            Op::ConcatRows(parts) => {
                if parts.iter().all(|p| tan(p).is_none()) {
                    return None;
                }
                let owned: Vec<Mat> = parts.iter().map(|p| tan(p).cloned().unwrap_or_else(|| zero_like(p))).collect();
                let refs: Vec<&Mat> = owned.iter().collect();
                Some(Mat::concat_rows(&refs))
            }
            Op::SliceRows { x, start } => tan(x).map(|d| d.slice_rows(*start, node.value.rows())),
            Op::ConcatCols(parts) => {
                if parts.iter().all(|p| tan(p).is_none()) {
                    return None;
                }
                let owned: Vec<Mat> = parts.iter().map(|p| tan(p).cloned().unwrap_or_else(|| zero_like(p))).collect();
                let refs: Vec<&Mat> = owned.iter().collect();
                Some(Mat::concat_cols(&refs))
            }
            Op::SliceCols { x, start } => tan(x).map(|d| d.slice_cols(*start, node.value.cols())),
            Op::Sum(a) => tan(a).map(|d| Mat::scalar(d.sum())),
            Op::Mean(a) => tan(a).map(|d| Mat::scalar(d.sum() / d.len() as f64)),
            Op::MeanRows(a) => tan(a).map(|d| d.mean_rows()),
        }
    }
}

#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug)]
pub struct Tangents {
    t: Vec<Option<Mat>>,
}

impl Tangents {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.t.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn get_or_zero(&self, graph: &Graph, v: Var) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| {
            let (r, c) = graph.value(v).shape();
            Mat::zeros(r, c)
        })
    }
}
