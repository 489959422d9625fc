//! Transformer building blocks on top of [`Session`].
//!
//! Parameter layout under a prefix `p`:
//!
//! ```text
//! p.weight [in, out], p.bias [1, out]                 linear
//! p.weight [1, d],    p.bias [1, d]                   layer norm
//! p.fc1.*, p.fc2.*                                    two-layer GELU MLP
//! p.qkv.* (self) or p.q.*, p.kv.* (cross), p.proj.*   attention
//! ```

use rand::Rng;

use crate::autodiff::Var;
use crate::params::{ParamStore, Session};
use crate::tensor::Mat;

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

pub fn linear(s: &mut Session, x: Var, prefix: &str) -> Var {
    let w = s.p(&format!("{prefix}.weight"));
    let b = s.p(&format!("{prefix}.bias"));
    let y = s.graph.matmul(x, w);
    s.graph.add_row(y, b)
}

pub fn layer_norm(s: &mut Session, x: Var, prefix: &str) -> Var {
    let w = s.p(&format!("{prefix}.weight"));
    let b = s.p(&format!("{prefix}.bias"));
    let n = s.graph.layer_norm(x, LN_EPS);
    let y = s.graph.mul_row(n, w);
    s.graph.add_row(y, b)
}

pub fn mlp(s: &mut Session, x: Var, prefix: &str) -> Var {
    let h = linear(s, x, &format!("{prefix}.fc1"));
    let h = s.graph.gelu(h);
    linear(s, h, &format!("{prefix}.fc2"))
}

fn split_heads_attend(s: &mut Session, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let dim = s.value(q).cols();
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (s.graph.slice_cols(q, h * dh, dh), s.graph.slice_cols(k, h * dh, dh), s.graph.slice_cols(v, h * dh, dh))
        };
        let logits = s.graph.matmul_nt(qh, kh);
        let logits = s.graph.scale(logits, scale);
        let probs = s.graph.softmax(logits);
        outs.push(s.graph.matmul(probs, vh));
    }
    if heads == 1 {
        outs[0]
    } else {
        s.graph.concat_cols(&outs)
    }
}

pub fn self_attention(s: &mut Session, x: Var, prefix: &str, heads: usize) -> Var {
    let qkv = linear(s, x, &format!("{prefix}.qkv"));
    let dim = s.value(x).cols();
    let q = s.graph.slice_cols(qkv, 0, dim);
    let k = s.graph.slice_cols(qkv, dim, dim);
    let v = s.graph.slice_cols(qkv, 2 * dim, dim);
    let o = split_heads_attend(s, q, k, v, heads);
    linear(s, o, &format!("{prefix}.proj"))
}

/// Queries from `x`, keys and values from `ctx`.
pub fn cross_attention(s: &mut Session, x: Var, ctx: Var, prefix: &str, heads: usize) -> Var {
    let q = linear(s, x, &format!("{prefix}.q"));
    let kv = linear(s, ctx, &format!("{prefix}.kv"));
    let dim = s.value(q).cols();
    let k = s.graph.slice_cols(kv, 0, dim);
    let v = s.graph.slice_cols(kv, dim, dim);
    let o = split_heads_attend(s, q, k, v, heads);
    linear(s, o, &format!("{prefix}.proj"))
}

/// Residual-branch multipliers for stochastic depth; `None` drops the branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Residual {
    pub attn: Option<f64>,
    pub mlp: Option<f64>,
}

impl Residual {
    pub const FULL: Residual = Residual { attn: Some(1.0), mlp: Some(1.0) };

    pub fn sample<R: Rng + ?Sized>(drop_prob: f64, rng: &mut R) -> Self {
        if drop_prob <= 0.0 {
            return Self::FULL;
        }
        let keep = 1.0 - drop_prob;
        let mut branch = || if rng.gen::<f64>() < keep { Some(1.0 / keep) } else { None };
        Residual { attn: branch(), mlp: branch() }
    }
}

fn add_branch(s: &mut Session, x: Var, branch: Var, mult: Option<f64>) -> Var {
    match mult {
        None => x,
        Some(m) if m == 1.0 => s.graph.add(x, branch),
        Some(m) => {
            let b = s.graph.scale(branch, m);
            s.graph.add(x, b)
        }
    }
}

/// Residual gating for one block: `keep[r]` marks rows that are gated.
#[derive(Clone, Copy, Debug)]
pub struct Gate<'a> {
    pub gated_rows: &'a [bool],
    pub bias: f64,
}

/// Gate values `σ(mlp(x̂) + bias)` with ungated rows fixed at one.
pub fn gate_values(s: &mut Session, x_norm: Var, prefix: &str, gate: Gate) -> Var {
    let logits = mlp(s, x_norm, &format!("{prefix}.gate"));
    let logits = s.graph.add_const(logits, gate.bias);
    let g = s.graph.sigmoid(logits);
    if gate.gated_rows.iter().all(|&k| k) {
        g
    } else {
        s.graph.mask_rows(g, gate.gated_rows.to_vec(), 1.0)
    }
}

/// Pre-norm transformer block, optionally with a gated attention residual:
/// `h = g(x̂)·x + Attn(x̂)`, `out = h + MLP(LN(h))`.
pub fn block(s: &mut Session, x: Var, prefix: &str, heads: usize, gate: Option<Gate>, residual: Residual) -> Var {
    let xn = layer_norm(s, x, &format!("{prefix}.norm1"));
    let a = self_attention(s, xn, &format!("{prefix}.attn"), heads);
    let h = match gate {
        Some(gate) => {
            let g = gate_values(s, xn, prefix, gate);
            let gx = s.graph.mul(g, x);
            add_branch(s, gx, a, residual.attn)
        }
        None => add_branch(s, x, a, residual.attn),
    };
    let hn = layer_norm(s, h, &format!("{prefix}.norm2"));
    let f = mlp(s, hn, &format!("{prefix}.mlp"));
    add_branch(s, h, f, residual.mlp)
}

/// Pre-norm cross-attention block: `h = x + Attn(LN(x), LN(ctx))`,
/// `out = h + MLP(LN(h))`. `ctx_pos` is added to the normalized context.
pub fn cross_block(s: &mut Session, x: Var, ctx: Var, ctx_pos: Option<Var>, prefix: &str, heads: usize) -> Var {
    let xn = layer_norm(s, x, &format!("{prefix}.norm_q"));
    let mut cn = layer_norm(s, ctx, &format!("{prefix}.norm_kv"));
    if let Some(p) = ctx_pos {
        cn = s.graph.add(cn, p);
    }
    let a = cross_attention(s, xn, cn, &format!("{prefix}.attn"), heads);
    let h = s.graph.add(x, a);
    let hn = layer_norm(s, h, &format!("{prefix}.norm2"));
    let f = mlp(s, hn, &format!("{prefix}.mlp"));
    s.graph.add(h, f)
}

/// Parameter initialization helpers writing into a [`ParamStore`].
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<'a, R: Rng> Init<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Self { store, rng }
    }

    pub fn tensor(&mut self, name: String, rows: usize, cols: usize) {
        let m = Mat::trunc_normal(rows, cols, INIT_STD, self.rng);
        self.store.insert(name, m);
    }

    pub fn zeros(&mut self, name: String, rows: usize, cols: usize) {
        self.store.insert(name, Mat::zeros(rows, cols));
    }

    pub fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) {
        self.tensor(format!("{prefix}.weight"), d_in, d_out);
        self.zeros(format!("{prefix}.bias"), 1, d_out);
    }

    pub fn linear_zero(&mut self, prefix: &str, d_in: usize, d_out: usize) {
        self.zeros(format!("{prefix}.weight"), d_in, d_out);
        self.zeros(format!("{prefix}.bias"), 1, d_out);
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.store.insert(format!("{prefix}.weight"), Mat::filled(1, d, 1.0));
        self.zeros(format!("{prefix}.bias"), 1, d);
    }

    pub fn mlp(&mut self, prefix: &str, d: usize, hidden: usize) {
        self.linear(&format!("{prefix}.fc1"), d, hidden);
        self.linear(&format!("{prefix}.fc2"), hidden, d);
    }

    pub fn self_attention(&mut self, prefix: &str, d: usize) {
        self.linear(&format!("{prefix}.qkv"), d, 3 * d);
        self.linear(&format!("{prefix}.proj"), d, d);
    }

    pub fn cross_attention(&mut self, prefix: &str, d: usize) {
        self.linear(&format!("{prefix}.q"), d, d);
        self.linear(&format!("{prefix}.kv"), d, 2 * d);
        self.linear(&format!("{prefix}.proj"), d, d);
    }

    /// A standard block; with `gated` the gate MLP's last layer starts at zero.
    pub fn block(&mut self, prefix: &str, d: usize, mlp_ratio: usize, gated: bool) {
        self.layer_norm(&format!("{prefix}.norm1"), d);
        self.self_attention(&format!("{prefix}.attn"), d);
        if gated {
            self.linear(&format!("{prefix}.gate.fc1"), d, d);
            self.linear_zero(&format!("{prefix}.gate.fc2"), d, d);
        }
        self.layer_norm(&format!("{prefix}.norm2"), d);
        self.mlp(&format!("{prefix}.mlp"), d, d * mlp_ratio);
    }

    pub fn cross_block(&mut self, prefix: &str, d: usize, mlp_ratio: usize) {
        self.layer_norm(&format!("{prefix}.norm_q"), d);
        self.layer_norm(&format!("{prefix}.norm_kv"), d);
        self.cross_attention(&format!("{prefix}.attn"), d);
        self.layer_norm(&format!("{prefix}.norm2"), d);
        self.mlp(&format!("{prefix}.mlp"), d, d * mlp_ratio);
    }
}

/// Parameter count of [`Init::block`].
pub fn block_param_count(d: usize, mlp_ratio: usize, gated: bool) -> usize {
    let ln = 2 * d;
    let attn = d * 3 * d + 3 * d + d * d + d;
    let mlp = d * d * mlp_ratio + d * mlp_ratio + d * mlp_ratio * d + d;
    let gate = if gated { 2 * (d * d + d) } else { 0 };
    2 * ln + attn + mlp + gate
}

/// Parameter count of [`Init::cross_block`].
pub fn cross_block_param_count(d: usize, mlp_ratio: usize) -> usize {
    let ln = 2 * d;
    let attn = (d * d + d) + (d * 2 * d + 2 * d) + (d * d + d);
    let mlp = d * d * mlp_ratio + d * mlp_ratio + d * mlp_ratio * d + d;
    3 * ln + attn + mlp
}
