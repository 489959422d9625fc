//! Latent dynamics networks: midway inverse dynamics with accumulating
//! motion latents, top-down backward refinement, and the gated forward
//! predictor, plus the level plan that wires them together.
//!
//! Parameter namespaces:
//!
//! ```text
//! midway.init_tokens                 initial motion latents (zeros)
//! midway.l{u}.*                      inverse dynamics consuming level-u features
//! backward.l{l}.*                    cross-attention refinement at level l
//! forward.l{l}.*                     forward predictor for level l
//! ```

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::Var;
use crate::encoder::{EncoderConfig, PyramidVars};
use crate::error::{Error, Result};
use crate::nn::{self, Gate, Init, Residual};
use crate::params::{ParamStore, Session};
use crate::tensor::Mat;

/// Component switches matching the ablation table columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Toggles {
    pub latent_dynamics: bool,
    pub backward: bool,
    pub multi_level: bool,
    pub refinement: bool,
    pub gating: bool,
}

impl Toggles {
    pub const FULL: Toggles = Toggles { latent_dynamics: true, backward: true, multi_level: true, refinement: true, gating: true };
    pub const BASE: Toggles = Toggles { latent_dynamics: false, backward: false, multi_level: false, refinement: false, gating: false };

    /// The nine ablation variants: rows 1–6 add components cumulatively,
    /// rows 7–9 remove one component from the full model.
    pub fn ablation_rows() -> Vec<(&'static str, Toggles)> {
        let t = |l, b, m, r, g| Toggles { latent_dynamics: l, backward: b, multi_level: m, refinement: r, gating: g };
        vec![
            ("1 base model", t(false, false, false, false, false)),
            ("2 +latent dynamics", t(true, false, false, false, false)),
            ("3 +backward", t(true, true, false, false, false)),
            ("4 +multi-level", t(true, true, true, false, false)),
            ("5 +refinement", t(true, true, true, true, false)),
            ("6 full model", t(true, true, true, true, true)),
            ("7 no backward", t(true, false, true, true, true)),
            ("8 no multi-level", t(true, true, false, true, true)),
            ("9 no refinement", t(true, true, true, false, true)),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsConfig {
    pub midway_dim: usize,
    pub midway_heads: usize,
    pub midway_blocks: usize,
    pub backward_blocks: usize,
    pub forward_blocks: usize,
    pub num_motion_tokens: usize,
    pub gate_bias: f64,
    /// Learned position embedding on backward keys/values.
    pub backward_kv_pos: bool,
    pub mlp_ratio: usize,
    pub toggles: Toggles,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            midway_dim: 192,
            midway_heads: 4,
            midway_blocks: 4,
            backward_blocks: 1,
            forward_blocks: 4,
            num_motion_tokens: 10,
            gate_bias: 4.0,
            backward_kv_pos: true,
            mlp_ratio: 4,
            toggles: Toggles::FULL,
        }
    }
}

impl DynamicsConfig {
    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (k, v) in [
            ("midway_dim", self.midway_dim),
            ("midway_heads", self.midway_heads),
            ("midway_blocks", self.midway_blocks),
            ("backward_blocks", self.backward_blocks),
            ("forward_blocks", self.forward_blocks),
            ("num_motion_tokens", self.num_motion_tokens),
            ("mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                out.push(format!("dynamics.{k} must be at least 1"));
            }
        }
        if self.midway_heads > 0 && self.midway_dim % self.midway_heads != 0 {
            out.push(format!("dynamics.midway_dim {} must be divisible by dynamics.midway_heads {}", self.midway_dim, self.midway_heads));
        }
        if !self.gate_bias.is_finite() {
            out.push("dynamics.gate_bias must be finite".into());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionLatents {
    pub tokens: Mat,
    /// Level whose features produced these latents.
    pub level: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackwardFeatures {
    pub tokens: Mat,
    pub level: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub tokens: Mat,
    pub level: usize,
}

/// Which levels carry which computation for a given set of toggles.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelPlan {
    pub top: usize,
    /// Tap levels, highest first.
    pub taps: Vec<usize>,
    /// Levels whose prediction enters the loss.
    pub objective: Vec<usize>,
    /// Levels with a forward predictor.
    pub predicted: Vec<usize>,
    /// Levels whose features feed a midway network, highest first.
    pub midway_inputs: Vec<usize>,
    /// Levels with backward refinement.
    pub backward: Vec<usize>,
}

impl LevelPlan {
    pub fn new(enc: &EncoderConfig, t: &Toggles) -> Self {
        let top = enc.top_level;
        let taps: Vec<usize> = enc.tap_levels.iter().rev().copied().collect();
        if !t.latent_dynamics {
            return Self { top, taps, objective: vec![], predicted: vec![], midway_inputs: vec![], backward: vec![] };
        }
        let lowest = *taps.last().expect("at least one tap level");
        let objective = if t.multi_level { taps.clone() } else { vec![lowest] };
        let predicted = if t.refinement { taps.clone() } else { objective.clone() };
        let midway_inputs = if t.refinement { taps.iter().map(|&l| Self::upper_of(enc, l)).collect() } else { vec![top] };
        let backward = if t.backward { taps.clone() } else { vec![] };
        Self { top, taps, objective, predicted, midway_inputs, backward }
    }

    /// The next exported level above tap level `l`.
    pub fn upper_of(enc: &EncoderConfig, l: usize) -> usize {
        enc.tap_levels.iter().copied().find(|&x| x > l).unwrap_or(enc.top_level)
    }

    /// Midway input level whose latents condition the predictor at `l`.
    pub fn motion_source(&self, enc: &EncoderConfig, l: usize) -> usize {
        if self.midway_inputs.len() == 1 && self.midway_inputs[0] == self.top {
            self.top
        } else {
            Self::upper_of(enc, l)
        }
    }
}

pub fn init_params<R: Rng>(enc: &EncoderConfig, cfg: &DynamicsConfig, rng: &mut R, store: &mut ParamStore) {
    let plan = LevelPlan::new(enc, &cfg.toggles);
    if !cfg.toggles.latent_dynamics {
        return;
    }
    let d = enc.embed_dim;
    let md = cfg.midway_dim;
    let n = enc.num_tokens();
    let mut init = Init::new(store, rng);
    init.zeros("midway.init_tokens".into(), cfg.num_motion_tokens, md);
    for &u in &plan.midway_inputs {
        let p = format!("midway.l{u}");
        init.linear(&format!("{p}.in_motion"), md, md);
        init.linear(&format!("{p}.in_src"), d, md);
        init.linear(&format!("{p}.in_tgt"), d, md);
        init.tensor(format!("{p}.segment"), 3, md);
        init.tensor(format!("{p}.pos_embed"), n, md);
        for b in 0..cfg.midway_blocks {
            init.block(&format!("{p}.blocks.{b}"), md, cfg.mlp_ratio, false);
        }
        init.layer_norm(&format!("{p}.norm"), md);
        init.linear_zero(&format!("{p}.out"), md, md);
    }
    for &l in &plan.backward {
        let p = format!("backward.l{l}");
        if cfg.backward_kv_pos {
            init.tensor(format!("{p}.kv_pos"), n, d);
        }
        for b in 0..cfg.backward_blocks {
            init.cross_block(&format!("{p}.blocks.{b}"), d, cfg.mlp_ratio);
        }
    }
    for &l in &plan.predicted {
        let p = format!("forward.l{l}");
        init.linear(&format!("{p}.in_proj"), d, d);
        init.tensor(format!("{p}.pos_embed"), n, d);
        init.linear(&format!("{p}.motion_proj"), md, d);
        init.tensor(format!("{p}.motion_type"), 1, d);
        for b in 0..cfg.forward_blocks {
            init.block(&format!("{p}.blocks.{b}"), d, cfg.mlp_ratio, cfg.toggles.gating && b > 0);
        }
        init.linear(&format!("{p}.out"), d, d);
    }
}

/// Expected parameter counts per namespace, computed from the configuration
/// alone. Used to audit the initialized stores.
pub fn param_manifest(enc: &EncoderConfig, cfg: &DynamicsConfig) -> BTreeMap<&'static str, usize> {
    let mut m = BTreeMap::from([("midway", 0), ("backward", 0), ("forward", 0)]);
    if !cfg.toggles.latent_dynamics {
        return m;
    }
    let plan = LevelPlan::new(enc, &cfg.toggles);
    let d = enc.embed_dim;
    let md = cfg.midway_dim;
    let n = enc.num_tokens();
    let lin = |i: usize, o: usize| i * o + o;
    let midway_one = lin(md, md) + 2 * lin(d, md) + 3 * md + n * md + cfg.midway_blocks * nn::block_param_count(md, cfg.mlp_ratio, false) + 2 * md + lin(md, md);
    let backward_one = if cfg.backward_kv_pos { n * d } else { 0 } + cfg.backward_blocks * nn::cross_block_param_count(d, cfg.mlp_ratio);
    let forward_one = lin(d, d)
        + n * d
        + lin(md, d)
        + d
        + nn::block_param_count(d, cfg.mlp_ratio, false)
        + (cfg.forward_blocks - 1) * nn::block_param_count(d, cfg.mlp_ratio, cfg.toggles.gating)
        + lin(d, d);
    m.insert("midway", cfg.num_motion_tokens * md + plan.midway_inputs.len() * midway_one);
    m.insert("backward", plan.backward.len() * backward_one);
    m.insert("forward", plan.predicted.len() * forward_one);
    m
}

fn check_same_shape(what: &str, a: &Mat, b: &Mat) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Transformer read-out of the midway network at input level `u`, before
/// the residual accumulation.
pub fn midway_readout_vars(s: &mut Session, cfg: &DynamicsConfig, u: usize, m_prev: Var, src: Var, tgt: Var) -> Result<Var> {
    check_same_shape("midway source/target features", s.value(src), s.value(tgt))?;
    if s.value(m_prev).shape() != (cfg.num_motion_tokens, cfg.midway_dim) {
        return Err(Error::Shape(format!(
            "motion latents {:?}, expected ({}, {})",
            s.value(m_prev).shape(),
            cfg.num_motion_tokens,
            cfg.midway_dim
        )));
    }
    let p = format!("midway.l{u}");
    let seg = s.p(&format!("{p}.segment"));
    let pos = s.p(&format!("{p}.pos_embed"));
    if s.value(pos).rows() != s.value(src).rows() {
        return Err(Error::Shape(format!("midway expects {} tokens, got {}", s.value(pos).rows(), s.value(src).rows())));
    }
    let seg_m = s.graph.slice_rows(seg, 0, 1);
    let seg_s = s.graph.slice_rows(seg, 1, 1);
    let seg_t = s.graph.slice_rows(seg, 2, 1);

    let xm = nn::linear(s, m_prev, &format!("{p}.in_motion"));
    let xm = s.graph.add_row(xm, seg_m);
    let xs = nn::linear(s, src, &format!("{p}.in_src"));
    let xs = s.graph.add(xs, pos);
    let xs = s.graph.add_row(xs, seg_s);
    let xt = nn::linear(s, tgt, &format!("{p}.in_tgt"));
    let xt = s.graph.add(xt, pos);
    let xt = s.graph.add_row(xt, seg_t);

    let mut x = s.graph.concat_rows(&[xm, xs, xt]);
    for b in 0..cfg.midway_blocks {
        x = nn::block(s, x, &format!("{p}.blocks.{b}"), cfg.midway_heads, None, Residual::FULL);
    }
    let x = nn::layer_norm(s, x, &format!("{p}.norm"));
    let read = s.graph.slice_rows(x, 0, cfg.num_motion_tokens);
    Ok(nn::linear(s, read, &format!("{p}.out")))
}

/// `m_next = readout + m_prev`.
pub fn midway_vars(s: &mut Session, cfg: &DynamicsConfig, u: usize, m_prev: Var, src: Var, tgt: Var) -> Result<Var> {
    let delta = midway_readout_vars(s, cfg, u, m_prev, src, tgt)?;
    Ok(s.graph.add(delta, m_prev))
}

/// Queries from `z`, keys/values from the upper backward features.
pub fn backward_vars(s: &mut Session, enc: &EncoderConfig, cfg: &DynamicsConfig, level: usize, z: Var, v_upper: Var) -> Result<Var> {
    if s.value(z).rows() != s.value(v_upper).rows() {
        return Err(Error::Shape(format!("backward token counts {} vs {}", s.value(z).rows(), s.value(v_upper).rows())));
    }
    let p = format!("backward.l{level}");
    let kv_pos = if cfg.backward_kv_pos { Some(s.p(&format!("{p}.kv_pos"))) } else { None };
    let mut x = z;
    for b in 0..cfg.backward_blocks {
        x = nn::cross_block(s, x, v_upper, kv_pos, &format!("{p}.blocks.{b}"), enc.heads);
    }
    Ok(x)
}

/// Forward predictor: spatial tokens followed by motion tokens; the first
/// block and the motion rows are never gated. Returns the spatial rows.
pub fn forward_vars(s: &mut Session, enc: &EncoderConfig, cfg: &DynamicsConfig, level: usize, v: Var, m: Var) -> Result<Var> {
    let p = format!("forward.l{level}");
    let n = s.value(v).rows();
    let pos = s.p(&format!("{p}.pos_embed"));
    if s.value(pos).rows() != n {
        return Err(Error::Shape(format!("predictor expects {} tokens, got {n}", s.value(pos).rows())));
    }
    let xs = nn::linear(s, v, &format!("{p}.in_proj"));
    let xs = s.graph.add(xs, pos);
    let xm = nn::linear(s, m, &format!("{p}.motion_proj"));
    let ty = s.p(&format!("{p}.motion_type"));
    let xm = s.graph.add_row(xm, ty);
    let mut x = s.graph.concat_rows(&[xs, xm]);
    let mut gated_rows = vec![true; n];
    gated_rows.extend(std::iter::repeat(false).take(s.value(m).rows()));
    for b in 0..cfg.forward_blocks {
        let gate = (cfg.toggles.gating && b > 0).then_some(Gate { gated_rows: &gated_rows, bias: cfg.gate_bias });
        x = nn::block(s, x, &format!("{p}.blocks.{b}"), enc.heads, gate, Residual::FULL);
    }
    let spatial = s.graph.slice_rows(x, 0, n);
    Ok(nn::linear(s, spatial, &format!("{p}.out")))
}

/// Graph nodes produced by one hierarchical pass.
#[derive(Clone, Debug, Default)]
pub struct HierarchyVars {
    pub predictions: BTreeMap<usize, Var>,
    /// Motion latents keyed by the level whose features produced them.
    pub motion: BTreeMap<usize, Var>,
    pub backward: BTreeMap<usize, Var>,
}

/// Runs the top-down pass: motion latents from the midway networks, backward
/// features, and predictions for every planned level.
pub fn hierarchy_vars(s: &mut Session, enc: &EncoderConfig, cfg: &DynamicsConfig, src: &PyramidVars, tgt: &PyramidVars) -> Result<HierarchyVars> {
    let plan = LevelPlan::new(enc, &cfg.toggles);
    let mut out = HierarchyVars::default();
    if !cfg.toggles.latent_dynamics {
        return Ok(out);
    }
    let top = plan.top;
    let mut m = s.p("midway.init_tokens");

    if !cfg.toggles.refinement {
        m = midway_vars(s, cfg, top, m, src.level(top), tgt.level(top))?;
        out.motion.insert(top, m);
    }

    let mut v_upper = src.level(top);
    let mut pred_upper = src.level(top);
    for &l in &plan.taps {
        let u = LevelPlan::upper_of(enc, l);
        if cfg.toggles.refinement {
            m = midway_vars(s, cfg, u, m, pred_upper, tgt.level(u))?;
            out.motion.insert(u, m);
        }
        let v = if cfg.toggles.backward {
            let v = backward_vars(s, enc, cfg, l, src.level(l), v_upper)?;
            out.backward.insert(l, v);
            v_upper = v;
            v
        } else {
            src.level(l)
        };
        if plan.predicted.contains(&l) {
            let z_hat = forward_vars(s, enc, cfg, l, v, m)?;
            out.predictions.insert(l, z_hat);
            pred_upper = z_hat;
        }
    }
    Ok(out)
}

/// One midway step on plain values.
pub fn midway_infer(store: &ParamStore, cfg: &DynamicsConfig, u: usize, m_prev: &MotionLatents, src: &Mat, tgt: &Mat) -> Result<MotionLatents> {
    check_same_shape("midway source/target features", src, tgt)?;
    let mut s = Session::new(store);
    let m = s.constant(m_prev.tokens.clone());
    let a = s.constant(src.clone());
    let b = s.constant(tgt.clone());
    let out = midway_vars(&mut s, cfg, u, m, a, b)?;
    Ok(MotionLatents { tokens: s.value(out).clone(), level: u })
}

/// One backward refinement step. At the top level the upper features are
/// the encoder features themselves.
pub fn backward_refine(
    store: &ParamStore,
    enc: &EncoderConfig,
    cfg: &DynamicsConfig,
    level: usize,
    z: &Mat,
    v_upper: Option<&BackwardFeatures>,
) -> Result<BackwardFeatures> {
    let upper = v_upper.ok_or_else(|| Error::Shape(format!("backward refinement at level {level} needs upper-level features")))?;
    let mut s = Session::new(store);
    let zv = s.constant(z.clone());
    let vv = s.constant(upper.tokens.clone());
    let out = backward_vars(&mut s, enc, cfg, level, zv, vv)?;
    Ok(BackwardFeatures { tokens: s.value(out).clone(), level })
}

/// One transformer block under `prefix`, with rows flagged in `gated_rows`
/// gated when `gating` is on.
pub fn gated_block(store: &ParamStore, prefix: &str, x: &Mat, gated_rows: &[bool], heads: usize, gate_bias: f64, gating: bool) -> Result<Mat> {
    if gated_rows.len() != x.rows() {
        return Err(Error::Shape(format!("gate mask has {} rows, input {}", gated_rows.len(), x.rows())));
    }
    let mut s = Session::new(store);
    let xv = s.constant(x.clone());
    let gate = gating.then_some(Gate { gated_rows, bias: gate_bias });
    let out = nn::block(&mut s, xv, prefix, heads, gate, Residual::FULL);
    Ok(s.value(out).clone())
}

/// Gate values of one block on plain values.
pub fn gate_values(store: &ParamStore, prefix: &str, x: &Mat, gated_rows: &[bool], gate_bias: f64) -> Mat {
    let mut s = Session::new(store);
    let xv = s.constant(x.clone());
    let xn = nn::layer_norm(&mut s, xv, &format!("{prefix}.norm1"));
    let g = nn::gate_values(&mut s, xn, prefix, Gate { gated_rows, bias: gate_bias });
    s.value(g).clone()
}

pub fn forward_predict(store: &ParamStore, enc: &EncoderConfig, cfg: &DynamicsConfig, level: usize, v: &BackwardFeatures, m: &MotionLatents) -> Result<Prediction> {
    let mut s = Session::new(store);
    let vv = s.constant(v.tokens.clone());
    let mv = s.constant(m.tokens.clone());
    let out = forward_vars(&mut s, enc, cfg, level, vv, mv)?;
    Ok(Prediction { tokens: s.value(out).clone(), level })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn enc() -> EncoderConfig {
        EncoderConfig { image_size: 16, patch_size: 4, depth: 4, embed_dim: 16, heads: 2, tap_levels: vec![1, 2, 3], top_level: 4, drop_path: 0.0, ..EncoderConfig::toy() }
    }

    fn dcfg() -> DynamicsConfig {
        DynamicsConfig { midway_dim: 8, midway_heads: 2, midway_blocks: 2, forward_blocks: 3, num_motion_tokens: 3, ..Default::default() }
    }

    fn store(e: &EncoderConfig, d: &DynamicsConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new(false);
        init_params(e, d, &mut rng, &mut s);
        s
    }

    #[test]
    fn zero_output_projection_makes_midway_identity() {
        let (e, d) = (enc(), dcfg());
        let p = store(&e, &d, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = MotionLatents { tokens: Mat::randn(3, 8, 1.0, &mut rng), level: 5 };
        let a = Mat::randn(16, 16, 1.0, &mut rng);
        let b = Mat::randn(16, 16, 1.0, &mut rng);
        let out = midway_infer(&p, &d, 4, &m, &a, &b).unwrap();
        assert_eq!(out.tokens, m.tokens);
    }

    #[test]
    fn midway_shape_and_source_target_asymmetry() {
        let e = EncoderConfig { embed_dim: 16, ..enc() };
        let d = DynamicsConfig { midway_dim: 192, midway_heads: 4, midway_blocks: 1, num_motion_tokens: 10, ..dcfg() };
        let mut p = store(&e, &d, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        p.jitter(0.05, &mut rng);
        let m = MotionLatents { tokens: Mat::randn(10, 192, 1.0, &mut rng), level: 5 };
        let a = Mat::randn(16, 16, 1.0, &mut rng);
        let b = Mat::randn(16, 16, 1.0, &mut rng);
        let ab = midway_infer(&p, &d, 4, &m, &a, &b).unwrap();
        let ba = midway_infer(&p, &d, 4, &m, &b, &a).unwrap();
        assert_eq!(ab.tokens.shape(), (10, 192));
        assert_ne!(ab.tokens, ba.tokens);
    }

    #[test]
    fn midway_rejects_mismatched_features() {
        let (e, d) = (enc(), dcfg());
        let p = store(&e, &d, 0);
        let m = MotionLatents { tokens: Mat::zeros(3, 8), level: 5 };
        assert!(midway_infer(&p, &d, 4, &m, &Mat::zeros(16, 16), &Mat::zeros(15, 16)).is_err());
    }

    #[test]
    fn midway_output_is_readout_plus_previous() {
        let (e, d) = (enc(), dcfg());
        let mut p = store(&e, &d, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        p.jitter(0.1, &mut rng);
        let mut s = Session::new(&p);
        let m = s.constant(Mat::randn(3, 8, 1.0, &mut rng));
        let a = s.constant(Mat::randn(16, 16, 1.0, &mut rng));
        let b = s.constant(Mat::randn(16, 16, 1.0, &mut rng));
        let read = midway_readout_vars(&mut s, &d, 4, m, a, b).unwrap();
        let out = s.graph.add(read, m);
        let full = midway_vars(&mut s, &d, 4, m, a, b).unwrap();
        assert!(s.value(read).max_abs() > 0.0);
        assert_eq!(s.value(out), s.value(full));
    }

    #[test]
    fn zero_initialized_backward_is_identity() {
        let (e, d) = (enc(), dcfg());
        let mut p = store(&e, &d, 6);
        p.insert("backward.l2.blocks.0.mlp.fc2.weight", Mat::zeros(64, 16));
        p.insert("backward.l2.blocks.0.attn.proj.weight", Mat::zeros(16, 16));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = Mat::randn(16, 16, 1.0, &mut rng);
        let up = BackwardFeatures { tokens: Mat::randn(16, 16, 1.0, &mut rng), level: 3 };
        let out = backward_refine(&p, &e, &d, 2, &z, Some(&up)).unwrap();
        assert_eq!(out.tokens, z);
        assert!(backward_refine(&p, &e, &d, 2, &z, None).is_err());
    }

    #[test]
    fn backward_is_permutation_invariant_without_key_positions() {
        let e = enc();
        let d = DynamicsConfig { backward_kv_pos: false, ..dcfg() };
        let mut p = store(&e, &d, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        p.jitter(0.1, &mut rng);
        let z = Mat::randn(16, 16, 1.0, &mut rng);
        let up = Mat::randn(16, 16, 1.0, &mut rng);
        let perm: Vec<usize> = (0..16).map(|i| (i * 5 + 3) % 16).collect();
        let mut shuffled = Mat::zeros(16, 16);
        for (dst, &src) in perm.iter().enumerate() {
            shuffled.row_mut(dst).copy_from_slice(up.row(src));
        }
        let a = backward_refine(&p, &e, &d, 2, &z, Some(&BackwardFeatures { tokens: up, level: 3 })).unwrap();
        let b = backward_refine(&p, &e, &d, 2, &z, Some(&BackwardFeatures { tokens: shuffled, level: 3 })).unwrap();
        let diff = a.tokens.zip_map(&b.tokens, |x, y| (x - y).abs()).max_abs();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn initial_gates_sit_at_logistic_of_bias() {
        let (e, d) = (enc(), dcfg());
        let p = store(&e, &d, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Mat::randn(19, 16, 1.0, &mut rng);
        let mut rows = vec![true; 16];
        rows.extend([false; 3]);
        let g = gate_values(&p, "forward.l1.blocks.1", &x, &rows, 4.0);
        let expected = sigmoid(4.0);
        for r in 0..16 {
            assert!(g.row(r).iter().all(|&v| (v - expected).abs() < 1e-12));
        }
        for r in 16..19 {
            assert!(g.row(r).iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn disabled_gating_equals_plain_block() {
        let (e, d) = (enc(), dcfg());
        let mut p = store(&e, &d, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        p.jitter(0.1, &mut rng);
        let x = Mat::randn(19, 16, 1.0, &mut rng);
        let rows = vec![true; 19];
        let gated_off = gated_block(&p, "forward.l1.blocks.1", &x, &rows, 2, 4.0, false).unwrap();
        let mut s = Session::new(&p);
        let xv = s.constant(x.clone());
        let plain = nn::block(&mut s, xv, "forward.l1.blocks.1", 2, None, Residual::FULL);
        assert_eq!(&gated_off, s.value(plain));
    }

    #[test]
    fn zero_gate_removes_own_residual() {
        let (e, d) = (enc(), dcfg());
        let mut p = store(&e, &d, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        p.jitter(0.1, &mut rng);
        let prefix = "forward.l1.blocks.1";
        // Push every gate to exactly zero.
        p.insert(format!("{prefix}.gate.fc2.weight"), Mat::zeros(16, 16));
        p.insert(format!("{prefix}.gate.fc2.bias"), Mat::filled(1, 16, -2000.0));
        p.insert(format!("{prefix}.mlp.fc2.weight"), Mat::zeros(64, 16));
        p.insert(format!("{prefix}.mlp.fc2.bias"), Mat::zeros(1, 16));
        let x = Mat::randn(6, 16, 1.0, &mut rng);
        let rows = vec![true, true, false, true, true, true];
        let out = gated_block(&p, prefix, &x, &rows, 2, 4.0, true).unwrap();
        // Manual recomputation of the attention sublayer alone.
        let mut s = Session::new(&p);
        let xv = s.constant(x.clone());
        let xn = nn::layer_norm(&mut s, xv, &format!("{prefix}.norm1"));
        let a = nn::self_attention(&mut s, xn, &format!("{prefix}.attn"), 2);
        let attn = s.value(a).clone();
        for r in 0..6 {
            for c in 0..16 {
                let expected = if rows[r] { attn.get(r, c) } else { attn.get(r, c) + x.get(r, c) };
                assert!((out.get(r, c) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prediction_shape_ignores_motion_token_count() {
        let e = enc();
        for m in [1, 3, 10] {
            let d = DynamicsConfig { num_motion_tokens: m, ..dcfg() };
            let p = store(&e, &d, 16);
            let v = BackwardFeatures { tokens: Mat::filled(16, 16, 0.5), level: 1 };
            let ml = MotionLatents { tokens: Mat::filled(m, 8, 0.1), level: 2 };
            assert_eq!(forward_predict(&p, &e, &d, 1, &v, &ml).unwrap().tokens.shape(), (16, 16));
        }
    }

    #[test]
    fn zeroing_motion_changes_prediction() {
        let (e, d) = (enc(), dcfg());
        let p = store(&e, &d, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let v = BackwardFeatures { tokens: Mat::randn(16, 16, 1.0, &mut rng), level: 1 };
        let m = MotionLatents { tokens: Mat::randn(3, 8, 1.0, &mut rng), level: 2 };
        let zero = MotionLatents { tokens: Mat::zeros(3, 8), level: 2 };
        assert_ne!(forward_predict(&p, &e, &d, 1, &v, &m).unwrap(), forward_predict(&p, &e, &d, 1, &v, &zero).unwrap());
    }

    #[test]
    fn manifest_matches_initialized_counts_for_every_variant() {
        let e = enc();
        for (name, t) in Toggles::ablation_rows() {
            let d = DynamicsConfig { toggles: t, ..dcfg() };
            let p = store(&e, &d, 19);
            let manifest = param_manifest(&e, &d);
            for (ns, count) in manifest {
                assert_eq!(p.num_scalars_with_prefix(&format!("{ns}.")), count, "{name}: {ns}");
            }
        }
        let base = DynamicsConfig { toggles: Toggles::BASE, ..dcfg() };
        assert!(store(&e, &base, 0).is_empty());
    }

    #[test]
    fn level_plan_follows_toggles() {
        let e = EncoderConfig::toy();
        let full = LevelPlan::new(&e, &Toggles::FULL);
        assert_eq!(full.taps, vec![9, 6, 3]);
        assert_eq!(full.objective, vec![9, 6, 3]);
        assert_eq!(full.midway_inputs, vec![12, 9, 6]);
        let no_multi = LevelPlan::new(&e, &Toggles { multi_level: false, ..Toggles::FULL });
        assert_eq!(no_multi.objective, vec![3]);
        assert_eq!(no_multi.predicted, vec![9, 6, 3]);
        let no_ref = LevelPlan::new(&e, &Toggles { refinement: false, ..Toggles::FULL });
        assert_eq!(no_ref.midway_inputs, vec![12]);
        assert_eq!(no_ref.motion_source(&e, 3), 12);
    }
}
