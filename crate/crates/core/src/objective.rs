//! Training objective: dense forward prediction at every objective level,
//! the cross-frame DINO invariance loss on the class token, and one
//! optimizer step.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Var;
use crate::data::FramePair;
use crate::dynamics::{self, DynamicsConfig, LevelPlan, Prediction};
use crate::encoder::{self, EncoderConfig, PyramidVars};
use crate::error::{Error, Result};
use crate::nn::{self, Init, Residual};
use crate::optim::{self, AdamW, OptimConfig, Schedule};
use crate::params::{ema_update, ParamStore, ParameterSets, Session};
use crate::raster::Image;
use crate::tensor::Mat;

/// Loss at or above this value aborts the step.
pub const DIVERGENCE_THRESHOLD: f64 = 1e4;

#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceConfig {
    pub prototypes: usize,
    pub head_hidden: usize,
    pub head_bottleneck: usize,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub teacher_temp_end: f64,
    pub teacher_temp_warmup_epochs: f64,
    pub center_momentum: f64,
    /// Multiplier on the invariance term; 0 skips its computation.
    pub weight: f64,
}

impl Default for InvarianceConfig {
    fn default() -> Self {
        Self {
            prototypes: 4096,
            head_hidden: 2048,
            head_bottleneck: 256,
            student_temp: 0.1,
            teacher_temp: 0.04,
            teacher_temp_end: 0.07,
            teacher_temp_warmup_epochs: 30.0,
            center_momentum: 0.9,
            weight: 1.0,
        }
    }
}

impl InvarianceConfig {
    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (k, v) in [("prototypes", self.prototypes), ("head_hidden", self.head_hidden), ("head_bottleneck", self.head_bottleneck)] {
            if v == 0 {
                out.push(format!("invariance.{k} must be at least 1"));
            }
        }
        for (k, v) in [("student_temp", self.student_temp), ("teacher_temp", self.teacher_temp), ("teacher_temp_end", self.teacher_temp_end)] {
            if !(v > 0.0) {
                out.push(format!("invariance.{k} must be positive, got {v}"));
            }
        }
        if !(self.teacher_temp_warmup_epochs >= 0.0) {
            out.push("invariance.teacher_temp_warmup_epochs must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            out.push(format!("invariance.center_momentum must lie in [0, 1), got {}", self.center_momentum));
        }
        if !(self.weight >= 0.0) {
            out.push("invariance.weight must be nonnegative".into());
        }
        out
    }

    /// Linear warmup of the teacher temperature, constant afterwards.
    pub fn teacher_temp_at(&self, epoch: f64) -> f64 {
        if epoch >= self.teacher_temp_warmup_epochs {
            self.teacher_temp_end
        } else {
            self.teacher_temp + (self.teacher_temp_end - self.teacher_temp) * epoch / self.teacher_temp_warmup_epochs
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub encoder: EncoderConfig,
    pub dynamics: DynamicsConfig,
    pub invariance: InvarianceConfig,
    pub optim: OptimConfig,
    /// Sum level losses instead of averaging them.
    pub sum_levels: bool,
    /// Added to token norms during training.
    pub norm_eps: f64,
}

impl ObjectiveConfig {
    pub fn issues(&self) -> Vec<String> {
        let mut out = self.encoder.issues();
        out.extend(self.dynamics.issues());
        out.extend(self.invariance.issues());
        out.extend(self.optim.issues());
        if !(self.norm_eps >= 0.0) {
            out.push("objective.norm_eps must be nonnegative".into());
        }
        out
    }
}

/// How token norms are guarded in [`dense_forward_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormMode {
    /// Zero-norm tokens are an error.
    Exact,
    /// `x / (‖x‖ + eps)`.
    Eps(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelLoss {
    pub level: usize,
    pub value: f64,
}

fn normalize_rows(m: &Mat, mode: NormMode, what: &str) -> Result<Mat> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let d = match mode {
            NormMode::Exact if n == 0.0 => return Err(Error::Degenerate(format!("{what} token {r} has zero norm"))),
            NormMode::Exact => n,
            NormMode::Eps(eps) => n + eps,
        };
        row.iter_mut().for_each(|v| *v /= d);
    }
    Ok(out)
}

/// Mean over tokens of the squared distance between L2-normalized
/// predicted and target tokens.
pub fn dense_forward_loss(pred: &Prediction, target: &Mat, mode: NormMode) -> Result<LevelLoss> {
    if pred.tokens.shape() != target.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.tokens.shape(), target.shape())));
    }
    let p = normalize_rows(&pred.tokens, mode, "prediction")?;
    let t = normalize_rows(target, mode, "target")?;
    let sq: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(LevelLoss { level: pred.level, value: sq / p.rows() as f64 })
}

fn dense_loss_var(s: &mut Session, pred: Var, target: &Mat, eps: f64) -> Result<Var> {
    if s.value(pred).shape() != target.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", s.value(pred).shape(), target.shape())));
    }
    let t = s.constant(normalize_rows(target, NormMode::Eps(eps), "target")?);
    let p = s.graph.l2_normalize_rows(pred, eps);
    let d = s.graph.sub(p, t);
    let sq = s.graph.mul(d, d);
    let total = s.graph.sum(sq);
    Ok(s.graph.scale(total, 1.0 / target.rows() as f64))
}

pub fn init_head<R: Rng>(enc: &EncoderConfig, cfg: &InvarianceConfig, rng: &mut R, store: &mut ParamStore) {
    let mut init = Init::new(store, rng);
    init.linear("head.fc1", enc.embed_dim, cfg.head_hidden);
    init.linear("head.fc2", cfg.head_hidden, cfg.head_hidden);
    init.linear("head.fc3", cfg.head_hidden, cfg.head_bottleneck);
    init.tensor("head.prototypes".into(), cfg.prototypes, cfg.head_bottleneck);
}

pub fn head_param_count(enc: &EncoderConfig, cfg: &InvarianceConfig) -> usize {
    let lin = |i: usize, o: usize| i * o + o;
    lin(enc.embed_dim, cfg.head_hidden) + lin(cfg.head_hidden, cfg.head_hidden) + lin(cfg.head_hidden, cfg.head_bottleneck) + cfg.prototypes * cfg.head_bottleneck
}

/// Fresh student parameters for every enabled component.
pub fn init_student(cfg: &ObjectiveConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(true);
    encoder::init_params(&cfg.encoder, &mut rng, &mut store);
    init_head(&cfg.encoder, &cfg.invariance, &mut rng, &mut store);
    dynamics::init_params(&cfg.encoder, &cfg.dynamics, &mut rng, &mut store);
    store
}

/// Projection head: 3-layer MLP, L2 normalization, then cosine logits
/// against row-normalized prototypes.
fn head_logits(s: &mut Session, cls: Var, eps: f64) -> Var {
    let h = nn::linear(s, cls, "head.fc1");
    let h = s.graph.gelu(h);
    let h = nn::linear(s, h, "head.fc2");
    let h = s.graph.gelu(h);
    let h = nn::linear(s, h, "head.fc3");
    let h = s.graph.l2_normalize_rows(h, eps);
    let w = s.p("head.prototypes");
    let w = s.graph.l2_normalize_rows(w, eps);
    s.graph.matmul_nt(h, w)
}

/// Stacked class-token logits for a set of crops.
fn crop_logits(s: &mut Session, crops: &[&Image], cfg: &ObjectiveConfig, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let mut rows = Vec::with_capacity(crops.len());
    let mut rng = rng;
    for img in crops {
        let residuals = sample_residuals(&cfg.encoder, rng.as_deref_mut());
        let pyr = encoder::encode_vars(s, img, &cfg.encoder, &residuals)?;
        rows.push(pyr.cls.ok_or_else(|| Error::config("the invariance objective needs encoder.use_cls_token=true"))?);
    }
    let stack = s.graph.concat_rows(&rows);
    Ok(head_logits(s, stack, cfg.norm_eps))
}

fn sample_residuals(enc: &EncoderConfig, rng: Option<&mut ChaCha8Rng>) -> Vec<Residual> {
    match rng {
        Some(rng) if enc.drop_path > 0.0 => enc.drop_path_rates().into_iter().map(|p| Residual::sample(p, rng)).collect(),
        _ => vec![],
    }
}

fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// Sharpened, centered teacher distribution.
pub fn teacher_probs(logits: &Mat, center: &Mat, temp: f64) -> Mat {
    let mut c = logits.clone();
    for r in 0..c.rows() {
        for (v, cv) in c.row_mut(r).iter_mut().zip(center.data()) {
            *v = (*v - cv) / temp;
        }
    }
    softmax_rows(&c)
}

/// Cross-entropy averaged over every (teacher row, student row) pair.
pub fn cross_entropy(teacher_probs: &Mat, student_logits: &Mat, student_temp: f64) -> f64 {
    let mut ls = student_logits.scale(1.0 / student_temp);
    for r in 0..ls.rows() {
        let row = ls.row_mut(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    let mut total = 0.0;
    for i in 0..teacher_probs.rows() {
        for j in 0..ls.rows() {
            total -= teacher_probs.row(i).iter().zip(ls.row(j)).map(|(t, l)| t * l).sum::<f64>();
        }
    }
    total / (teacher_probs.rows() * ls.rows()) as f64
}

/// Symmetric cross-frame invariance loss: teacher global crops of one frame
/// against every student crop of the other, summed over both orderings.
/// Index 0 is the source frame, 1 the target frame.
pub fn invariance_loss(teacher_logits: [&Mat; 2], student_logits: [&Mat; 2], center: &Mat, teacher_temp: f64, student_temp: f64) -> Result<f64> {
    if teacher_logits.iter().any(|t| t.rows() == 0) {
        return Err(Error::Data("invariance loss needs at least one global crop per frame".into()));
    }
    let t0 = teacher_probs(teacher_logits[0], center, teacher_temp);
    let t1 = teacher_probs(teacher_logits[1], center, teacher_temp);
    Ok(cross_entropy(&t0, student_logits[1], student_temp) + cross_entropy(&t1, student_logits[0], student_temp))
}

fn cross_entropy_var(s: &mut Session, teacher_probs: &Mat, student_logits: Var, student_temp: f64) -> Var {
    let ns = s.value(student_logits).rows();
    let nt = teacher_probs.rows();
    let tsum = s.constant(Mat::row_vector(
        (0..teacher_probs.cols()).map(|c| (0..nt).map(|r| teacher_probs.get(r, c)).sum()).collect(),
    ));
    let scaled = s.graph.scale(student_logits, 1.0 / student_temp);
    let ls = s.graph.log_softmax(scaled);
    let weighted = s.graph.mul_row(ls, tsum);
    let total = s.graph.sum(weighted);
    s.graph.scale(total, -1.0 / (nt * ns) as f64)
}

/// `center ← m·center + (1 − m)·mean(teacher rows)`.
pub fn update_center(center: &Mat, teacher_logits: &Mat, momentum: f64) -> Mat {
    let mean = teacher_logits.mean_rows();
    center.zip_map(&mean, |c, b| momentum * c + (1.0 - momentum) * b)
}

/// Teacher logits for a set of crops (no gradient).
pub fn teacher_logits(teacher: &ParamStore, crops: &[Image], cfg: &ObjectiveConfig) -> Result<Mat> {
    let mut s = Session::new(teacher);
    let refs: Vec<&Image> = crops.iter().collect();
    let v = crop_logits(&mut s, &refs, cfg, None)?;
    Ok(s.value(v).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub levels: Vec<LevelLoss>,
    pub dyn_loss: f64,
    pub inv_loss: f64,
    pub total: f64,
}

struct PairEval {
    value: ObjectiveValue,
    /// Teacher logits of every global crop of both frames.
    teacher_logits: Mat,
    grads: Option<BTreeMap<String, Mat>>,
}

fn evaluate_pair(
    pair: &FramePair,
    params: &ParameterSets,
    center: &Mat,
    teacher_temp: f64,
    cfg: &ObjectiveConfig,
    mut rng: Option<ChaCha8Rng>,
    want_grads: bool,
) -> Result<PairEval> {
    let plan = LevelPlan::new(&cfg.encoder, &cfg.dynamics.toggles);
    let mut s = Session::new(&params.student);
    let mut terms = Vec::new();
    let mut levels = Vec::new();

    if cfg.dynamics.toggles.latent_dynamics {
        let target = encoder::encode(&pair.x_tgt, &params.teacher, &cfg.encoder)?;
        let residuals = sample_residuals(&cfg.encoder, rng.as_mut());
        let src = encoder::encode_vars(&mut s, &pair.x_src, &cfg.encoder, &residuals)?;
        let tgt = PyramidVars::constants(&mut s, &target);
        let h = dynamics::hierarchy_vars(&mut s, &cfg.encoder, &cfg.dynamics, &src, &tgt)?;
        let mut level_vars = Vec::new();
        for &l in &plan.objective {
            let pred = h.predictions[&l];
            let loss = dense_loss_var(&mut s, pred, &target.levels[&l], cfg.norm_eps)?;
            let value = s.graph.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("dense loss at level {l}")));
            }
            levels.push(LevelLoss { level: l, value });
            level_vars.push(loss);
        }
        let stacked = s.graph.concat_cols(&level_vars);
        let agg = if cfg.sum_levels { s.graph.sum(stacked) } else { s.graph.mean(stacked) };
        terms.push(agg);
    }
    let dyn_loss = terms.first().map(|v| s.graph.scalar(*v)).unwrap_or(0.0);

    let mut inv_loss = 0.0;
    let mut all_teacher = Mat::zeros(0, cfg.invariance.prototypes);
    if cfg.invariance.weight > 0.0 {
        if pair.inv_src_global.is_empty() || pair.inv_tgt_global.is_empty() {
            return Err(Error::Data("invariance loss needs at least one global crop per frame".into()));
        }
        let t_src = teacher_logits(&params.teacher, &pair.inv_src_global, cfg)?;
        let t_tgt = teacher_logits(&params.teacher, &pair.inv_tgt_global, cfg)?;
        let p_src = teacher_probs(&t_src, center, teacher_temp);
        let p_tgt = teacher_probs(&t_tgt, center, teacher_temp);
        let crops_src: Vec<&Image> = pair.inv_src_global.iter().chain(&pair.inv_src_local).collect();
        let crops_tgt: Vec<&Image> = pair.inv_tgt_global.iter().chain(&pair.inv_tgt_local).collect();
        let s_src = crop_logits(&mut s, &crops_src, cfg, rng.as_mut())?;
        let s_tgt = crop_logits(&mut s, &crops_tgt, cfg, rng.as_mut())?;
        let a = cross_entropy_var(&mut s, &p_src, s_tgt, cfg.invariance.student_temp);
        let b = cross_entropy_var(&mut s, &p_tgt, s_src, cfg.invariance.student_temp);
        let inv = s.graph.add(a, b);
        inv_loss = s.graph.scalar(inv);
        if !inv_loss.is_finite() {
            return Err(Error::NonFinite("invariance loss".into()));
        }
        terms.push(s.graph.scale(inv, cfg.invariance.weight));
        all_teacher = Mat::concat_rows(&[&t_src, &t_tgt]);
    }

    let total_var = match terms.as_slice() {
        [] => None,
        [one] => Some(*one),
        [a, b] => Some(s.graph.add(*a, *b)),
        _ => unreachable!(),
    };
    let total = total_var.map(|v| s.graph.scalar(v)).unwrap_or(0.0);
    let grads = match (want_grads, total_var) {
        (true, Some(v)) => Some(s.param_grads(&s.graph.backward(v))),
        (true, None) => Some(BTreeMap::new()),
        (false, _) => None,
    };
    Ok(PairEval { value: ObjectiveValue { levels, dyn_loss, inv_loss, total }, teacher_logits: all_teacher, grads })
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParameterSets,
    pub optim: AdamW,
    pub center: Mat,
    pub step: u64,
    pub schedule: Schedule,
    /// Seeds per-step stochastic depth.
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSettings {
    pub lr: f64,
    pub weight_decay: f64,
    pub teacher_momentum: f64,
    pub teacher_temp: f64,
}

impl TrainState {
    pub fn new(cfg: &ObjectiveConfig, schedule: Schedule, seed: u64) -> Self {
        let student = init_student(cfg, seed);
        Self {
            params: ParameterSets::from_student(student, cfg.optim.momentum_teacher),
            optim: AdamW::default(),
            center: Mat::zeros(1, cfg.invariance.prototypes),
            step: 0,
            schedule,
            seed,
        }
    }

    pub fn settings(&self, cfg: &ObjectiveConfig) -> StepSettings {
        let v = self.schedule.values(&cfg.optim, self.step);
        StepSettings {
            lr: v.lr,
            weight_decay: v.weight_decay,
            teacher_momentum: v.teacher_momentum,
            teacher_temp: cfg.invariance.teacher_temp_at(self.schedule.epoch(self.step)),
        }
    }

    fn pair_rng(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_d809);
        rng.set_stream(self.step.wrapping_mul(1 << 20).wrapping_add(index as u64));
        rng
    }
}

/// Loss terms for one pair at the current state, without stochastic depth.
pub fn compute_objective(pair: &FramePair, state: &TrainState, cfg: &ObjectiveConfig) -> Result<ObjectiveValue> {
    let t = state.settings(cfg).teacher_temp;
    Ok(evaluate_pair(pair, &state.params, &state.center, t, cfg, None, false)?.value)
}

/// Loss terms and student gradients for one pair, without stochastic depth.
pub fn objective_gradients(pair: &FramePair, state: &TrainState, cfg: &ObjectiveConfig) -> Result<(ObjectiveValue, BTreeMap<String, Mat>)> {
    let t = state.settings(cfg).teacher_temp;
    let e = evaluate_pair(pair, &state.params, &state.center, t, cfg, None, true)?;
    Ok((e.value, e.grads.unwrap_or_default()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub levels: Vec<LevelLoss>,
    pub dyn_loss: f64,
    pub inv_loss: f64,
    pub total: f64,
    pub lr: f64,
    pub teacher_momentum: f64,
    pub grad_norm: f64,
}

impl StepReport {
    /// Tab-separated header matching [`StepReport::line`].
    pub fn header(levels: &[usize]) -> String {
        let mut h = String::from("step");
        for l in levels {
            let _ = write!(h, "\tdyn_l{l}");
        }
        h.push_str("\tdyn\tinv\ttotal\tlr\tmomentum\tgrad_norm");
        h
    }

    /// Values print as shortest round-trip decimals so logs compare exactly.
    pub fn line(&self) -> String {
        let mut out = self.step.to_string();
        for l in &self.levels {
            let _ = write!(out, "\t{}", l.value);
        }
        let _ = write!(out, "\t{}\t{}\t{}\t{}\t{}\t{}", self.dyn_loss, self.inv_loss, self.total, self.lr, self.teacher_momentum, self.grad_norm);
        out
    }
}

/// One optimization step over a batch: mean loss, backward, clip, AdamW,
/// teacher EMA, center update.
pub fn train_step(batch: &[FramePair], state: &mut TrainState, cfg: &ObjectiveConfig) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let settings = state.settings(cfg);
    let snapshot: &TrainState = state;
    let evals: Vec<Result<PairEval>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, pair)| evaluate_pair(pair, &snapshot.params, &snapshot.center, settings.teacher_temp, cfg, Some(snapshot.pair_rng(i)), true))
        .collect();
    let evals = evals.into_iter().collect::<Result<Vec<_>>>()?;

    let n = batch.len() as f64;
    let mut grads: BTreeMap<String, Mat> = BTreeMap::new();
    let mut level_sums: BTreeMap<usize, f64> = BTreeMap::new();
    let (mut dyn_loss, mut inv_loss, mut total) = (0.0, 0.0, 0.0);
    for e in &evals {
        for l in &e.value.levels {
            *level_sums.entry(l.level).or_default() += l.value / n;
        }
        dyn_loss += e.value.dyn_loss / n;
        inv_loss += e.value.inv_loss / n;
        total += e.value.total / n;
        for (k, g) in e.grads.as_ref().into_iter().flatten() {
            match grads.get_mut(k) {
                Some(acc) => acc.axpy(1.0 / n, g),
                None => {
                    grads.insert(k.clone(), g.scale(1.0 / n));
                }
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("total loss at step {}", state.step)));
    }
    if total >= DIVERGENCE_THRESHOLD {
        return Err(Error::Divergent { step: state.step, loss: total });
    }

    let grad_norm = optim::clip_global_norm(&mut grads, cfg.optim.clip_grad);
    state.optim.step(&mut state.params.student, &grads, &cfg.optim, settings.lr, settings.weight_decay)?;
    ema_update(&mut state.params, settings.teacher_momentum)?;
    if cfg.invariance.weight > 0.0 {
        let rows: Vec<&Mat> = evals.iter().map(|e| &e.teacher_logits).collect();
        state.center = update_center(&state.center, &Mat::concat_rows(&rows), cfg.invariance.center_momentum);
    }
    let report = StepReport {
        step: state.step,
        levels: level_sums.into_iter().rev().map(|(level, value)| LevelLoss { level, value }).collect(),
        dyn_loss,
        inv_loss,
        total,
        lr: settings.lr,
        teacher_momentum: settings.teacher_momentum,
        grad_norm,
    };
    state.step += 1;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Toggles;
    use crate::optim::OptimConfig;

    fn pred(m: Mat) -> Prediction {
        Prediction { tokens: m, level: 3 }
    }

    #[test]
    fn dense_loss_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Mat::randn(6, 5, 1.0, &mut rng);
        assert_eq!(dense_forward_loss(&pred(t.clone()), &t, NormMode::Exact).unwrap().value, 0.0);
        let anti = dense_forward_loss(&pred(t.scale(-1.0)), &t, NormMode::Exact).unwrap().value;
        assert!((anti - 4.0).abs() < 1e-12, "{anti}");
        let a = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 3.0]);
        let b = Mat::from_vec(2, 2, vec![0.0, 2.0, -1.0, 0.0]);
        assert!((dense_forward_loss(&pred(a), &b, NormMode::Exact).unwrap().value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dense_loss_ignores_positive_scale_and_flags_zero_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Mat::randn(4, 3, 1.0, &mut rng);
        let t = Mat::randn(4, 3, 1.0, &mut rng);
        let a = dense_forward_loss(&pred(p.clone()), &t, NormMode::Exact).unwrap().value;
        let b = dense_forward_loss(&pred(p.scale(37.5)), &t, NormMode::Exact).unwrap().value;
        assert!((a - b).abs() < 1e-12 && (0.0..=4.0).contains(&a));
        let mut z = p.clone();
        z.row_mut(2).fill(0.0);
        assert!(matches!(dense_forward_loss(&pred(z.clone()), &t, NormMode::Exact), Err(Error::Degenerate(_))));
        assert!(dense_forward_loss(&pred(z), &t, NormMode::Eps(1e-6)).is_ok());
    }

    #[test]
    fn graph_dense_loss_matches_value_version() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Mat::randn(5, 4, 1.0, &mut rng);
        let t = Mat::randn(5, 4, 1.0, &mut rng);
        let store = ParamStore::new(false);
        let mut s = Session::new(&store);
        let pv = s.constant(p.clone());
        let l = dense_loss_var(&mut s, pv, &t, 0.0).unwrap();
        let v = dense_forward_loss(&pred(p), &t, NormMode::Exact).unwrap().value;
        assert!((s.graph.scalar(l) - v).abs() < 1e-14);
    }

    #[test]
    fn uniform_distributions_give_log_k() {
        let k = 16;
        let teacher = Mat::zeros(2, k);
        let student = Mat::zeros(10, k);
        let center = Mat::zeros(1, k);
        let probs = teacher_probs(&teacher, &center, 0.04);
        assert!((cross_entropy(&probs, &student, 0.1) - (k as f64).ln()).abs() < 1e-12);
        let both = invariance_loss([&teacher, &teacher], [&student, &student], &center, 0.04, 0.1).unwrap();
        assert!((both - 2.0 * (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_teacher_gives_mean_log_partition_minus_mean_logit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 8;
        let probs = teacher_probs(&Mat::zeros(1, k), &Mat::zeros(1, k), 0.04);
        let student = Mat::randn(3, k, 1.0, &mut rng);
        let mut expected = 0.0;
        for r in 0..3 {
            let row: Vec<f64> = student.row(r).iter().map(|v| v / 0.1).collect();
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            expected += lse - row.iter().sum::<f64>() / k as f64;
        }
        expected /= 3.0;
        assert!((cross_entropy(&probs, &student, 0.1) - expected).abs() < 1e-10);
    }

    #[test]
    fn matching_sharp_distributions_approach_zero() {
        let mut logits = Mat::zeros(1, 4);
        logits.set(0, 2, 1.0);
        let center = Mat::zeros(1, 4);
        let loss = cross_entropy(&teacher_probs(&logits, &center, 1e-3), &logits, 1e-3);
        assert!(loss < 1e-12, "{loss}");
        assert!(invariance_loss([&Mat::zeros(0, 4), &logits], [&logits, &logits], &center, 0.1, 0.1).is_err());
    }

    #[test]
    fn center_update_rule() {
        let c = Mat::from_vec(1, 2, vec![1.0, -1.0]);
        let t = Mat::from_vec(2, 2, vec![3.0, 0.0, 5.0, 2.0]);
        let out = update_center(&c, &t, 0.9);
        assert!((out.get(0, 0) - (0.9 + 0.1 * 4.0)).abs() < 1e-15);
        assert!((out.get(0, 1) - (-0.9 + 0.1 * 1.0)).abs() < 1e-15);
    }

    fn tiny(toggles: Toggles) -> ObjectiveConfig {
        ObjectiveConfig {
            encoder: EncoderConfig { image_size: 16, patch_size: 4, depth: 2, embed_dim: 16, heads: 2, tap_levels: vec![1], top_level: 2, drop_path: 0.0, ..EncoderConfig::toy() },
            dynamics: DynamicsConfig { midway_dim: 8, midway_heads: 2, midway_blocks: 1, forward_blocks: 2, num_motion_tokens: 2, toggles, ..Default::default() },
            invariance: InvarianceConfig { prototypes: 8, head_hidden: 8, head_bottleneck: 4, teacher_temp_warmup_epochs: 0.0, ..Default::default() },
            optim: OptimConfig { warmup_epochs: 0.0, epochs: 1, ..Default::default() },
            sum_levels: false,
            norm_eps: 1e-6,
        }
    }

    fn image(seed: u64, size: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_vec(size, size, (0..size * size * 3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn pair(seed: u64) -> FramePair {
        let mut p = FramePair::dense_only(&image(seed, 16), &image(seed + 1, 16), 16, 0.5);
        p.x_src = image(seed, 16);
        p.x_tgt = image(seed + 1, 16);
        p.inv_src_global = vec![image(seed + 2, 16)];
        p.inv_tgt_global = vec![image(seed + 3, 16)];
        p.inv_src_local = vec![image(seed + 4, 8)];
        p.inv_tgt_local = vec![image(seed + 5, 8)];
        p
    }

    #[test]
    fn base_model_is_invariance_only() {
        let cfg = tiny(Toggles::BASE);
        let state = TrainState::new(&cfg, Schedule::new(1, 1), 0);
        assert_eq!(state.params.student.num_scalars_with_prefix("midway."), 0);
        let v = compute_objective(&pair(0), &state, &cfg).unwrap();
        assert!(v.levels.is_empty());
        assert_eq!(v.total, v.inv_loss);
    }

    #[test]
    fn one_loss_entry_per_objective_level() {
        let cfg = ObjectiveConfig {
            encoder: EncoderConfig { depth: 4, tap_levels: vec![1, 2, 3], top_level: 4, ..tiny(Toggles::FULL).encoder },
            ..tiny(Toggles::FULL)
        };
        let state = TrainState::new(&cfg, Schedule::new(1, 1), 0);
        let v = compute_objective(&pair(0), &state, &cfg).unwrap();
        assert_eq!(v.levels.iter().map(|l| l.level).collect::<Vec<_>>(), vec![3, 2, 1]);
        let mean = v.levels.iter().map(|l| l.value).sum::<f64>() / 3.0;
        assert!((v.dyn_loss - mean).abs() < 1e-14);
        assert!((v.total - v.dyn_loss - v.inv_loss).abs() < 1e-12);
    }

    #[test]
    fn train_step_touches_teacher_only_through_ema() {
        let cfg = tiny(Toggles::FULL);
        let mut state = TrainState::new(&cfg, Schedule::new(2, 1), 0);
        let before = state.params.teacher.clone();
        let settings = state.settings(&cfg);
        let report = train_step(&[pair(0), pair(10)], &mut state, &cfg).unwrap();
        assert_eq!(report.step, 0);
        assert_eq!(state.step, 1);
        let m = settings.teacher_momentum;
        for (name, t) in state.params.teacher.iter() {
            let s = state.params.student.expect(name);
            let expected = before.expect(name).zip_map(s, |a, b| m * a + (1.0 - m) * b);
            assert_eq!(t, &expected, "{name}");
        }
        assert!(state.optim.m.keys().all(|k| state.params.student.contains(k)));
        assert!(!state.params.teacher.trainable);
        assert!(state.center.max_abs() > 0.0);
    }

    #[test]
    fn report_line_matches_header() {
        let r = StepReport {
            step: 4,
            levels: vec![LevelLoss { level: 9, value: 0.5 }, LevelLoss { level: 3, value: 0.25 }],
            dyn_loss: 0.375,
            inv_loss: 1.0,
            total: 1.375,
            lr: 1e-4,
            teacher_momentum: 0.996,
            grad_norm: 2.0,
        };
        assert_eq!(StepReport::header(&[9, 3]).split('\t').count(), r.line().split('\t').count());
        assert_eq!(r.line(), "4\t0.5\t0.25\t0.375\t1\t1.375\t0.0001\t0.996\t2");
    }
}
