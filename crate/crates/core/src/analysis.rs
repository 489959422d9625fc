//! Forwarded feature perturbation: a random tangent attached to one source
//! token is pushed through the dynamics stack with forward-mode
//! differentiation, and the predicted target tokens are scored by how well
//! their tangents align with it.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{self, DynamicsConfig, LevelPlan};
use crate::encoder::{self, EncoderConfig, FeaturePyramid, PyramidVars};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::raster::Image;
use crate::tensor::{cosine, Mat};

/// Borrowed view of a trained model.
#[derive(Clone, Copy, Debug)]
pub struct Model<'a> {
    pub encoder: &'a EncoderConfig,
    pub dynamics: &'a DynamicsConfig,
    pub student: &'a ParamStore,
    pub teacher: &'a ParamStore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationConfig {
    pub k: usize,
    /// Row-major index into the patch grid.
    pub source_location: usize,
    pub tangent_scale: f64,
    /// Levels whose source features receive the tangent; `None` means every
    /// tap level.
    pub levels: Option<Vec<usize>>,
    /// Level whose prediction is scored; `None` means the lowest predicted.
    pub heatmap_level: Option<usize>,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self { k: 8, source_location: 0, tangent_scale: 1.0, levels: None, heatmap_level: None, seed: 0 }
    }
}

impl PerturbationConfig {
    pub fn issues(&self, enc: &EncoderConfig) -> Vec<String> {
        let mut out = Vec::new();
        if self.k == 0 {
            out.push("perturbation k must be at least 1".into());
        }
        if self.source_location >= enc.num_tokens() {
            out.push(format!("source location {} outside the {}x{} grid", self.source_location, enc.grid(), enc.grid()));
        }
        if !(self.tangent_scale > 0.0 && self.tangent_scale.is_finite()) {
            out.push(format!("tangent scale must be positive, got {}", self.tangent_scale));
        }
        for l in self.levels.iter().flatten() {
            if !enc.tap_levels.contains(l) {
                out.push(format!("perturbation level {l} is not a tap level"));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationHeatmap {
    /// `grid × grid` averaged cosine scores.
    pub scores: Mat,
    pub source_location: usize,
    pub k: usize,
    pub level: usize,
    /// Set when the output tangent vanished in every repetition.
    pub zero_tangent: bool,
}

impl PerturbationHeatmap {
    pub fn grid(&self) -> usize {
        self.scores.rows()
    }

    pub fn score(&self, index: usize) -> f64 {
        self.scores.data()[index]
    }

    /// Indices sorted by descending score, ties by ascending index.
    pub fn ranked(&self) -> Vec<usize> {
        let s = self.scores.data();
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        idx
    }

    pub fn argmax(&self) -> usize {
        self.ranked()[0]
    }
}

fn resolve_levels(model: &Model, cfg: &PerturbationConfig) -> Result<(Vec<usize>, usize)> {
    let issues = cfg.issues(model.encoder);
    if !issues.is_empty() {
        return Err(Error::Config(issues));
    }
    let plan = LevelPlan::new(model.encoder, &model.dynamics.toggles);
    let lowest = plan.predicted.last().copied().ok_or_else(|| Error::config("perturbation needs latent dynamics"))?;
    let level = cfg.heatmap_level.unwrap_or(lowest);
    if !plan.predicted.contains(&level) {
        return Err(Error::config(format!("level {level} has no prediction; predicted levels are {:?}", plan.predicted)));
    }
    let levels = cfg.levels.clone().unwrap_or_else(|| model.encoder.tap_levels.clone());
    Ok((levels, level))
}

/// Encodes the source with the student and the target with the teacher.
pub fn encode_pair(model: &Model, x_src: &Image, x_tgt: &Image) -> Result<(FeaturePyramid, FeaturePyramid)> {
    Ok((encoder::encode(x_src, model.student, model.encoder)?, encoder::encode(x_tgt, model.teacher, model.encoder)?))
}

/// Prediction at `level` from precomputed pyramids.
pub fn predict_level(model: &Model, src: &FeaturePyramid, tgt: &FeaturePyramid, level: usize) -> Result<Mat> {
    let mut s = Session::new(model.student);
    let sv = PyramidVars::constants(&mut s, src);
    let tv = PyramidVars::constants(&mut s, tgt);
    let h = dynamics::hierarchy_vars(&mut s, model.encoder, model.dynamics, &sv, &tv)?;
    let v = h.predictions.get(&level).ok_or_else(|| Error::config(format!("level {level} has no prediction")))?;
    Ok(s.value(*v).clone())
}

/// Prediction at `level` and its tangent when the source features carry
/// `seeds` (level, tangent matrix).
pub fn prediction_tangent(model: &Model, src: &FeaturePyramid, tgt: &FeaturePyramid, level: usize, seeds: &[(usize, Mat)]) -> Result<(Mat, Mat)> {
    let mut s = Session::new(model.student);
    let sv = PyramidVars::constants(&mut s, src);
    let tv = PyramidVars::constants(&mut s, tgt);
    let h = dynamics::hierarchy_vars(&mut s, model.encoder, model.dynamics, &sv, &tv)?;
    let out = *h.predictions.get(&level).ok_or_else(|| Error::config(format!("level {level} has no prediction")))?;
    let seeds = seeds
        .iter()
        .map(|(l, m)| sv.levels.get(l).map(|v| (*v, m.clone())).ok_or_else(|| Error::config(format!("level {l} is not exported"))))
        .collect::<Result<Vec<_>>>()?;
    let t = s.graph.jvp(&seeds);
    Ok((s.value(out).clone(), t.get_or_zero(&s.graph, out)))
}

/// Perturbation heatmap from precomputed pyramids (student source, teacher
/// target).
pub fn perturb_features(src: &FeaturePyramid, tgt: &FeaturePyramid, cfg: &PerturbationConfig, model: &Model) -> Result<PerturbationHeatmap> {
    let (levels, level) = resolve_levels(model, cfg)?;
    let mut s = Session::new(model.student);
    let sv = PyramidVars::constants(&mut s, src);
    let tv = PyramidVars::constants(&mut s, tgt);
    let h = dynamics::hierarchy_vars(&mut s, model.encoder, model.dynamics, &sv, &tv)?;
    let out = h.predictions[&level];
    let (n, d) = s.value(out).shape();
    if cfg.source_location >= n {
        return Err(Error::Shape(format!("source location {} outside {n} tokens", cfg.source_location)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scores = vec![0.0; n];
    let mut zero_tangent = true;
    for _ in 0..cfg.k {
        let r = Mat::randn(1, d, cfg.tangent_scale, &mut rng);
        let seeds: Vec<_> = levels
            .iter()
            .map(|l| {
                let mut m = Mat::zeros(n, d);
                m.row_mut(cfg.source_location).copy_from_slice(r.data());
                (sv.level(*l), m)
            })
            .collect();
        let t = s.graph.jvp(&seeds).get_or_zero(&s.graph, out);
        if t.max_abs() > 0.0 {
            zero_tangent = false;
        }
        for (j, acc) in scores.iter_mut().enumerate() {
            *acc += cosine(r.data(), t.row(j));
        }
    }
    let grid = (n as f64).sqrt().round() as usize;
    let scores = Mat::from_vec(grid, grid, scores.into_iter().map(|v| v / cfg.k as f64).collect());
    Ok(PerturbationHeatmap { scores, source_location: cfg.source_location, k: cfg.k, level, zero_tangent })
}

/// Perturbation heatmap for a frame pair as fed to the encoder.
pub fn perturb_forward(x_src: &Image, x_tgt: &Image, cfg: &PerturbationConfig, model: &Model) -> Result<PerturbationHeatmap> {
    resolve_levels(model, cfg)?;
    let (src, tgt) = encode_pair(model, x_src, x_tgt)?;
    perturb_features(&src, &tgt, cfg, model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackConfig {
    /// `source_location` is overwritten at every step.
    pub perturbation: PerturbationConfig,
    pub candidates: usize,
    /// Compare against the feature at the latest tracked location rather
    /// than the initial one.
    pub reanchor: bool,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self { perturbation: PerturbationConfig::default(), candidates: 5, reanchor: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    /// One grid index per frame, starting with the initial location.
    pub locations: Vec<usize>,
    /// Per step: (heatmap score, feature similarity) of the chosen location.
    pub scores: Vec<(f64, f64)>,
}

/// Candidates are the top heatmap locations; the one whose teacher
/// top-level feature is most similar to the reference wins. Ties fall to the
/// higher heatmap score, then the lower index.
pub fn select_candidate(heatmap: &PerturbationHeatmap, reference: &[f64], features: &Mat, candidates: usize) -> (usize, f64, f64) {
    let ranked = heatmap.ranked();
    let mut best: Option<(usize, f64, f64)> = None;
    for &c in ranked.iter().take(candidates.max(1)) {
        let sim = cosine(reference, features.row(c));
        let score = heatmap.score(c);
        let better = match best {
            None => true,
            Some((bi, bs, bsim)) => sim > bsim || (sim == bsim && (score > bs || (score == bs && c < bi))),
        };
        if better {
            best = Some((c, score, sim));
        }
    }
    best.expect("at least one candidate")
}

/// Follows one token through a sequence of frames.
pub fn track(frames: &[Image], init_location: usize, cfg: &TrackConfig, model: &Model) -> Result<Track> {
    if frames.len() < 2 {
        return Err(Error::Data(format!("tracking needs at least 2 frames, got {}", frames.len())));
    }
    let mut pcfg = cfg.perturbation.clone();
    pcfg.source_location = init_location;
    resolve_levels(model, &pcfg)?;
    let top = model.encoder.top_level;

    let mut student = Vec::with_capacity(frames.len());
    let mut teacher = Vec::with_capacity(frames.len());
    for f in frames {
        student.push(encoder::encode(f, model.student, model.encoder)?);
        teacher.push(encoder::encode(f, model.teacher, model.encoder)?);
    }
    let initial_ref = teacher[0].levels[&top].row(init_location).to_vec();

    let mut locations = vec![init_location];
    let mut scores = Vec::with_capacity(frames.len() - 1);
    let mut loc = init_location;
    for t in 0..frames.len() - 1 {
        pcfg.source_location = loc;
        let heat = perturb_features(&student[t], &teacher[t + 1], &pcfg, model)?;
        let reference = if cfg.reanchor { teacher[t].levels[&top].row(loc).to_vec() } else { initial_ref.clone() };
        let (next, score, sim) = select_candidate(&heat, &reference, &teacher[t + 1].levels[&top], cfg.candidates);
        loc = next;
        locations.push(loc);
        scores.push((score, sim));
    }
    Ok(Track { locations, scores })
}

/// Monotone colormap from score in [-1, 1] to RGB.
pub fn heat_color(score: f64) -> [f64; 3] {
    let t = ((score + 1.0) / 2.0).clamp(0.0, 1.0);
    [(3.0 * t).clamp(0.0, 1.0), (3.0 * t - 1.0).clamp(0.0, 1.0), (3.0 * t - 2.0).clamp(0.0, 1.0)]
}

pub const OVERLAY_ALPHA: f64 = 0.6;
const MARKER: [f64; 3] = [0.0, 1.0, 0.0];

/// Bilinearly upsampled heatmap blended onto `frame` (values in [0, 1]),
/// with the source patch outlined.
pub fn overlay(heatmap: &PerturbationHeatmap, frame: &Image) -> Result<Image> {
    let g = heatmap.grid();
    let (w, h) = (frame.width(), frame.height());
    if g == 0 || w % g != 0 || h % g != 0 {
        return Err(Error::Shape(format!("{g}x{g} heatmap does not tile a {w}x{h} frame")));
    }
    let (pw, ph) = (w / g, h / g);
    let at = |r: usize, c: usize| heatmap.scores.get(r.min(g - 1), c.min(g - 1));
    let mut out = Image::new(w, h);
    for y in 0..h {
        let gy = ((y as f64 + 0.5) / ph as f64 - 0.5).clamp(0.0, (g - 1) as f64);
        let (y0, fy) = (gy.floor() as usize, gy.fract());
        for x in 0..w {
            let gx = ((x as f64 + 0.5) / pw as f64 - 0.5).clamp(0.0, (g - 1) as f64);
            let (x0, fx) = (gx.floor() as usize, gx.fract());
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            let heat = heat_color(top * (1.0 - fy) + bottom * fy);
            let base = frame.pixel(x, y);
            let mut px = [0.0; 3];
            for c in 0..3 {
                px[c] = (1.0 - OVERLAY_ALPHA) * base[c].clamp(0.0, 1.0) + OVERLAY_ALPHA * heat[c];
            }
            out.set_pixel(x, y, px);
        }
    }
    let (sr, sc) = (heatmap.source_location / g, heatmap.source_location % g);
    for i in 0..pw {
        out.set_pixel(sc * pw + i, sr * ph, MARKER);
        out.set_pixel(sc * pw + i, sr * ph + ph - 1, MARKER);
    }
    for j in 0..ph {
        out.set_pixel(sc * pw, sr * ph + j, MARKER);
        out.set_pixel(sc * pw + pw - 1, sr * ph + j, MARKER);
    }
    Ok(out)
}

/// Writes the overlay as an 8-bit RGB PNG.
pub fn render_heatmap(heatmap: &PerturbationHeatmap, frame: &Image, path: &Path) -> Result<()> {
    overlay(heatmap, frame)?.save_png(path)
}

/// Hand-built predictors with known Jacobians.
pub mod oracles {
    use super::*;

    fn zero(store: &mut ParamStore, name: &str) {
        if let Some(m) = store.get_mut(name) {
            m.data_mut().fill(0.0);
        }
    }

    fn set(store: &mut ParamStore, name: &str, value: Mat) -> Result<()> {
        match store.get(name) {
            Some(old) if old.shape() == value.shape() => {
                store.insert(name, value);
                Ok(())
            }
            Some(old) => Err(Error::ParamMismatch { name: name.into(), detail: format!("shape {:?} vs {:?}", value.shape(), old.shape()) }),
            None => Err(Error::ParamMismatch { name: name.into(), detail: "missing".into() }),
        }
    }

    fn identity_block(store: &mut ParamStore, prefix: &str) {
        for part in ["attn.proj", "mlp.fc2"] {
            zero(store, &format!("{prefix}.{part}.weight"));
            zero(store, &format!("{prefix}.{part}.bias"));
        }
    }

    /// Forces a gate to a constant by zeroing its last layer and moving the
    /// bias far past saturation.
    fn force_gate(store: &mut ParamStore, prefix: &str, open: bool, gate_bias: f64) {
        zero(store, &format!("{prefix}.gate.fc2.weight"));
        if let Some(b) = store.get_mut(&format!("{prefix}.gate.fc2.bias")) {
            let v = if open { 1000.0 } else { -1000.0 } - gate_bias;
            b.data_mut().fill(v);
        }
    }

    /// Backward networks pass `z` through unchanged.
    pub fn identity_backward(store: &mut ParamStore, enc: &EncoderConfig, cfg: &DynamicsConfig) {
        for l in LevelPlan::new(enc, &cfg.toggles).backward {
            for b in 0..cfg.backward_blocks {
                identity_block(store, &format!("backward.l{l}.blocks.{b}"));
            }
        }
    }

    fn predictor_common(store: &mut ParamStore, enc: &EncoderConfig, cfg: &DynamicsConfig, l: usize) -> Result<String> {
        let p = format!("forward.l{l}");
        let d = enc.embed_dim;
        set(store, &format!("{p}.in_proj.weight"), Mat::identity(d))?;
        set(store, &format!("{p}.out.weight"), Mat::identity(d))?;
        for name in ["in_proj.bias", "out.bias", "pos_embed", "motion_proj.weight", "motion_proj.bias", "motion_type"] {
            zero(store, &format!("{p}.{name}"));
        }
        for b in 0..cfg.forward_blocks {
            let bp = format!("{p}.blocks.{b}");
            identity_block(store, &bp);
            force_gate(store, &bp, true, cfg.gate_bias);
        }
        Ok(p)
    }

    /// Every predictor copies its input tokens; backward networks are
    /// identities. Needs `gating` off or leaves the gates fully open.
    pub fn identity_predictor(store: &mut ParamStore, enc: &EncoderConfig, cfg: &DynamicsConfig) -> Result<()> {
        identity_backward(store, enc, cfg);
        for l in LevelPlan::new(enc, &cfg.toggles).predicted {
            predictor_common(store, enc, cfg, l)?;
        }
        Ok(())
    }

    /// Amplitude of the one-hot positional codes.
    pub const POS_AMPLITUDE: f64 = 100.0;
    /// Query gain that saturates the attention softmax.
    pub const QUERY_GAIN: f64 = 1000.0;

    /// Predictors whose last block routes source token `i` to output token
    /// `perm[i]` through one-hot attention, with its gate closed. Requires
    /// gating, at least two forward blocks, and `tokens ≤ head dim`.
    pub fn shift_predictor(store: &mut ParamStore, enc: &EncoderConfig, cfg: &DynamicsConfig, perm: &[usize]) -> Result<()> {
        let n = enc.num_tokens();
        let d = enc.embed_dim;
        let dh = d / enc.heads;
        let mut issues = Vec::new();
        if !cfg.toggles.gating {
            issues.push("shift oracle needs gating".to_string());
        }
        if cfg.forward_blocks < 2 {
            issues.push("shift oracle needs at least 2 forward blocks".into());
        }
        if n > dh {
            issues.push(format!("shift oracle needs tokens ({n}) <= head dim ({dh})"));
        }
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            issues.push(format!("shift oracle needs a permutation of {n} tokens"));
        }
        if !issues.is_empty() {
            return Err(Error::Config(issues));
        }
        let mut inverse = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        identity_backward(store, enc, cfg);
        let base = d - n;
        for l in LevelPlan::new(enc, &cfg.toggles).predicted {
            let p = predictor_common(store, enc, cfg, l)?;
            let mut pos = Mat::zeros(n, d);
            for i in 0..n {
                pos.set(i, base + i, POS_AMPLITUDE);
            }
            set(store, &format!("{p}.pos_embed"), pos)?;

            let last = format!("{p}.blocks.{}", cfg.forward_blocks - 1);
            let mut qkv = Mat::zeros(d, 3 * d);
            for h in 0..enc.heads {
                for j in 0..n {
                    qkv.set(base + j, h * dh + inverse[j], QUERY_GAIN);
                    qkv.set(base + j, d + h * dh + j, 1.0);
                }
            }
            for c in 0..d {
                qkv.set(c, 2 * d + c, 1.0);
            }
            set(store, &format!("{last}.attn.qkv.weight"), qkv)?;
            zero(store, &format!("{last}.attn.qkv.bias"));
            set(store, &format!("{last}.attn.proj.weight"), Mat::identity(d))?;
            force_gate(store, &last, false, cfg.gate_bias);
        }
        Ok(())
    }

    /// Grid permutation moving every token `(dr, dc)` cells, wrapping.
    pub fn grid_shift(grid: usize, dr: isize, dc: isize) -> Vec<usize> {
        let g = grid as isize;
        (0..grid * grid)
            .map(|i| {
                let (r, c) = ((i / grid) as isize, (i % grid) as isize);
                (((r + dr).rem_euclid(g)) * g + (c + dc).rem_euclid(g)) as usize
            })
            .collect()
    }
}
