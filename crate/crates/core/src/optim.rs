//! AdamW with decoupled weight decay, global-norm clipping, and the
//! step-indexed schedules used during pretraining.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub weight_decay_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_grad: f64,
    pub momentum_teacher: f64,
    pub momentum_teacher_end: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            min_lr: 1e-6,
            warmup_epochs: 10.0,
            epochs: 300,
            weight_decay: 0.04,
            weight_decay_end: 0.4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_grad: 3.0,
            momentum_teacher: 0.996,
            momentum_teacher_end: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr > 0.0) {
            out.push(format!("optim.lr must be positive, got {}", self.lr));
        }
        if !(self.min_lr >= 0.0) {
            out.push(format!("optim.min_lr must be nonnegative, got {}", self.min_lr));
        }
        if !(self.warmup_epochs >= 0.0) {
            out.push("optim.warmup_epochs must be nonnegative".into());
        }
        if self.epochs == 0 {
            out.push("optim.epochs must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay_end >= 0.0) {
            out.push("optim.weight_decay and optim.weight_decay_end must be nonnegative".into());
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                out.push(format!("optim.{k} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.eps > 0.0) {
            out.push("optim.eps must be positive".into());
        }
        if !(self.clip_grad >= 0.0) {
            out.push("optim.clip_grad must be nonnegative (0 disables clipping)".into());
        }
        for (k, v) in [("momentum_teacher", self.momentum_teacher), ("momentum_teacher_end", self.momentum_teacher_end)] {
            if !(0.0..=1.0).contains(&v) {
                out.push(format!("optim.{k} must lie in [0, 1], got {v}"));
            }
        }
        out
    }
}

/// Cosine interpolation from `start` at `i = 0` to `end` at `i = len`.
pub fn cosine(start: f64, end: f64, i: f64, len: f64) -> f64 {
    if len <= 0.0 {
        return end;
    }
    let t = (i / len).clamp(0.0, 1.0);
    start + (end - start) * 0.5 * (1.0 - (PI * t).cos())
}

/// Step counts that turn epoch-denominated settings into per-step values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub steps_per_epoch: u64,
    pub total_steps: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleValues {
    pub lr: f64,
    pub weight_decay: f64,
    pub teacher_momentum: f64,
}

impl Schedule {
    pub fn new(steps_per_epoch: u64, epochs: usize) -> Self {
        let steps_per_epoch = steps_per_epoch.max(1);
        Self { steps_per_epoch, total_steps: steps_per_epoch * epochs as u64 }
    }

    pub fn epoch(&self, step: u64) -> f64 {
        step as f64 / self.steps_per_epoch as f64
    }

    /// Linear warmup to `lr`, then cosine decay to `min_lr`.
    pub fn lr(&self, cfg: &OptimConfig, step: u64) -> f64 {
        let warmup = (cfg.warmup_epochs * self.steps_per_epoch as f64).round().min(self.total_steps as f64);
        let s = step as f64;
        if s < warmup {
            return cfg.lr * s / warmup;
        }
        cosine(cfg.lr, cfg.min_lr, s - warmup, self.total_steps as f64 - warmup)
    }

    pub fn values(&self, cfg: &OptimConfig, step: u64) -> ScheduleValues {
        let total = self.total_steps as f64;
        ScheduleValues {
            lr: self.lr(cfg, step),
            weight_decay: cosine(cfg.weight_decay, cfg.weight_decay_end, step as f64, total),
            teacher_momentum: cosine(cfg.momentum_teacher, cfg.momentum_teacher_end, step as f64, total),
        }
    }
}

pub fn global_norm(grads: &BTreeMap<String, Mat>) -> f64 {
    grads.values().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping. `max_norm = 0` disables clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Mat>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Parameters exempt from weight decay: biases, norms, and other
/// single-row tensors.
pub fn decays(name: &str, value: &Mat) -> bool {
    value.rows() > 1 && !name.ends_with(".bias")
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub m: BTreeMap<String, Mat>,
    pub v: BTreeMap<String, Mat>,
    pub t: u64,
}

impl AdamW {
    /// One update of every parameter named in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Mat>, cfg: &OptimConfig, lr: f64, weight_decay: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::ParamMismatch { name: name.clone(), detail: "gradient for unknown parameter".into() })?;
            if p.shape() != g.shape() {
                return Err(Error::ParamMismatch { name: name.clone(), detail: format!("gradient shape {:?} vs {:?}", g.shape(), p.shape()) });
            }
            let decay = if decays(name, p) { weight_decay } else { 0.0 };
            let m = self.m.entry(name.clone()).or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *pv *= 1.0 - lr * decay;
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                *pv -= lr * (*mv / bc1) / ((*vv / bc2).sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_to_exact_norm() {
        let mut g = BTreeMap::from([("a".to_string(), Mat::from_vec(1, 2, vec![0.0, 6.0]))]);
        let before = clip_global_norm(&mut g, 3.0);
        assert_eq!(before, 6.0);
        assert_eq!(g["a"].data(), &[0.0, 3.0]);
        assert_eq!(global_norm(&g), 3.0);
    }

    #[test]
    fn clip_leaves_small_gradients() {
        let mut g = BTreeMap::from([("a".to_string(), Mat::from_vec(1, 2, vec![1.0, 2.0]))]);
        clip_global_norm(&mut g, 3.0);
        assert_eq!(g["a"].data(), &[1.0, 2.0]);
    }

    #[test]
    fn zero_gradient_moves_only_by_decay() {
        let cfg = OptimConfig::default();
        let mut p = ParamStore::new(true);
        p.insert("w.weight", Mat::from_vec(2, 1, vec![1.0, -2.0]));
        p.insert("w.bias", Mat::from_vec(1, 2, vec![1.0, -2.0]));
        let grads: BTreeMap<String, Mat> = p.iter().map(|(k, v)| (k.clone(), Mat::zeros(v.rows(), v.cols()))).collect();
        let mut opt = AdamW::default();
        opt.step(&mut p, &grads, &cfg, 0.1, 0.5).unwrap();
        assert_eq!(p.expect("w.weight").data(), &[0.95, -1.9]);
        assert_eq!(p.expect("w.bias").data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_adam_step_is_sign_sized() {
        let cfg = OptimConfig::default();
        let mut p = ParamStore::new(true);
        p.insert("b.bias", Mat::from_vec(1, 2, vec![0.0, 0.0]));
        let grads = BTreeMap::from([("b.bias".to_string(), Mat::from_vec(1, 2, vec![0.3, -7.0]))]);
        AdamW::default().step(&mut p, &grads, &cfg, 0.01, 0.0).unwrap();
        let d = p.expect("b.bias").data();
        assert!((d[0] + 0.01).abs() < 1e-9 && (d[1] - 0.01).abs() < 1e-9, "{d:?}");
    }

    #[test]
    fn schedules_hit_endpoints() {
        let cfg = OptimConfig { warmup_epochs: 2.0, epochs: 10, ..Default::default() };
        let s = Schedule::new(5, cfg.epochs);
        assert_eq!(s.lr(&cfg, 0), 0.0);
        assert!((s.lr(&cfg, 5) - cfg.lr / 2.0).abs() < 1e-15);
        assert_eq!(s.lr(&cfg, 10), cfg.lr);
        assert!((s.lr(&cfg, 50) - cfg.min_lr).abs() < 1e-15);
        let v0 = s.values(&cfg, 0);
        assert_eq!((v0.weight_decay, v0.teacher_momentum), (0.04, 0.996));
        let v1 = s.values(&cfg, 50);
        assert!((v1.weight_decay - 0.4).abs() < 1e-15 && (v1.teacher_momentum - 1.0).abs() < 1e-15);
        let mid = s.values(&cfg, 25);
        assert!((mid.weight_decay - 0.22).abs() < 1e-12);
    }
}
