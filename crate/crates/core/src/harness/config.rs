//! Run configuration as flat `key=value` text with dotted namespaces.
//!
//! Parsing starts from a preset and overrides keys; unknown or repeated
//! keys and every validation problem are reported together.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::{SamplingConfig, SpriteConfig};
use crate::dynamics::{DynamicsConfig, Toggles};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::objective::{InvarianceConfig, ObjectiveConfig};
use crate::optim::OptimConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunSettings {
    pub seed: u64,
    pub batch_size: usize,
    pub num_videos: usize,
    pub frames_per_video: usize,
    /// Stops training early; 0 runs the whole schedule.
    pub max_steps: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Rayon threads for per-pair evaluation; 0 uses the rayon default.
    pub workers: usize,
    pub device: String,
    pub probe_ridge: f64,
    pub probe_holdout: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub objective: ObjectiveConfig,
    pub sampling: SamplingConfig,
    pub sprites: SpriteConfig,
    pub run: RunSettings,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::config(format!("unknown preset {other:?} (expected toy or paper)"))),
        }
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Toy => Self::toy(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Full-scale settings: ViT-S/16 at 224 pixels, batch 200, 300 epochs.
    pub fn paper() -> Self {
        Self {
            objective: ObjectiveConfig {
                encoder: EncoderConfig::paper(),
                dynamics: DynamicsConfig::default(),
                invariance: InvarianceConfig::default(),
                optim: OptimConfig::default(),
                sum_levels: false,
                norm_eps: 1e-6,
            },
            sampling: SamplingConfig::default(),
            sprites: SpriteConfig::default(),
            run: RunSettings {
                seed: 0,
                batch_size: 200,
                num_videos: 1000,
                frames_per_video: 24,
                max_steps: 0,
                checkpoint_every: 1000,
                workers: 0,
                device: "cpu".into(),
                probe_ridge: 1e-2,
                probe_holdout: 0.3,
            },
        }
    }

    /// Desk-scale settings for the sprite corpus.
    pub fn toy() -> Self {
        let paper = Self::paper();
        Self {
            objective: ObjectiveConfig {
                encoder: EncoderConfig { drop_path: 0.0, ..EncoderConfig::toy() },
                dynamics: DynamicsConfig { midway_dim: 32, midway_blocks: 2, forward_blocks: 2, ..DynamicsConfig::default() },
                invariance: InvarianceConfig { prototypes: 256, head_hidden: 256, head_bottleneck: 64, teacher_temp_warmup_epochs: 5.0, ..InvarianceConfig::default() },
                optim: OptimConfig { lr: 1e-3, warmup_epochs: 2.0, epochs: 25, ..OptimConfig::default() },
                ..paper.objective
            },
            sampling: SamplingConfig { num_local: 4, ..SamplingConfig::toy() },
            sprites: SpriteConfig::default(),
            run: RunSettings { batch_size: 8, num_videos: 32, frames_per_video: 24, checkpoint_every: 100, ..paper.run },
        }
    }

    pub fn with_toggles(&self, t: Toggles) -> Self {
        let mut c = self.clone();
        c.objective.dynamics.toggles = t;
        c
    }

    pub fn issues(&self) -> Vec<String> {
        let mut out = self.objective.issues();
        out.extend(self.sampling.issues());
        out.extend(self.sprites.issues());
        let r = &self.run;
        if r.batch_size == 0 {
            out.push("run.batch_size must be at least 1".into());
        }
        if r.num_videos == 0 {
            out.push("run.num_videos must be at least 1".into());
        }
        let max_gap = (self.sampling.dt_range.1 * self.sprites.fps).round() as usize;
        if r.frames_per_video <= max_gap {
            out.push(format!("run.frames_per_video {} must exceed the largest frame gap {max_gap}", r.frames_per_video));
        }
        if r.device != "cpu" {
            out.push(format!("run.device {:?} is not available (only cpu)", r.device));
        }
        if !(r.probe_ridge > 0.0) {
            out.push("run.probe_ridge must be positive".into());
        }
        if !(r.probe_holdout > 0.0 && r.probe_holdout < 1.0) {
            out.push("run.probe_holdout must lie in (0, 1)".into());
        }
        if self.sampling.output_resolution != self.objective.encoder.image_size {
            out.push(format!(
                "data.output_resolution {} must equal encoder.image_size {}",
                self.sampling.output_resolution, self.objective.encoder.image_size
            ));
        }
        if self.sampling.local_resolution % self.objective.encoder.patch_size != 0 {
            out.push(format!(
                "data.local_resolution {} must be divisible by encoder.patch_size {}",
                self.sampling.local_resolution, self.objective.encoder.patch_size
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    /// Pairs per epoch divided by the batch size, rounded down.
    pub fn steps_per_epoch(&self) -> u64 {
        ((self.run.num_videos * self.sampling.repeats) / self.run.batch_size).max(1) as u64
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key}={}", get(self, key).expect("listed key"));
        }
        out
    }

    pub fn get(&self, key: &str) -> Option<String> {
        get(self, key)
    }

    /// Overrides keys from `text` on top of `self`, then validates.
    pub fn parse_over(&self, text: &str) -> Result<Self> {
        let mut cfg = self.clone();
        let mut errors = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errors.push(format!("line {}: expected key=value, got {line:?}", i + 1));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                errors.push(format!("line {}: duplicate key {k}", i + 1));
                continue;
            }
            match set(&mut cfg, k, v) {
                None => errors.push(format!("line {}: unknown key {k}", i + 1)),
                Some(Err(e)) => errors.push(format!("line {}: {k}: {e}", i + 1)),
                Some(Ok(())) => {}
            }
        }
        if errors.is_empty() {
            errors = cfg.issues();
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match set(self, key, value) {
            None => Err(Error::config(format!("unknown key {key}"))),
            Some(Err(e)) => Err(Error::config(format!("{key}: {e}"))),
            Some(Ok(())) => Ok(()),
        }
    }

    pub fn load(path: &Path, base: &RunConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        base.parse_over(&text)
    }

    /// Hex SHA-256 of the serialized configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

trait Field: Sized {
    fn to_text(&self) -> String;
    fn from_text(s: &str) -> std::result::Result<Self, String>;
}

macro_rules! parse_field {
    ($($t:ty),*) => {$(
        impl Field for $t {
            fn to_text(&self) -> String {
                self.to_string()
            }
            fn from_text(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("cannot parse {s:?}: {e}"))
            }
        }
    )*};
}
parse_field!(f64, usize, u64, bool, String);

impl Field for Vec<usize> {
    fn to_text(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
    fn from_text(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            return Ok(vec![]);
        }
        s.split(',').map(|p| p.trim().parse().map_err(|e| format!("cannot parse {p:?}: {e}"))).collect()
    }
}

macro_rules! fields {
    ($($key:literal => $root:ident $(. $path:tt)+;)*) => {
        /// Every configuration key in serialization order.
        pub const KEYS: &[&str] = &[$($key),*];

        fn get(cfg: &RunConfig, key: &str) -> Option<String> {
            match key {
                $($key => Some(Field::to_text(&cfg.$root$(.$path)+)),)*
                _ => None,
            }
        }

        fn set(cfg: &mut RunConfig, key: &str, value: &str) -> Option<std::result::Result<(), String>> {
            match key {
                $($key => Some(Field::from_text(value).map(|v| cfg.$root$(.$path)+ = v)),)*
                _ => None,
            }
        }
    };
}

fields! {
    "encoder.image_size" => objective.encoder.image_size;
    "encoder.patch_size" => objective.encoder.patch_size;
    "encoder.depth" => objective.encoder.depth;
    "encoder.embed_dim" => objective.encoder.embed_dim;
    "encoder.heads" => objective.encoder.heads;
    "encoder.tap_levels" => objective.encoder.tap_levels;
    "encoder.top_level" => objective.encoder.top_level;
    "encoder.use_cls_token" => objective.encoder.use_cls_token;
    "encoder.mlp_ratio" => objective.encoder.mlp_ratio;
    "encoder.drop_path" => objective.encoder.drop_path;
    "dynamics.midway_dim" => objective.dynamics.midway_dim;
    "dynamics.midway_heads" => objective.dynamics.midway_heads;
    "dynamics.midway_blocks" => objective.dynamics.midway_blocks;
    "dynamics.backward_blocks" => objective.dynamics.backward_blocks;
    "dynamics.forward_blocks" => objective.dynamics.forward_blocks;
    "dynamics.num_motion_tokens" => objective.dynamics.num_motion_tokens;
    "dynamics.gate_bias" => objective.dynamics.gate_bias;
    "dynamics.backward_kv_pos" => objective.dynamics.backward_kv_pos;
    "dynamics.mlp_ratio" => objective.dynamics.mlp_ratio;
    "toggles.latent_dynamics" => objective.dynamics.toggles.latent_dynamics;
    "toggles.backward" => objective.dynamics.toggles.backward;
    "toggles.multi_level" => objective.dynamics.toggles.multi_level;
    "toggles.refinement" => objective.dynamics.toggles.refinement;
    "toggles.gating" => objective.dynamics.toggles.gating;
    "objective.sum_levels" => objective.sum_levels;
    "objective.norm_eps" => objective.norm_eps;
    "invariance.prototypes" => objective.invariance.prototypes;
    "invariance.head_hidden" => objective.invariance.head_hidden;
    "invariance.head_bottleneck" => objective.invariance.head_bottleneck;
    "invariance.student_temp" => objective.invariance.student_temp;
    "invariance.teacher_temp" => objective.invariance.teacher_temp;
    "invariance.teacher_temp_end" => objective.invariance.teacher_temp_end;
    "invariance.teacher_temp_warmup_epochs" => objective.invariance.teacher_temp_warmup_epochs;
    "invariance.center_momentum" => objective.invariance.center_momentum;
    "invariance.weight" => objective.invariance.weight;
    "optim.lr" => objective.optim.lr;
    "optim.min_lr" => objective.optim.min_lr;
    "optim.warmup_epochs" => objective.optim.warmup_epochs;
    "optim.epochs" => objective.optim.epochs;
    "optim.weight_decay" => objective.optim.weight_decay;
    "optim.weight_decay_end" => objective.optim.weight_decay_end;
    "optim.beta1" => objective.optim.beta1;
    "optim.beta2" => objective.optim.beta2;
    "optim.eps" => objective.optim.eps;
    "optim.clip_grad" => objective.optim.clip_grad;
    "optim.momentum_teacher" => objective.optim.momentum_teacher;
    "optim.momentum_teacher_end" => objective.optim.momentum_teacher_end;
    "data.dt_min" => sampling.dt_range.0;
    "data.dt_max" => sampling.dt_range.1;
    "data.repeats" => sampling.repeats;
    "data.output_resolution" => sampling.output_resolution;
    "data.local_resolution" => sampling.local_resolution;
    "data.num_global" => sampling.num_global;
    "data.num_local" => sampling.num_local;
    "data.dense_area_min" => sampling.dense_area.0;
    "data.dense_area_max" => sampling.dense_area.1;
    "data.inv_area_min" => sampling.inv_area.0;
    "data.inv_area_max" => sampling.inv_area.1;
    "data.global_area_min" => sampling.global_area.0;
    "data.global_area_max" => sampling.global_area.1;
    "data.local_area_min" => sampling.local_area.0;
    "data.local_area_max" => sampling.local_area.1;
    "data.aspect_min" => sampling.aspect.0;
    "data.aspect_max" => sampling.aspect.1;
    "data.dense_flip" => sampling.dense_flip;
    "data.dense_color_jitter" => sampling.dense_color_jitter;
    "data.inv_flip" => sampling.inv_flip;
    "data.inv_color_jitter" => sampling.inv_color_jitter;
    "sprites.canvas" => sprites.canvas;
    "sprites.min_sprites" => sprites.min_sprites;
    "sprites.max_sprites" => sprites.max_sprites;
    "sprites.min_size" => sprites.min_size;
    "sprites.max_size" => sprites.max_size;
    "sprites.min_speed" => sprites.min_speed;
    "sprites.max_speed" => sprites.max_speed;
    "sprites.fractional_velocity" => sprites.fractional_velocity;
    "sprites.textured_background" => sprites.textured_background;
    "sprites.fps" => sprites.fps;
    "run.seed" => run.seed;
    "run.batch_size" => run.batch_size;
    "run.num_videos" => run.num_videos;
    "run.frames_per_video" => run.frames_per_video;
    "run.max_steps" => run.max_steps;
    "run.checkpoint_every" => run.checkpoint_every;
    "run.workers" => run.workers;
    "run.device" => run.device;
    "run.probe_ridge" => run.probe_ridge;
    "run.probe_holdout" => run.probe_holdout;
}
