//! Configuration, checkpoints, training runs, probes, and ablations.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod plot;
pub mod probe;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{Preset, RunConfig};

/// Small configurations shared by tests across the crate.
pub mod testing {
    use super::config::RunConfig;
    use crate::encoder::EncoderConfig;

    /// Depth-2, dim-16 model on 16-pixel crops of a 32-pixel sprite canvas.
    pub fn tiny_config() -> RunConfig {
        let mut c = RunConfig::toy();
        c.objective.encoder = EncoderConfig { image_size: 16, patch_size: 4, depth: 2, embed_dim: 16, heads: 2, tap_levels: vec![1], top_level: 2, ..c.objective.encoder };
        let d = &mut c.objective.dynamics;
        d.midway_dim = 8;
        d.midway_heads = 2;
        d.midway_blocks = 1;
        d.num_motion_tokens = 2;
        let inv = &mut c.objective.invariance;
        inv.prototypes = 16;
        inv.head_hidden = 16;
        inv.head_bottleneck = 8;
        c.objective.optim.epochs = 20;
        c.objective.optim.warmup_epochs = 1.0;
        c.sampling.output_resolution = 16;
        c.sampling.local_resolution = 8;
        c.sampling.num_local = 2;
        c.sampling.repeats = 2;
        c.sprites.canvas = 32;
        c.sprites.min_size = 6;
        c.sprites.max_size = 10;
        c.sprites.min_sprites = 1;
        c.sprites.max_sprites = 2;
        c.run.batch_size = 2;
        c.run.num_videos = 4;
        c.run.frames_per_video = 12;
        c.run.workers = 1;
        c
    }
}
