//! Linear probes on frozen features, fit by closed-form ridge regression on
//! one-hot targets.

use std::fmt;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::Model;
use crate::data::sampling::frame_gap;
use crate::data::{Direction, FramePair, SpriteWorld, Video};
use crate::dynamics;
use crate::encoder::{self, PyramidVars};
use crate::error::{Error, Result};
use crate::params::Session;

use super::config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeTask {
    Direction,
    SpriteClass,
}

impl ProbeTask {
    pub fn name(self) -> &'static str {
        match self {
            ProbeTask::Direction => "motion-direction",
            ProbeTask::SpriteClass => "sprite-class",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureSource {
    MotionLatents,
    EncoderTokens,
}

impl FeatureSource {
    pub fn name(self) -> &'static str {
        match self {
            FeatureSource::MotionLatents => "motion-latents",
            FeatureSource::EncoderTokens => "encoder-tokens",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub task: ProbeTask,
    pub accuracy: f64,
    pub chance: f64,
    pub source: FeatureSource,
    pub train_samples: usize,
    pub test_samples: usize,
}

impl fmt::Display for ProbeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "task={} source={} accuracy={:.4} chance={:.4} train={} test={}",
            self.task.name(),
            self.source.name(),
            self.accuracy,
            self.chance,
            self.train_samples,
            self.test_samples
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
    /// Source video, used to keep splits disjoint.
    pub group: usize,
}

/// Ridge classifier on standardized features with an unpenalized bias.
#[derive(Clone, Debug)]
pub struct RidgeProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: DMatrix<f64>,
}

impl RidgeProbe {
    pub fn fit(samples: &[Sample], classes: usize, lambda: f64) -> Result<Self> {
        let n = samples.len();
        if n == 0 {
            return Err(Error::Data("probe has no training samples".into()));
        }
        let f = samples[0].features.len();
        if samples.iter().any(|s| s.features.len() != f || s.label >= classes) {
            return Err(Error::Data("probe samples disagree in width or carry out-of-range labels".into()));
        }
        let mean: Vec<f64> = (0..f).map(|j| samples.iter().map(|s| s.features[j]).sum::<f64>() / n as f64).collect();
        let scale: Vec<f64> = (0..f)
            .map(|j| {
                let var = samples.iter().map(|s| (s.features[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let x = DMatrix::from_fn(n, f, |i, j| (samples[i].features[j] - mean[j]) / scale[j]);
        let y = DMatrix::from_fn(n, classes, |i, c| if samples[i].label == c { 1.0 } else { 0.0 });
        // Centered features make the bias the per-class label mean.
        let bias = DMatrix::from_fn(1, classes, |_, c| y.column(c).mean());
        let yc = DMatrix::from_fn(n, classes, |i, c| y[(i, c)] - bias[(0, c)]);
        let gram = x.transpose() * &x + DMatrix::identity(f, f) * lambda;
        let w = gram.cholesky().ok_or_else(|| Error::Degenerate("ridge system is not positive definite".into()))?.solve(&(x.transpose() * yc));
        let mut weights = DMatrix::zeros(f + 1, classes);
        weights.rows_mut(0, f).copy_from(&w);
        weights.row_mut(f).copy_from(&bias);
        Ok(Self { mean, scale, weights })
    }

    pub fn predict(&self, features: &[f64]) -> usize {
        let f = self.mean.len();
        let mut best = (0, f64::NEG_INFINITY);
        for c in 0..self.weights.ncols() {
            let mut v = self.weights[(f, c)];
            for j in 0..f {
                v += (features[j] - self.mean[j]) / self.scale[j] * self.weights[(j, c)];
            }
            if v > best.1 {
                best = (c, v);
            }
        }
        best.0
    }

    pub fn accuracy(&self, samples: &[Sample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        samples.iter().filter(|s| self.predict(&s.features) == s.label).count() as f64 / samples.len() as f64
    }
}

/// Splits by group: the last `holdout` fraction of groups is held out.
pub fn split_by_group(samples: Vec<Sample>, holdout: f64) -> (Vec<Sample>, Vec<Sample>) {
    let groups = samples.iter().map(|s| s.group).max().map_or(0, |g| g + 1);
    let cut = groups - ((groups as f64 * holdout).round() as usize).clamp(1, groups.max(1));
    samples.into_iter().partition(|s| s.group < cut)
}

/// Mean over tokens of the most refined motion latents for a pair.
pub fn motion_features(model: &Model, pair: &FramePair) -> Result<Vec<f64>> {
    let src = encoder::encode(&pair.x_src, model.student, model.encoder)?;
    let tgt = encoder::encode(&pair.x_tgt, model.teacher, model.encoder)?;
    let mut s = Session::new(model.student);
    let sv = PyramidVars::constants(&mut s, &src);
    let tv = PyramidVars::constants(&mut s, &tgt);
    let h = dynamics::hierarchy_vars(&mut s, model.encoder, model.dynamics, &sv, &tv)?;
    let (_, m) = h.motion.iter().next().ok_or_else(|| Error::config("the model has no motion latents (latent dynamics off)"))?;
    Ok(s.value(*m).mean_rows().into_vec())
}

fn states_of(video: &Video) -> Result<&Vec<Vec<crate::data::Sprite>>> {
    video.states.as_ref().ok_or_else(|| Error::Data(format!("video {} has no ground-truth sprite states", video.id)))
}

/// One sample per frame pair `(i, i + gap)` with `i` stepping by `stride`,
/// using the midpoint of the configured time offsets.
pub fn direction_samples(model: &Model, videos: &[Video], cfg: &RunConfig, stride: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (g, v) in videos.iter().enumerate() {
        states_of(v)?;
        let label = v.direction().ok_or_else(|| Error::Data(format!("video {} has no dominant direction", v.id)))?.id();
        let dt = 0.5 * (cfg.sampling.dt_range.0 + cfg.sampling.dt_range.1);
        let gap = frame_gap(dt, v.fps).max(1);
        for i in (0..v.len().saturating_sub(gap)).step_by(stride.max(1)) {
            let pair = FramePair::dense_only(&v.frames[i], &v.frames[i + gap], model.encoder.image_size, gap as f64 / v.fps);
            out.push(Sample { features: motion_features(model, &pair)?, label, group: g });
        }
    }
    Ok(out)
}

/// Mean top-level student token over the patches whose centers fall on each
/// visible sprite, labelled with the sprite's shape.
pub fn sprite_samples(model: &Model, videos: &[Video], stride: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    let grid = model.encoder.grid();
    for (g, v) in videos.iter().enumerate() {
        let states = states_of(v)?;
        let segs = v.segs.as_ref().ok_or_else(|| Error::Data(format!("video {} has no segmentation maps", v.id)))?;
        for i in (0..v.len()).step_by(stride.max(1)) {
            let frame = &v.frames[i];
            let img = frame.resize(model.encoder.image_size, model.encoder.image_size).normalized();
            let pyr = encoder::encode(&img, model.student, model.encoder)?;
            let tokens = &pyr.levels[&model.encoder.top_level];
            let seg = &segs[i];
            for (k, sprite) in states[i].iter().enumerate() {
                let mut acc = vec![0.0; tokens.cols()];
                let mut count = 0;
                for t in 0..grid * grid {
                    let x = ((t % grid) as f64 + 0.5) / grid as f64 * seg.width as f64;
                    let y = ((t / grid) as f64 + 0.5) / grid as f64 * seg.height as f64;
                    if seg.at(x as usize, y as usize) == k as i32 + 1 {
                        acc.iter_mut().zip(tokens.row(t)).for_each(|(a, b)| *a += b);
                        count += 1;
                    }
                }
                if count > 0 {
                    acc.iter_mut().for_each(|a| *a /= count as f64);
                    out.push(Sample { features: acc, label: sprite.shape.id(), group: g });
                }
            }
        }
    }
    Ok(out)
}

pub fn run_probe(task: ProbeTask, samples: Vec<Sample>, cfg: &RunConfig) -> Result<ProbeReport> {
    let (train, test) = split_by_group(samples, cfg.run.probe_holdout);
    if test.is_empty() {
        return Err(Error::Data("probe held-out split is empty".into()));
    }
    let probe = RidgeProbe::fit(&train, 4, cfg.run.probe_ridge)?;
    let source = match task {
        ProbeTask::Direction => FeatureSource::MotionLatents,
        ProbeTask::SpriteClass => FeatureSource::EncoderTokens,
    };
    Ok(ProbeReport { task, accuracy: probe.accuracy(&test), chance: 0.25, source, train_samples: train.len(), test_samples: test.len() })
}

/// A corpus with directions assigned round-robin, so every block of four
/// consecutive videos covers each direction once.
pub fn balanced_videos(cfg: &RunConfig, count: usize, seed: u64) -> Vec<Video> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    (0..count)
        .map(|i| {
            let (mut world, _) = SpriteWorld::random(&cfg.sprites, &mut rng);
            orient(&mut world, Direction::ALL[i % 4]);
            Video::synthesize(format!("probe_{i:04}"), &world, cfg.run.frames_per_video)
        })
        .collect()
}

fn orient(world: &mut SpriteWorld, dir: Direction) {
    let u = dir.unit();
    for s in &mut world.sprites {
        let speed = s.vel[0].abs().max(s.vel[1].abs());
        s.vel = [u[0] * speed, u[1] * speed];
    }
}
