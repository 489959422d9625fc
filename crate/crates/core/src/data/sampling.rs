//! Frame-pair sampling and the crop policy for the dense and invariance
//! pathways.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::Video;
use super::sprites::{Direction, Sprite};
use crate::error::{Error, Result};
use crate::raster::{Image, PixelBox};

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingConfig {
    /// Seconds between source and target frame.
    pub dt_range: (f64, f64),
    /// Pairs drawn per video visit.
    pub repeats: usize,
    pub output_resolution: usize,
    pub local_resolution: usize,
    pub num_global: usize,
    pub num_local: usize,
    /// Area fractions of the full frame.
    pub dense_area: (f64, f64),
    pub inv_area: (f64, f64),
    /// Area fractions of the small initial crop.
    pub global_area: (f64, f64),
    pub local_area: (f64, f64),
    pub aspect: (f64, f64),
    pub dense_flip: bool,
    pub dense_color_jitter: bool,
    pub inv_flip: bool,
    pub inv_color_jitter: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            dt_range: (0.5, 1.0),
            repeats: 5,
            output_resolution: 224,
            local_resolution: 96,
            num_global: 2,
            num_local: 8,
            dense_area: (0.2, 0.4),
            inv_area: (0.05, 0.2),
            global_area: (0.4, 1.0),
            local_area: (0.3, 0.8),
            aspect: (3.0 / 4.0, 4.0 / 3.0),
            dense_flip: false,
            dense_color_jitter: false,
            inv_flip: true,
            inv_color_jitter: true,
        }
    }
}

impl SamplingConfig {
    pub fn toy() -> Self {
        Self { output_resolution: 64, local_resolution: 32, ..Self::default() }
    }

    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.dt_range.0 > 0.0 && self.dt_range.0 <= self.dt_range.1) {
            out.push(format!("data.dt_min/data.dt_max must satisfy 0 < min <= max, got {:?}", self.dt_range));
        }
        if self.repeats == 0 {
            out.push("data.repeats must be at least 1".into());
        }
        if self.output_resolution == 0 || self.local_resolution == 0 {
            out.push("data resolutions must be positive".into());
        }
        if self.num_global == 0 {
            out.push("data.num_global must be at least 1".into());
        }
        for (k, (lo, hi)) in [
            ("dense_area", self.dense_area),
            ("inv_area", self.inv_area),
            ("global_area", self.global_area),
            ("local_area", self.local_area),
        ] {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                out.push(format!("data.{k} must satisfy 0 < min <= max <= 1, got ({lo}, {hi})"));
            }
        }
        if !(self.aspect.0 > 0.0 && self.aspect.0 <= self.aspect.1) {
            out.push("data aspect range must satisfy 0 < min <= max".into());
        }
        out
    }
}

/// Crop rectangle as fractions of the frame size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl NormBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_pixels(&self, width: usize, height: usize) -> PixelBox {
        PixelBox { x: self.x * width as f64, y: self.y * height as f64, w: self.w * width as f64, h: self.h * height as f64 }
    }

    pub fn full() -> Self {
        Self { x: 0.0, y: 0.0, w: 1.0, h: 1.0 }
    }

    /// `inner` expressed relative to this box, mapped back to frame coordinates.
    pub fn compose(&self, inner: &NormBox) -> NormBox {
        NormBox { x: self.x + inner.x * self.w, y: self.y + inner.y * self.h, w: inner.w * self.w, h: inner.h * self.h }
    }
}

/// Ground truth carried along with synthetic pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMeta {
    pub video_id: String,
    pub src_frame: usize,
    pub tgt_frame: usize,
    pub src_sprites: Vec<Sprite>,
    pub tgt_sprites: Vec<Sprite>,
    pub direction: Option<Direction>,
}

/// A source/target pair ready for the encoder. All images are
/// channel-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub x_src: Image,
    pub x_tgt: Image,
    pub inv_src_global: Vec<Image>,
    pub inv_tgt_global: Vec<Image>,
    pub inv_src_local: Vec<Image>,
    pub inv_tgt_local: Vec<Image>,
    pub dt: f64,
    pub crop_box: NormBox,
    pub inv_box: NormBox,
    pub meta: Option<PairMeta>,
}

impl FramePair {
    /// Whole frames resized to `size`, without invariance crops.
    pub fn dense_only(src: &Image, tgt: &Image, size: usize, dt: f64) -> FramePair {
        FramePair {
            x_src: src.resize(size, size).normalized(),
            x_tgt: tgt.resize(size, size).normalized(),
            inv_src_global: vec![],
            inv_tgt_global: vec![],
            inv_src_local: vec![],
            inv_tgt_local: vec![],
            dt,
            crop_box: NormBox::full(),
            inv_box: NormBox::full(),
            meta: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameIndices {
    pub src: usize,
    pub tgt: usize,
}

impl FrameIndices {
    pub fn gap(&self) -> usize {
        self.tgt - self.src
    }
}

/// Frame gap for a time offset at a given frame rate.
pub fn frame_gap(dt: f64, fps: f64) -> usize {
    (dt * fps).round() as usize
}

/// One pair `dt ∈ dt_range` apart with a uniformly drawn anchor.
pub fn sample_frame_pair<R: Rng + ?Sized>(num_frames: usize, fps: f64, cfg: &SamplingConfig, rng: &mut R) -> Result<(FrameIndices, f64)> {
    let max_gap = frame_gap(cfg.dt_range.1, fps);
    if num_frames <= max_gap {
        return Err(Error::Data(format!(
            "video of {num_frames} frames at {fps} fps is shorter than the maximum offset of {}s ({max_gap} frames)",
            cfg.dt_range.1
        )));
    }
    let dt = if cfg.dt_range.0 == cfg.dt_range.1 { cfg.dt_range.0 } else { rng.gen_range(cfg.dt_range.0..=cfg.dt_range.1) };
    let gap = frame_gap(dt, fps);
    let src = rng.gen_range(0..num_frames - gap);
    Ok((FrameIndices { src, tgt: src + gap }, gap as f64 / fps))
}

/// The `repeats` pairs drawn on one visit to a video.
pub fn sample_visit<R: Rng + ?Sized>(video: &Video, cfg: &SamplingConfig, rng: &mut R) -> Result<Vec<(FrameIndices, f64)>> {
    (0..cfg.repeats).map(|_| sample_frame_pair(video.len(), video.fps, cfg, rng)).collect()
}

/// Random box with area fraction in `area` and log-uniform aspect ratio.
pub fn sample_box<R: Rng + ?Sized>(width: f64, height: f64, area: (f64, f64), aspect: (f64, f64), rng: &mut R) -> NormBox {
    let frac = if area.0 == area.1 { area.0 } else { rng.gen_range(area.0..=area.1) };
    let target = frac * width * height;
    let (lr0, lr1) = (aspect.0.ln(), aspect.1.ln());
    for _ in 0..10 {
        let ratio = if lr0 == lr1 { aspect.0 } else { rng.gen_range(lr0..=lr1).exp() };
        let (w, h) = ((target * ratio).sqrt(), (target / ratio).sqrt());
        if w <= width && h <= height {
            let x = rng.gen_range(0.0..=width - w);
            let y = rng.gen_range(0.0..=height - h);
            return NormBox { x: x / width, y: y / height, w: w / width, h: h / height };
        }
    }
    // Keep the area, give up on the aspect range.
    let w = target.sqrt().min(width);
    let h = (target / w).min(height);
    let x = rng.gen_range(0.0..=width - w);
    let y = rng.gen_range(0.0..=height - h);
    NormBox { x: x / width, y: y / height, w: w / width, h: h / height }
}

/// Brightness, contrast and saturation jitter, each factor in `[0.6, 1.4]`.
pub fn color_jitter<R: Rng + ?Sized>(img: &Image, rng: &mut R) -> Image {
    let b = rng.gen_range(0.6..=1.4);
    let c = rng.gen_range(0.6..=1.4);
    let s = rng.gen_range(0.6..=1.4);
    let gray = |p: [f64; 3]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    let n = (img.width() * img.height()) as f64;
    let mean = img.data().chunks_exact(3).map(|p| gray([p[0], p[1], p[2]])).sum::<f64>() * b / n;
    img.map_pixels(|p| {
        let p = p.map(|v| (v * b).clamp(0.0, 1.0));
        let p = p.map(|v| (mean + (v - mean) * c).clamp(0.0, 1.0));
        let g = gray(p);
        p.map(|v| (g + (v - g) * s).clamp(0.0, 1.0))
    })
}

fn augment<R: Rng + ?Sized>(img: Image, flip: bool, jitter: bool, rng: &mut R) -> Image {
    let img = if flip && rng.gen_bool(0.5) { img.flip_horizontal() } else { img };
    let img = if jitter && rng.gen_bool(0.8) { color_jitter(&img, rng) } else { img };
    img.normalized()
}

/// Dense crop at one location for both frames, plus global and local
/// invariance crops drawn independently per frame inside one shared small
/// initial box.
pub fn crop_pair<R: Rng + ?Sized>(src: &Image, tgt: &Image, dt: f64, cfg: &SamplingConfig, rng: &mut R) -> Result<FramePair> {
    if (src.width(), src.height()) != (tgt.width(), tgt.height()) {
        return Err(Error::Shape(format!("frames differ in size: {}x{} vs {}x{}", src.width(), src.height(), tgt.width(), tgt.height())));
    }
    let (w, h) = (src.width() as f64, src.height() as f64);
    let smallest_side = (cfg.inv_area.0 * cfg.local_area.0 * w * h * cfg.aspect.0.min(1.0 / cfg.aspect.1)).sqrt();
    if smallest_side < 1.0 {
        return Err(Error::Data(format!("{w}x{h} frame is smaller than the minimum crop")));
    }

    let crop_box = sample_box(w, h, cfg.dense_area, cfg.aspect, rng);
    let px = crop_box.to_pixels(src.width(), src.height());
    let out = cfg.output_resolution;
    let mut x_src = src.crop_resize(px, out, out);
    let mut x_tgt = tgt.crop_resize(px, out, out);
    if cfg.dense_flip && rng.gen_bool(0.5) {
        x_src = x_src.flip_horizontal();
        x_tgt = x_tgt.flip_horizontal();
    }
    if cfg.dense_color_jitter {
        x_src = color_jitter(&x_src, rng);
        x_tgt = color_jitter(&x_tgt, rng);
    }

    let inv_box = sample_box(w, h, cfg.inv_area, cfg.aspect, rng);
    let (iw, ih) = (inv_box.w * w, inv_box.h * h);
    let views = |frame: &Image, n: usize, area: (f64, f64), size: usize, rng: &mut R| -> Vec<Image> {
        (0..n)
            .map(|_| {
                let b = inv_box.compose(&sample_box(iw, ih, area, cfg.aspect, rng));
                let img = frame.crop_resize(b.to_pixels(frame.width(), frame.height()), size, size);
                augment(img, cfg.inv_flip, cfg.inv_color_jitter, rng)
            })
            .collect()
    };
    let inv_src_global = views(src, cfg.num_global, cfg.global_area, out, rng);
    let inv_src_local = views(src, cfg.num_local, cfg.local_area, cfg.local_resolution, rng);
    let inv_tgt_global = views(tgt, cfg.num_global, cfg.global_area, out, rng);
    let inv_tgt_local = views(tgt, cfg.num_local, cfg.local_area, cfg.local_resolution, rng);

    Ok(FramePair {
        x_src: x_src.normalized(),
        x_tgt: x_tgt.normalized(),
        inv_src_global,
        inv_tgt_global,
        inv_src_local,
        inv_tgt_local,
        dt,
        crop_box,
        inv_box,
        meta: None,
    })
}

/// Samples one pair from a video and crops it, attaching ground truth when
/// the video carries sprite states.
pub fn sample_pair<R: Rng + ?Sized>(video: &Video, cfg: &SamplingConfig, rng: &mut R) -> Result<FramePair> {
    let (idx, dt) = sample_frame_pair(video.len(), video.fps, cfg, rng)?;
    pair_at(video, idx, dt, cfg, rng)
}

pub fn pair_at<R: Rng + ?Sized>(video: &Video, idx: FrameIndices, dt: f64, cfg: &SamplingConfig, rng: &mut R) -> Result<FramePair> {
    let mut pair = crop_pair(&video.frames[idx.src], &video.frames[idx.tgt], dt, cfg, rng)?;
    pair.meta = video.states.as_ref().map(|s| PairMeta {
        video_id: video.id.clone(),
        src_frame: idx.src,
        tgt_frame: idx.tgt,
        src_sprites: s[idx.src].clone(),
        tgt_sprites: s[idx.tgt].clone(),
        direction: video.direction(),
    });
    Ok(pair)
}

/// Independent RNG stream for one loader worker in one epoch.
pub fn worker_rng(seed: u64, worker: u32, epoch: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((worker as u64) << 32) | epoch as u64);
    rng
}

/// Every pair of one epoch in order: videos shuffled, `repeats` pairs per
/// video visit.
pub fn epoch_pairs(videos: &[Video], cfg: &SamplingConfig, seed: u64, epoch: u32) -> Result<Vec<FramePair>> {
    let mut rng = worker_rng(seed, 0, epoch);
    let mut order: Vec<usize> = (0..videos.len()).collect();
    order.shuffle(&mut rng);
    let mut out = Vec::with_capacity(videos.len() * cfg.repeats);
    for i in order {
        for (idx, dt) in sample_visit(&videos[i], cfg, &mut rng)? {
            out.push(pair_at(&videos[i], idx, dt, cfg, &mut rng)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_range_at_thirty_fps() {
        let cfg = SamplingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..2000 {
            let (idx, dt) = sample_frame_pair(100, 30.0, &cfg, &mut rng).unwrap();
            assert!((15..=30).contains(&idx.gap()), "{}", idx.gap());
            assert!(idx.tgt < 100);
            assert_eq!(dt, idx.gap() as f64 / 30.0);
        }
    }

    #[test]
    fn degenerate_range_gives_fixed_gap() {
        let cfg = SamplingConfig { dt_range: (0.5, 0.5), ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            assert_eq!(sample_frame_pair(40, 30.0, &cfg, &mut rng).unwrap().0.gap(), 15);
        }
    }

    #[test]
    fn short_video_is_rejected() {
        let cfg = SamplingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(sample_frame_pair(30, 30.0, &cfg, &mut rng), Err(Error::Data(_))));
        assert!(sample_frame_pair(31, 30.0, &cfg, &mut rng).is_ok());
    }

    #[test]
    fn dense_crop_of_a_720p_frame() {
        // Area fraction 0.3 of 1280×720 is 276 480 source pixels.
        let cfg = SamplingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = sample_box(1280.0, 720.0, (0.3, 0.3), cfg.aspect, &mut rng).to_pixels(1280, 720);
        assert!((b.w * b.h - 276_480.0).abs() < 1e-6);
    }

    #[test]
    fn same_location_for_identical_frames() {
        let mut img = Image::new(48, 40);
        for y in 0..40 {
            for x in 0..48 {
                img.set_pixel(x, y, [x as f64 / 48.0, y as f64 / 40.0, 0.5]);
            }
        }
        let cfg = SamplingConfig { output_resolution: 16, local_resolution: 8, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = crop_pair(&img, &img, 0.0, &cfg, &mut rng).unwrap();
        assert_eq!(p.x_src, p.x_tgt);
        assert_eq!((p.inv_src_global.len(), p.inv_tgt_local.len()), (2, 8));
        assert_eq!(p.inv_src_local[0].width(), 8);
    }

    #[test]
    fn crop_rejects_mismatched_and_tiny_frames() {
        let cfg = SamplingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(crop_pair(&Image::new(32, 32), &Image::new(32, 31), 0.5, &cfg, &mut rng).is_err());
        assert!(crop_pair(&Image::new(4, 4), &Image::new(4, 4), 0.5, &cfg, &mut rng).is_err());
    }

    #[test]
    fn worker_streams_differ() {
        let a: u64 = worker_rng(9, 0, 0).gen();
        let b: u64 = worker_rng(9, 1, 0).gen();
        let c: u64 = worker_rng(9, 0, 1).gen();
        assert!(a != b && a != c);
        assert_eq!(a, worker_rng(9, 0, 0).gen::<u64>());
    }
}
