//! Patch-tokenizing ViT encoder exporting dense features at tap levels.
//!
//! Levels are 1-based block indices: level `l` is the output of block `l`.
//! Every exported level passes through the shared final norm
//! `encoder.norm`, and there is no spatial downsampling between levels, so
//! every level has the same token count.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{self, Init, Residual};
use crate::params::{ParamStore, Session};
use crate::raster::Image;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub tap_levels: Vec<usize>,
    pub top_level: usize,
    pub use_cls_token: bool,
    pub mlp_ratio: usize,
    pub drop_path: f64,
}

impl EncoderConfig {
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            depth: 12,
            embed_dim: 64,
            heads: 4,
            tap_levels: vec![3, 6, 9],
            top_level: 12,
            use_cls_token: true,
            mlp_ratio: 4,
            drop_path: 0.1,
        }
    }

    /// ViT-S/16 at 224 pixels.
    pub fn paper() -> Self {
        Self { image_size: 224, patch_size: 16, embed_dim: 384, heads: 6, ..Self::toy() }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Tap levels followed by the top level, ascending.
    pub fn exported_levels(&self) -> Vec<usize> {
        let mut v = self.tap_levels.clone();
        v.push(self.top_level);
        v
    }

    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            out.push(format!("encoder.image_size {} must be a positive multiple of encoder.patch_size {}", self.image_size, self.patch_size));
        }
        if self.tap_levels.is_empty() {
            out.push("encoder.tap_levels must not be empty".into());
        }
        if self.tap_levels.windows(2).any(|w| w[0] >= w[1]) {
            out.push(format!("encoder.tap_levels {:?} must be strictly increasing", self.tap_levels));
        }
        if self.tap_levels.first() == Some(&0) {
            out.push("encoder.tap_levels are 1-based block indices".into());
        }
        if let Some(&max) = self.tap_levels.last() {
            if max >= self.top_level {
                out.push(format!("encoder.tap_levels max {max} must be below encoder.top_level {}", self.top_level));
            }
        }
        if self.top_level > self.depth {
            out.push(format!("encoder.top_level {} exceeds encoder.depth {}", self.top_level, self.depth));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            out.push(format!("encoder.embed_dim {} must be divisible by encoder.heads {}", self.embed_dim, self.heads));
        }
        if self.mlp_ratio == 0 {
            out.push("encoder.mlp_ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            out.push(format!("encoder.drop_path {} outside [0, 1)", self.drop_path));
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

    /// Linearly increasing stochastic-depth rates, one per block.
    pub fn drop_path_rates(&self) -> Vec<f64> {
        if self.depth <= 1 {
            return vec![0.0; self.depth];
        }
        (0..self.depth).map(|i| self.drop_path * i as f64 / (self.depth - 1) as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: BTreeMap<usize, Mat>,
    pub cls: BTreeMap<usize, Mat>,
}

impl FeaturePyramid {
    pub fn level(&self, l: usize) -> Option<&Mat> {
        self.levels.get(&l)
    }

    pub fn token_count(&self) -> usize {
        self.levels.values().next().map(Mat::rows).unwrap_or(0)
    }
}

/// Graph nodes for one encoded image.
#[derive(Clone, Debug)]
pub struct PyramidVars {
    pub levels: BTreeMap<usize, Var>,
    pub cls: Option<Var>,
}

impl PyramidVars {
    pub fn level(&self, l: usize) -> Var {
        *self.levels.get(&l).unwrap_or_else(|| panic!("level {l} not exported"))
    }

    /// Imports plain values as constant leaves.
    pub fn constants(s: &mut Session, pyramid: &FeaturePyramid) -> Self {
        let levels = pyramid.levels.iter().map(|(l, m)| (*l, s.constant(m.clone()))).collect();
        let cls = pyramid.cls.values().next().map(|c| s.constant(c.clone()));
        Self { levels, cls }
    }

    pub fn values(&self, s: &Session) -> FeaturePyramid {
        let levels = self.levels.iter().map(|(l, v)| (*l, s.value(*v).clone())).collect();
        let top = self.levels.keys().max().copied().unwrap_or(0);
        let cls = self.cls.iter().map(|c| (top, s.value(*c).clone())).collect();
        FeaturePyramid { levels, cls }
    }
}

pub fn init_params<R: Rng>(cfg: &EncoderConfig, rng: &mut R, store: &mut ParamStore) {
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    let mut init = Init::new(store, rng);
    init.linear("encoder.patch_embed", p * p * 3, d);
    init.tensor("encoder.pos_embed".into(), cfg.num_tokens(), d);
    if cfg.use_cls_token {
        init.tensor("encoder.cls_token".into(), 1, d);
    }
    for b in 0..cfg.depth {
        init.block(&format!("encoder.blocks.{b}"), d, cfg.mlp_ratio, false);
    }
    init.layer_norm("encoder.norm", d);
}

pub fn param_count(cfg: &EncoderConfig) -> usize {
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    (p * p * 3 * d + d)
        + cfg.num_tokens() * d
        + if cfg.use_cls_token { d } else { 0 }
        + cfg.depth * nn::block_param_count(d, cfg.mlp_ratio, false)
        + 2 * d
}

fn check_image(image: &Image, patch: usize) -> Result<()> {
    if image.width() != image.height() {
        return Err(Error::Shape(format!("encoder input must be square, got {}x{}", image.width(), image.height())));
    }
    if patch == 0 || image.width() % patch != 0 {
        return Err(Error::Shape(format!("image size {} not divisible by patch size {patch}", image.width())));
    }
    if !image.is_finite() {
        return Err(Error::NonFinite("encoder input".into()));
    }
    Ok(())
}

/// Flattens non-overlapping patches in raster order, each as `p·p·3` values.
pub fn patchify(image: &Image, patch: usize) -> Result<Mat> {
    check_image(image, patch)?;
    let g = image.width() / patch;
    let mut out = Mat::zeros(g * g, patch * patch * 3);
    for gy in 0..g {
        for gx in 0..g {
            let row = out.row_mut(gy * g + gx);
            let mut k = 0;
            for py in 0..patch {
                for px in 0..patch {
                    let rgb = image.pixel(gx * patch + px, gy * patch + py);
                    row[k..k + 3].copy_from_slice(&rgb);
                    k += 3;
                }
            }
        }
    }
    Ok(out)
}

/// Bilinear resampling matrix `(dst², src²)` between square token grids.
pub fn grid_resample_matrix(src: usize, dst: usize) -> Mat {
    let mut m = Mat::zeros(dst * dst, src * src);
    let coord = |i: usize| -> (usize, usize, f64) {
        let f = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, f - i0 as f64)
    };
    for y in 0..dst {
        let (y0, y1, ay) = coord(y);
        for x in 0..dst {
            let (x0, x1, ax) = coord(x);
            let r = y * dst + x;
            for (yy, wy) in [(y0, 1.0 - ay), (y1, ay)] {
                for (xx, wx) in [(x0, 1.0 - ax), (x1, ax)] {
                    let c = yy * src + xx;
                    m.set(r, c, m.get(r, c) + wy * wx);
                }
            }
        }
    }
    m
}

/// Builds the encoder graph for any square image whose side is a multiple
/// of the patch size. `residuals` selects stochastic-depth branches per
/// block; pass an empty slice for the deterministic network.
pub fn encode_vars(s: &mut Session, image: &Image, cfg: &EncoderConfig, residuals: &[Residual]) -> Result<PyramidVars> {
    let patches = patchify(image, cfg.patch_size)?;
    let grid = image.width() / cfg.patch_size;
    let n = grid * grid;

    let px = s.constant(patches);
    let mut x = nn::linear(s, px, "encoder.patch_embed");
    let pos_full = s.p("encoder.pos_embed");
    let pos = if grid == cfg.grid() {
        pos_full
    } else {
        let r = s.constant(grid_resample_matrix(cfg.grid(), grid));
        s.graph.matmul(r, pos_full)
    };
    x = s.graph.add(x, pos);
    let offset = if cfg.use_cls_token {
        let cls = s.p("encoder.cls_token");
        x = s.graph.concat_rows(&[cls, x]);
        1
    } else {
        0
    };

    let mut levels = BTreeMap::new();
    let mut cls = None;
    for b in 0..cfg.top_level {
        let residual = residuals.get(b).copied().unwrap_or(Residual::FULL);
        x = nn::block(s, x, &format!("encoder.blocks.{b}"), cfg.heads, None, residual);
        let level = b + 1;
        let is_top = level == cfg.top_level;
        if is_top || cfg.tap_levels.contains(&level) {
            let normed = nn::layer_norm(s, x, "encoder.norm");
            let tokens = if offset == 1 { s.graph.slice_rows(normed, 1, n) } else { normed };
            levels.insert(level, tokens);
            if is_top && offset == 1 {
                cls = Some(s.graph.slice_rows(normed, 0, 1));
            }
        }
    }
    Ok(PyramidVars { levels, cls })
}

/// Deterministic forward pass for an `image_size × image_size` input.
pub fn encode(image: &Image, params: &ParamStore, cfg: &EncoderConfig) -> Result<FeaturePyramid> {
    check_image(image, cfg.patch_size)?;
    if image.width() != cfg.image_size {
        return Err(Error::Shape(format!("encoder expects {0}x{0} input, got {1}x{1}", cfg.image_size, image.width())));
    }
    let mut s = Session::new(params);
    let vars = encode_vars(&mut s, image, cfg, &[])?;
    let out = vars.values(&s);
    if out.levels.values().any(|m| !m.is_finite()) {
        return Err(Error::NonFinite("encoder output".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig { image_size: 16, patch_size: 4, depth: 4, embed_dim: 16, heads: 2, tap_levels: vec![1, 2, 3], top_level: 4, drop_path: 0.0, ..EncoderConfig::toy() }
    }

    fn params(cfg: &EncoderConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(true);
        init_params(cfg, &mut rng, &mut store);
        store
    }

    #[test]
    fn toy_exports_four_grids_of_sixty_four_tokens() {
        let cfg = EncoderConfig::toy();
        let p = params(&cfg, 0);
        let img = Image::filled(64, 64, [0.3, 0.5, 0.7]).normalized();
        let out = encode(&img, &p, &cfg).unwrap();
        assert_eq!(out.levels.keys().copied().collect::<Vec<_>>(), vec![3, 6, 9, 12]);
        for m in out.levels.values() {
            assert_eq!(m.shape(), (64, 64));
        }
        assert_eq!(out.cls.keys().copied().collect::<Vec<_>>(), vec![12]);
        assert_eq!(p.num_scalars(), param_count(&cfg));
    }

    #[test]
    fn deterministic_on_zero_image() {
        let cfg = small();
        let p = params(&cfg, 1);
        let img = Image::new(16, 16);
        assert_eq!(encode(&img, &p, &cfg).unwrap(), encode(&img, &p, &cfg).unwrap());
    }

    #[test]
    fn one_patch_change_reaches_that_token() {
        let cfg = small();
        let p = params(&cfg, 2);
        let a = Image::new(16, 16);
        let mut b = a.clone();
        for y in 4..8 {
            for x in 8..12 {
                b.set_pixel(x, y, [1.0, -1.0, 0.5]);
            }
        }
        let fa = encode(&a, &p, &cfg).unwrap();
        let fb = encode(&b, &p, &cfg).unwrap();
        let token = 4 + 2;
        for l in [1, 2, 3] {
            assert_ne!(fa.levels[&l].row(token), fb.levels[&l].row(token), "level {l}");
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let cfg = small();
        let p = params(&cfg, 3);
        assert!(matches!(encode(&Image::new(16, 12), &p, &cfg), Err(Error::Shape(_))));
        assert!(matches!(encode(&Image::new(18, 18), &p, &cfg), Err(Error::Shape(_))));
        assert!(matches!(encode(&Image::new(8, 8), &p, &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn config_invariants() {
        assert!(EncoderConfig::toy().validate().is_ok());
        assert!(EncoderConfig::paper().validate().is_ok());
        let bad = EncoderConfig { tap_levels: vec![6, 3], top_level: 13, embed_dim: 30, ..EncoderConfig::toy() };
        match bad.validate() {
            Err(Error::Config(list)) => assert_eq!(list.len(), 3, "{list:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn resample_rows_sum_to_one() {
        let m = grid_resample_matrix(8, 4);
        for r in 0..m.rows() {
            assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(grid_resample_matrix(4, 4), Mat::identity(16));
    }

    #[test]
    fn smaller_crops_encode() {
        let cfg = small();
        let p = params(&cfg, 4);
        let mut s = Session::new(&p);
        let out = encode_vars(&mut s, &Image::new(8, 8), &cfg, &[]).unwrap();
        assert_eq!(s.value(out.level(4)).rows(), 4);
    }
}
