//! RGB images as `f64` height × width × 3 arrays.

use std::path::Path;

use crate::error::{Error, Result};

/// Per-channel mean and standard deviation applied by [`Image::normalized`].
pub const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// Crop rectangle in source pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!("{width}x{height}x3 image needs {} values, got {}", width * height * 3, data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::Shape(format!("{width}x{height} RGB8 needs {} bytes, got {}", width * height * 3, bytes.len())));
        }
        Ok(Self { width, height, data: bytes.iter().map(|&b| b as f64 / 255.0).collect() })
    }

    /// Quantizes `[0, 1]` values to bytes.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel-standardized copy for the encoder.
    pub fn normalized(&self) -> Image {
        let mut out = self.clone();
        for px in out.data.chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = (px[c] - PIXEL_MEAN[c]) / PIXEL_STD[c];
            }
        }
        out
    }

    /// Bilinear sample at continuous pixel-center coordinates, clamped at the border.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let xf = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let yf = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = xf.floor() as usize;
        let y0 = yf.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = xf - x0 as f64;
        let ay = yf - y0 as f64;
        let p00 = self.pixel(x0, y0);
        let p10 = self.pixel(x1, y0);
        let p01 = self.pixel(x0, y1);
        let p11 = self.pixel(x1, y1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - ax) + p10[c] * ax;
            let bot = p01[c] * (1.0 - ax) + p11[c] * ax;
            out[c] = top * (1.0 - ay) + bot * ay;
        }
        out
    }

    /// Crops `bx` and resizes it to `out_w × out_h` with bilinear sampling.
    pub fn crop_resize(&self, bx: PixelBox, out_w: usize, out_h: usize) -> Image {
        let mut out = Image::new(out_w, out_h);
        let sx = bx.w / out_w as f64;
        let sy = bx.h / out_h as f64;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let x = bx.x + (ox as f64 + 0.5) * sx;
                let y = bx.y + (oy as f64 + 0.5) * sy;
                out.set_pixel(ox, oy, self.sample(x, y));
            }
        }
        out
    }

    pub fn resize(&self, out_w: usize, out_h: usize) -> Image {
        if out_w == self.width && out_h == self.height {
            return self.clone();
        }
        self.crop_resize(PixelBox { x: 0.0, y: 0.0, w: self.width as f64, h: self.height as f64 }, out_w, out_h)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = Image::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    pub fn map_pixels(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Image {
        let mut out = self.clone();
        for px in out.data.chunks_exact_mut(3) {
            let v = f([px[0], px[1], px[2]]);
            px.copy_from_slice(&v);
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::Shape("image buffer size".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Image(other),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Image::from_rgb8(w as usize, h as usize, img.as_raw())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize_is_exact() {
        let mut img = Image::new(4, 3);
        img.set_pixel(1, 2, [0.2, 0.4, 0.6]);
        let out = img.crop_resize(PixelBox { x: 0.0, y: 0.0, w: 4.0, h: 3.0 }, 4, 3);
        assert_eq!(out, img);
    }

    #[test]
    fn integer_crop_without_scaling_copies_pixels() {
        let mut img = Image::new(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                img.set_pixel(x, y, [x as f64 / 8.0, y as f64 / 8.0, 0.0]);
            }
        }
        let out = img.crop_resize(PixelBox { x: 2.0, y: 3.0, w: 4.0, h: 4.0 }, 4, 4);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(out.pixel(x, y), img.pixel(x + 2, y + 3));
            }
        }
    }

    #[test]
    fn rgb8_round_trip() {
        let bytes: Vec<u8> = (0..48).map(|i| (i * 5) as u8).collect();
        let img = Image::from_rgb8(4, 4, &bytes).unwrap();
        assert_eq!(img.to_rgb8(), bytes);
    }
}
