//! Minimal line plots written as PNG.

use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::Image;

const WIDTH: usize = 640;
const HEIGHT: usize = 360;
const MARGIN: usize = 24;
const COLORS: [[f64; 3]; 4] = [[0.8, 0.1, 0.1], [0.1, 0.3, 0.8], [0.1, 0.6, 0.2], [0.6, 0.3, 0.7]];

fn draw_line(img: &mut Image, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: [f64; 3]) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t);
        if x >= 0.0 && y >= 0.0 && (x as usize) < img.width() && (y as usize) < img.height() {
            img.set_pixel(x as usize, y as usize, color);
        }
    }
}

/// Plots each named series against its index on shared axes. Non-finite
/// values are skipped.
pub fn line_plot(series: &[(&str, &[f64])], path: &Path) -> Result<()> {
    let finite = series.iter().flat_map(|(_, s)| s.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return Err(Error::Data("nothing to plot".into()));
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = series.iter().map(|(_, s)| s.len()).max().unwrap_or(0).max(2);
    let (pw, ph) = ((WIDTH - 2 * MARGIN) as f64, (HEIGHT - 2 * MARGIN) as f64);
    let to_px = |i: usize, v: f64| (MARGIN as f64 + pw * i as f64 / (n - 1) as f64, MARGIN as f64 + ph * (1.0 - (v - lo) / span));

    let mut img = Image::filled(WIDTH, HEIGHT, [1.0; 3]);
    let axis = [0.3; 3];
    let (left, bottom) = (MARGIN as f64, (HEIGHT - MARGIN) as f64);
    draw_line(&mut img, (left, MARGIN as f64), (left, bottom), axis);
    draw_line(&mut img, (left, bottom), ((WIDTH - MARGIN) as f64, bottom), axis);
    for (k, (_, s)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        for i in 1..s.len() {
            if s[i - 1].is_finite() && s[i].is_finite() {
                draw_line(&mut img, to_px(i - 1, s[i - 1]), to_px(i, s[i]), color);
            }
        }
        // Legend swatch in the top-right corner.
        for dy in 0..6 {
            for dx in 0..16 {
                img.set_pixel(WIDTH - MARGIN - 16 + dx, 4 + 10 * k + dy, color);
            }
        }
    }
    img.save_png(path)
}
