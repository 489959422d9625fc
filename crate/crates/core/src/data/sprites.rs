//! Synthetic moving-sprites worlds with exact motion ground truth.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Diamond];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
        }
    }

    /// Whether local coordinates `(u, v)` inside a `size × size` cell are covered.
    fn covers(self, u: f64, v: f64, size: f64) -> bool {
        let h = size / 2.0;
        let (dx, dy) = (u - h, v - h);
        match self {
            Shape::Square => true,
            Shape::Circle => dx * dx + dy * dy <= h * h,
            // Apex at the top centre, base along the bottom edge.
            Shape::Triangle => dx.abs() <= v / 2.0,
            Shape::Diamond => dx.abs() + dy.abs() <= h,
        }
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL.into_iter().find(|sh| sh.name() == s).ok_or_else(|| Error::Format(format!("unknown shape `{s}`")))
    }
}

/// Dominant translation direction of a generated video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Right,
    Left,
    Down,
    Up,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Right, Direction::Left, Direction::Down, Direction::Up];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn unit(self) -> [f64; 2] {
        match self {
            Direction::Right => [1.0, 0.0],
            Direction::Left => [-1.0, 0.0],
            Direction::Down => [0.0, 1.0],
            Direction::Up => [0.0, -1.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Right => "right",
            Direction::Left => "left",
            Direction::Down => "down",
            Direction::Up => "up",
        }
    }

    /// Direction of the larger velocity component; `None` when at rest.
    pub fn of(v: [f64; 2]) -> Option<Direction> {
        if v == [0.0, 0.0] {
            return None;
        }
        Some(if v[0].abs() >= v[1].abs() {
            if v[0] > 0.0 {
                Direction::Right
            } else {
                Direction::Left
            }
        } else if v[1] > 0.0 {
            Direction::Down
        } else {
            Direction::Up
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Direction::ALL.into_iter().find(|d| d.name() == s).ok_or_else(|| Error::Format(format!("unknown direction `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sprite {
    pub shape: Shape,
    pub color: [f64; 3],
    /// Top-left corner of the bounding cell, pixels.
    pub pos: [f64; 2],
    /// Pixels per frame.
    pub vel: [f64; 2],
    pub size: f64,
}

impl fmt::Display for Sprite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {} {} {} {} {}",
            self.shape.name(),
            self.pos[0],
            self.pos[1],
            self.vel[0],
            self.vel[1],
            self.size,
            self.color[0],
            self.color[1],
            self.color[2]
        )
    }
}

impl FromStr for Sprite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        if parts.len() != 9 {
            return Err(Error::Format(format!("sprite record needs 9 fields, got {}: `{s}`", parts.len())));
        }
        let num = |i: usize| parts[i].parse::<f64>().map_err(|e| Error::Format(format!("sprite field {i} `{}`: {e}", parts[i])));
        Ok(Sprite {
            shape: parts[0].parse()?,
            pos: [num(1)?, num(2)?],
            vel: [num(3)?, num(4)?],
            size: num(5)?,
            color: [num(6)?, num(7)?, num(8)?],
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Background {
    Uniform([f64; 3]),
    /// Smooth static texture generated from a seed.
    Texture(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpriteWorld {
    pub width: usize,
    pub height: usize,
    pub sprites: Vec<Sprite>,
    pub fps: f64,
    pub background: Background,
}

/// Per-pixel forward displacement, interleaved `(vx, vy)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FlowMap {
    pub fn at(&self, x: usize, y: usize) -> [f32; 2] {
        let i = (y * self.width + x) * 2;
        [self.data[i], self.data[i + 1]]
    }
}

/// Per-pixel sprite id; 0 is background, sprite `k` is `k + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<i32>,
}

impl SegMap {
    pub fn at(&self, x: usize, y: usize) -> i32 {
        self.data[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedFrame {
    pub image: Image,
    pub flow: FlowMap,
    pub seg: SegMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpriteConfig {
    pub canvas: usize,
    pub min_sprites: usize,
    pub max_sprites: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub min_speed: usize,
    pub max_speed: usize,
    /// Allow fractional speeds in `[min_speed, max_speed]`.
    pub fractional_velocity: bool,
    pub textured_background: bool,
    pub fps: f64,
}

impl Default for SpriteConfig {
    fn default() -> Self {
        Self {
            canvas: 96,
            min_sprites: 2,
            max_sprites: 4,
            min_size: 12,
            max_size: 24,
            min_speed: 1,
            max_speed: 3,
            fractional_velocity: false,
            textured_background: true,
            fps: 8.0,
        }
    }
}

impl SpriteConfig {
    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.canvas < 8 {
            out.push(format!("sprites.canvas must be at least 8, got {}", self.canvas));
        }
        if self.min_sprites == 0 || self.min_sprites > self.max_sprites {
            out.push("sprites.min_sprites must satisfy 1 <= min_sprites <= max_sprites".into());
        }
        if self.min_size == 0 || self.min_size > self.max_size || self.max_size >= self.canvas {
            out.push("sprites sizes must satisfy 1 <= min_size <= max_size < canvas".into());
        }
        if self.min_speed > self.max_speed {
            out.push("sprites.min_speed must not exceed sprites.max_speed".into());
        }
        if !(self.fps > 0.0) {
            out.push("sprites.fps must be positive".into());
        }
        out
    }
}

/// Colours are multiples of 1/255 so rendered frames survive 8-bit storage exactly.
const PALETTE: [[u8; 3]; 6] = [[230, 51, 51], [51, 191, 64], [51, 89, 230], [242, 217, 38], [217, 77, 217], [38, 217, 217]];

fn rgb8(c: [u8; 3]) -> [f64; 3] {
    c.map(|v| v as f64 / 255.0)
}

impl SpriteWorld {
    /// Random world whose sprites all translate in one direction.
    pub fn random<R: Rng + ?Sized>(cfg: &SpriteConfig, rng: &mut R) -> (SpriteWorld, Direction) {
        let dir = Direction::ALL[rng.gen_range(0..4)];
        let n = rng.gen_range(cfg.min_sprites..=cfg.max_sprites);
        let sprites = (0..n)
            .map(|_| {
                let speed = if cfg.fractional_velocity {
                    rng.gen_range(cfg.min_speed as f64..=cfg.max_speed as f64)
                } else {
                    rng.gen_range(cfg.min_speed..=cfg.max_speed) as f64
                };
                let u = dir.unit();
                Sprite {
                    shape: Shape::ALL[rng.gen_range(0..4)],
                    color: rgb8(PALETTE[rng.gen_range(0..PALETTE.len())]),
                    pos: [rng.gen_range(0..cfg.canvas) as f64, rng.gen_range(0..cfg.canvas) as f64],
                    vel: [u[0] * speed, u[1] * speed],
                    size: rng.gen_range(cfg.min_size..=cfg.max_size) as f64,
                }
            })
            .collect();
        let background = if cfg.textured_background { Background::Texture(rng.gen()) } else { Background::Uniform(rgb8([128, 128, 128])) };
        (SpriteWorld { width: cfg.canvas, height: cfg.canvas, sprites, fps: cfg.fps, background }, dir)
    }

    /// Index of the topmost sprite covering pixel `(x, y)`.
    fn sprite_at(&self, x: usize, y: usize) -> Option<usize> {
        let (w, h) = (self.width as f64, self.height as f64);
        self.sprites.iter().enumerate().rev().find_map(|(k, s)| {
            let u = (x as f64 + 0.5 - s.pos[0]).rem_euclid(w);
            let v = (y as f64 + 0.5 - s.pos[1]).rem_euclid(h);
            (u < s.size && v < s.size && s.shape.covers(u, v, s.size)).then_some(k)
        })
    }

    pub fn background_image(&self) -> Image {
        match &self.background {
            Background::Uniform(c) => Image::filled(self.width, self.height, *c),
            Background::Texture(seed) => texture(self.width, self.height, *seed),
        }
    }

    pub fn render(&self) -> RenderedFrame {
        let mut image = self.background_image();
        let mut flow = FlowMap { width: self.width, height: self.height, data: vec![0.0; self.width * self.height * 2] };
        let mut seg = SegMap { width: self.width, height: self.height, data: vec![0; self.width * self.height] };
        for y in 0..self.height {
            for x in 0..self.width {
                if let Some(k) = self.sprite_at(x, y) {
                    let s = &self.sprites[k];
                    image.set_pixel(x, y, s.color);
                    let i = y * self.width + x;
                    flow.data[2 * i] = s.vel[0] as f32;
                    flow.data[2 * i + 1] = s.vel[1] as f32;
                    seg.data[i] = k as i32 + 1;
                }
            }
        }
        RenderedFrame { image, flow, seg }
    }

    /// Positions advanced by one frame with wrap-around.
    pub fn advanced(&self) -> SpriteWorld {
        let mut next = self.clone();
        for s in &mut next.sprites {
            s.pos[0] = (s.pos[0] + s.vel[0]).rem_euclid(self.width as f64);
            s.pos[1] = (s.pos[1] + s.vel[1]).rem_euclid(self.height as f64);
        }
        next
    }
}

/// Renders the current state and advances the world by one frame.
pub fn synth_step(world: &SpriteWorld) -> (SpriteWorld, RenderedFrame) {
    (world.advanced(), world.render())
}

/// Smooth colour field: a coarse random lattice, bilinearly interpolated
/// and periodic so the background tiles with wrap-around.
fn texture(width: usize, height: usize, seed: u64) -> Image {
    const CELLS: usize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lattice: Vec<[f64; 3]> = (0..CELLS * CELLS).map(|_| [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)]).collect();
    let mut img = Image::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let fx = x as f64 / width as f64 * CELLS as f64;
            let fy = y as f64 / height as f64 * CELLS as f64;
            let (x0, y0) = (fx.floor() as usize % CELLS, fy.floor() as usize % CELLS);
            let (x1, y1) = ((x0 + 1) % CELLS, (y0 + 1) % CELLS);
            let (ax, ay) = (fx.fract(), fy.fract());
            let mut px = [0.0; 3];
            for c in 0..3 {
                let top = lattice[y0 * CELLS + x0][c] * (1.0 - ax) + lattice[y0 * CELLS + x1][c] * ax;
                let bot = lattice[y1 * CELLS + x0][c] * (1.0 - ax) + lattice[y1 * CELLS + x1][c] * ax;
                px[c] = ((top * (1.0 - ay) + bot * ay) * 255.0).round() / 255.0;
            }
            img.set_pixel(x, y, px);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(sprites: Vec<Sprite>) -> SpriteWorld {
        SpriteWorld { width: 64, height: 64, sprites, fps: 30.0, background: Background::Texture(3) }
    }

    fn sprite(pos: [f64; 2], vel: [f64; 2]) -> Sprite {
        Sprite { shape: Shape::Circle, color: [1.0, 0.0, 0.0], pos, vel, size: 9.0 }
    }

    #[test]
    fn positions_advance_and_wrap() {
        let (next, _) = synth_step(&world(vec![sprite([10.0, 10.0], [2.0, 0.0]), sprite([63.0, 5.0], [2.0, 0.0])]));
        assert_eq!(next.sprites[0].pos, [12.0, 10.0]);
        assert_eq!(next.sprites[1].pos, [1.0, 5.0]);
    }

    #[test]
    fn static_world_repeats_with_zero_flow() {
        let w = world(vec![sprite([10.0, 10.0], [0.0, 0.0])]);
        let (w1, f0) = synth_step(&w);
        let (_, f1) = synth_step(&w1);
        assert_eq!(f0.image, f1.image);
        assert!(f0.flow.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn warping_by_flow_reproduces_next_frame() {
        let w = world(vec![sprite([10.0, 20.0], [3.0, -2.0]), Sprite { shape: Shape::Triangle, size: 14.0, ..sprite([50.0, 58.0], [-4.0, 1.0]) }]);
        let (w1, f0) = synth_step(&w);
        let f1 = w1.render();
        let mut checked = 0;
        for y in 0..64 {
            for x in 0..64 {
                let [vx, vy] = f0.flow.at(x, y);
                let tx = (x as i64 + vx as i64).rem_euclid(64) as usize;
                let ty = (y as i64 + vy as i64).rem_euclid(64) as usize;
                // Occluded: a different sprite covers the destination in either frame.
                if f1.seg.at(tx, ty) != f0.seg.at(x, y) {
                    continue;
                }
                assert_eq!(f1.image.pixel(tx, ty), f0.image.pixel(x, y), "({x}, {y})");
                checked += 1;
            }
        }
        assert!(checked > 64 * 60);
    }

    #[test]
    fn segmentation_ids_start_at_one() {
        let f = world(vec![sprite([0.0, 0.0], [0.0, 0.0])]).render();
        assert_eq!(f.seg.at(4, 4), 1);
        assert_eq!(f.seg.at(40, 40), 0);
    }

    #[test]
    fn sprite_record_round_trip() {
        let s = Sprite { shape: Shape::Diamond, color: [0.1, 0.2, 0.3], pos: [1.5, 2.0], vel: [-1.0, 0.25], size: 7.0 };
        assert_eq!(s.to_string().parse::<Sprite>().unwrap(), s);
    }

    #[test]
    fn random_world_is_directional() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let (w, d) = SpriteWorld::random(&SpriteConfig::default(), &mut rng);
            assert!(w.sprites.iter().all(|s| Direction::of(s.vel) == Some(d)));
        }
    }
}
