//! On-disk video datasets.
//!
//! ```text
//! root/
//!   manifest.txt            one line per video: id path frame_count fps
//!   video_0000/
//!     world.txt             width height fps background
//!     states.txt            frame sprite-index sprite-record, one line per sprite per frame
//!     frame_0000.png        8-bit RGB
//!     flow_0000.mwmx        f32, rows = height, cols = 2·width, interleaved (vx, vy)
//!     seg_0000.mwmx         i32, rows = height, cols = width
//! ```
//!
//! A dataset is assembled under `root.partial` and renamed into place only
//! once every file is written, so an interrupted run never leaves a
//! directory that looks complete.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::matrix::{read_matrix, write_matrix, BinMatrix, MatrixData};
use super::sprites::{synth_step, Direction, FlowMap, SegMap, Sprite, SpriteWorld};
use crate::error::{Error, Result};
use crate::raster::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the dataset root.
    pub path: PathBuf,
    pub frame_count: usize,
    pub fps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::from("# id path frame_count fps\n");
        for e in &self.entries {
            let _ = writeln!(out, "{} {} {} {}", e.id, e.path.display(), e.frame_count, e.fps);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("manifest line {}: expected 4 fields, got {}", n + 1, f.len())));
            }
            let bad = |what: &str| Error::Format(format!("manifest line {}: bad {what}", n + 1));
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                path: PathBuf::from(f[1]),
                frame_count: f[2].parse().map_err(|_| bad("frame count"))?,
                fps: f[3].parse().map_err(|_| bad("fps"))?,
            });
        }
        Ok(Self { entries })
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }
}

/// A decoded video held in memory, with ground truth when available.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub fps: f64,
    pub frames: Vec<Image>,
    /// Sprite states per frame (synthetic data only).
    pub states: Option<Vec<Vec<Sprite>>>,
    pub flows: Option<Vec<FlowMap>>,
    pub segs: Option<Vec<SegMap>>,
}

impl Video {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Dominant translation direction from the first frame's sprite states.
    pub fn direction(&self) -> Option<Direction> {
        let sprites = self.states.as_ref()?.first()?;
        let v = sprites.iter().fold([0.0, 0.0], |a, s| [a[0] + s.vel[0], a[1] + s.vel[1]]);
        Direction::of(v)
    }

    /// Renders `num_frames` frames of a synthetic world.
    pub fn synthesize(id: impl Into<String>, world: &SpriteWorld, num_frames: usize) -> Video {
        let mut w = world.clone();
        let (mut frames, mut flows, mut segs, mut states) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..num_frames {
            states.push(w.sprites.clone());
            let (next, f) = synth_step(&w);
            frames.push(f.image);
            flows.push(f.flow);
            segs.push(f.seg);
            w = next;
        }
        Video { id: id.into(), fps: world.fps, frames, states: Some(states), flows: Some(flows), segs: Some(segs) }
    }

    /// Reads a directory of image frames in lexicographic order. Frame
    /// decoding from container formats is left to external tools.
    pub fn from_frame_dir(dir: &Path, fps: f64) -> Result<Video> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|s| s.to_str()), Some("png" | "jpg" | "jpeg")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Data(format!("no frames in {}", dir.display())));
        }
        let frames = paths.iter().map(|p| Image::load(p)).collect::<Result<Vec<_>>>()?;
        let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Video { id, fps, frames, states: None, flows: None, segs: None })
    }
}

fn flow_matrix(f: &FlowMap) -> BinMatrix {
    BinMatrix { rows: f.height, cols: 2 * f.width, data: MatrixData::F32(f.data.clone()) }
}

fn seg_matrix(s: &SegMap) -> BinMatrix {
    BinMatrix { rows: s.height, cols: s.width, data: MatrixData::I32(s.data.clone()) }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_video(dir: &Path, world: &SpriteWorld, video: &Video) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bg = match &world.background {
        super::sprites::Background::Uniform(c) => format!("uniform {} {} {}", c[0], c[1], c[2]),
        super::sprites::Background::Texture(seed) => format!("texture {seed}"),
    };
    write_text(&dir.join("world.txt"), &format!("{} {} {} {bg}\n", world.width, world.height, world.fps))?;
    let mut states = String::from("# frame sprite shape x y vx vy size r g b\n");
    for (t, sprites) in video.states.iter().flatten().enumerate() {
        for (k, s) in sprites.iter().enumerate() {
            let _ = writeln!(states, "{t} {k} {s}");
        }
    }
    write_text(&dir.join("states.txt"), &states)?;
    for t in 0..video.len() {
        video.frames[t].save_png(&dir.join(format!("frame_{t:04}.png")))?;
        if let Some(flows) = &video.flows {
            write_matrix(&dir.join(format!("flow_{t:04}.mwmx")), &flow_matrix(&flows[t]))?;
        }
        if let Some(segs) = &video.segs {
            write_matrix(&dir.join(format!("seg_{t:04}.mwmx")), &seg_matrix(&segs[t]))?;
        }
    }
    Ok(())
}

/// Renders every world for `num_frames` frames and writes the dataset at
/// `root`, which must not already exist.
pub fn write_dataset(worlds: &[SpriteWorld], num_frames: usize, root: &Path) -> Result<Manifest> {
    if root.exists() {
        return Err(Error::Data(format!("{} already exists", root.display())));
    }
    let partial = partial_path(root);
    if partial.exists() {
        fs::remove_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
    }
    let result = (|| {
        fs::create_dir_all(&partial).map_err(|e| Error::io(&partial, e))?;
        let mut entries = Vec::new();
        for (i, world) in worlds.iter().enumerate() {
            let id = format!("video_{i:04}");
            let video = Video::synthesize(&id, world, num_frames);
            write_video(&partial.join(&id), world, &video)?;
            entries.push(ManifestEntry { id: id.clone(), path: PathBuf::from(&id), frame_count: num_frames, fps: world.fps });
        }
        let manifest = Manifest { entries };
        write_text(&partial.join("manifest.txt"), &manifest.to_text())?;
        fs::rename(&partial, root).map_err(|e| Error::io(root, e))?;
        Ok(manifest)
    })();
    if result.is_err() {
        let _ = fs::remove_dir_all(&partial);
    }
    result
}

fn partial_path(root: &Path) -> PathBuf {
    let mut name = root.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".partial");
    root.with_file_name(name)
}

fn parse_states(text: &str, frames: usize) -> Result<Vec<Vec<Sprite>>> {
    let mut out = vec![Vec::new(); frames];
    for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
        let (t, rest) = line.split_once(' ').ok_or_else(|| Error::Format(format!("bad state line `{line}`")))?;
        let (_, record) = rest.split_once(' ').ok_or_else(|| Error::Format(format!("bad state line `{line}`")))?;
        let t: usize = t.parse().map_err(|_| Error::Format(format!("bad frame index in `{line}`")))?;
        out.get_mut(t).ok_or_else(|| Error::Format(format!("frame {t} out of range")))?.push(record.parse()?);
    }
    Ok(out)
}

fn load_flow(path: &Path) -> Result<FlowMap> {
    let m = read_matrix(path)?;
    match m.data {
        MatrixData::F32(data) if m.cols % 2 == 0 => Ok(FlowMap { width: m.cols / 2, height: m.rows, data }),
        _ => Err(Error::Format(format!("{}: expected an f32 flow matrix", path.display()))),
    }
}

fn load_seg(path: &Path) -> Result<SegMap> {
    let m = read_matrix(path)?;
    match m.data {
        MatrixData::I32(data) => Ok(SegMap { width: m.cols, height: m.rows, data }),
        _ => Err(Error::Format(format!("{}: expected an i32 segmentation matrix", path.display()))),
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        if partial_path(root).exists() && !root.exists() {
            return Err(Error::Data(format!("{} is incomplete (only a .partial directory exists)", root.display())));
        }
        Ok(Self { root: root.to_path_buf(), manifest: Manifest::load(root)? })
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    /// Loads frames and whatever ground truth is present.
    pub fn load_video(&self, index: usize) -> Result<Video> {
        let e = self.manifest.entries.get(index).ok_or_else(|| Error::Data(format!("no video {index}")))?;
        let dir = self.root.join(&e.path);
        let frames = (0..e.frame_count).map(|t| Image::load(&dir.join(format!("frame_{t:04}.png")))).collect::<Result<Vec<_>>>()?;
        let states_path = dir.join("states.txt");
        let states = if states_path.exists() {
            let text = fs::read_to_string(&states_path).map_err(|err| Error::io(&states_path, err))?;
            Some(parse_states(&text, e.frame_count)?)
        } else {
            None
        };
        let flows = if dir.join("flow_0000.mwmx").exists() {
            Some((0..e.frame_count).map(|t| load_flow(&dir.join(format!("flow_{t:04}.mwmx")))).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let segs = if dir.join("seg_0000.mwmx").exists() {
            Some((0..e.frame_count).map(|t| load_seg(&dir.join(format!("seg_{t:04}.mwmx")))).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        Ok(Video { id: e.id.clone(), fps: e.fps, frames, states, flows, segs })
    }

    pub fn load_all(&self) -> Result<Vec<Video>> {
        (0..self.len()).map(|i| self.load_video(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sprites::SpriteConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn worlds(n: usize) -> Vec<SpriteWorld> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = SpriteConfig { canvas: 32, min_size: 6, max_size: 10, ..Default::default() };
        (0..n).map(|_| SpriteWorld::random(&cfg, &mut rng).0).collect()
    }

    #[test]
    fn writes_one_directory_per_video() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("ds");
        let m = write_dataset(&worlds(4), 30, &root).unwrap();
        assert_eq!(m.entries.len(), 4);
        for e in &m.entries {
            let n = fs::read_dir(root.join(&e.path)).unwrap().filter(|f| f.as_ref().unwrap().path().extension().unwrap() == "png").count();
            assert_eq!(n, 30);
        }
        assert_eq!(Manifest::load(&root).unwrap(), m);
        assert!(!partial_path(&root).exists());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("ds");
        let ws = worlds(2);
        write_dataset(&ws, 5, &root).unwrap();
        let ds = Dataset::open(&root).unwrap();
        for (i, w) in ws.iter().enumerate() {
            let expected = Video::synthesize(format!("video_{i:04}"), w, 5);
            assert_eq!(ds.load_video(i).unwrap(), expected);
        }
    }

    #[test]
    fn refuses_existing_root() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(write_dataset(&worlds(1), 2, tmp.path()), Err(Error::Data(_))));
    }

    #[test]
    fn manifest_rejects_short_lines() {
        assert!(Manifest::parse("a b 3\n").is_err());
        assert_eq!(Manifest::parse("# c\nv p 3 30\n").unwrap().entries[0].fps, 30.0);
    }
}
