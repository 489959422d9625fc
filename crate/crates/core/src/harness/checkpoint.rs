//! Single-file checkpoints.
//!
//! Layout: `MWCK`, a little-endian u32 format version, a u64 manifest length,
//! the UTF-8 manifest, then every tensor as little-endian f64 in manifest
//! order. Manifest lines:
//!
//! ```text
//! midway-checkpoint v1
//! meta <key> <u64>
//! config <key>=<value>
//! tensor <name> <rows> <cols> f64
//! ```
//!
//! Tensor namespaces: `student.`, `teacher.`, `optim.m.`, `optim.v.`, and
//! `state.center`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::objective::TrainState;
use crate::optim::{AdamW, Schedule};
use crate::params::{ParamStore, ParameterSets};
use crate::tensor::Mat;

use super::config::RunConfig;

pub const MAGIC: &[u8; 4] = b"MWCK";
pub const VERSION: u32 = 1;
pub const FORMAT: &str = "midway-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: TrainState,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let st = &self.state;
        let mut tensors: Vec<(String, &Mat)> = Vec::new();
        tensors.extend(st.params.student.iter().map(|(k, v)| (format!("student.{k}"), v)));
        tensors.extend(st.params.teacher.iter().map(|(k, v)| (format!("teacher.{k}"), v)));
        tensors.extend(st.optim.m.iter().map(|(k, v)| (format!("optim.m.{k}"), v)));
        tensors.extend(st.optim.v.iter().map(|(k, v)| (format!("optim.v.{k}"), v)));
        tensors.push(("state.center".into(), &st.center));

        let mut manifest = format!("{FORMAT}\n");
        for (k, v) in [
            ("step", st.step),
            ("adam_t", st.optim.t),
            ("seed", st.seed),
            ("steps_per_epoch", st.schedule.steps_per_epoch),
            ("total_steps", st.schedule.total_steps),
            ("momentum_bits", st.params.momentum.to_bits()),
        ] {
            let _ = writeln!(manifest, "meta {k} {v}");
        }
        for line in self.config.to_text().lines() {
            let _ = writeln!(manifest, "config {line}");
        }
        for (name, m) in &tensors {
            let _ = writeln!(manifest, "tensor {name} {} {} f64", m.rows(), m.cols());
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for (_, m) in &tensors {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(fmt_err("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(fmt_err(format!("unsupported checkpoint version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest = bytes.get(16..16 + mlen).ok_or_else(|| fmt_err("truncated manifest"))?;
        let manifest = std::str::from_utf8(manifest).map_err(|_| fmt_err("manifest is not UTF-8"))?;
        let mut lines = manifest.lines();
        if lines.next() != Some(FORMAT) {
            return Err(fmt_err("unknown manifest format line"));
        }

        let mut meta = BTreeMap::new();
        let mut config_text = String::new();
        let mut tensors = Vec::new();
        for line in lines {
            let (kind, rest) = line.split_once(' ').ok_or_else(|| fmt_err(format!("bad manifest line {line:?}")))?;
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').ok_or_else(|| fmt_err(format!("bad meta line {line:?}")))?;
                    meta.insert(k.to_string(), v.parse::<u64>().map_err(|_| fmt_err(format!("bad meta value {line:?}")))?);
                }
                "config" => {
                    config_text.push_str(rest);
                    config_text.push('\n');
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 4 || f[3] != "f64" {
                        return Err(fmt_err(format!("bad tensor line {line:?}")));
                    }
                    let dims = (f[1].parse::<usize>(), f[2].parse::<usize>());
                    let (Ok(r), Ok(c)) = dims else { return Err(fmt_err(format!("bad tensor shape {line:?}"))) };
                    tensors.push((f[0].to_string(), r, c));
                }
                _ => return Err(fmt_err(format!("unknown manifest entry {kind:?}"))),
            }
        }
        let need = |k: &str| meta.get(k).copied().ok_or_else(|| fmt_err(format!("manifest lacks meta {k}")));

        let mut offset = 16 + mlen;
        let mut student = ParamStore::new(true);
        let mut teacher = ParamStore::new(false);
        let mut optim = AdamW { t: need("adam_t")?, ..AdamW::default() };
        let mut center = None;
        for (name, r, c) in tensors {
            let end = offset + r * c * 8;
            let raw = bytes.get(offset..end).ok_or_else(|| fmt_err(format!("truncated data for {name}")))?;
            offset = end;
            let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            let m = Mat::from_vec(r, c, data);
            if let Some(k) = name.strip_prefix("student.") {
                student.insert(k, m);
            } else if let Some(k) = name.strip_prefix("teacher.") {
                teacher.insert(k, m);
            } else if let Some(k) = name.strip_prefix("optim.m.") {
                optim.m.insert(k.into(), m);
            } else if let Some(k) = name.strip_prefix("optim.v.") {
                optim.v.insert(k.into(), m);
            } else if name == "state.center" {
                center = Some(m);
            } else {
                return Err(fmt_err(format!("unknown tensor namespace {name}")));
            }
        }
        if offset != bytes.len() {
            return Err(fmt_err(format!("{} trailing bytes", bytes.len() - offset)));
        }
        let config = RunConfig::toy().parse_over(&config_text)?;
        let state = TrainState {
            params: ParameterSets { student, teacher, momentum: f64::from_bits(need("momentum_bits")?) },
            optim,
            center: center.ok_or_else(|| fmt_err("missing state.center"))?,
            step: need("step")?,
            schedule: Schedule { steps_per_epoch: need("steps_per_epoch")?, total_steps: need("total_steps")? },
            seed: need("seed")?,
        };
        Ok(Self { config, state })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
