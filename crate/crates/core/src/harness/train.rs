//! Corpus generation and the training loop.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{epoch_pairs, write_dataset, Dataset, FramePair, Manifest, SpriteWorld, Video};
use crate::dynamics::LevelPlan;
use crate::error::{Error, Result};
use crate::objective::{train_step, StepReport, TrainState};
use crate::optim::Schedule;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::plot;

/// Sprite worlds for the configured corpus, drawn from `run.seed`.
pub fn generate_worlds(cfg: &RunConfig) -> Vec<SpriteWorld> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    rng.set_stream(1);
    (0..cfg.run.num_videos).map(|_| SpriteWorld::random(&cfg.sprites, &mut rng).0).collect()
}

/// In-memory corpus identical to what [`generate_dataset`] writes.
pub fn synthesize_videos(cfg: &RunConfig) -> Vec<Video> {
    generate_worlds(cfg).iter().enumerate().map(|(i, w)| Video::synthesize(format!("video_{i:04}"), w, cfg.run.frames_per_video)).collect()
}

pub fn generate_dataset(cfg: &RunConfig, root: &Path) -> Result<Manifest> {
    cfg.validate()?;
    write_dataset(&generate_worlds(cfg), cfg.run.frames_per_video, root)
}

pub fn load_videos(root: &Path) -> Result<Vec<Video>> {
    if !root.join("manifest.txt").exists() {
        return Err(Error::Data(format!("no dataset at {} (run gen-data first)", root.display())));
    }
    Dataset::open(root)?.load_all()
}

pub fn initial_state(cfg: &RunConfig) -> TrainState {
    TrainState::new(&cfg.objective, Schedule::new(cfg.steps_per_epoch(), cfg.objective.optim.epochs), cfg.run.seed)
}

/// Last step (exclusive) the configuration allows.
pub fn final_step(cfg: &RunConfig, state: &TrainState) -> u64 {
    match cfg.run.max_steps {
        0 => state.schedule.total_steps,
        m => m.min(state.schedule.total_steps),
    }
}

/// Serves the batch for any step, regenerating an epoch's pairs on demand.
pub struct BatchSource<'a> {
    cfg: &'a RunConfig,
    videos: &'a [Video],
    cached: Option<(u64, Vec<FramePair>)>,
}

impl<'a> BatchSource<'a> {
    pub fn new(cfg: &'a RunConfig, videos: &'a [Video]) -> Self {
        Self { cfg, videos, cached: None }
    }

    pub fn batch(&mut self, step: u64, steps_per_epoch: u64) -> Result<&[FramePair]> {
        let epoch = step / steps_per_epoch;
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            let pairs = epoch_pairs(self.videos, &self.cfg.sampling, self.cfg.run.seed, epoch as u32)?;
            self.cached = Some((epoch, pairs));
        }
        let pairs = &self.cached.as_ref().unwrap().1;
        let bs = self.cfg.run.batch_size;
        let start = (step % steps_per_epoch) as usize * bs;
        pairs.get(start..start + bs).ok_or_else(|| Error::Data(format!("epoch {epoch} has {} pairs, batch needs {}", pairs.len(), start + bs)))
    }
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| Error::config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs steps until `until` (exclusive), calling `on_step` after each one.
/// A failed step leaves `state` untouched.
pub fn run_steps(
    cfg: &RunConfig,
    videos: &[Video],
    state: &mut TrainState,
    until: u64,
    mut on_step: impl FnMut(&StepReport, &TrainState) -> Result<()> + Send,
) -> Result<Vec<StepReport>> {
    cfg.validate()?;
    let mut source = BatchSource::new(cfg, videos);
    with_pool(cfg.run.workers, || {
        let mut reports = Vec::new();
        while state.step < until {
            let batch = source.batch(state.step, state.schedule.steps_per_epoch)?;
            let report = train_step(batch, state, &cfg.objective)?;
            on_step(&report, state)?;
            reports.push(report);
        }
        Ok(reports)
    })?
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub reports: Vec<StepReport>,
    pub final_checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

pub fn loss_header(cfg: &RunConfig) -> String {
    StepReport::header(&LevelPlan::new(&cfg.objective.encoder, &cfg.objective.dynamics.toggles).objective)
}

/// Trains into `out`: `loss.tsv`, `loss.png`, periodic checkpoints under
/// `checkpoints/`, and `final.ckpt`. On divergence the pre-step state is
/// written to `divergent.ckpt` before the error is returned.
pub fn train_to_dir(cfg: &RunConfig, videos: &[Video], out: &Path, resume: Option<Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join("loss.tsv");
    let mut state = match resume {
        Some(ck) => {
            if ck.config.objective != cfg.objective {
                return Err(Error::config("checkpoint model configuration differs from the run configuration"));
            }
            ck.state
        }
        None => initial_state(cfg),
    };
    // A resumed run drops log rows from steps it is about to repeat.
    let kept = if state.step == 0 || !log_path.exists() { String::new() } else { log_rows_before(&log_path, state.step)? };
    let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    write!(log, "{}\n{kept}", loss_header(cfg)).map_err(|e| Error::io(&log_path, e))?;

    let until = final_step(cfg, &state);
    let every = cfg.run.checkpoint_every;
    let result = run_steps(cfg, videos, &mut state, until, |report, st| {
        writeln!(log, "{}", report.line()).map_err(|e| Error::io(&log_path, e))?;
        if every > 0 && st.step % every == 0 && st.step < until {
            let path = out.join("checkpoints").join(format!("step_{:06}.ckpt", st.step));
            Checkpoint { config: cfg.clone(), state: st.clone() }.save(&path)?;
        }
        Ok(())
    });
    let reports = match result {
        Ok(r) => r,
        Err(e @ Error::Divergent { .. }) => {
            // A failed step leaves the state as it was before the step.
            Checkpoint { config: cfg.clone(), state: state.clone() }.save(&out.join("divergent.ckpt"))?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };

    let final_checkpoint = out.join("final.ckpt");
    Checkpoint { config: cfg.clone(), state: state.clone() }.save(&final_checkpoint)?;
    let all = read_loss_log(&log_path)?;
    if all.len() >= 2 {
        let total: Vec<f64> = all.iter().map(|r| r.total).collect();
        let dense: Vec<f64> = all.iter().map(|r| r.dyn_loss).collect();
        plot::line_plot(&[("total", &total), ("dense", &dense)], &out.join("loss.png"))?;
    }
    Ok(TrainOutcome { state, reports, final_checkpoint, loss_log: log_path })
}

fn log_rows_before(path: &Path, step: u64) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for line in text.lines().skip(1) {
        match line.split('\t').next().and_then(|s| s.parse::<u64>().ok()) {
            Some(s) if s < step => {
                out.push_str(line);
                out.push('\n');
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Parsed row of `loss.tsv`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub dyn_loss: f64,
    pub inv_loss: f64,
    pub total: f64,
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Format("empty loss log".into()))?.split('\t').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or_else(|| Error::Format(format!("loss log lacks column {name}")));
    let (cd, ci, ct) = (col("dyn")?, col("inv")?, col("total")?);
    lines
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let num = |i: usize| f.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| Error::Format(format!("bad loss row {l:?}")));
            Ok(LossRow { step: num(0)? as u64, dyn_loss: num(cd)?, inv_loss: num(ci)?, total: num(ct)? })
        })
        .collect()
}
