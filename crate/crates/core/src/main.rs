use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use midway::analysis::{self, Model, PerturbationConfig, TrackConfig};
use midway::data::{write_matrix, BinMatrix, Video};
use midway::harness::ablate::{run_ablation, table};
use midway::harness::probe::{balanced_videos, direction_samples, run_probe, sprite_samples, ProbeTask};
use midway::harness::train::{generate_dataset, load_videos, train_to_dir};
use midway::harness::{Checkpoint, Preset, RunConfig};
use midway::raster::Image;
use midway::{Error, Result};

#[derive(Parser)]
#[command(name = "midway", version, about = "Hierarchical latent dynamics pretraining and analysis on sprite videos")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Named base configuration.
    #[arg(long, global = true, default_value = "toy")]
    preset: String,
    /// key=value file applied over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides run.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root.
    #[arg(long, global = true, env = "MIDWAY_OUT", default_value = "runs")]
    out: PathBuf,
    /// Extra key=value overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic sprite corpus into <out>/data.
    GenData,
    /// Train on a dataset; writes loss logs and checkpoints into <out>/train.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Perturbation heatmap for one source token of a frame pair.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        video: usize,
        #[arg(long, default_value_t = 0)]
        src_frame: usize,
        #[arg(long, default_value_t = 4)]
        tgt_frame: usize,
        /// Source token as row,col on the patch grid.
        #[arg(long, default_value = "0,0")]
        location: String,
        #[arg(long, default_value_t = 8)]
        k: usize,
    },
    /// Follow one token through consecutive frames.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        video: usize,
        #[arg(long, default_value_t = 0)]
        start: usize,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        #[arg(long, default_value = "0,0")]
        location: String,
        #[arg(long, default_value_t = 8)]
        k: usize,
        /// Compare candidates with the initial feature instead of the latest.
        #[arg(long)]
        fixed_reference: bool,
    },
    /// Linear probes on frozen features of a checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train and probe the nine component-toggle variants.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        steps: u64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train { .. } => "train",
            Command::Analyze { .. } => "analyze",
            Command::Track { .. } => "track",
            Command::Probe { .. } => "probe",
            Command::Ablate { .. } => "ablate",
        }
    }
}

fn resolve_config(g: &Global, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = match base {
        Some(c) => c,
        None => RunConfig::preset(g.preset.parse::<Preset>()?),
    };
    if let Some(path) = &g.config {
        cfg = RunConfig::load(path, &cfg)?;
    }
    let mut overrides = g.sets.join("\n");
    if let Some(seed) = g.seed {
        overrides.push_str(&format!("\nrun.seed={seed}"));
    }
    cfg.parse_over(&overrides)
}

fn parse_location(s: &str, grid: usize) -> Result<usize> {
    let bad = || Error::config(format!("location {s:?} must be row,col inside the {grid}x{grid} grid"));
    let (r, c) = s.split_once(',').ok_or_else(bad)?;
    let (r, c): (usize, usize) = (r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?);
    if r >= grid || c >= grid {
        return Err(bad());
    }
    Ok(r * grid + c)
}

fn fmt_location(i: usize, grid: usize) -> String {
    format!("{},{}", i / grid, i % grid)
}

fn data_dir(g: &Global, data: &Option<PathBuf>) -> PathBuf {
    data.clone().unwrap_or_else(|| g.out.join("data"))
}

fn load_video(root: &Path, index: usize) -> Result<Video> {
    let ds = midway::data::Dataset::open(root)?;
    if index >= ds.len() {
        return Err(Error::Data(format!("video index {index} out of range ({} videos)", ds.len())));
    }
    ds.load_video(index)
}

fn frame_at(video: &Video, i: usize) -> Result<&Image> {
    video.frames.get(i).ok_or_else(|| Error::Data(format!("frame {i} out of range ({} frames in {})", video.len(), video.id)))
}

fn run(cli: &Cli) -> Result<String> {
    let g = &cli.global;
    match &cli.command {
        Command::GenData => {
            let cfg = resolve_config(g, None)?;
            let root = g.out.join("data");
            let m = generate_dataset(&cfg, &root)?;
            Ok(format!("videos={} frames={} path={}", m.entries.len(), cfg.run.frames_per_video, root.display()))
        }
        Command::Train { data, resume } => {
            let ck = resume.as_ref().map(|p| Checkpoint::load(p)).transpose()?;
            let cfg = resolve_config(g, ck.as_ref().map(|c| c.config.clone()))?;
            let videos = load_videos(&data_dir(g, data))?;
            let out = g.out.join("train");
            let o = train_to_dir(&cfg, &videos, &out, ck)?;
            let last = o.reports.last();
            Ok(format!(
                "steps={} final_total={} final_dyn={} config_hash={} checkpoint={} log={}",
                o.state.step,
                last.map_or(f64::NAN, |r| r.total),
                last.map_or(f64::NAN, |r| r.dyn_loss),
                cfg.hash(),
                o.final_checkpoint.display(),
                o.loss_log.display()
            ))
        }
        Command::Analyze { checkpoint, data, video, src_frame, tgt_frame, location, k } => {
            let ck = Checkpoint::load(checkpoint)?;
            let enc = &ck.config.objective.encoder;
            let source = parse_location(location, enc.grid())?;
            let v = load_video(&data_dir(g, data), *video)?;
            let size = enc.image_size;
            let (a, b) = (frame_at(&v, *src_frame)?.resize(size, size), frame_at(&v, *tgt_frame)?.resize(size, size));
            let model = model_of(&ck);
            let pcfg = PerturbationConfig { k: *k, source_location: source, seed: g.seed.unwrap_or(ck.config.run.seed), ..Default::default() };
            let heat = analysis::perturb_forward(&a.normalized(), &b.normalized(), &pcfg, &model)?;
            let dir = g.out.join("analyze");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mat_path = dir.join("heatmap.mwmx");
            write_matrix(&mat_path, &BinMatrix::from_mat(&heat.scores))?;
            let png = dir.join("heatmap.png");
            analysis::render_heatmap(&heat, &b, &png)?;
            let peak = heat.argmax();
            Ok(format!(
                "k={} level={} source={} peak={} peak_score={:.4} zero_tangent={} heatmap={} overlay={}",
                heat.k,
                heat.level,
                fmt_location(source, enc.grid()),
                fmt_location(peak, enc.grid()),
                heat.score(peak),
                heat.zero_tangent,
                mat_path.display(),
                png.display()
            ))
        }
        Command::Track { checkpoint, data, video, start, frames, location, k, fixed_reference } => {
            let ck = Checkpoint::load(checkpoint)?;
            let enc = &ck.config.objective.encoder;
            let init = parse_location(location, enc.grid())?;
            let v = load_video(&data_dir(g, data), *video)?;
            let size = enc.image_size;
            let seq = (*start..start + frames).map(|i| frame_at(&v, i).map(|f| f.resize(size, size).normalized())).collect::<Result<Vec<_>>>()?;
            let tcfg = TrackConfig {
                perturbation: PerturbationConfig { k: *k, seed: g.seed.unwrap_or(ck.config.run.seed), ..Default::default() },
                reanchor: !fixed_reference,
                ..Default::default()
            };
            let t = analysis::track(&seq, init, &tcfg, &model_of(&ck))?;
            let dir = g.out.join("track");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join("track.tsv");
            let mut text = String::from("frame\trow\tcol\theatmap_score\tsimilarity\n");
            for (i, loc) in t.locations.iter().enumerate() {
                let (s, sim) = if i == 0 { (f64::NAN, f64::NAN) } else { t.scores[i - 1] };
                text.push_str(&format!("{}\t{}\t{}\t{s}\t{sim}\n", start + i, loc / enc.grid(), loc % enc.grid()));
            }
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            let last = *t.locations.last().unwrap();
            Ok(format!("frames={} final={} track={}", t.locations.len(), fmt_location(last, enc.grid()), path.display()))
        }
        Command::Probe { checkpoint, data } => {
            let ck = Checkpoint::load(checkpoint)?;
            let videos = load_videos(&data_dir(g, data))?;
            let model = model_of(&ck);
            let mut parts = Vec::new();
            if ck.config.objective.dynamics.toggles.latent_dynamics {
                let r = run_probe(ProbeTask::Direction, direction_samples(&model, &videos, &ck.config, 2)?, &ck.config)?;
                println!("{r}");
                parts.push(format!("direction_accuracy={:.4}", r.accuracy));
            }
            let r = run_probe(ProbeTask::SpriteClass, sprite_samples(&model, &videos, 4)?, &ck.config)?;
            println!("{r}");
            parts.push(format!("sprite_accuracy={:.4}", r.accuracy));
            parts.push("chance=0.25".into());
            Ok(parts.join(" "))
        }
        Command::Ablate { data, steps } => {
            let cfg = resolve_config(g, None)?;
            let videos = load_videos(&data_dir(g, data))?;
            let probe = balanced_videos(&cfg, 16, cfg.run.seed);
            println!("{}", midway::harness::ablate::AblationRow::header());
            let rows = run_ablation(&cfg, &videos, &probe, *steps, |r| println!("{}", r.line()))?;
            let dir = g.out.join("ablate");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join("ablation.tsv");
            std::fs::write(&path, table(&rows)).map_err(|e| Error::io(&path, e))?;
            let audit = rows.iter().all(|r| r.manifest_ok);
            Ok(format!("rows={} manifest_ok={audit} table={}", rows.len(), path.display()))
        }
    }
}

fn model_of(ck: &Checkpoint) -> Model<'_> {
    Model {
        encoder: &ck.config.objective.encoder,
        dynamics: &ck.config.objective.dynamics,
        student: &ck.state.params.student,
        teacher: &ck.state.params.teacher,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(&cli) {
        Ok(summary) => {
            println!("OK {name} {summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            println!("ERROR {name} {}", e.to_string().replace('\n', "; "));
            ExitCode::FAILURE
        }
    }
}
