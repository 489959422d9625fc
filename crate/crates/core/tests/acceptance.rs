//! Acceptance criteria, one line each.
//!
//! Runs without the libtest harness so the verdicts always reach stdout.
//! Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 3 5`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use midway::analysis::oracles::{grid_shift, shift_predictor};
use midway::analysis::{encode_pair, perturb_forward, predict_level, prediction_tangent, track, Model, PerturbationConfig, TrackConfig};
use midway::data::{epoch_pairs, FramePair};
use midway::dynamics::{self, backward_refine, gate_values, midway_infer, BackwardFeatures, DynamicsConfig, LevelPlan, MotionLatents, Prediction, Toggles};
use midway::encoder::{self, EncoderConfig, FeaturePyramid};
use midway::harness::ablate::run_ablation;
use midway::harness::probe::{balanced_videos, direction_samples, run_probe, ProbeTask};
use midway::harness::testing::tiny_config;
use midway::harness::train::{initial_state, read_loss_log, synthesize_videos, train_to_dir, TrainOutcome};
use midway::harness::RunConfig;
use midway::objective::{compute_objective, dense_forward_loss, objective_gradients, NormMode};
use midway::params::ParamStore;
use midway::raster::Image;
use midway::tensor::Mat;

enum Verdict {
    Pass,
    Fail,
    /// Soft criterion missed while the hard ones hold.
    Degraded,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

fn check(ok: bool, detail: String) -> Outcome {
    Outcome { verdict: if ok { Verdict::Pass } else { Verdict::Fail }, detail }
}

/// State shared between criteria: the toy run feeds the probe.
#[derive(Default)]
struct Ctx {
    toy: Option<(TrainOutcome, RunConfig, f64)>,
    _dir: Option<tempfile::TempDir>,
}

impl Ctx {
    fn toy_run(&mut self) -> &(TrainOutcome, RunConfig, f64) {
        if self.toy.is_none() {
            let mut cfg = RunConfig::toy();
            cfg.run.workers = 1;
            let videos = synthesize_videos(&cfg);
            let dir = tempfile::tempdir().unwrap();
            let t = Instant::now();
            let out = train_to_dir(&cfg, &videos, dir.path(), None).expect("toy training");
            self.toy = Some((out, cfg, t.elapsed().as_secs_f64()));
            self._dir = Some(dir);
        }
        self.toy.as_ref().unwrap()
    }
}

/// Tiny two-level model with every parameter moved off its initializer, so
/// zero-initialized projections do not hide any path.
fn jittered_tiny() -> (RunConfig, midway::objective::TrainState) {
    let cfg = tiny_config();
    let mut state = initial_state(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    state.params.student.jitter(0.05, &mut rng);
    state.params.teacher.jitter(0.05, &mut rng);
    (cfg, state)
}

fn tiny_pair(cfg: &RunConfig) -> FramePair {
    let videos = synthesize_videos(cfg);
    epoch_pairs(&videos, &cfg.sampling, cfg.run.seed, 0).expect("pairs").remove(0)
}

fn param_group(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let keep = if parts.len() > 3 && parts[1] == "blocks" { 3 } else { 2 };
    parts[..keep.min(parts.len())].join(".")
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-9 {
        // Both vanish; judge absolutely.
        return (a - b).abs() * 1e9;
    }
    (a - b).abs() / scale
}

fn c1_gradients(_: &mut Ctx) -> Outcome {
    let (cfg, state) = jittered_tiny();
    let pair = tiny_pair(&cfg);
    let (value, grads) = objective_gradients(&pair, &state, &cfg.objective).unwrap();
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for name in state.params.student.names() {
        groups.entry(param_group(name)).or_default().push(name.clone());
    }
    let eps = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = (0.0, String::new());
    let mut checks = 0;
    for (group, names) in &groups {
        for _ in 0..3 {
            let mut dir: BTreeMap<String, Mat> = names
                .iter()
                .map(|n| {
                    let (r, c) = state.params.student.expect(n).shape();
                    (n.clone(), Mat::randn(r, c, 1.0, &mut rng))
                })
                .collect();
            let norm = dir.values().map(|m| m.dot(m)).sum::<f64>().sqrt();
            dir.values_mut().for_each(|m| *m = m.scale(1.0 / norm));
            let analytic: f64 = dir.iter().map(|(n, d)| grads.get(n).map_or(0.0, |g| g.dot(d))).sum();
            let eval = |s: f64| {
                let mut st = state.clone();
                st.params.student.add_scaled(&dir, s);
                compute_objective(&pair, &st, &cfg.objective).unwrap().total
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let e = rel_err(analytic, fd);
            checks += 1;
            if e > worst.0 || !e.is_finite() {
                worst = (e, group.clone());
            }
        }
    }
    check(
        worst.0 < 1e-4 && value.total.is_finite(),
        format!("{} groups, {checks} directions, worst relative error {:.2e} ({})", groups.len(), worst.0, worst.1),
    )
}

fn add_tangent(p: &FeaturePyramid, seeds: &[(usize, Mat)], s: f64) -> FeaturePyramid {
    let mut out = p.clone();
    for (l, t) in seeds {
        out.levels.get_mut(l).unwrap().axpy(s, t);
    }
    out
}

fn c2_jvp(_: &mut Ctx) -> Outcome {
    let (cfg, state) = jittered_tiny();
    let enc = &cfg.objective.encoder;
    let model = Model { encoder: enc, dynamics: &cfg.objective.dynamics, student: &state.params.student, teacher: &state.params.teacher };
    let pair = tiny_pair(&cfg);
    let (src, tgt) = encode_pair(&model, &pair.x_src, &pair.x_tgt).unwrap();
    let plan = LevelPlan::new(enc, &cfg.objective.dynamics.toggles);
    let eps = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for &level in &plan.predicted {
        for _ in 0..3 {
            // Every exported source level at once: the tangent crosses the
            // midway, backward and forward networks.
            let seeds: Vec<(usize, Mat)> = src.levels.iter().map(|(l, m)| (*l, Mat::randn(m.rows(), m.cols(), 1.0, &mut rng))).collect();
            let (_, jt) = prediction_tangent(&model, &src, &tgt, level, &seeds).unwrap();
            let plus = predict_level(&model, &add_tangent(&src, &seeds, eps), &tgt, level).unwrap();
            let minus = predict_level(&model, &add_tangent(&src, &seeds, -eps), &tgt, level).unwrap();
            let fd = plus.zip_map(&minus, |a, b| (a - b) / (2.0 * eps));
            let err = jt.zip_map(&fd, |a, b| a - b).norm() / fd.norm().max(1e-300);
            worst = worst.max(if err.is_finite() { err } else { f64::INFINITY });
            checks += 1;
        }
    }
    check(worst < 1e-3 && checks > 0, format!("{checks} directions over levels {:?}, worst relative error {worst:.2e}", plan.predicted))
}

fn c3_loss_identities(_: &mut Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, d) = (49, 32);
    let p = Mat::randn(n, d, 1.0, &mut rng);
    let pred = Prediction { tokens: p.clone(), level: 1 };
    let scaled_rows = |m: &Mat, sign: f64, rng: &mut ChaCha8Rng| {
        let mut out = m.clone();
        for r in 0..n {
            let c = sign * rng.gen_range(0.1..10.0);
            out.row_mut(r).iter_mut().for_each(|v| *v *= c);
        }
        out
    };
    let same = scaled_rows(&p, 1.0, &mut rng);
    let anti = scaled_rows(&p, -1.0, &mut rng);
    let mut orth = Mat::randn(n, d, 1.0, &mut rng);
    for r in 0..n {
        let (a, b) = (p.row(r).to_vec(), orth.row(r).to_vec());
        let k = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / a.iter().map(|x| x * x).sum::<f64>();
        orth.row_mut(r).iter_mut().zip(&a).for_each(|(v, x)| *v -= k * x);
    }
    let l = |t: &Mat| dense_forward_loss(&pred, t, NormMode::Exact).unwrap().value;
    let (l0, l4, l2) = (l(&same), l(&anti), l(&orth));
    check(
        l0.abs() <= 1e-12 && (l4 - 4.0).abs() <= 1e-12 && (l2 - 2.0).abs() <= 1e-12,
        format!("identical {l0:.3e}, antipodal {l4:.15}, orthogonal {l2:.15}"),
    )
}

fn c4_gates(_: &mut Ctx) -> Outcome {
    let cfg = RunConfig::toy();
    let (enc, dcfg) = (&cfg.objective.encoder, &cfg.objective.dynamics);
    let state = initial_state(&cfg);
    let expected = 1.0 / (1.0 + (-4.0f64).exp());
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    let mut gates = 0;
    for l in LevelPlan::new(enc, &dcfg.toggles).predicted {
        for b in 1..dcfg.forward_blocks {
            let prefix = format!("forward.l{l}.blocks.{b}");
            assert_eq!(state.params.student.expect(&format!("{prefix}.gate.fc2.weight")).max_abs(), 0.0);
            let x = Mat::randn(enc.num_tokens(), enc.embed_dim, 3.0, &mut rng);
            let g = gate_values(&state.params.student, &prefix, &x, &vec![true; x.rows()], dcfg.gate_bias);
            worst = g.data().iter().fold(worst, |w, v| w.max((v - expected).abs()));
            gates += g.len();
        }
    }
    check(gates > 0 && worst <= 1e-9, format!("{gates} gate values, max |g - logistic(4)| = {worst:.2e}"))
}

fn c5_residual_oracles(_: &mut Ctx) -> Outcome {
    let cfg = RunConfig::toy();
    let (enc, dcfg) = (&cfg.objective.encoder, &cfg.objective.dynamics);
    let mut store = ParamStore::new(false);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    encoder::init_params(enc, &mut rng, &mut store);
    dynamics::init_params(enc, dcfg, &mut rng, &mut store);
    store.jitter(0.1, &mut rng);
    let plan = LevelPlan::new(enc, &dcfg.toggles);
    let zero = |store: &mut ParamStore, name: String| {
        let m = store.get_mut(&name).unwrap_or_else(|| panic!("missing {name}"));
        m.data_mut().fill(0.0);
    };
    for &u in &plan.midway_inputs {
        zero(&mut store, format!("midway.l{u}.out.weight"));
        zero(&mut store, format!("midway.l{u}.out.bias"));
    }
    for &l in &plan.backward {
        for b in 0..dcfg.backward_blocks {
            for part in ["attn.proj", "mlp.fc2"] {
                zero(&mut store, format!("backward.l{l}.blocks.{b}.{part}.weight"));
                zero(&mut store, format!("backward.l{l}.blocks.{b}.{part}.bias"));
            }
        }
    }
    let (n, d) = (enc.num_tokens(), enc.embed_dim);
    let mut exact = true;
    let mut cases = 0;
    for &u in &plan.midway_inputs {
        let m = MotionLatents { tokens: Mat::randn(dcfg.num_motion_tokens, dcfg.midway_dim, 1.0, &mut rng), level: u };
        let out = midway_infer(&store, dcfg, u, &m, &Mat::randn(n, d, 1.0, &mut rng), &Mat::randn(n, d, 1.0, &mut rng)).unwrap();
        exact &= out.tokens == m.tokens;
        cases += 1;
    }
    for &l in &plan.backward {
        let z = Mat::randn(n, d, 1.0, &mut rng);
        let up = BackwardFeatures { tokens: Mat::randn(n, d, 1.0, &mut rng), level: LevelPlan::upper_of(enc, l) };
        let out = backward_refine(&store, enc, dcfg, l, &z, Some(&up)).unwrap();
        exact &= out.tokens == z;
        cases += 1;
    }
    check(exact && cases > 0, format!("{} midway and {} backward networks, bit-exact identity: {exact}", plan.midway_inputs.len(), plan.backward.len()))
}

/// Uniform grey frame with one patch-aligned red square.
fn sprite_frame(size: usize, patch: usize, row: usize, col: usize) -> Image {
    let mut img = Image::filled(size, size, [0.5, 0.5, 0.5]);
    for y in row * patch..(row + 1) * patch {
        for x in col * patch..(col + 1) * patch {
            img.set_pixel(x, y, [0.9, 0.1, 0.1]);
        }
    }
    img.normalized()
}

fn c6_permutation_oracle(_: &mut Ctx) -> Outcome {
    let enc = EncoderConfig { image_size: 48, patch_size: 4, depth: 2, embed_dim: 256, heads: 1, tap_levels: vec![1], top_level: 2, drop_path: 0.0, ..EncoderConfig::toy() };
    let dcfg = DynamicsConfig { midway_dim: 16, midway_heads: 2, midway_blocks: 1, forward_blocks: 2, num_motion_tokens: 2, ..Default::default() };
    let grid = enc.grid();
    let mut store = ParamStore::new(false);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    encoder::init_params(&enc, &mut rng, &mut store);
    dynamics::init_params(&enc, &dcfg, &mut rng, &mut store);
    store.jitter(0.05, &mut rng);
    // Translation-equivariant encoder so a moving sprite keeps its feature.
    store.get_mut("encoder.pos_embed").unwrap().data_mut().fill(0.0);
    let perm = grid_shift(grid, 0, 1);
    shift_predictor(&mut store, &enc, &dcfg, &perm).unwrap();
    let model = Model { encoder: &enc, dynamics: &dcfg, student: &store, teacher: &store };

    let (a, b) = (sprite_frame(48, 4, 5, 3), sprite_frame(48, 4, 5, 4));
    let mut peak_min = f64::INFINITY;
    let mut off_max: f64 = 0.0;
    for src in [0, 17, 63, 5 * grid + 3, grid * grid - 1] {
        let cfg = PerturbationConfig { source_location: src, k: 8, seed: src as u64, ..Default::default() };
        let h = perturb_forward(&a, &b, &cfg, &model).unwrap();
        for i in 0..grid * grid {
            if i == perm[src] {
                peak_min = peak_min.min(h.score(i));
            } else {
                off_max = off_max.max(h.score(i).abs());
            }
        }
    }

    let frames: Vec<Image> = (0..10).map(|t| sprite_frame(48, 4, 5, 1 + t)).collect();
    let start = 5 * grid + 1;
    let t = track(&frames, start, &TrackConfig::default(), &model).unwrap();
    let errors = t.locations.iter().enumerate().filter(|(i, &loc)| loc != 5 * grid + 1 + i).count();
    check(
        peak_min >= 0.99 && off_max <= 0.05 && errors == 0,
        format!("peak score min {peak_min:.4}, off-peak max {off_max:.2e}, track errors {errors}/10 frames"),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn c7_training(ctx: &mut Ctx) -> Outcome {
    let (out, cfg, secs) = ctx.toy_run();
    let rows = read_loss_log(&out.loss_log).unwrap();
    let dense: Vec<f64> = rows.iter().map(|r| r.dyn_loss).collect();
    let finite = rows.iter().all(|r| r.dyn_loss.is_finite() && r.inv_loss.is_finite() && r.total.is_finite());
    if dense.len() < 100 {
        return check(false, format!("only {} logged steps", dense.len()));
    }
    let (first, last) = (mean(&dense[..50]), mean(&dense[dense.len() - 50..]));
    let drop = 1.0 - last / first;
    check(
        finite && drop >= 0.5,
        format!(
            "dense loss {first:.4} (first 50) -> {last:.4} (last 50), drop {:.1}%, {} steps, no NaN: {finite}, {secs:.0}s, config {}",
            100.0 * drop,
            rows.len(),
            cfg.hash()
        ),
    )
}

fn c8_probe(ctx: &mut Ctx) -> Outcome {
    let (out, cfg, _) = ctx.toy_run();
    let (out, cfg) = (out.state.clone(), cfg.clone());
    let probe_videos = balanced_videos(&cfg, 40, cfg.run.seed ^ 0x9e37);
    let acc = |params: &midway::params::ParameterSets| {
        let model = Model { encoder: &cfg.objective.encoder, dynamics: &cfg.objective.dynamics, student: &params.student, teacher: &params.teacher };
        let samples = direction_samples(&model, &probe_videos, &cfg, 2).unwrap();
        run_probe(ProbeTask::Direction, samples, &cfg).unwrap()
    };
    let trained = acc(&out.params);
    let random = acc(&initial_state(&cfg).params);
    let random_ok = (random.accuracy - 0.25).abs() <= 0.08;
    let detail = format!(
        "trained {:.4} on {} held-out pairs (need > 0.40), random init {:.4} (need 0.25 +/- 0.08)",
        trained.accuracy, trained.test_samples, random.accuracy
    );
    let verdict = match (random_ok, trained.accuracy > 0.40) {
        (false, _) => Verdict::Fail,
        (true, true) => Verdict::Pass,
        (true, false) => Verdict::Degraded,
    };
    Outcome { verdict, detail }
}

fn c9_ablation(_: &mut Ctx) -> Outcome {
    let mut base = tiny_config();
    base.objective.encoder.depth = 3;
    base.objective.encoder.tap_levels = vec![1, 2];
    base.objective.encoder.top_level = 3;
    base.objective.optim.epochs = (200 / base.steps_per_epoch()).max(1) as usize;
    base.validate().unwrap();
    let videos = synthesize_videos(&base);
    let probe = balanced_videos(&base, 8, 5);
    let rows = run_ablation(&base, &videos, &probe, 200, |_| {}).unwrap();

    // Independent audit from parameter names: which networks exist, at how
    // many levels, and whether any gate does.
    let mut problems = Vec::new();
    for (row, (name, t)) in rows.iter().zip(Toggles::ablation_rows()) {
        let store = initial_state(&base.with_toggles(t)).params.student;
        let levels = |ns: &str| {
            let mut set: Vec<&str> = store.names().filter_map(|n| n.strip_prefix(ns)).filter_map(|r| r.split('.').next()).collect();
            set.dedup();
            set.len()
        };
        let gates = store.names().filter(|n| n.contains(".gate.")).count();
        let dynamics = t.latent_dynamics;
        let expect_forward = if !dynamics { 0 } else if t.refinement || t.multi_level { 2 } else { 1 };
        let expect_midway = if !dynamics { 0 } else if t.refinement { 2 } else { 1 };
        let expect_backward = if dynamics && t.backward { 2 } else { 0 };
        let got = (levels("forward."), levels("midway.l"), levels("backward."), gates > 0);
        let want = (expect_forward, expect_midway, expect_backward, dynamics && t.gating);
        if got != want {
            problems.push(format!("{name}: levels/gates {got:?} != {want:?}"));
        }
        if !row.manifest_ok || row.steps != 200 || !row.final_total.is_finite() {
            problems.push(format!("{name}: manifest_ok {} steps {} total {}", row.manifest_ok, row.steps, row.final_total));
        }
        if row.probe.is_some() != dynamics {
            problems.push(format!("{name}: probe presence"));
        }
    }
    let mut full = base.with_toggles(Toggles::FULL);
    full.run.max_steps = 200;
    if rows.len() != 9 || rows[5].config_hash != full.hash() {
        problems.push("row 6 is not the full configuration".into());
    }
    let mut hashes: Vec<&str> = rows.iter().map(|r| r.config_hash.as_str()).collect();
    hashes.sort();
    hashes.dedup();
    if hashes.len() != rows.len() {
        problems.push("variant configurations collide".into());
    }
    check(problems.is_empty(), if problems.is_empty() { "9 variants x 200 steps, manifests and toggle audit agree".into() } else { problems.join("; ") })
}

fn c10_determinism(_: &mut Ctx) -> Outcome {
    let mut cfg = RunConfig::toy();
    cfg.run.workers = 1;
    // One full epoch.
    cfg.run.max_steps = cfg.steps_per_epoch();
    let videos = synthesize_videos(&cfg);
    let run = |dir: &Path| {
        train_to_dir(&cfg, &videos, dir, None).unwrap();
        (std::fs::read(dir.join("loss.tsv")).unwrap(), std::fs::read(dir.join("final.ckpt")).unwrap())
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (la, ca) = run(a.path());
    let (lb, cb) = run(b.path());
    let steps = cfg.run.max_steps;
    check(la == lb && ca == cb, format!("{steps} toy steps twice: loss log identical {}, checkpoint identical {}", la == lb, ca == cb))
}

type Criterion = (u32, &'static str, fn(&mut Ctx) -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "gradient correctness", c1_gradients),
        (2, "forward-mode correctness", c2_jvp),
        (3, "dense loss identities", c3_loss_identities),
        (4, "gating initialization", c4_gates),
        (5, "residual oracles", c5_residual_oracles),
        (6, "permutation-oracle heatmap and track", c6_permutation_oracle),
        (7, "training signal", c7_training),
        (8, "direction probe", c8_probe),
        (9, "ablation audit", c9_ablation),
        (10, "determinism", c10_determinism),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut ctx = Ctx::default();
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| f(&mut ctx))).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            Outcome { verdict: Verdict::Fail, detail: format!("panicked: {msg}") }
        });
        let tag = match outcome.verdict {
            Verdict::Pass => "PASS",
            Verdict::Degraded => "DEGRADED",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
        };
        println!("criterion {id:>2} {tag:<8} {name}: {} [{:.1}s]", outcome.detail, t.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
