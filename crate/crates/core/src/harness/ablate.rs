//! The nine component-toggle variants: build, audit, train, probe.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::analysis::Model;
use crate::data::Video;
use crate::dynamics::{self, Toggles};
use crate::error::{Error, Result};

use super::config::RunConfig;
use super::probe::{direction_samples, run_probe, ProbeTask};
use super::train::{initial_state, run_steps};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    pub toggles: Toggles,
    pub config_hash: String,
    /// Scalars per dynamics namespace in the initialized student.
    pub params: BTreeMap<&'static str, usize>,
    pub manifest_ok: bool,
    pub steps: u64,
    pub final_dyn: f64,
    pub final_inv: f64,
    pub final_total: f64,
    /// Direction-probe accuracy; `None` without motion latents.
    pub probe: Option<f64>,
}

impl AblationRow {
    pub fn header() -> &'static str {
        "row\tlatent_dynamics\tbackward\tmulti_level\trefinement\tgating\tconfig_hash\tmidway_params\tbackward_params\tforward_params\tmanifest_ok\tsteps\tfinal_dyn\tfinal_inv\tfinal_total\tprobe_acc"
    }

    pub fn line(&self) -> String {
        let t = self.toggles;
        let mut s = format!("{}", self.name);
        for b in [t.latent_dynamics, t.backward, t.multi_level, t.refinement, t.gating] {
            let _ = write!(s, "\t{}", u8::from(b));
        }
        let _ = write!(
            s,
            "\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.config_hash,
            self.params["midway"],
            self.params["backward"],
            self.params["forward"],
            self.manifest_ok,
            self.steps,
            self.final_dyn,
            self.final_inv,
            self.final_total,
            self.probe.map_or("NA".to_string(), |p| format!("{p:.4}"))
        );
        s
    }
}

/// Counts initialized dynamics parameters per namespace.
pub fn dynamics_param_counts(cfg: &RunConfig) -> BTreeMap<&'static str, usize> {
    let state = initial_state(cfg);
    ["midway", "backward", "forward"].into_iter().map(|ns| (ns, state.params.student.num_scalars_with_prefix(&format!("{ns}.")))).collect()
}

/// Mean of the last `k` values.
fn tail_mean(v: &[f64], k: usize) -> f64 {
    let k = k.min(v.len()).max(1);
    v[v.len().saturating_sub(k)..].iter().sum::<f64>() / k as f64
}

/// Runs every variant for `steps` steps on `videos`, probing direction on
/// `probe_videos` when motion latents exist. `on_row` sees each row as it
/// completes.
pub fn run_ablation(
    base: &RunConfig,
    videos: &[Video],
    probe_videos: &[Video],
    steps: u64,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, toggles) in Toggles::ablation_rows() {
        let mut cfg = base.with_toggles(toggles);
        cfg.run.max_steps = steps;
        let tag = |e: Error| match e {
            Error::Config(list) => Error::Config(list.into_iter().map(|m| format!("row {name}: {m}")).collect()),
            other => Error::config(format!("row {name}: {other}")),
        };
        cfg.validate().map_err(tag)?;
        let params = dynamics_param_counts(&cfg);
        let expected = dynamics::param_manifest(&cfg.objective.encoder, &cfg.objective.dynamics);
        let manifest_ok = params == expected;

        let mut state = initial_state(&cfg);
        if state.schedule.total_steps < steps {
            return Err(tag(Error::config(format!("schedule has {} steps, fewer than {steps}", state.schedule.total_steps))));
        }
        let reports = run_steps(&cfg, videos, &mut state, steps, |_, _| Ok(())).map_err(tag)?;
        let col = |f: fn(&crate::objective::StepReport) -> f64| tail_mean(&reports.iter().map(f).collect::<Vec<_>>(), 10);
        let probe = if toggles.latent_dynamics && !probe_videos.is_empty() {
            let model = Model { encoder: &cfg.objective.encoder, dynamics: &cfg.objective.dynamics, student: &state.params.student, teacher: &state.params.teacher };
            let samples = direction_samples(&model, probe_videos, &cfg, 4).map_err(tag)?;
            Some(run_probe(ProbeTask::Direction, samples, &cfg).map_err(tag)?.accuracy)
        } else {
            None
        };
        let row = AblationRow {
            name,
            toggles,
            config_hash: cfg.hash(),
            params,
            manifest_ok,
            steps: state.step,
            final_dyn: col(|r| r.dyn_loss),
            final_inv: col(|r| r.inv_loss),
            final_total: col(|r| r.total),
            probe,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn table(rows: &[AblationRow]) -> String {
    let mut s = String::from(AblationRow::header());
    s.push('\n');
    for r in rows {
        s.push_str(&r.line());
        s.push('\n');
    }
    s
}
