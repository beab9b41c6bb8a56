//! The desk-scale experiment: data generation, the three training variants
//! and their evaluation, plus the directional acceptance checks on them.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::RngCore;

use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::error::{Error, Result};
use crate::eval::{ablation_eval, evaluate, EvalConfig, EvalReport, ModelPredictor};
use crate::model::{Mrssm, Subset};
use crate::simulator::{generate_dataset, Dataset, ACCEL, ANG_VEL, IMAGE, LIN_VEL};
use crate::training::{substream, train_run, ElboVariant, EpochMetrics};

pub const CHECKPOINT: &str = "model.ckpt";
pub const METRICS: &str = "metrics.jsonl";

/// Ablation label of the proprioceptive sensors.
pub fn proprioception_label() -> String {
    [LIN_VEL, ANG_VEL, ACCEL].join("+")
}

/// Training and held-out trajectories from the `data` random stream.
pub fn generate_data(config: &RunConfig) -> Result<(Dataset, Dataset)> {
    let seed = substream(config.seed, "data").next_u64();
    let count = config.data.train_count + config.data.held_out;
    let all = generate_dataset(&config.sim, count, config.data.length, seed)?;
    Ok(all.split(config.data.held_out))
}

/// A trained model and its per-epoch metrics.
pub struct Trained {
    pub model: Mrssm<f32>,
    pub metrics: Vec<EpochMetrics>,
    /// Loaded from an earlier run with an identical resolved config.
    pub reused: bool,
}

fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

/// Trains `config.train.elbo` into `out_dir` (config, checkpoint, metrics).
///
/// With `reuse`, a checkpoint already in `out_dir` that was written under
/// the identical resolved config is loaded instead: training is
/// deterministic, so the result would be the same.
pub fn train_into(
    config: &RunConfig,
    train: &Dataset,
    out_dir: &Path,
    reuse: bool,
    progress: impl FnMut(&EpochMetrics),
) -> Result<Trained> {
    let ckpt = out_dir.join(CHECKPOINT);
    let metrics_path = out_dir.join(METRICS);
    let previous = fs::read_to_string(out_dir.join(RESOLVED_CONFIG)).ok();
    if reuse && previous.as_deref().map(str::trim_end) == Some(config.to_json().as_str()) && ckpt.exists() {
        if let (Ok(model), Ok(metrics)) = (Mrssm::load(&ckpt), read_metrics(&metrics_path)) {
            return Ok(Trained { model, metrics, reused: true });
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    // A stale config must not vouch for a half-written run.
    let _ = fs::remove_file(out_dir.join(RESOLVED_CONFIG));
    let model_config = config.model_config(config.train.elbo);
    let outcome = train_run(&model_config, train, &config.train, Some(&metrics_path), progress)?;
    outcome.model.save(&ckpt)?;
    config.write_resolved(out_dir)?;
    Ok(Trained { model: outcome.model, metrics: outcome.metrics, reused: false })
}

/// The evaluation settings for `model`: the concat baseline only sees all
/// modalities, so the default ablation list shrinks to `all` for it.
/// Explicitly configured partial subsets are kept and rejected later.
pub fn eval_config_for(config: &RunConfig, model: &Mrssm<f32>) -> EvalConfig {
    let mut ec = config.eval.clone();
    if model.config().fusion == crate::model::Fusion::Concat && ec.subsets == EvalConfig::default().subsets {
        ec.subsets = vec!["all".into()];
    }
    ec
}

/// Outcome of the desk-scale experiment.
pub struct DeskScale {
    pub new: EvalReport,
    pub mvae: EvalReport,
    pub concat: EvalReport,
    /// Message of the error concat evaluation raised for a partial subset,
    /// `None` if it wrongly succeeded.
    pub concat_partial_error: Option<String>,
    pub new_metrics: Vec<EpochMetrics>,
}

/// Generates data, trains the new-ELBO, MVAE-ELBO and concat models with the
/// same budget and seed, and evaluates them on the held-out trajectories.
/// Each variant lives in `out_dir/<variant>`.
pub fn run_desk_scale(config: &RunConfig, out_dir: &Path, mut log: impl FnMut(&str)) -> Result<DeskScale> {
    let (train, held_out) = generate_data(config)?;
    log(&format!(
        "data: {} training / {} held-out trajectories",
        train.trajectories.len(),
        held_out.trajectories.len()
    ));
    let mut reports = Vec::new();
    let mut concat_partial_error = None;
    let mut new_metrics = Vec::new();
    for variant in [ElboVariant::New, ElboVariant::Mvae, ElboVariant::Concat] {
        let mut vc = config.clone();
        vc.train.elbo = variant;
        let dir = out_dir.join(variant.to_string());
        let trained = train_into(&vc, &train, &dir, true, |m| log(&format!("{variant} epoch {} loss {:.3}", m.epoch, m.loss)))?;
        if trained.reused {
            log(&format!("{variant}: reusing checkpoint in {}", dir.display()));
        }
        let ec = eval_config_for(&vc, &trained.model);
        let report = evaluate(&trained.model, &held_out, &ec)?;
        report.write(&dir)?;
        if variant == ElboVariant::Concat {
            let predictor = ModelPredictor::new(&trained.model, &ec)?;
            let n = trained.model.config().modalities.len();
            let partial = Subset::full(n - 1);
            concat_partial_error = ablation_eval(&predictor, &held_out, &ec, partial, ec.horizons[0])
                .err()
                .map(|e| e.to_string());
        }
        if variant == ElboVariant::New {
            new_metrics = trained.metrics;
        }
        reports.push(report);
    }
    let concat = reports.pop().expect("three reports");
    let mvae = reports.pop().expect("three reports");
    let new = reports.pop().expect("three reports");
    Ok(DeskScale { new, mvae, concat, concat_partial_error, new_metrics })
}

/// One acceptance criterion's verdict.
#[derive(Clone, Debug)]
pub struct Criterion {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} criterion {:>2}: {} — {}", self.id, self.name, self.detail)
    }
}

/// Fewest anchors a desk-scale comparison may rest on.
pub const MIN_ANCHORS: usize = 500;

fn median(report: &EvalReport, label: &str, horizon_s: f64, group: &str) -> Option<(f64, usize)> {
    report.get(label, horizon_s, group).map(|s| (s.median, s.n))
}

fn enough(v: (f64, usize)) -> bool {
    v.1 >= MIN_ANCHORS
}

fn show(v: Option<(f64, usize)>) -> String {
    match v {
        Some((m, n)) if n < MIN_ANCHORS => format!("{m:.4} m (n={n}, too few anchors)"),
        Some((m, n)) => format!("{m:.4} m (n={n})"),
        None => "missing".into(),
    }
}

/// Criteria 8–13 on the desk-scale results; horizons of 1 s and 3 s. A
/// comparison on fewer than [`MIN_ANCHORS`] anchors fails.
pub fn desk_scale_criteria(r: &DeskScale) -> Vec<Criterion> {
    let proprio = proprioception_label();
    let mut out = Vec::new();
    let le = |a: Option<(f64, usize)>, b: Option<(f64, usize)>, factor: f64| match (a, b) {
        (Some(a), Some(b)) => enough(a) && enough(b) && a.0 <= factor * b.0,
        _ => false,
    };
    let lt = |a: Option<(f64, usize)>, b: Option<(f64, usize)>| {
        matches!((a, b), (Some(a), Some(b)) if enough(a) && enough(b) && a.0 < b.0)
    };

    let (full, prop) = (median(&r.new, "all", 1.0, "transition"), median(&r.new, &proprio, 1.0, "transition"));
    out.push(Criterion {
        id: 8,
        name: "transitions: full ≤ 0.8 × proprioception at 1 s",
        passed: le(full, prop, 0.8),
        detail: format!("full {} vs proprioception {}", show(full), show(prop)),
    });

    let mut passed = true;
    let mut detail = Vec::new();
    for h in [1.0, 3.0] {
        let (full, prop) = (median(&r.new, "all", h, "non_transition"), median(&r.new, &proprio, h, "non_transition"));
        passed &= le(full, prop, 1.0);
        detail.push(format!("{h} s: full {} vs proprioception {}", show(full), show(prop)));
    }
    out.push(Criterion { id: 9, name: "non-transitions: full ≤ proprioception", passed, detail: detail.join("; ") });

    let (full, control) = (median(&r.new, "all", 3.0, "all"), median(&r.new, "control", 3.0, "all"));
    out.push(Criterion {
        id: 10,
        name: "full beats Control at 3 s",
        passed: lt(full, control),
        detail: format!("full {} vs control {}", show(full), show(control)),
    });

    let (vision, control) = (median(&r.new, IMAGE, 1.0, "all"), median(&r.new, "control", 1.0, "all"));
    out.push(Criterion {
        id: 11,
        name: "vision-only beats Control at 1 s",
        passed: lt(vision, control),
        detail: format!("vision-only {} vs control {}", show(vision), show(control)),
    });

    let mut passed = true;
    let mut detail = Vec::new();
    for h in [1.0, 3.0] {
        let (new, mvae) = (median(&r.new, IMAGE, h, "all"), median(&r.mvae, IMAGE, h, "all"));
        passed &= le(new, mvae, 1.0);
        detail.push(format!("{h} s: new {} vs mvae {}", show(new), show(mvae)));
    }
    out.push(Criterion { id: 12, name: "vision-only: new ELBO ≤ MVAE ELBO", passed, detail: detail.join("; ") });

    let mut passed = r.concat_partial_error.is_some();
    let mut detail = Vec::new();
    for h in [1.0, 3.0] {
        let (concat, new) = (median(&r.concat, "all", h, "all"), median(&r.new, "all", h, "all"));
        passed &= le(concat, new, 2.0);
        detail.push(format!("{h} s: concat {} vs new {}", show(concat), show(new)));
    }
    detail.push(match &r.concat_partial_error {
        Some(e) => format!("partial subset rejected ({e})"),
        None => "partial subset NOT rejected".into(),
    });
    out.push(Criterion { id: 13, name: "concat within 2× of new; partial subsets rejected", passed, detail: detail.join("; ") });
    out
}
