//! Final-pose evaluation: velocity integration, the Control baseline,
//! modality ablations and terrain-transition breakdowns.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::distributions::GaussianVar;
use crate::error::{Error, Result};
use crate::model::{Evidence, Fusion, LatentVars, Mrssm, Subset};
use crate::simulator::{advance_pose, label_transitions, Dataset, ANG_VEL, LIN_VEL};

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

/// Folds [`advance_pose`] over the velocity sequence starting from `start`.
pub fn integrate_pose_from(start: Pose, v: &[f64], omega: &[f64], dt: f64) -> Result<Pose> {
    if v.len() != omega.len() {
        return Err(Error::Dimension { context: "integrate_pose", expected: v.len(), actual: omega.len() });
    }
    if v.is_empty() {
        return Err(Error::InvalidArgument("integrate_pose needs at least one step".into()));
    }
    let mut p = start;
    for (&vi, &wi) in v.iter().zip(omega) {
        let (x, y, theta) = advance_pose(p.x, p.y, p.theta, vi, wi, dt);
        p = Pose { x, y, theta };
    }
    Ok(p)
}

/// Final pose relative to the identity after integrating the velocities.
pub fn integrate_pose(v: &[f64], omega: &[f64], dt: f64) -> Result<Pose> {
    integrate_pose_from(Pose::default(), v, omega, dt)
}

/// Euclidean norm of the translation difference; heading is ignored.
pub fn final_pose_error(pred: &Pose, truth: &Pose) -> f64 {
    (pred.x - truth.x).hypot(pred.y - truth.y)
}

/// Prediction assuming the commanded velocities are attained immediately.
pub fn control_baseline(actions: &[crate::model::Action], dt: f64) -> Result<Pose> {
    let v: Vec<f64> = actions.iter().map(|a| a.forward).collect();
    let w: Vec<f64> = actions.iter().map(|a| a.turn).collect();
    integrate_pose(&v, &w, dt)
}

/// Quartiles (linear interpolation between order statistics) and RMSE.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub rmse: f64,
    pub n: usize,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl ErrorStats {
    /// `None` for an empty sample.
    pub fn from_errors(errors: &[f64]) -> Option<Self> {
        if errors.is_empty() {
            return None;
        }
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
        Some(Self {
            median: quantile(&sorted, 0.5),
            q1: quantile(&sorted, 0.25),
            q3: quantile(&sorted, 0.75),
            rmse,
            n: errors.len(),
        })
    }
}

/// Splits anchor errors by the transition mask; an empty group is `None`.
pub fn transition_breakdown(errors: &[f64], mask: &[bool]) -> Result<(Option<ErrorStats>, Option<ErrorStats>)> {
    if errors.len() != mask.len() {
        return Err(Error::Dimension { context: "transition_breakdown", expected: errors.len(), actual: mask.len() });
    }
    let on: Vec<f64> = errors.iter().zip(mask).filter(|(_, &m)| m).map(|(e, _)| *e).collect();
    let off: Vec<f64> = errors.iter().zip(mask).filter(|(_, &m)| !m).map(|(e, _)| *e).collect();
    Ok((ErrorStats::from_errors(&on), ErrorStats::from_errors(&off)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Prediction horizons in steps.
    pub horizons: Vec<usize>,
    /// Filtering steps up to and including the anchor.
    pub context: usize,
    /// Spacing of anchors in steps.
    pub anchor_stride: usize,
    /// Ablation subsets as `+`-joined modality names, `all` or `none`.
    pub subsets: Vec<String>,
    pub lin_vel: String,
    pub ang_vel: String,
    /// Anchors evaluated per forward pass.
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizons: vec![10, 30],
            context: 20,
            anchor_stride: 5,
            subsets: vec!["all".into(), "image".into(), "lin_vel+ang_vel+accel".into()],
            lin_vel: LIN_VEL.into(),
            ang_vel: ANG_VEL.into(),
            chunk: 256,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::Config("eval: horizons must be nonempty and at least 1".into()));
        }
        if self.context == 0 || self.anchor_stride == 0 || self.chunk == 0 {
            return Err(Error::Config("eval: context, anchor_stride and chunk must be at least 1".into()));
        }
        Ok(())
    }
}

/// Step `t` of trajectory `traj`: filtering ends at `t`, prediction covers
/// `t+1 ..= t+H`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Anchor {
    pub traj: usize,
    pub t: usize,
}

/// Anchors every `stride` steps with a full context window and `t + H`
/// inside the trajectory.
pub fn anchors(dataset: &Dataset, context: usize, horizon: usize, stride: usize) -> Vec<Anchor> {
    let mut out = Vec::new();
    for (traj, tr) in dataset.trajectories.iter().enumerate() {
        for t in (0..tr.len()).step_by(stride) {
            if t + 1 >= context && t + horizon < tr.len() {
                out.push(Anchor { traj, t });
            }
        }
    }
    out
}

/// Relative pose over `t+1 ..= t+H` from recorded ground-truth velocities.
pub fn true_relative_pose(dataset: &Dataset, a: Anchor, horizon: usize) -> Result<Pose> {
    let tr = &dataset.trajectories[a.traj];
    let states = &tr.states[a.t + 1..=a.t + horizon];
    let v: Vec<f64> = states.iter().map(|s| s.v).collect();
    let w: Vec<f64> = states.iter().map(|s| s.omega).collect();
    integrate_pose(&v, &w, tr.dt)
}

/// Produces predicted `(v, ω)` sequences of length `horizon` for anchors.
pub trait VelocityPredictor {
    fn predict(
        &self,
        dataset: &Dataset,
        anchors: &[Anchor],
        context: usize,
        subset: Subset,
        horizon: usize,
    ) -> Result<Vec<(Vec<f64>, Vec<f64>)>>;
}

/// Adapter running an [`Mrssm`] on evaluation anchors: zero-noise filtering
/// (posterior means) over the context window, then prior-mean open-loop
/// prediction; batched over anchors.
pub struct ModelPredictor<'a> {
    pub model: &'a Mrssm<f32>,
    pub lin_vel: usize,
    pub ang_vel: usize,
    pub chunk: usize,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(model: &'a Mrssm<f32>, config: &EvalConfig) -> Result<Self> {
        Ok(Self {
            model,
            lin_vel: model.config().modality_index(&config.lin_vel)?,
            ang_vel: model.config().modality_index(&config.ang_vel)?,
            chunk: config.chunk,
        })
    }

    fn predict_chunk(
        &self,
        dataset: &Dataset,
        anchors: &[Anchor],
        context: usize,
        subset: Subset,
        horizon: usize,
    ) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let config = self.model.config();
        let b = anchors.len();
        let mut sess = self.model.session(false);
        let ds = config.stoch_dim;
        let zeros = sess.constant(Tensor::zeros(&[b, ds]));
        let mut state: LatentVars = sess.initial_state(zeros)?;
        let action_rows = |step: &dyn Fn(Anchor) -> crate::model::Action| -> Tensor<f32> {
            let data = anchors
                .iter()
                .flat_map(|&a| {
                    let act = step(a);
                    [act.forward as f32, act.turn as f32]
                })
                .collect();
            Tensor::new(vec![b, 2], data).expect("shape")
        };
        // Experts (or embeddings) for each context step, batched over
        // anchors × steps, time-major.
        let mut per_modality: Vec<Option<crate::diffmath::Var>> = vec![None; config.modalities.len()];
        for (m, spec) in config.modalities.iter().enumerate() {
            if !subset.contains(m) {
                continue;
            }
            let d = dataset
                .specs()
                .iter()
                .position(|s| s.name == spec.name && s.shape == spec.shape)
                .ok_or_else(|| Error::MissingModality(format!("{} (not in dataset)", spec.name)))?;
            let numel = spec.numel();
            let mut data = Vec::with_capacity(context * b * numel);
            for k in 0..context {
                for a in anchors {
                    let t = a.t + 1 - context + k;
                    let src = &dataset.trajectories[a.traj].observations[d][t * numel..(t + 1) * numel];
                    data.extend(src.iter().map(|&v| ((v as f64 - spec.offset) / spec.scale) as f32));
                }
            }
            let mut shape = vec![context * b];
            shape.extend_from_slice(&spec.shape);
            per_modality[m] = Some(sess.constant(Tensor::new(shape, data).expect("shape")));
        }
        let mut encoded: Vec<Option<Encoded>> = vec![None; config.modalities.len()];
        for (m, obs) in per_modality.iter().enumerate() {
            if let Some(obs) = *obs {
                encoded[m] = Some(match config.fusion {
                    Fusion::Poe => Encoded::Expert(sess.encode_expert(m, obs)?),
                    Fusion::Concat => Encoded::Embedding(sess.embed_concat(m, obs)?),
                });
            }
        }
        for k in 0..context {
            let a = sess.constant(action_rows(&|an: Anchor| {
                dataset.trajectories[an.traj].prev_action(an.t + 1 - context + k)
            }));
            let mut experts = Vec::new();
            let mut embeddings = Vec::new();
            for e in encoded.iter().flatten() {
                match e {
                    Encoded::Expert(g) => experts.push(GaussianVar {
                        mean: sess.tape.slice(g.mean, 0, k * b, b)?,
                        stddev: sess.tape.slice(g.stddev, 0, k * b, b)?,
                    }),
                    Encoded::Embedding(v) => embeddings.push(sess.tape.slice(*v, 0, k * b, b)?),
                }
            }
            let evidence = match config.fusion {
                Fusion::Poe => Evidence::Experts(&experts),
                Fusion::Concat => Evidence::Concat(&embeddings),
            };
            state = sess.filter_step(&state, a, evidence, zeros)?;
        }
        let (lv, av) = (&config.modalities[self.lin_vel], &config.modalities[self.ang_vel]);
        let mut out = vec![(Vec::with_capacity(horizon), Vec::with_capacity(horizon)); b];
        let (mut h, mut s) = (state.h, state.s);
        for k in 0..horizon {
            let a = sess.constant(action_rows(&|an: Anchor| dataset.trajectories[an.traj].actions[an.t + k]));
            let step = sess.predict_step(h, s, a, None)?;
            let v = sess.decode(self.lin_vel, step.h, step.s)?;
            let w = sess.decode(self.ang_vel, step.h, step.s)?;
            for (i, o) in out.iter_mut().enumerate() {
                o.0.push(sess.tape.value(v).data()[i] as f64 * lv.scale + lv.offset);
                o.1.push(sess.tape.value(w).data()[i] as f64 * av.scale + av.offset);
            }
            h = step.h;
            s = step.s;
        }
        Ok(out)
    }
}

#[derive(Clone, Copy)]
enum Encoded {
    Expert(GaussianVar),
    Embedding(crate::diffmath::Var),
}

impl VelocityPredictor for ModelPredictor<'_> {
    fn predict(
        &self,
        dataset: &Dataset,
        anchors: &[Anchor],
        context: usize,
        subset: Subset,
        horizon: usize,
    ) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let n = self.model.config().modalities.len();
        if self.model.config().fusion == Fusion::Concat && subset != Subset::full(n) {
            return Err(Error::InvalidArgument(
                "the concat baseline cannot predict with missing modalities".into(),
            ));
        }
        let mut out = Vec::with_capacity(anchors.len());
        for chunk in anchors.chunks(self.chunk) {
            out.extend(self.predict_chunk(dataset, chunk, context, subset, horizon)?);
        }
        Ok(out)
    }
}

/// Per-anchor errors of one ablation at one horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorErrors {
    pub anchors: Vec<Anchor>,
    pub errors: Vec<f64>,
    pub transition: Vec<bool>,
}

impl AnchorErrors {
    pub fn stats(&self) -> Option<ErrorStats> {
        ErrorStats::from_errors(&self.errors)
    }

    pub fn breakdown(&self) -> (Option<ErrorStats>, Option<ErrorStats>) {
        transition_breakdown(&self.errors, &self.transition).expect("aligned by construction")
    }
}

fn transition_flags(dataset: &Dataset, anchors: &[Anchor], horizon: usize) -> Vec<bool> {
    let masks: Vec<Vec<bool>> = dataset.trajectories.iter().map(|t| label_transitions(&t.terrain, horizon)).collect();
    anchors.iter().map(|a| masks[a.traj][a.t]).collect()
}

/// Final-pose errors of `predictor` with observations restricted to `subset`.
pub fn ablation_eval(
    predictor: &dyn VelocityPredictor,
    dataset: &Dataset,
    config: &EvalConfig,
    subset: Subset,
    horizon: usize,
) -> Result<AnchorErrors> {
    config.validate()?;
    let anchors = anchors(dataset, config.context, horizon, config.anchor_stride);
    let predictions = predictor.predict(dataset, &anchors, config.context, subset, horizon)?;
    let mut errors = Vec::with_capacity(anchors.len());
    for (a, (v, w)) in anchors.iter().zip(&predictions) {
        let pred = integrate_pose(v, w, dataset.trajectories[a.traj].dt)?;
        errors.push(final_pose_error(&pred, &true_relative_pose(dataset, *a, horizon)?));
    }
    let transition = transition_flags(dataset, &anchors, horizon);
    Ok(AnchorErrors { anchors, errors, transition })
}

/// Control-baseline errors on the same anchors as [`ablation_eval`].
pub fn control_eval(dataset: &Dataset, config: &EvalConfig, horizon: usize) -> Result<AnchorErrors> {
    config.validate()?;
    let anchors = anchors(dataset, config.context, horizon, config.anchor_stride);
    let mut errors = Vec::with_capacity(anchors.len());
    for a in &anchors {
        let tr = &dataset.trajectories[a.traj];
        let pred = control_baseline(&tr.actions[a.t..a.t + horizon], tr.dt)?;
        errors.push(final_pose_error(&pred, &true_relative_pose(dataset, *a, horizon)?));
    }
    let transition = transition_flags(dataset, &anchors, horizon);
    Ok(AnchorErrors { anchors, errors, transition })
}

/// One line of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub ablation_subset: String,
    pub horizon_s: f64,
    /// `all`, `transition` or `non_transition`.
    pub group: String,
    /// `None` when the group has no anchors.
    pub stats: Option<ErrorStats>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ResultRow>,
}

impl EvalReport {
    pub fn push(&mut self, label: &str, horizon_s: f64, errors: &AnchorErrors) {
        let (on, off) = errors.breakdown();
        for (group, stats) in [("all", errors.stats()), ("transition", on), ("non_transition", off)] {
            self.rows.push(ResultRow { ablation_subset: label.into(), horizon_s, group: group.into(), stats });
        }
    }

    pub fn get(&self, label: &str, horizon_s: f64, group: &str) -> Option<&ErrorStats> {
        self.rows
            .iter()
            .find(|r| r.ablation_subset == label && (r.horizon_s - horizon_s).abs() < 1e-9 && r.group == group)
            .and_then(|r| r.stats.as_ref())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("ablation_subset,horizon_s,group,median_m,q1_m,q3_m,rmse_m,n\n");
        for r in &self.rows {
            match &r.stats {
                Some(st) => writeln!(
                    s,
                    "{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
                    r.ablation_subset, r.horizon_s, r.group, st.median, st.q1, st.q3, st.rmse, st.n
                ),
                None => writeln!(s, "{},{},{},,,,,0", r.ablation_subset, r.horizon_s, r.group),
            }
            .expect("writing to a String");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("results.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("results.json");
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }
}

/// Runs every configured ablation and horizon plus the Control baseline.
pub fn evaluate(model: &Mrssm<f32>, dataset: &Dataset, config: &EvalConfig) -> Result<EvalReport> {
    config.validate()?;
    let predictor = ModelPredictor::new(model, config)?;
    let dt = dataset.meta.dt;
    let mut report = EvalReport::default();
    for &h in &config.horizons {
        report.push("control", h as f64 * dt, &control_eval(dataset, config, h)?);
        for label in &config.subsets {
            let subset = Subset::parse(label, &model.config().modalities)?;
            let errors = ablation_eval(&predictor, dataset, config, subset, h)?;
            report.push(&subset.label(&model.config().modalities), h as f64 * dt, &errors);
        }
    }
    Ok(report)
}
