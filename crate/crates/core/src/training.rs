//! Training objectives and the optimization loop.
//!
//! Both objectives are negated ELBOs summed over time and averaged over the
//! batch. `elbo_mvae` filters and reconstructs on a modality subset;
//! `elbo_new` (Eq. 5 with γ ≡ 1) filters on a subset but reconstructs every
//! modality, and takes its KL between the cached full-set posterior and the
//! subset rollout's prior. All rollouts of a batch share noise draws.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Scalar, Tensor, Var};
use crate::distributions::{kl, log_prob_unit, GaussianVar};
use crate::error::{Error, Result};
use crate::model::{Evidence, Fusion, LatentVars, ModalityKind, ModalitySpec, ModelConfig, Mrssm, ModelParams, Session, Subset};
use crate::simulator::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElboVariant {
    Mvae,
    New,
    Concat,
}

impl std::str::FromStr for ElboVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mvae" => Ok(Self::Mvae),
            "new" => Ok(Self::New),
            "concat" => Ok(Self::Concat),
            other => Err(Error::Config(format!("unknown ELBO variant `{other}` (mvae, new, concat)"))),
        }
    }
}

impl std::fmt::Display for ElboVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mvae => "mvae",
            Self::New => "new",
            Self::Concat => "concat",
        })
    }
}

/// Importance ratios γ_t of Eq. 6; only the paper's biased choice is offered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ImportanceRatio {
    #[default]
    FixedOne,
}

/// Per-epoch learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `learning_rate` at the first epoch down to
    /// `min_learning_rate` at the last.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub beta: f64,
    pub importance_ratio: ImportanceRatio,
    /// Random nonempty proper subsets per batch, after the full set and the
    /// singletons.
    pub subsets_per_batch: usize,
    pub sequence_length: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub min_learning_rate: f64,
    pub grad_clip_norm: f64,
    pub epochs: usize,
    pub seed: u64,
    pub elbo: ElboVariant,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            importance_ratio: ImportanceRatio::FixedOne,
            subsets_per_batch: 1,
            sequence_length: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Constant,
            min_learning_rate: 0.0,
            grad_clip_norm: 10.0,
            epochs: 10,
            seed: 0,
            elbo: ElboVariant::New,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("training: {m}")));
        if !(self.beta >= 0.0) {
            return bad("beta must be nonnegative");
        }
        if self.sequence_length < 2 {
            return bad("sequence_length must be at least 2");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip_norm > 0.0) {
            return bad("learning_rate and grad_clip_norm must be positive");
        }
        if !(self.min_learning_rate >= 0.0 && self.min_learning_rate <= self.learning_rate) {
            return bad("min_learning_rate must lie in [0, learning_rate]");
        }
        Ok(())
    }

    /// Learning rate for `epoch` (1-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine if self.epochs <= 1 => self.learning_rate,
            LrSchedule::Cosine => {
                let progress = (epoch.clamp(1, self.epochs) - 1) as f64 / (self.epochs - 1) as f64;
                let (hi, lo) = (self.learning_rate, self.min_learning_rate);
                lo + 0.5 * (hi - lo) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Modality subsets used for one batch; the first is always the full set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsetSchedule(Vec<Subset>);

impl SubsetSchedule {
    pub fn subsets(&self) -> &[Subset] {
        &self.0
    }

    pub fn full(&self) -> Subset {
        self.0[0]
    }
}

/// `[full] ++ singletons ++ k uniform nonempty proper subsets`. With a single
/// modality no nonempty proper subset exists and the full set stands in.
pub fn sample_subsets(n_modalities: usize, k: usize, rng: &mut impl Rng) -> Result<SubsetSchedule> {
    if n_modalities == 0 {
        return Err(Error::InvalidArgument("cannot sample subsets of zero modalities".into()));
    }
    if n_modalities > 31 {
        return Err(Error::InvalidArgument("subset sampling supports at most 31 modalities".into()));
    }
    let full = Subset::full(n_modalities);
    let mut out = vec![full];
    out.extend((0..n_modalities).map(Subset::singleton));
    for _ in 0..k {
        let s = if n_modalities == 1 { full } else { Subset::from_bits(rng.gen_range(1..full.bits())) };
        out.push(s);
    }
    Ok(SubsetSchedule(out))
}

/// Dense modalities get the dataset mean and standard deviation as their
/// offset and scale; images keep raw `[0, 1]` intensities.
pub fn fit_normalization(dataset: &Dataset, specs: &mut [ModalitySpec]) -> Result<()> {
    for spec in specs.iter_mut().filter(|s| s.kind == ModalityKind::Dense) {
        let m = dataset_modality(dataset, spec)?;
        let values = dataset.trajectories.iter().flat_map(|t| t.observations[m].iter().map(|&v| v as f64));
        let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
        for v in values {
            n += 1;
            sum += v;
            sq += v * v;
        }
        if n == 0 {
            return Err(Error::EmptyDataset("no observations to normalize".into()));
        }
        let mean = sum / n as f64;
        let sd = (sq / n as f64 - mean * mean).max(0.0).sqrt();
        spec.offset = mean;
        spec.scale = if sd > 1e-6 { sd } else { 1.0 };
    }
    Ok(())
}

fn dataset_modality(dataset: &Dataset, spec: &ModalitySpec) -> Result<usize> {
    let m = dataset
        .specs()
        .iter()
        .position(|d| d.name == spec.name)
        .ok_or_else(|| Error::MissingModality(format!("{} (not in dataset)", spec.name)))?;
    if dataset.specs()[m].shape != spec.shape {
        return Err(Error::InvalidArgument(format!("modality `{}` has a different shape in the dataset", spec.name)));
    }
    Ok(m)
}

/// A window `[start, start + len)` of trajectory `traj`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub traj: usize,
    pub start: usize,
}

/// Time-major training batch: row `t·B + b` holds step `t` of sequence `b`.
/// Observations are standardized; noise is standard normal.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<S: Scalar = f32> {
    pub len: usize,
    pub size: usize,
    /// `[T·B, action_dim]`, the action preceding each observation.
    pub prev_actions: Tensor<S>,
    /// Per model modality, `[T·B, ..shape]`.
    pub observations: Vec<Tensor<S>>,
    /// `[B, d_s]` draw for the initial latent.
    pub init_noise: Tensor<S>,
    /// `[T·B, d_s]` posterior-sampling draws.
    pub noise: Tensor<S>,
}

impl<S: Scalar> Batch<S> {
    pub fn from_windows(
        dataset: &Dataset,
        config: &ModelConfig,
        windows: &[Window],
        len: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let b = windows.len();
        if b == 0 || len == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        for w in windows {
            let n = dataset.trajectories.get(w.traj).map_or(0, |t| t.len());
            if w.start + len > n {
                return Err(Error::InvalidArgument(format!("window {w:?} of length {len} exceeds its trajectory")));
            }
        }
        let mut prev_actions = Vec::with_capacity(len * b * 2);
        for t in 0..len {
            for w in windows {
                let a = dataset.trajectories[w.traj].prev_action(w.start + t);
                prev_actions.extend([S::from_f64_lossy(a.forward), S::from_f64_lossy(a.turn)]);
            }
        }
        let mut observations = Vec::with_capacity(config.modalities.len());
        for spec in &config.modalities {
            let m = dataset_modality(dataset, spec)?;
            let numel = spec.numel();
            let mut data = Vec::with_capacity(len * b * numel);
            for t in 0..len {
                for w in windows {
                    let traj = &dataset.trajectories[w.traj];
                    let i = (w.start + t) * numel;
                    data.extend(
                        traj.observations[m][i..i + numel]
                            .iter()
                            .map(|&v| S::from_f64_lossy((v as f64 - spec.offset) / spec.scale)),
                    );
                }
            }
            let mut shape = vec![len * b];
            shape.extend_from_slice(&spec.shape);
            observations.push(Tensor::new(shape, data).expect("shape matches data"));
        }
        let ds = config.stoch_dim;
        let mut normal = |n: usize| -> Vec<S> { (0..n).map(|_| S::from_f64_lossy(rng.sample(StandardNormal))).collect() };
        let init_noise = Tensor::new(vec![b, ds], normal(b * ds)).expect("shape");
        let noise = Tensor::new(vec![len * b, ds], normal(len * b * ds)).expect("shape");
        Ok(Self {
            len,
            size: b,
            prev_actions: Tensor::new(vec![len * b, 2], prev_actions).expect("shape"),
            observations,
            init_noise,
            noise,
        })
    }
}

/// A batch recorded on a session's tape, with per-step slices.
pub struct BatchVars {
    pub len: usize,
    pub size: usize,
    pub prev_actions: Vec<Var>,
    /// Full `[T·B, ..]` observation tensors per modality.
    pub observations: Vec<Var>,
    pub init_noise: Var,
    pub noise: Vec<Var>,
    /// Per modality, per step: PoE experts or concat embeddings (lazily built).
    experts: Option<Vec<Vec<GaussianVar>>>,
    embeddings: Option<Vec<Vec<Var>>>,
}

impl BatchVars {
    pub fn record<S: Scalar>(sess: &mut Session<'_, S>, batch: &Batch<S>) -> Result<Self> {
        let (t, b) = (batch.len, batch.size);
        let actions = sess.constant(batch.prev_actions.clone());
        let noise = sess.constant(batch.noise.clone());
        let mut prev_actions = Vec::with_capacity(t);
        let mut noises = Vec::with_capacity(t);
        for step in 0..t {
            prev_actions.push(sess.tape.slice(actions, 0, step * b, b)?);
            noises.push(sess.tape.slice(noise, 0, step * b, b)?);
        }
        let observations = batch.observations.iter().map(|o| sess.constant(o.clone())).collect();
        let init_noise = sess.constant(batch.init_noise.clone());
        Ok(Self { len: t, size: b, prev_actions, observations, init_noise, noise: noises, experts: None, embeddings: None })
    }

    /// Runs every encoder once over all `T·B` rows.
    fn experts<S: Scalar>(&mut self, sess: &mut Session<'_, S>) -> Result<&[Vec<GaussianVar>]> {
        if self.experts.is_none() {
            let mut all = Vec::with_capacity(self.observations.len());
            for (m, &obs) in self.observations.iter().enumerate() {
                let g = sess.encode_expert(m, obs)?;
                let mut per_step = Vec::with_capacity(self.len);
                for t in 0..self.len {
                    per_step.push(GaussianVar {
                        mean: sess.tape.slice(g.mean, 0, t * self.size, self.size)?,
                        stddev: sess.tape.slice(g.stddev, 0, t * self.size, self.size)?,
                    });
                }
                all.push(per_step);
            }
            self.experts = Some(all);
        }
        Ok(self.experts.as_deref().expect("just built"))
    }

    fn embeddings<S: Scalar>(&mut self, sess: &mut Session<'_, S>) -> Result<&[Vec<Var>]> {
        if self.embeddings.is_none() {
            let mut all = Vec::with_capacity(self.observations.len());
            for (m, &obs) in self.observations.iter().enumerate() {
                let e = sess.embed_concat(m, obs)?;
                let mut per_step = Vec::with_capacity(self.len);
                for t in 0..self.len {
                    per_step.push(sess.tape.slice(e, 0, t * self.size, self.size)?);
                }
                all.push(per_step);
            }
            self.embeddings = Some(all);
        }
        Ok(self.embeddings.as_deref().expect("just built"))
    }
}

/// Filters the batch on `subset` (PoE) or on every modality (concat).
pub fn filter_rollout<S: Scalar>(
    sess: &mut Session<'_, S>,
    batch: &mut BatchVars,
    subset: Subset,
) -> Result<Vec<LatentVars>> {
    let mut state = sess.initial_state(batch.init_noise)?;
    let mut out = Vec::with_capacity(batch.len);
    match sess.config().fusion {
        Fusion::Poe => {
            let experts = batch.experts(sess)?.to_vec();
            for t in 0..batch.len {
                let present: Vec<GaussianVar> =
                    subset.iter().filter(|&m| m < experts.len()).map(|m| experts[m][t]).collect();
                state = sess.filter_step(&state, batch.prev_actions[t], Evidence::Experts(&present), batch.noise[t])?;
                out.push(state);
            }
        }
        Fusion::Concat => {
            if subset != Subset::full(sess.config().modalities.len()) {
                return Err(Error::InvalidArgument("the concat baseline cannot filter on a partial subset".into()));
            }
            let embeddings = batch.embeddings(sess)?.to_vec();
            for t in 0..batch.len {
                let e: Vec<Var> = embeddings.iter().map(|per_step| per_step[t]).collect();
                state = sess.filter_step(&state, batch.prev_actions[t], Evidence::Concat(&e), batch.noise[t])?;
                out.push(state);
            }
        }
    }
    Ok(out)
}

/// Loss and its parts, all tape scalars. `recon[i]` is the batch-mean
/// log-likelihood sum of modality `i` (when reconstructed), `kl` the
/// batch-mean KL sum.
#[derive(Clone, Debug)]
pub struct ElboTerms {
    pub loss: Var,
    pub kl: Var,
    pub recon: Vec<Option<Var>>,
    /// Per-step KL values, `[B]` each.
    pub kl_steps: Vec<Var>,
}

/// Pieces of a negated ELBO before assembly.
pub struct ElboParts {
    /// `(λ, decoded means, targets)` per reconstructed modality, `None` for
    /// modalities left out; means and targets are `[N, ..]` with matching
    /// shapes.
    pub recon: Vec<Option<(f64, Var, Var)>>,
    /// `(q, p)` per step, each `[B, d_s]`.
    pub kl_pairs: Vec<(GaussianVar, GaussianVar)>,
    pub beta: f64,
    pub batch_size: usize,
}

/// `−(Σ_i λ_i Σ log p(o_i) − β Σ_t KL(q_t ‖ p_t)) / B`.
pub fn assemble_elbo<S: Scalar>(tape: &mut crate::diffmath::Tape<S>, parts: &ElboParts) -> Result<ElboTerms> {
    let inv_b = 1.0 / parts.batch_size as f64;
    let mut recon = Vec::with_capacity(parts.recon.len());
    let mut weighted: Option<Var> = None;
    for r in &parts.recon {
        let Some((lambda, mean, target)) = *r else {
            recon.push(None);
            continue;
        };
        let rows = tape.shape(mean)[0];
        let (mean, target) = (tape.reshape(mean, &[rows, tape.value(mean).numel() / rows.max(1)])?, {
            let n = tape.value(target).numel() / rows.max(1);
            tape.reshape(target, &[rows, n])?
        });
        let lp = log_prob_unit(tape, mean, target)?;
        let total = tape.sum(lp);
        let per_seq = tape.scale(total, inv_b);
        recon.push(Some(per_seq));
        let w = tape.scale(per_seq, lambda);
        weighted = Some(match weighted {
            None => w,
            Some(acc) => tape.add(acc, w)?,
        });
    }
    let mut kl_steps = Vec::with_capacity(parts.kl_pairs.len());
    let mut kl_total: Option<Var> = None;
    for (q, p) in &parts.kl_pairs {
        let k = kl(tape, q, p)?;
        kl_steps.push(k);
        let s = tape.sum(k);
        kl_total = Some(match kl_total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let kl_total = match kl_total {
        Some(k) => tape.scale(k, inv_b),
        None => tape.constant(Tensor::scalar(S::zero())),
    };
    let kl_weighted = tape.scale(kl_total, parts.beta);
    let loss = match weighted {
        Some(w) => tape.sub(kl_weighted, w)?,
        None => kl_weighted,
    };
    Ok(ElboTerms { loss, kl: kl_total, recon, kl_steps })
}

/// Decodes the modalities in `which` from all rollout states at once.
fn recon_parts<S: Scalar>(
    sess: &mut Session<'_, S>,
    batch: &BatchVars,
    states: &[LatentVars],
    which: Subset,
) -> Result<Vec<Option<(f64, Var, Var)>>> {
    let hs: Vec<Var> = states.iter().map(|s| s.h).collect();
    let ss: Vec<Var> = states.iter().map(|s| s.s).collect();
    let h = sess.tape.concat(&hs, 0)?;
    let s = sess.tape.concat(&ss, 0)?;
    let n = sess.config().modalities.len();
    let mut out = Vec::with_capacity(n);
    for m in 0..n {
        if which.contains(m) {
            let lambda = sess.config().modalities[m].lambda;
            let mean = sess.decode(m, h, s)?;
            out.push(Some((lambda, mean, batch.observations[m])));
        } else {
            out.push(None);
        }
    }
    Ok(out)
}

/// Negated MVAE-style ELBO on `subset`: filter and reconstruct the subset
/// only, KL between the subset posterior and the subset prior.
pub fn elbo_mvae<S: Scalar>(
    sess: &mut Session<'_, S>,
    batch: &mut BatchVars,
    subset: Subset,
    beta: f64,
) -> Result<(ElboTerms, Vec<LatentVars>)> {
    let states = filter_rollout(sess, batch, subset)?;
    let recon = recon_parts(sess, batch, &states, subset)?;
    let kl_pairs = states.iter().map(|s| (s.posterior, s.prior)).collect();
    let parts = ElboParts { recon, kl_pairs, beta, batch_size: batch.size };
    Ok((assemble_elbo(&mut sess.tape, &parts)?, states))
}

/// Negated ELBO of Eq. 5 with γ ≡ 1. `cache` must be the full-set rollout of
/// the same batch (same noise). Reconstructs every modality at the subset
/// rollout's samples; KL from the cached full-set posterior to the subset
/// rollout's prior, with gradients through both.
pub fn elbo_new<S: Scalar>(
    sess: &mut Session<'_, S>,
    batch: &mut BatchVars,
    subset: Subset,
    cache: Option<&[LatentVars]>,
    beta: f64,
) -> Result<ElboTerms> {
    let cache = cache.ok_or_else(|| Error::InvalidArgument("elbo_new needs the cached full-set posteriors".into()))?;
    if cache.len() != batch.len {
        return Err(Error::Dimension { context: "elbo_new cache", expected: batch.len, actual: cache.len() });
    }
    let n = sess.config().modalities.len();
    let full = Subset::full(n);
    let states = filter_rollout(sess, batch, subset)?;
    let recon = recon_parts(sess, batch, &states, full)?;
    let kl_pairs = cache.iter().zip(&states).map(|(c, s)| (c.posterior, s.prior)).collect();
    let parts = ElboParts { recon, kl_pairs, beta, batch_size: batch.size };
    assemble_elbo(&mut sess.tape, &parts)
}

/// Per-batch objective: the configured ELBO summed over the subset schedule.
pub struct BatchObjective {
    pub loss: Var,
    /// Full-set terms (for logging).
    pub full: ElboTerms,
}

pub fn batch_objective<S: Scalar>(
    sess: &mut Session<'_, S>,
    batch: &mut BatchVars,
    variant: ElboVariant,
    schedule: &SubsetSchedule,
    beta: f64,
) -> Result<BatchObjective> {
    let fusion = sess.config().fusion;
    match (variant, fusion) {
        (ElboVariant::Concat, Fusion::Concat) => {
            let (terms, _) = elbo_mvae(sess, batch, schedule.full(), beta)?;
            Ok(BatchObjective { loss: terms.loss, full: terms })
        }
        (ElboVariant::Concat, Fusion::Poe) | (_, Fusion::Concat) => Err(Error::Config(
            "the concat ELBO requires concat fusion, and concat fusion requires the concat ELBO".into(),
        )),
        (ElboVariant::Mvae, Fusion::Poe) => {
            let mut full_terms = None;
            let mut total: Option<Var> = None;
            for &subset in schedule.subsets() {
                let (terms, _) = elbo_mvae(sess, batch, subset, beta)?;
                total = Some(match total {
                    None => terms.loss,
                    Some(acc) => sess.tape.add(acc, terms.loss)?,
                });
                full_terms.get_or_insert(terms);
            }
            Ok(BatchObjective { loss: total.expect("schedule is nonempty"), full: full_terms.expect("nonempty") })
        }
        (ElboVariant::New, Fusion::Poe) => {
            // Full set first; its posteriors are cached for every subset.
            let (full_terms, cache) = elbo_mvae(sess, batch, schedule.full(), beta)?;
            let mut total = full_terms.loss;
            for &subset in &schedule.subsets()[1..] {
                let terms = elbo_new(sess, batch, subset, Some(&cache), beta)?;
                total = sess.tape.add(total, terms.loss)?;
            }
            Ok(BatchObjective { loss: total, full: full_terms })
        }
    }
}

/// Adam with decoupled-free standard update and bias correction.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: ModelParams<f32>,
    v: ModelParams<f32>,
}

impl Adam {
    pub fn new(params: &ModelParams<f32>, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn update(&mut self, params: &mut ModelParams<f32>, grads: &ModelParams<f32>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("gradient per parameter");
            let m = self.m.get_mut(name).expect("moment per parameter");
            let v = self.v.get_mut(name).expect("moment per parameter");
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let g = g as f64;
                let mn = self.beta1 * *m as f64 + (1.0 - self.beta1) * g;
                let vn = self.beta2 * *v as f64 + (1.0 - self.beta2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let update = self.lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *p = (*p as f64 - update) as f32;
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ModelParams<f32>, max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, g)| g.data().iter()).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    norm
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-batch objective (summed over the subset schedule).
    pub loss: f64,
    /// Mean full-set KL per sequence.
    pub kl: f64,
    /// Mean squared full-set reconstruction error per element, standardized
    /// units, keyed `recon_<modality>`.
    #[serde(flatten)]
    pub recon: std::collections::BTreeMap<String, f64>,
    pub grad_norm: f64,
    pub batches: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Mrssm<f32>,
    pub metrics: Vec<EpochMetrics>,
}

/// Named random streams derived from one seed.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let tag = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag);
    rng.set_stream(tag);
    rng
}

fn epoch_windows(dataset: &Dataset, len: usize, rng: &mut impl Rng) -> Vec<Window> {
    let mut out = Vec::new();
    for (traj, t) in dataset.trajectories.iter().enumerate() {
        if t.len() < len {
            continue;
        }
        let offset = rng.gen_range(0..=(t.len() - len).min(len - 1));
        let mut start = offset;
        while start + len <= t.len() {
            out.push(Window { traj, start });
            start += len;
        }
    }
    out.shuffle(rng);
    out
}

fn mse_of<S: Scalar>(sess: &Session<'_, S>, terms: &ElboTerms, batch: &BatchVars, m: usize) -> Option<f64> {
    // recon = −½ Σ err² − N·d/2·ln2π per sequence; invert to mean sq. error.
    let r = terms.recon.get(m).copied().flatten()?;
    let per_seq = sess.tape.value(r).item().as_f64();
    let numel = sess.tape.value(batch.observations[m]).numel() as f64;
    let per_seq_elems = numel / batch.size as f64;
    Some((-per_seq - per_seq_elems * crate::distributions::HALF_LN_TWO_PI) * 2.0 / per_seq_elems)
}

/// Trains a freshly initialized model on `dataset`. Dense modalities are
/// standardized with statistics of `dataset`. Writes one JSON line per epoch
/// to `metrics_path` when given.
pub fn train_run(
    model_config: &ModelConfig,
    dataset: &Dataset,
    config: &TrainingConfig,
    metrics_path: Option<&Path>,
    progress: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.trajectories.is_empty() {
        return Err(Error::EmptyDataset("training set has no trajectories".into()));
    }
    let mut model_config = model_config.clone();
    fit_normalization(dataset, &mut model_config.modalities)?;
    let model: Mrssm<f32> = Mrssm::new(model_config, &mut substream(config.seed, "init"))?;
    train_from(model, dataset, config, metrics_path, progress)
}

/// Continues training `model` as configured; its modality normalization is
/// used unchanged.
pub fn train_from(
    mut model: Mrssm<f32>,
    dataset: &Dataset,
    config: &TrainingConfig,
    metrics_path: Option<&Path>,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.trajectories.is_empty() {
        return Err(Error::EmptyDataset("training set has no trajectories".into()));
    }
    let want_fusion = if config.elbo == ElboVariant::Concat { Fusion::Concat } else { Fusion::Poe };
    if model.config().fusion != want_fusion {
        return Err(Error::Config(format!("ELBO `{:?}` needs fusion `{want_fusion:?}`", config.elbo)));
    }
    let mut data_rng = substream(config.seed, "batches");
    let mut noise_rng = substream(config.seed, "noise");
    let mut subset_rng = substream(config.seed, "subsets");
    let mut optimizer = Adam::new(model.params(), config.learning_rate);
    let mut log = match metrics_path {
        Some(p) => Some(File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let n_modalities = model.config().modalities.len();
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        optimizer.set_learning_rate(config.learning_rate_at(epoch));
        let windows = epoch_windows(dataset, config.sequence_length, &mut data_rng);
        if windows.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "no trajectory is at least {} steps long",
                config.sequence_length
            )));
        }
        let (mut loss_sum, mut kl_sum, mut norm_sum) = (0.0, 0.0, 0.0);
        let mut recon_sum = vec![0.0; n_modalities];
        let mut batches = 0usize;
        for chunk in windows.chunks(config.batch_size) {
            let batch: Batch<f32> =
                Batch::from_windows(dataset, model.config(), chunk, config.sequence_length, &mut noise_rng)?;
            let schedule = match config.elbo {
                ElboVariant::Concat => SubsetSchedule(vec![Subset::full(n_modalities)]),
                _ => sample_subsets(n_modalities, config.subsets_per_batch, &mut subset_rng)?,
            };
            let (mut grads, loss, kl_value, recon) = {
                let mut sess = model.session(true);
                let mut bv = BatchVars::record(&mut sess, &batch)?;
                let objective = batch_objective(&mut sess, &mut bv, config.elbo, &schedule, config.beta)?;
                let loss = sess.tape.value(objective.loss).item().as_f64();
                if !loss.is_finite() {
                    let culprit = sess.describe_first_non_finite().unwrap_or_else(|| "unknown".into());
                    return Err(Error::NonFinite(format!(
                        "loss at epoch {epoch}, batch {}; first non-finite tensor: {culprit}",
                        batches + 1
                    )));
                }
                let kl_value = sess.tape.value(objective.full.kl).item().as_f64();
                let recon: Vec<f64> =
                    (0..n_modalities).map(|m| mse_of(&sess, &objective.full, &bv, m).unwrap_or(f64::NAN)).collect();
                (sess.gradients(objective.loss)?, loss, kl_value, recon)
            };
            if let Some(name) = grads.first_non_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient at epoch {epoch}, batch {}; first non-finite tensor: gradient of `{name}`",
                    batches + 1
                )));
            }
            let norm = clip_global_norm(&mut grads, config.grad_clip_norm);
            optimizer.update(model.params_mut(), &grads);
            if let Some(name) = model.params().first_non_finite() {
                return Err(Error::NonFinite(format!("parameter `{name}` after epoch {epoch}, batch {}", batches + 1)));
            }
            loss_sum += loss;
            kl_sum += kl_value;
            norm_sum += norm;
            for (acc, r) in recon_sum.iter_mut().zip(&recon) {
                *acc += r;
            }
            batches += 1;
        }
        let nb = batches as f64;
        let recon = model
            .config()
            .modalities
            .iter()
            .zip(&recon_sum)
            .map(|(s, r)| (format!("recon_{}", s.name), r / nb))
            .collect();
        let record = EpochMetrics {
            epoch,
            loss: loss_sum / nb,
            kl: kl_sum / nb,
            recon,
            grad_norm: norm_sum / nb,
            batches,
        };
        if let Some(f) = log.as_mut() {
            let mut line = serde_json::to_string(&record).expect("metrics serialize");
            line.push('\n');
            f.write_all(line.as_bytes()).map_err(|e| Error::io(metrics_path.expect("log open"), e))?;
        }
        progress(&record);
        metrics.push(record);
    }
    Ok(TrainOutcome { model, metrics })
}

#[cfg(test)]
mod tests;
