//! The multimodal recurrent state-space model.
//!
//! A gated recurrent cell carries the deterministic state `h`; a prior head
//! maps `h` to a Gaussian over the stochastic state `s`. With product-of-experts
//! fusion the posterior is the prior times one Gaussian expert per present
//! modality, each expert seeing only its own current observation. The
//! concatenation baseline instead maps all modality embeddings plus `h` to the
//! posterior and cannot run with a modality missing. Decoders see `[h, s]`
//! and have unit output stddev in standardized units.

mod config;
mod observation;
mod params;
mod session;

use rand::Rng;

use crate::diffmath::{relative_error, CoordError, DiffError, Scalar, Tensor, Var};
use crate::distributions::{DiagGaussian, GaussianVar};
use crate::error::{Error, Result};

pub use config::{Fusion, ModalityKind, ModalitySpec, ModelConfig};
pub use observation::{Action, ObservationSet, Subset};
pub use params::ModelParams;
pub use session::{Evidence, LatentVars, Session};

/// Raw sensor units to the standardized units the networks see.
pub fn normalize<S: Scalar>(spec: &ModalitySpec, raw: &Tensor<S>) -> Tensor<S> {
    if spec.offset == 0.0 && spec.scale == 1.0 {
        return raw.clone();
    }
    let (o, s) = (spec.offset, spec.scale);
    raw.map(|v| S::from_f64_lossy((v.as_f64() - o) / s))
}

pub fn denormalize<S: Scalar>(spec: &ModalitySpec, value: &Tensor<S>) -> Tensor<S> {
    if spec.offset == 0.0 && spec.scale == 1.0 {
        return value.clone();
    }
    let (o, s) = (spec.offset, spec.scale);
    value.map(|v| S::from_f64_lossy(v.as_f64() * s + o))
}

/// Deterministic and stochastic state of one sequence at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState<S: Scalar = f32> {
    pub h: Tensor<S>,
    pub s: Tensor<S>,
    pub prior: DiagGaussian<S>,
    pub posterior: DiagGaussian<S>,
}

/// How open-loop prediction chooses the next latent.
#[derive(Clone, Debug, PartialEq)]
pub enum Propagation {
    /// Prior mean; deterministic.
    Mean,
    /// Reparameterized prior samples, one standard-normal vector per step.
    Sampled(Vec<Vec<f64>>),
}

/// One step of open-loop prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<S: Scalar = f32> {
    pub prior: DiagGaussian<S>,
    /// Decoded means in raw sensor units, for the requested modalities.
    pub decoded: Vec<Option<Tensor<S>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mrssm<S: Scalar = f32> {
    config: ModelConfig,
    params: ModelParams<S>,
}

fn row<S: Scalar>(values: &[f64]) -> Tensor<S> {
    Tensor::from_parts(vec![1, values.len()], values.iter().map(|&v| S::from_f64_lossy(v)).collect())
}

fn batch1<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    Tensor::from_parts(shape, t.data().to_vec())
}

fn unbatch<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    Tensor::from_parts(t.shape()[1..].to_vec(), t.data().to_vec())
}

fn unbatch_gaussian<S: Scalar>(g: DiagGaussian<S>) -> DiagGaussian<S> {
    DiagGaussian::from_parts(unbatch(g.mean()), unbatch(g.stddev()))
}

impl<S: Scalar> Mrssm<S> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, rng);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams<S>) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<S> {
        &mut self.params
    }

    pub fn modalities(&self) -> &[ModalitySpec] {
        &self.config.modalities
    }

    pub fn cast<T: Scalar>(&self) -> Mrssm<T> {
        Mrssm { config: self.config.clone(), params: self.params.cast() }
    }

    pub fn session(&self, trainable: bool) -> Session<'_, S> {
        Session::new(&self.config, &self.params, trainable)
    }

    fn check_len(context: &'static str, v: &[f64], expected: usize) -> Result<()> {
        if v.len() != expected {
            return Err(Error::Dimension { context, expected, actual: v.len() });
        }
        Ok(())
    }

    fn check_vec(context: &'static str, v: &Tensor<S>, expected: usize) -> Result<()> {
        if v.shape() != [expected] {
            return Err(Error::Dimension { context, expected, actual: v.numel() });
        }
        Ok(())
    }

    pub fn initial_state(&self, noise: &[f64]) -> Result<LatentState<S>> {
        Self::check_len("initial_state noise", noise, self.config.stoch_dim)?;
        let d = self.config.stoch_dim;
        Ok(LatentState {
            h: Tensor::zeros(&[self.config.deter_dim]),
            s: Tensor::from_vec(noise.iter().map(|&v| S::from_f64_lossy(v)).collect()),
            prior: DiagGaussian::standard(d),
            posterior: DiagGaussian::standard(d),
        })
    }

    pub fn deterministic_step(&self, h_prev: &Tensor<S>, s_prev: &Tensor<S>, a_prev: Action) -> Result<Tensor<S>> {
        Self::check_vec("deterministic_step h", h_prev, self.config.deter_dim)?;
        Self::check_vec("deterministic_step s", s_prev, self.config.stoch_dim)?;
        let mut sess = self.session(false);
        let h = sess.constant(batch1(h_prev));
        let s = sess.constant(batch1(s_prev));
        let a = sess.constant(row(&a_prev.to_vec()));
        let out = sess.deterministic_step(h, s, a)?;
        Ok(unbatch(sess.tape.value(out)))
    }

    pub fn prior_head(&self, h: &Tensor<S>) -> Result<DiagGaussian<S>> {
        Self::check_vec("prior_head h", h, self.config.deter_dim)?;
        let mut sess = self.session(false);
        let hv = sess.constant(batch1(h));
        let g = sess.prior_head(hv)?;
        Ok(unbatch_gaussian(DiagGaussian::read(&sess.tape, &g)))
    }

    /// Expert distribution of modality `name` from a raw observation.
    pub fn encode_expert(&self, name: &str, obs: &Tensor<S>) -> Result<DiagGaussian<S>> {
        let i = self.config.modality_index(name)?;
        let mut sess = self.session(false);
        let o = sess.constant(batch1(&normalize(&self.config.modalities[i], obs)));
        let g = sess.encode_expert(i, o)?;
        Ok(unbatch_gaussian(DiagGaussian::read(&sess.tape, &g)))
    }

    /// Observation distribution of modality `name`: decoded mean, unit
    /// stddev, in standardized units.
    pub fn decode(&self, name: &str, h: &Tensor<S>, s: &Tensor<S>) -> Result<DiagGaussian<S>> {
        let i = self.config.modality_index(name)?;
        Self::check_vec("decode h", h, self.config.deter_dim)?;
        Self::check_vec("decode s", s, self.config.stoch_dim)?;
        let mut sess = self.session(false);
        let (hv, sv) = (sess.constant(batch1(h)), sess.constant(batch1(s)));
        let mean = sess.decode(i, hv, sv)?;
        let g = GaussianVar::unit(&mut sess.tape, mean);
        Ok(unbatch_gaussian(DiagGaussian::read(&sess.tape, &g)))
    }

    /// Concat-baseline posterior; every modality must be present.
    pub fn encode_concat(&self, obs: &ObservationSet<S>, h: &Tensor<S>) -> Result<DiagGaussian<S>> {
        Self::check_vec("encode_concat h", h, self.config.deter_dim)?;
        let mut sess = self.session(false);
        let embeddings = self.concat_embeddings(&mut sess, obs)?;
        let hv = sess.constant(batch1(h));
        let g = sess.concat_posterior(&embeddings, hv)?;
        Ok(unbatch_gaussian(DiagGaussian::read(&sess.tape, &g)))
    }

    fn concat_embeddings(&self, sess: &mut Session<'_, S>, obs: &ObservationSet<S>) -> Result<Vec<Var>> {
        if obs.len() != self.config.modalities.len() {
            return Err(Error::Dimension {
                context: "observation set",
                expected: self.config.modalities.len(),
                actual: obs.len(),
            });
        }
        let mut out = Vec::with_capacity(obs.len());
        for (i, spec) in self.config.modalities.iter().enumerate() {
            let value = obs.get(i).ok_or_else(|| Error::MissingModality(spec.name.clone()))?;
            let v = sess.constant(batch1(&normalize(spec, value)));
            out.push(sess.embed_concat(i, v)?);
        }
        Ok(out)
    }

    /// Transition, prior, fusion with the present modalities, and a
    /// reparameterized posterior sample with the given noise.
    pub fn filter_step(
        &self,
        prev: &LatentState<S>,
        a_prev: Action,
        obs: &ObservationSet<S>,
        noise: &[f64],
    ) -> Result<LatentState<S>> {
        Self::check_len("filter_step noise", noise, self.config.stoch_dim)?;
        Self::check_vec("filter_step h", &prev.h, self.config.deter_dim)?;
        Self::check_vec("filter_step s", &prev.s, self.config.stoch_dim)?;
        if obs.len() != self.config.modalities.len() {
            return Err(Error::Dimension {
                context: "observation set",
                expected: self.config.modalities.len(),
                actual: obs.len(),
            });
        }
        let mut sess = self.session(false);
        let prev_vars = LatentVars {
            h: sess.constant(batch1(&prev.h)),
            s: sess.constant(batch1(&prev.s)),
            prior: batch_record(&mut sess, &prev.prior),
            posterior: batch_record(&mut sess, &prev.posterior),
        };
        let a = sess.constant(row(&a_prev.to_vec()));
        let n = sess.constant(row(noise));
        let next = match self.config.fusion {
            Fusion::Poe => {
                let mut experts = Vec::new();
                for (i, spec) in self.config.modalities.iter().enumerate() {
                    if let Some(value) = obs.get(i) {
                        let v = sess.constant(batch1(&normalize(spec, value)));
                        experts.push(sess.encode_expert(i, v)?);
                    }
                }
                sess.filter_step(&prev_vars, a, Evidence::Experts(&experts), n)?
            }
            Fusion::Concat => {
                let embeddings = self.concat_embeddings(&mut sess, obs)?;
                sess.filter_step(&prev_vars, a, Evidence::Concat(&embeddings), n)?
            }
        };
        Ok(read_state(&sess, &next))
    }

    /// Applies [`Mrssm::filter_step`] along a sequence. `prev_actions[t]` is
    /// the action taken just before `observations[t]` was recorded.
    pub fn rollout_filter(
        &self,
        init: &LatentState<S>,
        prev_actions: &[Action],
        observations: &[ObservationSet<S>],
        noises: &[Vec<f64>],
    ) -> Result<Vec<LatentState<S>>> {
        let t = prev_actions.len();
        if observations.len() != t || noises.len() != t {
            return Err(Error::InvalidArgument(format!(
                "sequence lengths differ: {} actions, {} observations, {} noise draws",
                t,
                observations.len(),
                noises.len()
            )));
        }
        let mut out = Vec::with_capacity(t);
        let mut state = init.clone();
        for ((a, o), n) in prev_actions.iter().zip(observations).zip(noises) {
            state = self.filter_step(&state, *a, o, n)?;
            out.push(state.clone());
        }
        Ok(out)
    }

    /// Rolls the transition forward under `future_actions` without
    /// observations, decoding the modalities in `decode` at every step.
    pub fn predict_open_loop(
        &self,
        state: &LatentState<S>,
        future_actions: &[Action],
        propagation: &Propagation,
        decode: Subset,
    ) -> Result<Vec<Prediction<S>>> {
        if future_actions.is_empty() {
            return Err(Error::InvalidArgument("prediction horizon must be at least 1".into()));
        }
        if let Propagation::Sampled(noises) = propagation {
            if noises.len() != future_actions.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} noise draws for a horizon of {}",
                    noises.len(),
                    future_actions.len()
                )));
            }
            for n in noises {
                Self::check_len("predict_open_loop noise", n, self.config.stoch_dim)?;
            }
        }
        let mut sess = self.session(false);
        let mut h = sess.constant(batch1(&state.h));
        let mut s = sess.constant(batch1(&state.s));
        let mut out = Vec::with_capacity(future_actions.len());
        for (k, a) in future_actions.iter().enumerate() {
            let av = sess.constant(row(&a.to_vec()));
            let noise = match propagation {
                Propagation::Mean => None,
                Propagation::Sampled(n) => Some(sess.constant(row(&n[k]))),
            };
            let step = sess.predict_step(h, s, av, noise)?;
            let mut decoded = vec![None; self.config.modalities.len()];
            for i in decode.iter().filter(|&i| i < self.config.modalities.len()) {
                let mean = sess.decode(i, step.h, step.s)?;
                let raw = denormalize(&self.config.modalities[i], &unbatch(sess.tape.value(mean)));
                decoded[i] = Some(raw);
            }
            out.push(Prediction { prior: unbatch_gaussian(DiagGaussian::read(&sess.tape, &step.prior)), decoded });
            h = step.h;
            s = step.s;
        }
        Ok(out)
    }
}

fn batch_record<S: Scalar>(sess: &mut Session<'_, S>, g: &DiagGaussian<S>) -> GaussianVar {
    GaussianVar { mean: sess.constant(batch1(g.mean())), stddev: sess.constant(batch1(g.stddev())) }
}

fn read_state<S: Scalar>(sess: &Session<'_, S>, v: &LatentVars) -> LatentState<S> {
    LatentState {
        h: unbatch(sess.tape.value(v.h)),
        s: unbatch(sess.tape.value(v.s)),
        prior: unbatch_gaussian(DiagGaussian::read(&sess.tape, &v.prior)),
        posterior: unbatch_gaussian(DiagGaussian::read(&sess.tape, &v.posterior)),
    }
}

/// Worst finite-difference mismatch of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub worst: CoordError,
}

/// Compares tape gradients of the scalar `loss` with central differences,
/// perturbing up to `per_tensor` randomly chosen entries of every parameter
/// tensor whose name starts with one of `prefixes` (all tensors when empty).
pub fn param_grad_check<F>(
    model: &Mrssm<f64>,
    loss: F,
    prefixes: &[&str],
    per_tensor: usize,
    step: f64,
    rng: &mut impl Rng,
) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Session<'_, f64>) -> Result<Var>,
{
    let eval = |params: &ModelParams<f64>| -> Result<f64> {
        let mut sess = Session::new(&model.config, params, false);
        let out = loss(&mut sess)?;
        let v = sess.tape.value(out);
        if v.numel() != 1 {
            return Err(DiffError::NonScalar(v.shape().to_vec()).into());
        }
        Ok(v.item())
    };
    let mut sess = model.session(true);
    let out = loss(&mut sess)?;
    let analytic = sess.gradients(out)?;
    drop(sess);

    let mut work = model.params.clone();
    let mut report = Vec::new();
    let names: Vec<String> = model.params.names().cloned().collect();
    for name in names {
        if !prefixes.is_empty() && !prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        let n = model.params.get(&name).map_or(0, Tensor::numel);
        let mut indices: Vec<usize> = (0..n).collect();
        if n > per_tensor {
            indices = rand::seq::index::sample(rng, n, per_tensor).into_vec();
        }
        let mut worst: Option<CoordError> = None;
        for j in indices {
            let orig = model.params.get(&name).expect("name from params").data()[j];
            work.get_mut(&name).expect("same layout").data_mut()[j] = orig + step;
            let hi = eval(&work)?;
            work.get_mut(&name).expect("same layout").data_mut()[j] = orig - step;
            let lo = eval(&work)?;
            work.get_mut(&name).expect("same layout").data_mut()[j] = orig;
            let numeric = (hi - lo) / (2.0 * step);
            let a = analytic.get(&name).expect("gradient per param").data()[j];
            let error = relative_error(a, numeric);
            if worst.is_none_or(|w| error > w.error) {
                worst = Some(CoordError { index: j, analytic: a, numeric, error });
            }
        }
        if let Some(worst) = worst {
            report.push(ParamCheck { name, worst });
        }
    }
    Ok(report)
}

impl Mrssm<f32> {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.params.save(&self.config, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (config, params) = ModelParams::load(path)?;
        Ok(Self { config, params })
    }
}

#[cfg(test)]
mod tests;
