//! Networks of the model expressed on a [`Tape`].
//!
//! Every tensor carries a leading batch dimension. Observations entering a
//! session are already standardized (see [`super::normalize`]).

use std::collections::HashMap;

use crate::diffmath::{Scalar, Tape, Tensor, Var};
use crate::distributions::{poe_fuse, rsample, GaussianVar};
use crate::error::{Error, Result};

use super::config::{Fusion, ModalityKind, ModelConfig};
use super::params::ModelParams;

/// Latent state of a batch at one timestep, as tape values.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub h: Var,
    pub s: Var,
    pub prior: GaussianVar,
    pub posterior: GaussianVar,
}

/// What the posterior at one timestep is built from.
#[derive(Clone, Copy, Debug)]
pub enum Evidence<'a> {
    /// Gaussian experts of the present modalities (possibly none).
    Experts(&'a [GaussianVar]),
    /// Embeddings of every modality, in config order (concat baseline).
    Concat(&'a [Var]),
}

/// A tape with the model's parameters recorded on it.
pub struct Session<'m, S: Scalar = f32> {
    pub tape: Tape<S>,
    config: &'m ModelConfig,
    vars: HashMap<String, Var>,
    names: Vec<(String, Var)>,
}

impl<'m, S: Scalar> Session<'m, S> {
    /// Records `params`; with `trainable` they become differentiable inputs.
    pub fn new(config: &'m ModelConfig, params: &ModelParams<S>, trainable: bool) -> Self {
        let mut tape = Tape::new();
        let mut vars = HashMap::new();
        let mut names = Vec::new();
        for (name, t) in params.iter() {
            let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
            vars.insert(name.clone(), v);
            names.push((name.clone(), v));
        }
        Self { tape, config, vars, names }
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    pub fn param(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter `{name}` not recorded"))
    }

    /// Gradient of `loss` for every parameter, keyed like the params.
    pub fn gradients(&self, loss: Var) -> Result<ModelParams<S>> {
        let mut grads = self.tape.backward(loss)?;
        let mut out = ModelParams::<S>::default();
        for (name, v) in &self.names {
            let g = grads.take(*v).ok_or_else(|| Error::InvalidArgument("session is not trainable".into()))?;
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    /// Names the first tape value holding a NaN or Inf: the parameter name
    /// when it is a parameter, otherwise the producing operation.
    pub fn describe_first_non_finite(&self) -> Option<String> {
        let (index, op, shape) = self.tape.first_non_finite()?;
        Some(match self.names.iter().find(|(_, v)| v.index() == index) {
            Some((name, _)) => format!("parameter `{name}` (shape {shape:?})"),
            None => format!("tape value #{index} produced by `{op}` (shape {shape:?})"),
        })
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.tape.constant(t)
    }

    fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let (w, b) = (self.param(&format!("{prefix}.w")), self.param(&format!("{prefix}.b")));
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add(y, b)?)
    }

    fn dense_net(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let y = self.linear(&format!("{prefix}.l1"), x)?;
        let y = self.tape.tanh(y);
        let y = self.linear(&format!("{prefix}.l2"), y)?;
        let y = self.tape.tanh(y);
        self.linear(&format!("{prefix}.out"), y)
    }

    fn conv_net(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let mut y = x;
        for layer in ["conv1", "conv2", "conv3"] {
            let w = self.param(&format!("{prefix}.{layer}.w"));
            let b = self.param(&format!("{prefix}.{layer}.b"));
            y = self.tape.conv2d(y, w, 2, 1)?;
            y = self.tape.channel_bias(y, b)?;
            y = self.tape.tanh(y);
        }
        let shape = self.tape.shape(y).to_vec();
        let flat = self.tape.reshape(y, &[shape[0], shape[1] * shape[2] * shape[3]])?;
        self.linear(&format!("{prefix}.out"), flat)
    }

    fn deconv_net(&mut self, prefix: &str, z: Var, out_shape: &[usize]) -> Result<Var> {
        let batch = self.tape.shape(z)[0];
        let c3 = self.config.conv_channels[2];
        let (h, w) = (out_shape[1], out_shape[2]);
        let y = self.linear(&format!("{prefix}.fc"), z)?;
        let y = self.tape.tanh(y);
        let mut y = self.tape.reshape(y, &[batch, c3, h / 8, w / 8])?;
        let sizes = [(h / 4, w / 4), (h / 2, w / 2), (h, w)];
        for (i, layer) in ["deconv1", "deconv2", "deconv3"].iter().enumerate() {
            let wv = self.param(&format!("{prefix}.{layer}.w"));
            let bv = self.param(&format!("{prefix}.{layer}.b"));
            y = self.tape.conv_transpose2d(y, wv, 2, 1, sizes[i])?;
            y = self.tape.channel_bias(y, bv)?;
            if i < 2 {
                y = self.tape.tanh(y);
            }
        }
        Ok(y)
    }

    fn check_rows(&self, context: &'static str, v: Var, width: usize) -> Result<()> {
        let s = self.tape.shape(v);
        if s.len() != 2 || s[1] != width {
            return Err(Error::Dimension { context, expected: width, actual: s.last().copied().unwrap_or(0) });
        }
        Ok(())
    }

    /// Gated recurrent update of `h` from an embedding of `[s, a]`.
    pub fn deterministic_step(&mut self, h_prev: Var, s_prev: Var, a_prev: Var) -> Result<Var> {
        let c = self.config;
        self.check_rows("deterministic_step h", h_prev, c.deter_dim)?;
        self.check_rows("deterministic_step s", s_prev, c.stoch_dim)?;
        self.check_rows("deterministic_step a", a_prev, c.action_dim)?;
        let sa = self.tape.concat(&[s_prev, a_prev], 1)?;
        let x = self.linear("transition.embed", sa)?;
        let x = self.tape.tanh(x);
        let gate = |sess: &mut Self, g: &str, hin: Var| -> Result<Var> {
            let wx = sess.param(&format!("transition.gru.wx_{g}"));
            let wh = sess.param(&format!("transition.gru.wh_{g}"));
            let b = sess.param(&format!("transition.gru.b_{g}"));
            let xa = sess.tape.matmul(x, wx)?;
            let xa = sess.tape.add(xa, b)?;
            let ha = sess.tape.matmul(hin, wh)?;
            Ok(sess.tape.add(xa, ha)?)
        };
        let z = gate(self, "z", h_prev)?;
        let z = self.tape.sigmoid(z);
        let r = gate(self, "r", h_prev)?;
        let r = self.tape.sigmoid(r);
        // candidate: tanh(W x + b + U (r ⊙ h))
        let rh = self.tape.mul(r, h_prev)?;
        let n = gate(self, "n", rh)?;
        let n = self.tape.tanh(n);
        // h = (1 - z) ⊙ n + z ⊙ h_prev = n + z ⊙ (h_prev - n)
        let diff = self.tape.sub(h_prev, n)?;
        let zd = self.tape.mul(z, diff)?;
        Ok(self.tape.add(n, zd)?)
    }

    pub fn prior_head(&mut self, h: Var) -> Result<GaussianVar> {
        self.check_rows("prior_head", h, self.config.deter_dim)?;
        let y = self.linear("prior.l1", h)?;
        let y = self.tape.tanh(y);
        let y = self.linear("prior.l2", y)?;
        GaussianVar::from_head(&mut self.tape, y)
    }

    fn check_obs(&self, index: usize, obs: Var) -> Result<()> {
        let spec = &self.config.modalities[index];
        let s = self.tape.shape(obs);
        if s.len() != spec.shape.len() + 1 || s[1..] != spec.shape[..] {
            return Err(Error::InvalidArgument(format!(
                "observation `{}` has shape {:?}, expected [batch, {:?}]",
                spec.name, s, spec.shape
            )));
        }
        Ok(())
    }

    /// Gaussian expert of modality `index` from its current observation alone.
    pub fn encode_expert(&mut self, index: usize, obs: Var) -> Result<GaussianVar> {
        if self.config.fusion != Fusion::Poe {
            return Err(Error::InvalidArgument("encode_expert needs a product-of-experts model".into()));
        }
        self.check_obs(index, obs)?;
        let spec = &self.config.modalities[index];
        let prefix = format!("enc.{}", spec.name);
        let y = match spec.kind {
            ModalityKind::Dense => self.dense_net(&prefix, obs)?,
            ModalityKind::Image => self.conv_net(&prefix, obs)?,
        };
        GaussianVar::from_head(&mut self.tape, y)
    }

    /// Embedding of modality `index` for the concatenation baseline.
    pub fn embed_concat(&mut self, index: usize, obs: Var) -> Result<Var> {
        if self.config.fusion != Fusion::Concat {
            return Err(Error::InvalidArgument("embed_concat needs a concat-fusion model".into()));
        }
        self.check_obs(index, obs)?;
        let spec = &self.config.modalities[index];
        let prefix = format!("concat.emb.{}", spec.name);
        let y = match spec.kind {
            ModalityKind::Dense => self.dense_net(&prefix, obs)?,
            ModalityKind::Image => self.conv_net(&prefix, obs)?,
        };
        Ok(self.tape.tanh(y))
    }

    /// Concat-baseline posterior from every modality's embedding and `h`.
    pub fn concat_posterior(&mut self, embeddings: &[Var], h: Var) -> Result<GaussianVar> {
        if embeddings.len() != self.config.modalities.len() {
            return Err(Error::Dimension {
                context: "concat_posterior embeddings",
                expected: self.config.modalities.len(),
                actual: embeddings.len(),
            });
        }
        let mut parts = embeddings.to_vec();
        parts.push(h);
        let x = self.tape.concat(&parts, 1)?;
        let y = self.linear("concat.head.l1", x)?;
        let y = self.tape.tanh(y);
        let y = self.linear("concat.head.l2", y)?;
        GaussianVar::from_head(&mut self.tape, y)
    }

    /// Decoded mean of modality `index` given `h` and `s` (standardized units).
    pub fn decode(&mut self, index: usize, h: Var, s: Var) -> Result<Var> {
        self.check_rows("decode h", h, self.config.deter_dim)?;
        self.check_rows("decode s", s, self.config.stoch_dim)?;
        let z = self.tape.concat(&[h, s], 1)?;
        let spec = &self.config.modalities[index];
        let prefix = format!("dec.{}", spec.name);
        match spec.kind {
            ModalityKind::Dense => self.dense_net(&prefix, z),
            ModalityKind::Image => {
                let shape = spec.shape.clone();
                self.deconv_net(&prefix, z, &shape)
            }
        }
    }

    /// Zero `h`, `s` equal to the given standard-normal draw, and `N(0, I)`
    /// as both prior and posterior.
    pub fn initial_state(&mut self, noise: Var) -> Result<LatentVars> {
        self.check_rows("initial_state noise", noise, self.config.stoch_dim)?;
        let batch = self.tape.shape(noise)[0];
        let h = self.tape.constant(Tensor::zeros(&[batch, self.config.deter_dim]));
        let shape = [batch, self.config.stoch_dim];
        let g = GaussianVar {
            mean: self.tape.constant(Tensor::zeros(&shape)),
            stddev: self.tape.constant(Tensor::full(&shape, S::one())),
        };
        Ok(LatentVars { h, s: noise, prior: g, posterior: g })
    }

    /// One filtering step: transition, prior, fusion with the evidence, sample.
    pub fn filter_step(
        &mut self,
        prev: &LatentVars,
        a_prev: Var,
        evidence: Evidence<'_>,
        noise: Var,
    ) -> Result<LatentVars> {
        let h = self.deterministic_step(prev.h, prev.s, a_prev)?;
        let prior = self.prior_head(h)?;
        let posterior = match evidence {
            Evidence::Experts(experts) => {
                let mut all = Vec::with_capacity(experts.len() + 1);
                all.push(prior);
                all.extend_from_slice(experts);
                poe_fuse(&mut self.tape, &all)?
            }
            Evidence::Concat(embeddings) => self.concat_posterior(embeddings, h)?,
        };
        let s = rsample(&mut self.tape, &posterior, noise)?;
        Ok(LatentVars { h, s, prior, posterior })
    }

    /// One open-loop step: transition then prior; the next latent is the
    /// prior mean, or a sample when `noise` is given.
    pub fn predict_step(&mut self, prev_h: Var, prev_s: Var, action: Var, noise: Option<Var>) -> Result<LatentVars> {
        let h = self.deterministic_step(prev_h, prev_s, action)?;
        let prior = self.prior_head(h)?;
        let s = match noise {
            Some(n) => rsample(&mut self.tape, &prior, n)?,
            None => prior.mean,
        };
        Ok(LatentVars { h, s, prior, posterior: prior })
    }
}
