//! Diagonal Gaussians: product-of-experts fusion, KL divergence,
//! reparameterized sampling and log-likelihood.
//!
//! [`GaussianVar`] lives on a [`Tape`] so every operation is differentiable;
//! tensors may carry a leading batch dimension (`[B, d]`), in which case
//! reductions over the event dimension return `[B]`. [`DiagGaussian`] is the
//! plain-value counterpart and evaluates through the same code.

use crate::diffmath::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Lower bound added to every softplus-parameterized standard deviation.
pub const STDDEV_FLOOR: f64 = 1e-4;

/// `0.5 * ln(2π)`
pub const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_8;

/// A diagonal Gaussian whose parameters are tape values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GaussianVar {
    pub mean: Var,
    pub stddev: Var,
}

impl GaussianVar {
    /// Builds a Gaussian from an unconstrained mean and a raw scale,
    /// `stddev = softplus(raw) + 1e-4`.
    pub fn from_raw<S: Scalar>(tape: &mut Tape<S>, mean: Var, raw_stddev: Var) -> Result<Self> {
        check_same_shape(tape, "from_raw", mean, raw_stddev)?;
        let sp = tape.softplus(raw_stddev);
        let stddev = tape.shift(sp, STDDEV_FLOOR);
        Ok(Self { mean, stddev })
    }

    /// Splits the last axis of `params` (`[.., 2d]`) into mean and raw stddev.
    pub fn from_head<S: Scalar>(tape: &mut Tape<S>, params: Var) -> Result<Self> {
        let shape = tape.shape(params).to_vec();
        let axis = shape.len() - 1;
        let width = shape[axis];
        if !width.is_multiple_of(2) {
            return Err(Error::Dimension { context: "gaussian head", expected: width + 1, actual: width });
        }
        let mean = tape.slice(params, axis, 0, width / 2)?;
        let raw = tape.slice(params, axis, width / 2, width / 2)?;
        Self::from_raw(tape, mean, raw)
    }

    /// Unit-stddev Gaussian around `mean`.
    pub fn unit<S: Scalar>(tape: &mut Tape<S>, mean: Var) -> Self {
        let ones = Tensor::full(tape.shape(mean), S::one());
        let stddev = tape.constant(ones);
        Self { mean, stddev }
    }

    pub fn dim<S: Scalar>(&self, tape: &Tape<S>) -> usize {
        *tape.shape(self.mean).last().unwrap_or(&1)
    }
}

fn check_same_shape<S: Scalar>(tape: &Tape<S>, context: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::Dimension {
            context,
            expected: sa.iter().product(),
            actual: sb.iter().product(),
        });
    }
    Ok(())
}

/// Product of diagonal-Gaussian experts in closed form.
///
/// Per dimension the precisions add, `τ = Σ 1/σᵢ²`, and the mean is the
/// precision-weighted average `μ = (Σ μᵢ/σᵢ²) / τ`. A single expert is
/// returned unchanged.
pub fn poe_fuse<S: Scalar>(tape: &mut Tape<S>, experts: &[GaussianVar]) -> Result<GaussianVar> {
    let (first, rest) = experts.split_first().ok_or(Error::NoExperts)?;
    for e in rest {
        check_same_shape(tape, "poe_fuse", first.mean, e.mean)?;
        check_same_shape(tape, "poe_fuse", first.stddev, e.stddev)?;
    }
    check_same_shape(tape, "poe_fuse", first.mean, first.stddev)?;
    if rest.is_empty() {
        return Ok(*first);
    }
    let mut precision_sum = None;
    let mut weighted_sum = None;
    for e in experts {
        let var = tape.square(e.stddev);
        let precision = tape.recip(var);
        let weighted = tape.mul(e.mean, precision)?;
        precision_sum = Some(match precision_sum {
            None => precision,
            Some(acc) => tape.add(acc, precision)?,
        });
        weighted_sum = Some(match weighted_sum {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    let (tau, weighted) = (precision_sum.unwrap(), weighted_sum.unwrap());
    let mean = tape.div(weighted, tau)?;
    let variance = tape.recip(tau);
    let stddev = tape.sqrt(variance);
    Ok(GaussianVar { mean, stddev })
}

/// `KL(q || p)` summed over the last axis.
pub fn kl<S: Scalar>(tape: &mut Tape<S>, q: &GaussianVar, p: &GaussianVar) -> Result<Var> {
    check_same_shape(tape, "kl", q.mean, p.mean)?;
    check_same_shape(tape, "kl", q.stddev, p.stddev)?;
    // ln(σp/σq) + (σq² + (μq-μp)²) / (2σp²) - 1/2
    let log_ratio = {
        let lp = tape.log(p.stddev);
        let lq = tape.log(q.stddev);
        tape.sub(lp, lq)?
    };
    let vq = tape.square(q.stddev);
    let diff = tape.sub(q.mean, p.mean)?;
    let d2 = tape.square(diff);
    let num = tape.add(vq, d2)?;
    let vp = tape.square(p.stddev);
    let vp2 = tape.scale(vp, 2.0);
    let frac = tape.div(num, vp2)?;
    let terms = tape.add(log_ratio, frac)?;
    let terms = tape.shift(terms, -0.5);
    Ok(tape.sum_last(terms)?)
}

/// Reparameterized sample `mean + stddev ⊙ noise`; `noise` is a constant.
pub fn rsample<S: Scalar>(tape: &mut Tape<S>, g: &GaussianVar, noise: Var) -> Result<Var> {
    check_same_shape(tape, "rsample", g.mean, noise)?;
    let scaled = tape.mul(g.stddev, noise)?;
    Ok(tape.add(g.mean, scaled)?)
}

/// Log-density summed over the last axis.
pub fn log_prob<S: Scalar>(tape: &mut Tape<S>, g: &GaussianVar, x: Var) -> Result<Var> {
    check_same_shape(tape, "log_prob", g.mean, x)?;
    let diff = tape.sub(x, g.mean)?;
    let z = tape.div(diff, g.stddev)?;
    let z2 = tape.square(z);
    let half = tape.scale(z2, -0.5);
    let log_sd = tape.log(g.stddev);
    let terms = tape.sub(half, log_sd)?;
    let terms = tape.shift(terms, -HALF_LN_TWO_PI);
    Ok(tape.sum_last(terms)?)
}

/// Log-density of a unit-stddev Gaussian, `-½‖x-μ‖² - (d/2) ln 2π` per row.
pub fn log_prob_unit<S: Scalar>(tape: &mut Tape<S>, mean: Var, x: Var) -> Result<Var> {
    check_same_shape(tape, "log_prob_unit", mean, x)?;
    let diff = tape.sub(x, mean)?;
    let d2 = tape.square(diff);
    let sq = tape.sum_last(d2)?;
    let d = *tape.shape(x).last().unwrap_or(&1) as f64;
    let half = tape.scale(sq, -0.5);
    Ok(tape.shift(half, -d * HALF_LN_TWO_PI))
}

/// A diagonal Gaussian held by value.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian<S: Scalar = f32> {
    mean: Tensor<S>,
    stddev: Tensor<S>,
}

impl<S: Scalar> DiagGaussian<S> {
    /// Stddev entries must be strictly positive.
    pub fn new(mean: Tensor<S>, stddev: Tensor<S>) -> Result<Self> {
        if mean.shape() != stddev.shape() {
            return Err(Error::Dimension {
                context: "DiagGaussian::new",
                expected: mean.numel(),
                actual: stddev.numel(),
            });
        }
        if stddev.data().iter().any(|&s| !(s > S::zero())) {
            return Err(Error::InvalidArgument("stddev must be strictly positive".into()));
        }
        Ok(Self { mean, stddev })
    }

    /// No validation; for values read back from a tape.
    pub(crate) fn from_parts(mean: Tensor<S>, stddev: Tensor<S>) -> Self {
        Self { mean, stddev }
    }

    pub fn from_vecs(mean: &[f64], stddev: &[f64]) -> Result<Self> {
        let conv = |v: &[f64]| Tensor::from_vec(v.iter().map(|&x| S::from_f64_lossy(x)).collect());
        Self::new(conv(mean), conv(stddev))
    }

    /// Applies the softplus-plus-floor transform to `raw_stddev`.
    pub fn from_raw(mean: Tensor<S>, raw_stddev: Tensor<S>) -> Result<Self> {
        let mut tape = Tape::new();
        let (m, r) = (tape.constant(mean), tape.constant(raw_stddev));
        let g = GaussianVar::from_raw(&mut tape, m, r)?;
        Ok(Self::read(&tape, &g))
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: Tensor::zeros(&[dim]), stddev: Tensor::full(&[dim], S::one()) }
    }

    /// Copies the current values of a tape-resident Gaussian.
    pub fn read(tape: &Tape<S>, g: &GaussianVar) -> Self {
        Self { mean: tape.value(g.mean).clone(), stddev: tape.value(g.stddev).clone() }
    }

    /// Records this Gaussian as constants on `tape`.
    pub fn record(&self, tape: &mut Tape<S>) -> GaussianVar {
        GaussianVar { mean: tape.constant(self.mean.clone()), stddev: tape.constant(self.stddev.clone()) }
    }

    pub fn mean(&self) -> &Tensor<S> {
        &self.mean
    }

    pub fn stddev(&self) -> &Tensor<S> {
        &self.stddev
    }

    pub fn dim(&self) -> usize {
        *self.mean.shape().last().unwrap_or(&1)
    }

    pub fn poe_fuse(experts: &[Self]) -> Result<Self> {
        let mut tape = Tape::new();
        let vars: Vec<GaussianVar> = experts.iter().map(|e| e.record(&mut tape)).collect();
        let fused = poe_fuse(&mut tape, &vars)?;
        Ok(Self::read(&tape, &fused))
    }

    pub fn kl(&self, p: &Self) -> Result<f64> {
        let mut tape = Tape::new();
        let (qv, pv) = (self.record(&mut tape), p.record(&mut tape));
        let k = kl(&mut tape, &qv, &pv)?;
        Ok(total(tape.value(k)))
    }

    pub fn rsample(&self, noise: &[f64]) -> Result<Tensor<S>> {
        if noise.len() != self.mean.numel() {
            return Err(Error::Dimension { context: "rsample", expected: self.mean.numel(), actual: noise.len() });
        }
        let mut tape = Tape::new();
        let g = self.record(&mut tape);
        let n = Tensor::new(self.mean.shape().to_vec(), noise.iter().map(|&v| S::from_f64_lossy(v)).collect())?;
        let n = tape.constant(n);
        let s = rsample(&mut tape, &g, n)?;
        Ok(tape.value(s).clone())
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.mean.numel() {
            return Err(Error::Dimension { context: "log_prob", expected: self.mean.numel(), actual: x.len() });
        }
        let mut tape = Tape::new();
        let g = self.record(&mut tape);
        let xv = Tensor::new(self.mean.shape().to_vec(), x.iter().map(|&v| S::from_f64_lossy(v)).collect())?;
        let xv = tape.constant(xv);
        let lp = log_prob(&mut tape, &g, xv)?;
        Ok(total(tape.value(lp)))
    }
}

fn total<S: Scalar>(t: &Tensor<S>) -> f64 {
    t.data().iter().map(|v| v.as_f64()).sum()
}
