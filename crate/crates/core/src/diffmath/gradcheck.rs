//! Central finite-difference checks of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use super::DiffError;

/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Worst coordinate of one input, as reported by [`grad_check_inputs`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoordError {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

fn evaluate<S, F>(f: &F, point: &[Tensor<S>]) -> Result<f64, DiffError>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(DiffError::NonScalar(v.shape().to_vec()));
    }
    Ok(v.item().as_f64())
}

/// Checks `f`'s gradient w.r.t. each input tensor.
///
/// `coords[i]` selects which flat indices of input `i` are perturbed; `None`
/// checks all of them. Returns the worst coordinate per input (`None` when an
/// input had no coordinates selected).
pub fn grad_check_inputs<S, F>(
    f: F,
    point: &[Tensor<S>],
    step: f64,
    coords: &[Option<Vec<usize>>],
) -> Result<Vec<Option<CoordError>>, DiffError>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var, DiffError>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    assert_eq!(coords.len(), point.len());
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    drop(tape);

    let mut report = Vec::with_capacity(point.len());
    let mut work: Vec<Tensor<S>> = point.to_vec();
    for (i, &var) in vars.iter().enumerate() {
        let analytic = grads.take(var).expect("inputs are params");
        let indices: Vec<usize> = match &coords[i] {
            Some(c) => c.clone(),
            None => (0..point[i].numel()).collect(),
        };
        let mut worst: Option<CoordError> = None;
        for j in indices {
            let orig = point[i].data()[j];
            work[i].data_mut()[j] = S::from_f64_lossy(orig.as_f64() + step);
            let hi = evaluate(&f, &work)?;
            work[i].data_mut()[j] = S::from_f64_lossy(orig.as_f64() - step);
            let lo = evaluate(&f, &work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (hi - lo) / (2.0 * step);
            let a = analytic.data()[j].as_f64();
            let error = relative_error(a, numeric);
            if worst.is_none_or(|w| error > w.error) {
                worst = Some(CoordError { index: j, analytic: a, numeric, error });
            }
        }
        report.push(worst);
    }
    Ok(report)
}

/// Maximum relative error between the tape gradient of the scalar function
/// `f` and central differences with the given `step`, over every coordinate
/// of every input.
pub fn grad_check<S, F>(f: F, point: &[Tensor<S>], step: f64) -> Result<f64, DiffError>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var, DiffError>,
{
    let coords = vec![None; point.len()];
    let report = grad_check_inputs(f, point, step, &coords)?;
    Ok(report.iter().flatten().map(|c| c.error).fold(0.0, f64::max))
}
