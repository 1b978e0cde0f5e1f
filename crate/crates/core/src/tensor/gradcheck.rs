use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of comparing autodiff gradients with central differences.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
    /// Probes skipped because the one-sided differences disagree, i.e. the
    /// step straddles a kink (relu, clamp, max-pool switch).
    pub excluded: usize,
}

impl GradCheck {
    pub(crate) fn empty(probes: usize) -> Self {
        GradCheck {
            max_relative_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            probes,
            excluded: 0,
        }
    }

    /// Folds one probe into the report.
    pub(crate) fn record(
        &mut self,
        index: usize,
        analytic: f64,
        minus: f64,
        centre: f64,
        plus: f64,
        eps: f64,
    ) {
        let fwd = (plus - centre) / eps;
        let bwd = (centre - minus) / eps;
        if (fwd - bwd).abs() > KINK_TOL * fwd.abs().max(bwd.abs()).max(GRAD_FLOOR) {
            self.excluded += 1;
            return;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        let rel = (analytic - numeric).abs() / denom;
        if !rel.is_finite() || rel > self.max_relative_error {
            self.max_relative_error = if rel.is_finite() { rel } else { f64::INFINITY };
            self.worst_index = index;
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

/// Relative disagreement between one-sided differences that marks a kink.
pub const KINK_TOL: f64 = 1e-2;

/// Errors are measured relative to `max(|analytic|, |numeric|, GRAD_FLOOR)`.
pub const GRAD_FLOOR: f64 = 1e-6;

fn eval_scalar<T: Scalar, F>(f: &F, x: &Tensor<T>) -> Result<T>
where
    F: Fn(&Tape<T>, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&tape, v)?;
    let value = tape.value(out);
    value.item().ok_or_else(|| {
        Error::dim(format!(
            "gradcheck needs a scalar function, got {:?}",
            value.shape()
        ))
    })
}

/// Central-difference check of `d f / d x` over every coordinate of `x`.
pub fn finite_difference_check<T: Scalar, F>(f: F, x: &Tensor<T>, eps: T) -> Result<GradCheck>
where
    F: Fn(&Tape<T>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    finite_difference_check_at(f, x, eps, &all)
}

/// Like [`finite_difference_check`], probing only the listed coordinates.
pub fn finite_difference_check_at<T: Scalar, F>(
    f: F,
    x: &Tensor<T>,
    eps: T,
    indices: &[usize],
) -> Result<GradCheck>
where
    F: Fn(&Tape<T>, Var) -> Result<Var>,
{
    if !(eps > T::zero()) {
        return Err(Error::param("finite-difference step must be positive"));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
        return Err(Error::param(format!(
            "probe index {bad} outside {} values",
            x.len()
        )));
    }
    let tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&tape, v)?;
    tape.backward(out)?;
    let grad = tape.take_grad(v).expect("input requires grad");

    let mut report = GradCheck::empty(indices.len());
    let centre = eval_scalar(&f, x)?.as_f64();
    let mut probe = x.clone();
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval_scalar(&f, &probe)?.as_f64();
        probe.data_mut()[i] = orig - eps;
        let minus = eval_scalar(&f, &probe)?.as_f64();
        probe.data_mut()[i] = orig;
        report.record(
            i,
            grad.data()[i].as_f64(),
            minus,
            centre,
            plus,
            eps.as_f64(),
        );
    }
    Ok(report)
}
