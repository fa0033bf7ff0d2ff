//! Central-difference gradient verification.

use thiserror::Error;

use super::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("function is not deterministic: {first} != {second} on repeated evaluation")]
    NonDeterministic { first: f64, second: f64 },
    #[error("function must return a scalar, got shape {0:?}")]
    NonScalar(Vec<usize>),
}

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`, defined as 0 when both are below 1e-12.
pub fn relative_error(a: f64, b: f64) -> f64 {
    if a.abs() < 1e-12 && b.abs() < 1e-12 {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the tape gradient of the scalar function `f` against central
/// differences with step `eps`, over every coordinate of every input.
///
/// `f` must be deterministic: dropout off, batch-norm in eval mode.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport, GradCheckError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let shape = out.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(GradCheckError::NonScalar(shape));
        }
        match tape.backward(out) {
            Ok(grads) => vars.iter().map(|v| grads.wrt(*v)).collect(),
            Err(TensorError::Detached) => inputs.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            Err(e) => return Err(e.into()),
        }
    };

    let eval = |values: &[Tensor]| -> Result<f64, GradCheckError> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = values.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };
    let first = eval(inputs)?;
    let second = eval(inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(GradCheckError::NonDeterministic { first, second });
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut current: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for coord in 0..input.numel() {
            let mut data = input.to_vec();
            let base = data[coord];
            data[coord] = base + eps;
            current[which] = Tensor::new(input.shape(), data.clone())?;
            let plus = eval(&current)?;
            data[coord] = base - eps;
            current[which] = Tensor::new(input.shape(), data)?;
            let minus = eval(&current)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let exact = analytic[which].data()[coord];
            let err = relative_error(exact, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((which, coord));
                report.analytic = exact;
                report.numeric = numeric;
            }
        }
        current[which] = input.clone();
    }
    Ok(report)
}
