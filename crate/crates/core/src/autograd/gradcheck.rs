//! Central finite-difference verification of the reverse-mode gradients.

use super::tape::{no_grad, reset_tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over every coordinate.
    pub max_rel_error: f64,
    /// (input index, flat coordinate) where the maximum was attained.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares the gradient of the scalar `f(inputs)` with respect to every
/// coordinate of every input against `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε`.
///
/// The inputs are treated as trainable leaves regardless of how they were
/// created; their own gradient cells are not touched.
pub fn gradient_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let reports = gradient_check_outputs(|xs| Ok(vec![f(xs)?]), inputs, eps)?;
    Ok(reports[0])
}

/// [`gradient_check_many`] for a function with several scalar outputs,
/// sharing each finite-difference evaluation across outputs. Returns one
/// report per output.
pub fn gradient_check_outputs<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<Vec<GradCheckReport>>
where
    F: Fn(&[Tensor]) -> Result<Vec<Tensor>>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Parameter(format!(
            "finite-difference step must lie in [1e-7, 1e-3], got {eps}"
        )));
    }
    let n_out = {
        reset_tape();
        no_grad(|| f(inputs))?.len()
    };
    let mut analytic: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_out);
    for o in 0..n_out {
        reset_tape();
        let leaves = inputs
            .iter()
            .map(|t| Tensor::parameter(t.shape(), t.data().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        f(&leaves)?[o].backward()?;
        analytic.push(
            leaves
                .iter()
                .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
                .collect(),
        );
    }
    reset_tape();

    let mut reports = vec![
        GradCheckReport {
            max_rel_error: 0.0,
            worst: (0, 0),
            coordinates: 0,
        };
        n_out
    ];
    no_grad(|| -> Result<()> {
        let mut point: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
        for (k, input) in inputs.iter().enumerate() {
            for i in 0..input.len() {
                let mut eval = |delta: f64| -> Result<Vec<f64>> {
                    let mut data = input.data().to_vec();
                    data[i] += delta;
                    point[k] = Tensor::new(input.shape(), data)?;
                    Ok(f(&point)?.iter().map(Tensor::item).collect())
                };
                let plus = eval(eps)?;
                let minus = eval(-eps)?;
                for (o, report) in reports.iter_mut().enumerate() {
                    let numeric = (plus[o] - minus[o]) / (2.0 * eps);
                    let err = (analytic[o][k][i] - numeric).abs() / numeric.abs().max(1.0);
                    if err > report.max_rel_error || err.is_nan() {
                        report.max_rel_error = err;
                        report.worst = (k, i);
                    }
                    report.coordinates += 1;
                }
            }
            point[k] = input.detach();
        }
        Ok(())
    })?;
    Ok(reports)
}

/// Single-input form of [`gradient_check_many`]; returns the max relative
/// error.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    gradient_check_many(|xs| f(&xs[0]), std::slice::from_ref(x), eps).map(|r| r.max_rel_error)
}
