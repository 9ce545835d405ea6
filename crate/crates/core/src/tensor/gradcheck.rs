//! Central finite-difference gradient checking.
//!
//! Only the forward pass of the function under test is used to build the
//! numeric estimate, so the check stays independent of the backward code.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Entries smaller than this are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest entrywise `|analytic - numeric| / max(|analytic|, |numeric|, 1e-4)`.
    pub max_rel_err: f64,
    /// Input index and flat offset of the worst entry.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// `|a - n| / max(|a|, |n|, 1e-4)`; NaN maps to infinity.
pub fn relative_error(a: f64, n: f64) -> f64 {
    let err = (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
    if err.is_nan() {
        f64::INFINITY
    } else {
        err
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` with central differences.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = probe.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_err: f64 = 0.0;
    let mut worst = (0, 0);
    for i in 0..inputs.len() {
        let mut num = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let n = (plus - minus) / (2.0 * step);
            num.data_mut()[j] = n;
            let a = analytic[i].data()[j];
            let err = relative_error(a, n);
            if err > max_rel_err {
                max_rel_err = err;
                worst = (i, j);
            }
        }
        numeric.push(num);
    }
    Ok(GradCheck {
        max_rel_err,
        worst,
        analytic,
        numeric,
    })
}
