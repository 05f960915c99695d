//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use super::{OpKind, Tape, Tensor, Var};
use crate::error::Result;

/// Finite-difference step in 64-bit.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so entries whose true
/// gradient is ~0 are compared absolutely at this scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub probes: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `∂f/∂inputs` from the tape against central differences.
///
/// `f` builds a scalar on a fresh tape from the registered inputs. `probes`
/// lists `(input, element)` pairs to check; empty means every element.
pub fn check<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    probes: &[(usize, usize)],
    tolerance: f64,
    fault: Option<OpKind>,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut eval = |inputs: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        if let Some(kind) = fault {
            tape.inject_backward_fault(kind);
        }
        let vars: Vec<Var> = inputs.iter().map(|t| tape.parameter(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.scalar(out);
        let mut grads = Vec::new();
        if want_grads {
            tape.backward(out)?;
            grads = vars
                .iter()
                .zip(inputs)
                .map(|(v, t)| tape.grad(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
                .collect();
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let all: Vec<(usize, usize)>;
    let probes = if probes.is_empty() {
        all = inputs.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |e| (i, e))).collect();
        &all
    } else {
        probes
    };

    let mut worst = 0.0f64;
    let mut shifted = inputs.to_vec();
    for &(i, e) in probes {
        let orig = inputs[i].data()[e];
        shifted[i].data_mut()[e] = orig + FD_STEP;
        let (plus, _) = eval(&shifted, false)?;
        shifted[i].data_mut()[e] = orig - FD_STEP;
        let (minus, _) = eval(&shifted, false)?;
        shifted[i].data_mut()[e] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let err = relative_error(analytic[i][e], numeric);
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    Ok(GradCheckReport { name: name.to_string(), max_rel_err: worst, tolerance, probes: probes.len() })
}
