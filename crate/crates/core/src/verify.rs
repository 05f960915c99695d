//! Finite-difference gradient suite over every tape op and the full
//! network, on randomized small shapes in 64-bit.

use rand::Rng as _;

use crate::autodiff::gradcheck::{check, GradCheckReport};
use crate::autodiff::{Mode, Normalization, OpKind, Tape, Tensor, Var};
use crate::error::Result;
use crate::model::{TcResNet8, TcResNet8Config};
use crate::rng::{stream, Rng, Stream};

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
pub const MODEL_CHECK_NAME: &str = "tcresnet8";

/// Weight entries probed in the full-model check.
const MODEL_PROBES: usize = 48;

fn uniform(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Magnitudes in [0.1, 1) with random sign, keeping ReLU inputs away from
/// the kink.
fn off_zero(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn mse_head(tape: &mut Tape<f64>, y: Var, target: &Tensor<f64>) -> Result<Var> {
    let t = tape.constant(target.clone());
    tape.mse(t, y)
}

fn merge(name: &str, parts: Vec<GradCheckReport>) -> GradCheckReport {
    GradCheckReport {
        name: name.to_string(),
        max_rel_err: parts.iter().map(|r| r.max_rel_err).fold(0.0, f64::max),
        tolerance: parts[0].tolerance,
        probes: parts.iter().map(|r| r.probes).sum(),
    }
}

fn check_op(kind: OpKind, rng: &mut Rng, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let name = kind.name();
    let tol = LAYER_TOLERANCE;
    match kind {
        OpKind::Conv1d => {
            let (n, c_in, c_out) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
            let (len, k) = (rng.random_range(5..12), rng.random_range(1..6));
            let (stride, pad) = (rng.random_range(1..3), rng.random_range(0..3));
            let l_out = (len + 2 * pad - k) / stride + 1;
            let inputs = [uniform(&[n, c_in, len], rng), uniform(&[c_out, c_in, k], rng), uniform(&[c_out], rng)];
            let target = uniform(&[n, c_out, l_out], rng);
            check(name, &inputs, &[], tol, fault, |tape, v| {
                let y = tape.conv1d(v[0], v[1], Some(v[2]), stride, pad)?;
                mse_head(tape, y, &target)
            })
        }
        OpKind::BatchNorm => {
            let (n, c, l) = (rng.random_range(2..4), rng.random_range(1..4), rng.random_range(2..7));
            let inputs = [uniform(&[n, c, l], rng), uniform(&[c], rng), uniform(&[c], rng)];
            let target = uniform(&[n, c, l], rng);
            let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
            let mut parts = Vec::new();
            for train in [true, false] {
                parts.push(check(name, &inputs, &[], tol, fault, |tape, v| {
                    let norm = if train {
                        Normalization::Batch { eps: 1e-5 }
                    } else {
                        Normalization::Running { mean: &mean, var: &var, eps: 1e-5 }
                    };
                    let (y, _) = tape.batch_norm(v[0], v[1], v[2], norm)?;
                    mse_head(tape, y, &target)
                })?);
            }
            Ok(merge(name, parts))
        }
        OpKind::Relu => {
            let shape = [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..8)];
            let inputs = [off_zero(&shape, rng)];
            let target = uniform(&shape, rng);
            check(name, &inputs, &[], tol, fault, |tape, v| {
                let y = tape.relu(v[0]);
                mse_head(tape, y, &target)
            })
        }
        OpKind::Add => {
            let shape = [rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..8)];
            let inputs = [uniform(&shape, rng), uniform(&shape, rng)];
            let target = uniform(&shape, rng);
            check(name, &inputs, &[], tol, fault, |tape, v| {
                let y = tape.add(v[0], v[1])?;
                mse_head(tape, y, &target)
            })
        }
        OpKind::GlobalAvgPool => {
            let (n, c, l) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..8));
            let inputs = [uniform(&[n, c, l], rng)];
            let target = uniform(&[n, c], rng);
            check(name, &inputs, &[], tol, fault, |tape, v| {
                let y = tape.global_avg_pool(v[0])?;
                mse_head(tape, y, &target)
            })
        }
        OpKind::Linear => {
            let (n, d, m) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..5));
            let inputs = [uniform(&[n, d], rng), uniform(&[m, d], rng), uniform(&[m], rng)];
            let target = uniform(&[n, m], rng);
            check(name, &inputs, &[], tol, fault, |tape, v| {
                let y = tape.linear(v[0], v[1], v[2])?;
                mse_head(tape, y, &target)
            })
        }
        OpKind::CrossEntropy => {
            let (n, c) = (rng.random_range(1..5), rng.random_range(2..8));
            let inputs = [uniform(&[n, c], rng)];
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            check(name, &inputs, &[], tol, fault, |tape, v| tape.cross_entropy(v[0], &labels))
        }
        OpKind::Mse => {
            let shape = [rng.random_range(1..5), rng.random_range(1..6)];
            let inputs = [uniform(&shape, rng), uniform(&shape, rng)];
            check(name, &inputs, &[], tol, fault, |tape, v| tape.mse(v[0], v[1]))
        }
        OpKind::WeightedSum => {
            let weights: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..2.0)).collect();
            let inputs = [uniform(&[1], rng), uniform(&[1], rng), uniform(&[1], rng)];
            check(name, &inputs, &[], tol, fault, |tape, v| {
                let terms: Vec<(Var, f64)> = v.iter().copied().zip(weights.iter().copied()).collect();
                tape.weighted_sum(&terms)
            })
        }
    }
}

/// Train-mode cross-entropy of the 30-class network on a random batch,
/// differentiated with respect to a random slice of its weights.
fn check_model(rng: &mut Rng, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let config = TcResNet8Config::default();
    let model = TcResNet8::<f64>::build(config.clone(), rng.random())?;
    let (n, frames) = (2, 98);
    let x = uniform(&[n, config.input_channels, frames], rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..config.num_classes)).collect();
    let inputs: Vec<Tensor<f64>> = model.params().iter().map(|p| p.tensor.clone()).collect();
    let probes: Vec<(usize, usize)> = (0..MODEL_PROBES)
        .map(|_| {
            let p = rng.random_range(0..inputs.len());
            (p, rng.random_range(0..inputs[p].len()))
        })
        .collect();
    check(MODEL_CHECK_NAME, &inputs, &probes, MODEL_TOLERANCE, fault, |tape, v| {
        let input = tape.constant(x.clone());
        let (logits, _) = model.forward(tape, v, input, Mode::Train)?;
        tape.cross_entropy(logits, &labels)
    })
}

/// One report per op kind, then the full-model check. `fault` scales one
/// op's backward pass to prove the harness notices.
pub fn gradcheck_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<GradCheckReport>> {
    let mut rng = stream(seed, Stream::GradCheck);
    let mut reports = OpKind::ALL.iter().map(|&k| check_op(k, &mut rng, fault)).collect::<Result<Vec<_>>>()?;
    reports.push(check_model(&mut rng, fault)?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_for_several_seeds() {
        for seed in 0..3 {
            let reports = gradcheck_suite(seed, None).unwrap();
            assert_eq!(reports.len(), OpKind::ALL.len() + 1);
            for r in &reports {
                assert!(r.passed(), "seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn suite_is_deterministic() {
        assert_eq!(gradcheck_suite(7, None).unwrap(), gradcheck_suite(7, None).unwrap());
    }

    #[test]
    fn injected_conv_fault_is_named() {
        let reports = gradcheck_suite(0, Some(OpKind::Conv1d)).unwrap();
        let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        assert_eq!(failed, vec!["conv1d", MODEL_CHECK_NAME]);
    }
}
