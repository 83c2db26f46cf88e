//! Independent verification oracles: central finite differences, gradient
//! comparison, and a straight-line scalar reference for the recurrent cell.
//!
//! The oracles deliberately avoid the main tensor/layer code paths. They run
//! in f64 and are wired into both the test suite and the `verify` CLI
//! subcommand.

use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, Variant};
use crate::tensor::Tensor;

/// Central finite differences (f(w+e) - f(w-e)) / 2e per coordinate.
pub fn finite_diff_grad(
    loss_fn: &dyn Fn(&[f64]) -> Result<f64>,
    params: &[f64],
    epsilon: f64,
) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference epsilon must be positive, got {epsilon}"
        )));
    }
    let mut work = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + epsilon;
        let plus = loss_fn(&work)?;
        work[i] = orig - epsilon;
        let minus = loss_fn(&work)?;
        work[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Oracle(format!(
                "non-finite loss while perturbing coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(grad)
}

/// Max over coordinates of |a-b| / max(|a|, |b|, 1e-8).
pub fn relative_error(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "relative_error length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut max = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let denom = x.abs().max(y.abs()).max(1e-8);
        let e = (x - y).abs() / denom;
        if e > max {
            max = e;
        }
    }
    Ok(max)
}

/// One step of the scalar recurrence: gate activations and states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarLstmStep {
    pub input_gate: f64,
    pub forget_gate: f64,
    pub cell: f64,
    pub output_gate: f64,
    pub hidden: f64,
}

/// Straight-line f64 evaluation of the bias-free LSTM recurrence with cell
/// clipping at 3. Weight order: w_xi, w_hi, w_xf, w_hf, w_xc, w_hc, w_xo,
/// w_ho. The golden reference for `lstm_step` on 1x1 tensors.
pub fn scalar_lstm_oracle(weights: [f64; 8], inputs: &[f64]) -> Vec<ScalarLstmStep> {
    const CLIP: f64 = 3.0;
    let [w_xi, w_hi, w_xf, w_hf, w_xc, w_hc, w_xo, w_ho] = weights;
    let sigma = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut h = 0.0;
    let mut c = 0.0;
    let mut out = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let i = sigma(w_xi * x + w_hi * h);
        let f = sigma(w_xf * x + w_hf * h);
        let candidate = (w_xc * x + w_hc * h).tanh();
        c = (f * c + i * candidate).clamp(-CLIP, CLIP);
        let o = sigma(w_xo * x + w_ho * h);
        h = o * c.tanh();
        out.push(ScalarLstmStep {
            input_gate: i,
            forget_gate: f,
            cell: c,
            output_gate: o,
            hidden: h,
        });
    }
    out
}

/// Outcome of one gradient check, reported per parameter block.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub const GRAD_CHECK_EPSILON: f64 = 1e-4;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

/// Compares an analytic gradient against the finite-difference oracle for a
/// loss defined over a flat parameter vector.
pub fn check_gradient(
    name: &str,
    loss_fn: &dyn Fn(&[f64]) -> Result<f64>,
    params: &[f64],
    analytic: &[f64],
) -> Result<CheckReport> {
    let numeric = finite_diff_grad(loss_fn, params, GRAD_CHECK_EPSILON)?;
    let max_rel_err = relative_error(analytic, &numeric)?;
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_err,
        tolerance: GRAD_CHECK_TOLERANCE,
    })
}

/// Full-stack gradient check of one model variant on a tiny configuration:
/// the analytic gradients of every named block are compared against central
/// finite differences of the cross-entropy loss, both on the f64 path.
pub fn check_model_variant(config: &ModelConfig) -> Result<Vec<CheckReport>> {
    let params64 = model::init_params::<f64>(config)?;
    let batch = 3usize;
    let width = config.window_width();
    let mut rng_state = 0x9e3779b97f4a7c15u64.wrapping_mul(config.seed.wrapping_add(1));
    let mut next = move || {
        // xorshift, good enough to fill deterministic test inputs
        rng_state ^= rng_state << 13;
        rng_state ^= rng_state >> 7;
        rng_state ^= rng_state << 17;
        (rng_state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    let x = Tensor::from_fn(batch, width, |_, _| next() * 0.8);
    let targets: Vec<usize> = (0..batch).map(|r| r % config.num_classes).collect();

    let flat = params64.flatten();
    let (_, cache) = model::forward(&params64, config, &x, true)?;
    let (_, grads) = model::backward(&params64, config, &cache, &targets)?;

    let structure = params64.clone();
    let cfg = config.clone();
    let x_ref = x.clone();
    let targets_ref = targets.clone();
    let loss_fn = move |w: &[f64]| -> Result<f64> {
        let p = structure.unflatten(w)?;
        let (_, cache) = model::forward(&p, &cfg, &x_ref, true)?;
        let (loss, _) = model::backward(&p, &cfg, &cache, &targets_ref)?;
        Ok(loss)
    };
    let numeric = finite_diff_grad(&loss_fn, &flat, GRAD_CHECK_EPSILON)?;

    // compare block by block so a failure names the offending matrix
    let mut reports = Vec::new();
    let mut offset = 0usize;
    for (name, analytic_block) in grads.flat_block_views() {
        let len = analytic_block.len();
        let num_slice = &numeric[offset..offset + len];
        let max_rel_err = relative_error(&analytic_block, num_slice)?;
        reports.push(CheckReport {
            name: format!("{}.{}", config.variant.as_str(), name),
            max_rel_err,
            tolerance: GRAD_CHECK_TOLERANCE,
        });
        offset += len;
    }
    Ok(reports)
}

/// Tiny configurations, one per variant, used by the verification suite.
pub fn tiny_check_configs() -> Vec<ModelConfig> {
    Variant::ALL
        .iter()
        .map(|&variant| ModelConfig::tiny_for_checks(variant))
        .collect()
}

/// Runs every check the suite knows about: activation and layer gradients,
/// the scalar recurrence oracle, and the full-stack check per variant.
pub fn run_all_checks() -> Result<Vec<CheckReport>> {
    let mut reports = crate::layers::gradient_check_reports()?;
    reports.push(scalar_oracle_agreement_report()?);
    for config in tiny_check_configs() {
        reports.extend(check_model_variant(&config)?);
    }
    Ok(reports)
}

/// Agreement of `lstm_step` with the straight-line scalar oracle over 100
/// random scalar weight draws, including draws that force cell clipping.
pub fn scalar_oracle_agreement_report() -> Result<CheckReport> {
    let max = crate::layers::scalar_oracle_max_abs_diff(100)?;
    Ok(CheckReport {
        name: "lstm_step.scalar_oracle".to_string(),
        max_rel_err: max,
        tolerance: 1e-6,
    })
}
