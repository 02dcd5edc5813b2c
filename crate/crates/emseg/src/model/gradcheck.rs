//! Finite-difference verification of the hand-written backward pass.

use super::train::sample_loss_and_grad;
use super::SegModel;
use crate::error::{Error, Result};
use crate::raster::{FeatureGrid, LabelGrid, Sample};

/// Central-difference step.
const FD_STEP: f64 = 1e-4;
/// Parameter budget: every parameter is perturbed twice, so large models are
/// rejected up front.
const MAX_PARAMS: usize = 10_000;

/// Result of a full-model gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Worst relative disagreement between analytic and numeric gradients.
    pub max_rel_error: f64,
    /// Arena index of the worst parameter.
    pub worst_index: usize,
}

/// Compares the analytic gradient of the negative-dice loss with central
/// finite differences (step `1e-4`) for every trainable parameter, on a
/// single sample. Batch-norm runs on the sample's own statistics and dropout
/// is disabled so the probed function is deterministic. Returns the maximum
/// relative error `|g_a - g_n| / max(|g_a|, |g_n|, 1e-8)`.
pub fn gradient_check(
    model: &SegModel,
    features: &FeatureGrid,
    labels: &LabelGrid,
) -> Result<GradCheckReport> {
    gradient_check_indices(model, features, labels, &model.trainable_indices())
}

/// Gradient check restricted to a subset of arena indices. Degenerate inputs
/// (e.g. an all-zero grid) park ReLU pre-activations exactly on their kink,
/// where finite differences legitimately disagree with the subgradient; such
/// cases remain checkable on the parameters that stay differentiable.
pub(crate) fn gradient_check_indices(
    model: &SegModel,
    features: &FeatureGrid,
    labels: &LabelGrid,
    indices: &[usize],
) -> Result<GradCheckReport> {
    if model.param_count() > MAX_PARAMS {
        return Err(Error::domain(format!(
            "gradient check limited to {MAX_PARAMS} parameters, model has {}",
            model.param_count()
        )));
    }
    let sample = Sample::new(features.clone(), labels.clone());
    let mut values = model.values().to_vec();
    let (loss, grads) = sample_loss_and_grad(&model.def, &mut values, &sample, true);
    let grads = grads.expect("gradient requested");
    if !loss.is_finite() {
        return Err(Error::GradientCheck {
            param_index: 0,
            message: format!("non-finite loss {loss}"),
        });
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
    };
    for &idx in indices {
        let analytic = grads[idx];
        if !analytic.is_finite() {
            return Err(Error::GradientCheck {
                param_index: idx,
                message: format!("non-finite analytic gradient {analytic}"),
            });
        }
        let original = values[idx];
        values[idx] = original + FD_STEP;
        let (plus, _) = sample_loss_and_grad(&model.def, &mut values, &sample, false);
        values[idx] = original - FD_STEP;
        let (minus, _) = sample_loss_and_grad(&model.def, &mut values, &sample, false);
        values[idx] = original;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        if !numeric.is_finite() {
            return Err(Error::GradientCheck {
                param_index: idx,
                message: format!("non-finite numeric gradient {numeric}"),
            });
        }
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = idx;
        }
    }
    Ok(report)
}
