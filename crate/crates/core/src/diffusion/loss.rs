use serde::{Deserialize, Serialize};

use super::DiffusionError;
use crate::numcore::{Graph, Scalar, Tensor, TensorError, Var};
use crate::padnet::PerModality;

/// Per-modality loss coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_i: f64,
    pub lambda_a: f64,
    pub lambda_e: f64,
}

impl LossWeights {
    pub fn new(lambda_i: f64, lambda_a: f64, lambda_e: f64) -> Self {
        debug_assert!(lambda_i >= 0.0 && lambda_a >= 0.0 && lambda_e >= 0.0);
        Self {
            lambda_i,
            lambda_a,
            lambda_e,
        }
    }

    pub fn as_modal(&self) -> PerModality<f64> {
        PerModality {
            image: self.lambda_i,
            action: self.lambda_a,
            depth: self.lambda_e,
        }
    }
}

/// Linear ramp of the action/depth coefficients with a fixed image
/// coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaRamp {
    pub lambda_i: f64,
    pub start: f64,
    pub end: f64,
}

impl Default for LambdaRamp {
    fn default() -> Self {
        Self {
            lambda_i: 1.0,
            start: 0.0,
            end: 2.0,
        }
    }
}

/// Loss weights at `step` of a ramp lasting `total_steps`; held at the end
/// value afterwards.
pub fn lambda_schedule(step: u64, total_steps: u64, ramp: &LambdaRamp) -> Result<LossWeights, DiffusionError> {
    if total_steps == 0 {
        return Err(DiffusionError::Ramp);
    }
    let frac = (step as f64 / total_steps as f64).min(1.0);
    let l = ramp.start + (ramp.end - ramp.start) * frac;
    Ok(LossWeights::new(ramp.lambda_i, l, l))
}

/// Mean squared error between predicted and true noise.
pub fn ddpm_loss<S: Scalar>(g: &mut Graph<S>, eps_hat: Var, eps: Var) -> Result<Var, TensorError> {
    let n = g.value(eps_hat).numel();
    let sse = g.sse(eps_hat, eps)?;
    g.scale(sse, 1.0 / n as f64)
}

/// `lambda_I L_I + lambda_A L_A + lambda_E L_E` over the modalities that are
/// present. Absent modalities are passed as `None` and never touched.
pub fn combined_loss<S: Scalar>(
    g: &mut Graph<S>,
    per_modality: &PerModality<Option<Var>>,
    w: &LossWeights,
) -> Result<Var, TensorError> {
    let lambdas = w.as_modal();
    let mut total: Option<Var> = None;
    for (l, lam) in per_modality.iter().zip(lambdas.iter()) {
        let Some(l) = *l else { continue };
        let term = g.scale(l, *lam)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(g.constant(Tensor::scalar(S::zero())?)),
    }
}

/// Scalar counterpart of [`combined_loss`] for logging.
pub fn combined_loss_value(per_modality: &PerModality<Option<f64>>, w: &LossWeights) -> f64 {
    per_modality
        .iter()
        .zip(w.as_modal().iter())
        .filter_map(|(l, lam)| l.map(|l| l * lam))
        .sum()
}
