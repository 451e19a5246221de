//! Diffusion numerics: linear-beta schedule, closed-form forward noising,
//! clean-sample estimate, deterministic DDIM stepping and the noise
//! prediction losses.

mod loss;

pub use loss::{combined_loss, combined_loss_value, ddpm_loss, lambda_schedule, LambdaRamp, LossWeights};

use serde::{Deserialize, Serialize};

use crate::numcore::{Scalar, Tensor, TensorError};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("timestep {t} outside [{lo}, {hi}]")]
    Timestep { t: usize, lo: usize, hi: usize },
    #[error("ddim step needs t_prev < t, got t={t} t_prev={t_prev}")]
    Order { t: usize, t_prev: usize },
    #[error("ladder of {n} steps over {t} timesteps")]
    Ladder { n: usize, t: usize },
    #[error("lambda ramp needs total_steps > 0")]
    Ramp,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Diffusion coefficients for `t in 1..=T`, with `alpha_bar(0) == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` and their running
    /// product.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if steps == 0 {
            return Err(DiffusionError::Schedule("T must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::Schedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for a in &alpha {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * a);
        }
        Ok(Self {
            steps,
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar(t)` for `t in 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_t(&self, t: usize, lo: usize) -> Result<(), DiffusionError> {
        if t < lo || t > self.steps {
            return Err(DiffusionError::Timestep {
                t,
                lo,
                hi: self.steps,
            });
        }
        Ok(())
    }
}

fn zip3<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor<S>, DiffusionError> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())).into());
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| S::lit(f(x.as_f64(), y.as_f64())))
        .collect();
    Ok(Tensor::new(a.shape(), data)?)
}

/// `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn q_sample<S: Scalar>(
    z0: &Tensor<S>,
    t: usize,
    eps: &Tensor<S>,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>, DiffusionError> {
    sched.check_t(t, 1)?;
    let ab = sched.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    zip3(z0, eps, |z, e| s * z + n * e)
}

/// Clean-sample estimate implied by a noise prediction:
/// `(z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`.
pub fn posterior_mean<S: Scalar>(
    z_t: &Tensor<S>,
    t: usize,
    eps_hat: &Tensor<S>,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>, DiffusionError> {
    sched.check_t(t, 1)?;
    let ab = sched.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    zip3(z_t, eps_hat, |z, e| (z - n * e) / s)
}

/// Deterministic (eta = 0) DDIM update from `t` to `t_prev`.
pub fn ddim_step<S: Scalar>(
    z_t: &Tensor<S>,
    t: usize,
    t_prev: usize,
    eps_hat: &Tensor<S>,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>, DiffusionError> {
    sched.check_t(t, 1)?;
    if t_prev >= t {
        return Err(DiffusionError::Order { t, t_prev });
    }
    let ab = sched.alpha_bar(t);
    let abp = sched.alpha_bar(t_prev);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (sp, np) = (abp.sqrt(), (1.0 - abp).sqrt());
    zip3(z_t, eps_hat, |z, e| {
        let mu = (z - n * e) / s;
        sp * mu + np * e
    })
}

/// Uniformly spaced `(t, t_prev)` pairs from `T` down to `0`.
pub fn make_ddim_ladder(steps: usize, n_steps: usize) -> Result<Vec<(usize, usize)>, DiffusionError> {
    if n_steps == 0 || n_steps > steps {
        return Err(DiffusionError::Ladder { n: n_steps, t: steps });
    }
    let at = |i: usize| (i * steps + n_steps / 2) / n_steps;
    Ok((1..=n_steps).rev().map(|i| (at(i), at(i - 1))).collect())
}

#[cfg(test)]
mod tests;
