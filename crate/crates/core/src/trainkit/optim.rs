use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::numcore::{Scalar, Tensor};
use crate::padnet::ParamStore;

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments per parameter plus the shared step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new<S: Scalar>(params: &ParamStore<S>) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![0.0f32; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One AdamW update. Parameters whose gradient is `None` were not
    /// reached by the loss and are left untouched, moments included.
    pub fn update(
        &mut self,
        cfg: &AdamWConfig,
        params: &mut ParamStore<f32>,
        grads: &[Option<Tensor<f32>>],
    ) -> Result<(), TrainError> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(TrainError::Optimizer(format!(
                "{} grads and {} moment sets for {} params",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let step_size = (cfg.lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let decay = (1.0 - cfg.lr * cfg.weight_decay) as f32;
        let eps = cfg.eps as f32;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = params.tensor_mut(i).data_mut();
            if g.numel() != w.len() || m.len() != w.len() {
                return Err(TrainError::Optimizer(format!("gradient shape mismatch on parameter {i}")));
            }
            for (((w, &g), m), v) in w.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w = *w * decay - step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.m.len() as u64).to_le_bytes());
        for (m, v) in self.m.iter().zip(&self.v) {
            out.extend_from_slice(&(m.len() as u64).to_le_bytes());
            for x in m.iter().chain(v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, TrainError> {
        let bad = || TrainError::Checkpoint("truncated optimizer state".into());
        let mut pos = 0usize;
        let u64_at = |pos: &mut usize| -> Result<u64, TrainError> {
            let s = b.get(*pos..*pos + 8).ok_or_else(bad)?;
            *pos += 8;
            Ok(u64::from_le_bytes(s.try_into().expect("8 bytes")))
        };
        let step = u64_at(&mut pos)?;
        let n = u64_at(&mut pos)? as usize;
        let mut m = Vec::with_capacity(n.min(4096));
        let mut v = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let len = u64_at(&mut pos)? as usize;
            let bytes = b.get(pos..pos + 8 * len).ok_or_else(bad)?;
            pos += 8 * len;
            let vals: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            m.push(vals[..len].to_vec());
            v.push(vals[len..].to_vec());
        }
        if pos != b.len() {
            return Err(TrainError::Checkpoint("trailing bytes in optimizer state".into()));
        }
        Ok(Self { step, m, v })
    }
}
