//! Denoiser fitted to unit-normal data, compared against the closed-form
//! optimum `eps*(z_t) = sqrt(1 - abar_t) z_t`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AdamWConfig, OptimizerState, TrainError};
use crate::diffusion::{ddpm_loss, q_sample, NoiseSchedule};
use crate::numcore::{Graph, Tensor, Var};
use crate::padnet::{timestep_embedding, ParamGroup, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimumCheck {
    pub dim: usize,
    pub time_dim: usize,
    pub hidden: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for OptimumCheck {
    fn default() -> Self {
        Self {
            dim: 8,
            time_dim: 32,
            hidden: 64,
            batch: 256,
            steps: 3000,
            lr: 2e-3,
            eval_samples: 20_000,
            seed: 0,
        }
    }
}

struct Denoiser {
    params: ParamStore<f32>,
}

impl Denoiser {
    fn new(c: &OptimumCheck, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamStore::new();
        let mut fan_in = |shape: &[usize]| Tensor::randn(shape, 1.0 / (shape[0] as f64).sqrt(), rng);
        let w1 = fan_in(&[c.time_dim, c.hidden]);
        let w2 = fan_in(&[c.hidden, c.hidden]);
        params.push("fc1.w", ParamGroup::Shared, w1);
        params.push("fc1.b", ParamGroup::Shared, Tensor::zeros(&[c.hidden]));
        params.push("fc2.w", ParamGroup::Shared, w2);
        params.push("fc2.b", ParamGroup::Shared, Tensor::zeros(&[c.hidden]));
        params.push("out.w", ParamGroup::Shared, Tensor::zeros(&[c.hidden, 2 * c.dim]));
        params.push("out.b", ParamGroup::Shared, Tensor::zeros(&[2 * c.dim]));
        Self { params }
    }

    /// `eps_hat = s(t) * z_t + b(t)` with `(s, b)` from an MLP on the
    /// timestep embedding.
    fn forward(&self, g: &mut Graph<f32>, vars: &[Var], ts: &[usize], z: Var, c: &OptimumCheck) -> Result<Var, TrainError> {
        let emb: Vec<f32> = ts
            .iter()
            .flat_map(|&t| timestep_embedding(t, c.time_dim).into_iter().map(|v| v as f32))
            .collect();
        let e = g.constant(Tensor::new(&[ts.len(), c.time_dim], emb)?);
        let h = g.linear(e, vars[0], vars[1])?;
        let h = g.silu(h)?;
        let h = g.linear(h, vars[2], vars[3])?;
        let h = g.silu(h)?;
        let o = g.linear(h, vars[4], vars[5])?;
        let s = g.narrow(o, 1, 0, c.dim)?;
        let b = g.narrow(o, 1, c.dim, c.dim)?;
        let s = g.add_scalar(s, 1.0)?;
        let sz = g.mul(s, z)?;
        Ok(g.add(sz, b)?)
    }
}

/// Trains the denoiser on `N(0, I)` data with the noise-prediction loss and
/// returns the mean squared gap per element between its prediction and the
/// closed-form optimum, over fresh samples with uniform timesteps.
pub fn gaussian_optimum_gap(c: &OptimumCheck, sched: &NoiseSchedule) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut net = Denoiser::new(c, &mut rng);
    let mut opt = OptimizerState::new(&net.params);
    let adam = AdamWConfig {
        lr: c.lr,
        ..AdamWConfig::default()
    };
    let sample = |n: usize, rng: &mut ChaCha8Rng| -> Result<(Vec<usize>, Tensor<f32>, Tensor<f32>), TrainError> {
        let mut ts = Vec::with_capacity(n);
        let mut zt = Vec::with_capacity(n * c.dim);
        let mut eps = Vec::with_capacity(n * c.dim);
        for _ in 0..n {
            let t = rng.gen_range(1..=sched.steps());
            let x0 = Tensor::<f32>::randn(&[c.dim], 1.0, rng);
            let e = Tensor::<f32>::randn(&[c.dim], 1.0, rng);
            zt.extend_from_slice(q_sample(&x0, t, &e, sched)?.data());
            eps.extend_from_slice(e.data());
            ts.push(t);
        }
        Ok((ts, Tensor::new(&[n, c.dim], zt)?, Tensor::new(&[n, c.dim], eps)?))
    };
    for _ in 0..c.steps {
        let (ts, zt, eps) = sample(c.batch, &mut rng)?;
        let mut g = Graph::new();
        let vars: Vec<Var> = (0..net.params.len()).map(|i| g.leaf_shared(net.params.shared(i), true)).collect();
        let z = g.constant(zt);
        let e = g.constant(eps);
        let pred = net.forward(&mut g, &vars, &ts, z, c)?;
        let loss = ddpm_loss(&mut g, pred, e)?;
        g.backward(loss)?;
        let grads: Vec<_> = vars.iter().map(|&v| g.take_grad(v)).collect();
        opt.update(&adam, &mut net.params, &grads)?;
    }

    let (ts, zt, _) = sample(c.eval_samples, &mut rng)?;
    let mut g = Graph::new();
    let vars: Vec<Var> = (0..net.params.len()).map(|i| g.leaf_shared(net.params.shared(i), false)).collect();
    let z = g.constant(zt.clone());
    let pred = net.forward(&mut g, &vars, &ts, z, c)?;
    let pred = g.value(pred).data();
    let mut gap = 0.0;
    for (n, &t) in ts.iter().enumerate() {
        let k = (1.0 - sched.alpha_bar(t)).sqrt();
        for d in 0..c.dim {
            let i = n * c.dim + d;
            let opt = k * zt.data()[i] as f64;
            gap += (pred[i] as f64 - opt).powi(2);
        }
    }
    Ok(gap / (ts.len() * c.dim) as f64)
}
