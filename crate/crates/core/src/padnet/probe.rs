//! Random inputs and numerical probes for checking a network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DenoiseItem, ModalityBundle, PadConfig, PadNet, PadnetError, PerModality};
use crate::diffusion::LossWeights;
use crate::numcore::{grad_check_at, Scalar, Tensor, TensorError};

/// Random bundle for `cfg` with the requested optional modalities.
pub fn random_bundle<S: Scalar, R: Rng + ?Sized>(cfg: &PadConfig, action: bool, depth: bool, rng: &mut R) -> ModalityBundle<S> {
    let g = cfg.latent_size;
    let c = cfg.latent_channels;
    let d = cfg.depth_size;
    ModalityBundle {
        instruction: rng.gen_range(0..cfg.instr_vocab_size),
        image_cond: Tensor::randn(&[c, g, g], 1.0, rng),
        image_target: Tensor::randn(&[cfg.k * c, g, g], 1.0, rng),
        pose_cond: action.then(|| Tensor::randn(&[cfg.pose_dim], 1.0, rng)),
        pose_target: action.then(|| Tensor::randn(&[cfg.k * cfg.pose_dim], 1.0, rng)),
        depth_cond: depth.then(|| Tensor::randn(&[1, d, d], 1.0, rng)),
        depth_target: depth.then(|| Tensor::randn(&[cfg.k, d, d], 1.0, rng)),
    }
}

/// Unit-normal tensors shaped like the targets present in `b`.
pub fn random_noise<S: Scalar, R: Rng + ?Sized>(b: &ModalityBundle<S>, rng: &mut R) -> PerModality<Option<Tensor<S>>> {
    PerModality {
        image: Some(Tensor::randn(b.image_target.shape(), 1.0, rng)),
        action: b.pose_target.as_ref().map(|t| Tensor::randn(t.shape(), 1.0, rng)),
        depth: b.depth_target.as_ref().map(|t| Tensor::randn(t.shape(), 1.0, rng)),
    }
}

/// One denoising item per bundle at a random timestep.
pub fn random_items<'a, S: Scalar, R: Rng + ?Sized>(bundles: &'a [ModalityBundle<S>], rng: &mut R) -> Vec<DenoiseItem<'a, S>> {
    bundles
        .iter()
        .map(|b| DenoiseItem {
            bundle: b,
            t: rng.gen_range(1..=1000),
            noised: random_noise(b, rng),
        })
        .collect()
}

/// Adds small noise to every parameter so zero-initialized layers take part.
pub fn perturb<S: Scalar>(net: &mut PadNet<S>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..net.params().len() {
        let t = net.params_mut().tensor_mut(i);
        for v in t.data_mut() {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            *v += S::lit(std * z);
        }
    }
}

/// Largest relative error between the analytic and finite-difference
/// gradient of the batch loss, over `per_tensor` random entries of every
/// parameter tensor. The batch mixes a robot item and a video-only item.
pub fn network_grad_check(cfg: &PadConfig, per_tensor: usize, seed: u64) -> Result<f64, PadnetError> {
    let mut net = PadNet::<f64>::init(cfg, seed)?;
    perturb(&mut net, 0.05, seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let bundles = vec![
        random_bundle::<f64, _>(cfg, true, cfg.depth_enabled, &mut rng),
        random_bundle::<f64, _>(cfg, false, false, &mut rng),
    ];
    let items = random_items(&bundles, &mut rng);
    let eps: Vec<_> = bundles.iter().map(|b| random_noise(b, &mut rng)).collect();
    let w = LossWeights::new(1.0, 0.7, 1.3);
    let mut worst = 0.0f64;
    for i in 0..net.params().len() {
        let x = net.params().tensor(i).clone();
        let entries: Vec<usize> = (0..per_tensor.min(x.numel())).map(|_| rng.gen_range(0..x.numel())).collect();
        let err = grad_check_at(
            |g, leaf| {
                let mut p = net.bind(g, false);
                p.vars[i] = leaf;
                let l = net
                    .batch_loss(g, &p, &items, &eps, &w)
                    .map_err(|e| TensorError::Shape(e.to_string()))?;
                Ok(l.total)
            },
            &x,
            1e-4,
            &entries,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}
