//! Fixed pixel and pose codecs.
//!
//! Images are encoded by averaging non-overlapping `f x f` pixel blocks onto
//! the latent grid and mapping `[0, 1]` to `[-1, 1]`; decoding upsamples by
//! nearest neighbour. Poses live in the unit box and are mapped affinely to
//! `[-1, 1]`.

use super::{PadConfig, PadnetError};
use crate::numcore::{Scalar, Tensor};

fn check_pixels(pixels: &[f32], expect: usize, what: &str) -> Result<(), PadnetError> {
    if pixels.len() != expect {
        return Err(PadnetError::Shape(format!(
            "{what}: expected {expect} values, got {}",
            pixels.len()
        )));
    }
    if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(PadnetError::Shape(format!("{what}: pixel outside [0, 1]")));
    }
    Ok(())
}

/// Downsamples an HWC image of side `size` to a CHW grid of side `grid`.
fn block_mean<S: Scalar>(pixels: &[f32], size: usize, channels: usize, grid: usize) -> Vec<S> {
    let f = size / grid;
    let area = (f * f) as f64;
    let mut out = vec![S::zero(); channels * grid * grid];
    for ch in 0..channels {
        for gy in 0..grid {
            for gx in 0..grid {
                let mut acc = 0.0f64;
                for dy in 0..f {
                    for dx in 0..f {
                        let y = gy * f + dy;
                        let x = gx * f + dx;
                        acc += pixels[(y * size + x) * channels + ch] as f64;
                    }
                }
                out[(ch * grid + gy) * grid + gx] = S::lit(2.0 * acc / area - 1.0);
            }
        }
    }
    out
}

fn nearest_up<S: Scalar>(latent: &Tensor<S>, size: usize, channels: usize, grid: usize) -> Vec<f32> {
    let f = size / grid;
    let d = latent.data();
    let mut out = vec![0.0f32; size * size * channels];
    for y in 0..size {
        for x in 0..size {
            for ch in 0..channels {
                let v = d[(ch * grid + y / f) * grid + x / f].as_f64();
                out[(y * size + x) * channels + ch] = ((v + 1.0) / 2.0).clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// HWC pixels in `[0, 1]` to a `[c, d', d']` latent in `[-1, 1]`.
pub fn encode_image<S: Scalar>(pixels: &[f32], cfg: &PadConfig) -> Result<Tensor<S>, PadnetError> {
    let n = cfg.img_size * cfg.img_size * cfg.img_channels;
    check_pixels(pixels, n, "encode_image")?;
    if !cfg.img_size.is_multiple_of(cfg.latent_size) || cfg.latent_channels != cfg.img_channels {
        return Err(PadnetError::Config("image codec geometry".into()));
    }
    let data = block_mean(pixels, cfg.img_size, cfg.img_channels, cfg.latent_size);
    let g = cfg.latent_size;
    Ok(Tensor::new(&[cfg.latent_channels, g, g], data)?)
}

/// Inverse of [`encode_image`] at grid resolution; values clamp to `[0, 1]`.
pub fn decode_image<S: Scalar>(latent: &Tensor<S>, cfg: &PadConfig) -> Result<Vec<f32>, PadnetError> {
    let g = cfg.latent_size;
    if latent.shape() != [cfg.latent_channels, g, g] {
        return Err(PadnetError::Shape(format!("decode_image got {:?}", latent.shape())));
    }
    Ok(nearest_up(latent, cfg.img_size, cfg.img_channels, g))
}

/// Depth map (HW, values in `[0, 1]`) of side `src_size` to `[1, D, D]`.
pub fn encode_depth<S: Scalar>(depth: &[f32], src_size: usize, cfg: &PadConfig) -> Result<Tensor<S>, PadnetError> {
    check_pixels(depth, src_size * src_size, "encode_depth")?;
    if !src_size.is_multiple_of(cfg.depth_size) {
        return Err(PadnetError::Config(format!(
            "depth source {src_size} not divisible by {}",
            cfg.depth_size
        )));
    }
    let data = block_mean(depth, src_size, 1, cfg.depth_size);
    Ok(Tensor::new(&[1, cfg.depth_size, cfg.depth_size], data)?)
}

pub fn decode_depth<S: Scalar>(latent: &Tensor<S>, out_size: usize, cfg: &PadConfig) -> Result<Vec<f32>, PadnetError> {
    let d = cfg.depth_size;
    if latent.shape() != [1, d, d] || !out_size.is_multiple_of(d) {
        return Err(PadnetError::Shape(format!("decode_depth got {:?}", latent.shape())));
    }
    Ok(nearest_up(latent, out_size, 1, d))
}

/// Unit-box pose to `[-1, 1]`.
pub fn normalize_pose(p: &[f32]) -> Vec<f32> {
    p.iter().map(|v| 2.0 * v - 1.0).collect()
}

/// `[-1, 1]` latent back to a pose, clamped to the workspace.
pub fn denormalize_pose(z: &[f32]) -> Vec<f32> {
    z.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect()
}
