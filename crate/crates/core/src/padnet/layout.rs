//! Data layout around the network: condition/noise concatenation,
//! patchify, the fixed token layout and detokenization.

use std::ops::Range;

use super::{PadConfig, PadnetError, PerModality};
use crate::numcore::{Scalar, Tensor};

/// One example's inputs: encoded conditions, clean targets and presence.
///
/// A modality is present iff its tensors are `Some`. Images are always
/// present. Pose tensors are normalized to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBundle<S> {
    pub instruction: usize,
    /// `[c, d', d']`
    pub image_cond: Tensor<S>,
    /// `[k c, d', d']`
    pub image_target: Tensor<S>,
    /// `[pose_dim]`
    pub pose_cond: Option<Tensor<S>>,
    /// `[k pose_dim]`
    pub pose_target: Option<Tensor<S>>,
    /// `[1, D, D]`
    pub depth_cond: Option<Tensor<S>>,
    /// `[k, D, D]`
    pub depth_target: Option<Tensor<S>>,
}

impl<S: Scalar> ModalityBundle<S> {
    pub fn presence(&self) -> PerModality<bool> {
        PerModality {
            image: true,
            action: self.pose_cond.is_some(),
            depth: self.depth_cond.is_some(),
        }
    }

    pub fn validate(&self, cfg: &PadConfig) -> Result<(), PadnetError> {
        let g = cfg.latent_size;
        let c = cfg.latent_channels;
        let d = cfg.depth_size;
        let expect = |t: &Tensor<S>, shape: &[usize], what: &str| {
            if t.shape() != shape {
                Err(PadnetError::Shape(format!("{what}: {:?} != {shape:?}", t.shape())))
            } else {
                Ok(())
            }
        };
        expect(&self.image_cond, &[c, g, g], "image condition")?;
        expect(&self.image_target, &[cfg.k * c, g, g], "image target")?;
        match (&self.pose_cond, &self.pose_target) {
            (Some(pc), Some(pt)) => {
                expect(pc, &[cfg.pose_dim], "pose condition")?;
                expect(pt, &[cfg.k * cfg.pose_dim], "pose target")?;
            }
            (None, None) => {}
            _ => return Err(PadnetError::Shape("pose condition/target presence differs".into())),
        }
        match (&self.depth_cond, &self.depth_target) {
            (Some(dc), Some(dt)) => {
                if !cfg.depth_enabled {
                    return Err(PadnetError::Shape("depth given but disabled in config".into()));
                }
                expect(dc, &[1, d, d], "depth condition")?;
                expect(dt, &[cfg.k, d, d], "depth target")?;
            }
            (None, None) => {}
            _ => return Err(PadnetError::Shape("depth condition/target presence differs".into())),
        }
        if self.instruction >= cfg.instr_vocab_size {
            return Err(PadnetError::Instruction {
                id: self.instruction,
                vocab: cfg.instr_vocab_size,
            });
        }
        Ok(())
    }
}

/// One denoising query: a bundle, a timestep and the noised targets `z_t`
/// for each present modality.
#[derive(Debug, Clone)]
pub struct DenoiseItem<'a, S> {
    pub bundle: &'a ModalityBundle<S>,
    pub t: usize,
    pub noised: PerModality<Option<Tensor<S>>>,
}

/// Concatenates a condition latent with a noised latent along axis 0
/// (channels for grids, entries for vectors).
pub fn concat_condition<S: Scalar>(cond: &Tensor<S>, noised: &Tensor<S>) -> Result<Tensor<S>, PadnetError> {
    let (cs, ns) = (cond.shape(), noised.shape());
    if cs.len() != ns.len() || cs.is_empty() || cs[1..] != ns[1..] {
        return Err(PadnetError::Shape(format!("concat_condition {cs:?} with {ns:?}")));
    }
    let mut shape = cs.to_vec();
    shape[0] += ns[0];
    let mut data = cond.data().to_vec();
    data.extend_from_slice(noised.data());
    Ok(Tensor::new(&shape, data)?)
}

/// `[C, G, G]` to `[(G/p)^2, C p p]`, channel-major inside each patch.
pub fn patchify<S: Scalar>(latent: &Tensor<S>, p: usize) -> Result<Tensor<S>, PadnetError> {
    let s = latent.shape();
    if s.len() != 3 || s[1] != s[2] || p == 0 || !s[1].is_multiple_of(p) {
        return Err(PadnetError::Shape(format!("patchify {s:?} with patch {p}")));
    }
    let (c, g) = (s[0], s[1]);
    let gp = g / p;
    let width = c * p * p;
    let src = latent.data();
    let mut out = vec![S::zero(); gp * gp * width];
    for py in 0..gp {
        for px in 0..gp {
            let tok = py * gp + px;
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        out[tok * width + (ch * p + dy) * p + dx] =
                            src[(ch * g + py * p + dy) * g + px * p + dx];
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[gp * gp, width], out)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify<S: Scalar>(tokens: &Tensor<S>, channels: usize, p: usize) -> Result<Tensor<S>, PadnetError> {
    let s = tokens.shape();
    let gp = (s.first().copied().unwrap_or(0) as f64).sqrt() as usize;
    if s.len() != 2 || gp * gp != s[0] || s[1] != channels * p * p {
        return Err(PadnetError::Shape(format!("unpatchify {s:?} into {channels} channels, patch {p}")));
    }
    let g = gp * p;
    let width = s[1];
    let src = tokens.data();
    let mut out = vec![S::zero(); channels * g * g];
    for py in 0..gp {
        for px in 0..gp {
            let tok = py * gp + px;
            for ch in 0..channels {
                for dy in 0..p {
                    for dx in 0..p {
                        out[(ch * g + py * p + dy) * g + px * p + dx] =
                            src[tok * width + (ch * p + dy) * p + dx];
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[channels, g, g], out)?)
}

/// Token index ranges of each segment in the combined sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    pub image: Range<usize>,
    pub action: Range<usize>,
    pub depth: Range<usize>,
    pub total: usize,
}

impl TokenLayout {
    pub fn new(cfg: &PadConfig) -> Self {
        let c = cfg.count_tokens();
        Self {
            image: 0..c.image,
            action: c.image..c.image + c.action,
            depth: c.image + c.action..c.total,
            total: c.total,
        }
    }

    /// Attention key mask of one example with the given presence.
    pub fn key_mask(&self, present: &PerModality<bool>) -> Vec<bool> {
        let mut m = vec![false; self.total];
        for (r, on) in [
            (&self.image, present.image),
            (&self.action, present.action),
            (&self.depth, present.depth),
        ] {
            for i in r.clone() {
                m[i] = on;
            }
        }
        m
    }
}

/// Token sequence of one example: `tokens[n, h]` with masked rows zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq<S> {
    pub tokens: Tensor<S>,
    pub attn_mask: Vec<bool>,
    pub layout: TokenLayout,
}

/// Per-modality noise predictions of one example, in latent layout.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrediction<S> {
    /// `[k c, d', d']`
    pub image: Tensor<S>,
    /// `[k pose_dim]`
    pub action: Option<Tensor<S>>,
    /// `[k, D, D]`
    pub depth: Option<Tensor<S>>,
}

/// Splits raw per-token head outputs back into latent tensors. Absent
/// modalities yield nothing.
pub fn detokenize<S: Scalar>(
    image_tokens: &Tensor<S>,
    action: Option<&Tensor<S>>,
    depth_tokens: Option<&Tensor<S>>,
    cfg: &PadConfig,
) -> Result<NoisePrediction<S>, PadnetError> {
    let counts = cfg.count_tokens();
    if image_tokens.shape() != [counts.image, cfg.image_token_out()] {
        return Err(PadnetError::Shape(format!(
            "image tokens {:?}, layout wants [{}, {}]",
            image_tokens.shape(),
            counts.image,
            cfg.image_token_out()
        )));
    }
    let image = unpatchify(image_tokens, cfg.k * cfg.latent_channels, cfg.patch_i)?;
    let action = match action {
        Some(a) if a.numel() == cfg.k * cfg.pose_dim => Some(a.clone().reshape(&[cfg.k * cfg.pose_dim])?),
        Some(a) => return Err(PadnetError::Shape(format!("action output {:?}", a.shape()))),
        None => None,
    };
    let depth = match depth_tokens {
        Some(d) => {
            if !cfg.depth_enabled || d.shape() != [counts.depth, cfg.depth_token_out()] {
                return Err(PadnetError::Shape(format!("depth tokens {:?}", d.shape())));
            }
            Some(unpatchify(d, cfg.k, cfg.patch_e)?)
        }
        None => None,
    };
    Ok(NoisePrediction { image, action, depth })
}
