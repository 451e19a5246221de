use serde::{Deserialize, Serialize};

use super::PadnetError;

/// Architecture, diffusion and execution hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PadConfig {
    /// Pixels per image side.
    pub img_size: usize,
    pub img_channels: usize,
    /// Latent grid side after encoding.
    pub latent_size: usize,
    pub latent_channels: usize,
    /// Image patch side.
    pub patch_i: usize,
    /// Number of predicted future steps.
    pub k: usize,
    pub pose_dim: usize,
    pub depth_enabled: bool,
    /// Depth grid side after downsampling.
    pub depth_size: usize,
    pub patch_e: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    /// Sinusoidal timestep feature width.
    pub time_dim: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub n_ddim: usize,
    pub instr_vocab_size: usize,
    pub frame_interval: usize,
}

/// Per-segment token counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub image: usize,
    pub action: usize,
    pub depth: usize,
    pub total: usize,
}

impl PadConfig {
    fn paper_scale(layers: usize, hidden: usize, heads: usize, patch: usize) -> Self {
        Self {
            img_size: 256,
            img_channels: 3,
            latent_size: 32,
            latent_channels: 4,
            patch_i: patch,
            k: 3,
            pose_dim: 7,
            depth_enabled: false,
            depth_size: 32,
            patch_e: 8,
            hidden,
            n_layers: layers,
            n_heads: heads,
            mlp_ratio: 4,
            time_dim: 128,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            n_ddim: 75,
            instr_vocab_size: 64,
            frame_interval: 4,
        }
    }

    pub fn xl2() -> Self {
        Self::paper_scale(28, 1152, 16, 2)
    }

    pub fn xl4() -> Self {
        Self::paper_scale(28, 1152, 16, 4)
    }

    pub fn xl8() -> Self {
        Self::paper_scale(28, 1152, 16, 8)
    }

    pub fn l2() -> Self {
        Self::paper_scale(24, 1024, 16, 2)
    }

    pub fn b2() -> Self {
        Self::paper_scale(12, 768, 12, 2)
    }

    /// Desk-scale model: 32x32 RGB, 4-dim poses, 65 tokens.
    pub fn mini() -> Self {
        Self {
            img_size: 32,
            img_channels: 3,
            latent_size: 32,
            latent_channels: 3,
            patch_i: 4,
            k: 3,
            pose_dim: 4,
            depth_enabled: false,
            depth_size: 32,
            patch_e: 8,
            hidden: 128,
            n_layers: 6,
            n_heads: 4,
            mlp_ratio: 4,
            time_dim: 128,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            n_ddim: 75,
            instr_vocab_size: crate::blockworld::VOCAB_SIZE,
            frame_interval: 4,
        }
    }

    /// Smallest configuration exercising every path; used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            img_size: 8,
            latent_size: 8,
            hidden: 16,
            n_layers: 2,
            n_heads: 2,
            time_dim: 16,
            depth_enabled: true,
            depth_size: 8,
            patch_e: 4,
            ..Self::mini()
        }
    }

    pub fn with_depth(mut self, on: bool) -> Self {
        self.depth_enabled = on;
        self
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    /// Looks up a named preset.
    pub fn preset(name: &str) -> Result<Self, PadnetError> {
        Ok(match name {
            "XL/2" => Self::xl2(),
            "XL/4" => Self::xl4(),
            "XL/8" => Self::xl8(),
            "L/2" => Self::l2(),
            "B/2" => Self::b2(),
            "mini" => Self::mini(),
            "mini-64" => Self::mini().with_hidden(64),
            "mini-256" => Self::mini().with_hidden(256),
            "mini-depth" => Self::mini().with_depth(true),
            "tiny" => Self::tiny(),
            other => return Err(PadnetError::Config(format!("unknown preset {other:?}"))),
        })
    }

    pub const PRESETS: &'static [&'static str] = &[
        "XL/2", "XL/4", "XL/8", "L/2", "B/2", "mini", "mini-64", "mini-256", "mini-depth", "tiny",
    ];

    pub fn validate(&self) -> Result<(), PadnetError> {
        let bad = |m: String| Err(PadnetError::Config(m));
        if self.patch_i == 0 || !self.latent_size.is_multiple_of(self.patch_i) {
            return bad(format!(
                "latent size {} not divisible by image patch {}",
                self.latent_size, self.patch_i
            ));
        }
        if self.depth_enabled && (self.patch_e == 0 || !self.depth_size.is_multiple_of(self.patch_e)) {
            return bad(format!(
                "depth size {} not divisible by depth patch {}",
                self.depth_size, self.patch_e
            ));
        }
        if self.n_heads == 0 || !self.hidden.is_multiple_of(self.n_heads) {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.n_heads));
        }
        if self.k == 0 || self.pose_dim == 0 || self.n_layers == 0 || self.instr_vocab_size == 0 {
            return bad("k, pose_dim, n_layers and vocab must be positive".into());
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return bad(format!("time_dim {} must be even", self.time_dim));
        }
        if self.n_ddim == 0 || self.n_ddim > self.diffusion_steps {
            return bad(format!("n_ddim {} vs T {}", self.n_ddim, self.diffusion_steps));
        }
        if self.frame_interval == 0 {
            return bad("frame interval must be positive".into());
        }
        Ok(())
    }

    /// Validation plus the constraints of the fixed pixel codec.
    pub fn validate_runnable(&self) -> Result<(), PadnetError> {
        self.validate()?;
        if self.latent_channels != self.img_channels || !self.img_size.is_multiple_of(self.latent_size) {
            return Err(PadnetError::Config(format!(
                "codec needs latent channels == image channels and img_size divisible by latent size \
                 ({}x{} -> {}x{})",
                self.img_size, self.img_channels, self.latent_size, self.latent_channels
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    /// Width of one image token before projection: `p^2 (k+1) c`.
    pub fn image_token_in(&self) -> usize {
        self.patch_i * self.patch_i * (self.k + 1) * self.latent_channels
    }

    /// Width of one image token's noise prediction: `p^2 k c`.
    pub fn image_token_out(&self) -> usize {
        self.patch_i * self.patch_i * self.k * self.latent_channels
    }

    pub fn depth_token_in(&self) -> usize {
        self.patch_e * self.patch_e * (self.k + 1)
    }

    pub fn depth_token_out(&self) -> usize {
        self.patch_e * self.patch_e * self.k
    }

    /// Image condition latent channels after concatenation, `(k+1) c`.
    pub fn image_cond_channels(&self) -> usize {
        (self.k + 1) * self.latent_channels
    }

    /// Action vector length after concatenation, `(k+1) * pose_dim`.
    pub fn action_in(&self) -> usize {
        (self.k + 1) * self.pose_dim
    }

    pub fn image_latent_len(&self) -> usize {
        self.latent_channels * self.latent_size * self.latent_size
    }

    pub fn depth_latent_len(&self) -> usize {
        self.depth_size * self.depth_size
    }

    pub fn count_tokens(&self) -> TokenCounts {
        let g = self.latent_size / self.patch_i.max(1);
        let image = g * g;
        let action = 1;
        let depth = if self.depth_enabled {
            let d = self.depth_size / self.patch_e.max(1);
            d * d
        } else {
            0
        };
        TokenCounts {
            image,
            action,
            depth,
            total: image + action + depth,
        }
    }

    /// Transformer GFLOPs per forward pass.
    ///
    /// Per layer: attention `4 n h^2 + 2 n^2 h`, MLP `2 r n h^2` with MLP
    /// ratio `r` (`8 n h^2` at r = 4), counting one multiply-add as one
    /// operation. Embeddings, modulation and heads are excluded.
    pub fn estimate_flops(&self) -> f64 {
        let n = self.count_tokens().total as f64;
        let h = self.hidden as f64;
        let attn = 4.0 * n * h * h + 2.0 * n * n * h;
        let mlp = 2.0 * self.mlp_ratio as f64 * n * h * h;
        (attn + mlp) * self.n_layers as f64 / 1e9
    }
}
