//! The PAD network: fixed codecs, tokenization over a fixed image/action/depth
//! layout, a masked diffusion transformer conditioned on timestep and
//! instruction, detokenization, initialization and checkpoints.

mod checkpoint;
mod codec;
mod config;
mod layout;
mod model;
mod params;
pub mod probe;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use codec::{decode_depth, decode_image, denormalize_pose, encode_depth, encode_image, normalize_pose};
pub use config::{PadConfig, TokenCounts};
pub use layout::{
    concat_condition, detokenize, patchify, unpatchify, DenoiseItem, ModalityBundle, NoisePrediction, TokenLayout,
    TokenSeq,
};
pub use model::{timestep_embedding, BatchLoss, BoundParams, ForwardOut, PadNet};
pub use params::{ParamGroup, ParamStore};

use serde::{Deserialize, Serialize};

use crate::numcore::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum PadnetError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("timestep {t} outside [1, {max}]")]
    Timestep { t: usize, max: usize },
    #[error("instruction id {id} outside vocabulary of {vocab}")]
    Instruction { id: usize, vocab: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Action,
    Depth,
}

/// One value per modality, always iterated as image, action, depth.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerModality<T> {
    pub image: T,
    pub action: T,
    pub depth: T,
}

impl<T> PerModality<T> {
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        [&self.image, &self.action, &self.depth].into_iter()
    }

    pub fn get(&self, m: Modality) -> &T {
        match m {
            Modality::Image => &self.image,
            Modality::Action => &self.action,
            Modality::Depth => &self.depth,
        }
    }

    pub fn map<U>(self, mut f: impl FnMut(T) -> U) -> PerModality<U> {
        PerModality {
            image: f(self.image),
            action: f(self.action),
            depth: f(self.depth),
        }
    }
}
