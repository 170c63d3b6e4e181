//! Two-track transformer over atoms and atom pairs, with a masked-token head,
//! a coordinate head and the denoising losses.

mod batch;
pub mod checkpoint;
mod config;
pub mod gradcheck;
mod network;
mod sample;

#[cfg(test)]
mod tests;

pub use batch::Batch;
pub use checkpoint::Checkpoint;
pub use config::{Init, ModelConfig, ParamSpec, PRESETS};
pub use network::{bundle, BlockOutput, ForwardOutput, LossBundle, LossVars, Model};
pub use sample::{make_noised_sample, masked_count, FeatureMask, NoiseConfig, NoisedSample};

use crate::diffcore::{DiffError, ParamStore};
use crate::molgraph::{MolError, ATOM_TYPE_VOCAB};
use thiserror::Error;

/// Atom types, then MASK and PAD, rounded up.
pub const TOKEN_VOCAB: usize = 128;
pub const MASK_TOKEN: u8 = ATOM_TYPE_VOCAB as u8;
pub const PAD_TOKEN: u8 = MASK_TOKEN + 1;
/// Buckets for ordered token pairs in the distance affine tables (prime).
pub const PAIR_TYPE_BUCKETS: usize = 1021;
/// Cross-entropy target marking positions without a loss.
pub const IGNORE_INDEX: usize = usize::MAX;

/// Prefix under which optimizer moments are stored in a checkpoint.
pub const OPT_FIRST_MOMENT: &str = "opt.m.";
pub const OPT_SECOND_MOMENT: &str = "opt.v.";

pub fn pair_type(a: u8, b: u8) -> usize {
    (a as usize * TOKEN_VOCAB + b as usize) % PAIR_TYPE_BUCKETS
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("checkpoint does not match model: {0}")]
    ConfigMismatch(String),
    #[error("molecule {0} has no atoms")]
    EmptyMolecule(String),
    #[error("batch has no masked atoms")]
    NoMaskedAtoms,
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Mol(#[from] MolError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Model<f32> {
    /// Parameters only; optimizer state is added by the trainer.
    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            meta,
            tensors: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let mut params = ParamStore::new();
        for (name, t) in &ckpt.tensors {
            if name.starts_with(OPT_FIRST_MOMENT) || name.starts_with(OPT_SECOND_MOMENT) {
                continue;
            }
            params.add(name.clone(), t.clone())?;
        }
        Model::from_params(ckpt.config.clone(), params)
    }
}
