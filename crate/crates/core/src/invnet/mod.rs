//! Invertible network: four space-to-depth stages, each followed by additive
//! coupling blocks, mapping `[4, 16, 16]` bond channels to 1024 latent values.

mod checkpoint;
mod coupling;
mod latent;
mod net;
mod psi;

use thiserror::Error;

use crate::numeric::NumericError;

pub use checkpoint::{decode, encode, CheckpointError, NamedArray, MAGIC, VERSION};
pub use coupling::{CouplingBlock, Init, Signature, PARAMS_PER_BLOCK};
pub use latent::{merge_latent, sample_zfree, split_latent, Y_DIM, Z_DIM};
pub use net::{InvertibleNet, NetConfig, ParamGrads, STAGES};
pub use psi::{psi_forward, psi_inverse};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("input must be [4, 16, 16], found {0:?}")]
    InputShape(Vec<usize>),
    #[error("latent must have 1024 values, found {0}")]
    LatentLength(usize),
    #[error("latent parts must be 128 + 896 values, found {y} + {z}")]
    LatentParts { y: usize, z: usize },
    #[error("space-to-depth needs even spatial extents, found {0:?}")]
    OddSpatial(Vec<usize>),
    #[error("depth-to-space needs a channel count divisible by 4, found {0:?}")]
    BadPsiChannels(Vec<usize>),
    #[error("coupling needs an even channel count, found {0:?}")]
    OddChannels(Vec<usize>),
    #[error("coupling block expects {expected} channels, found shape {found:?}")]
    ChannelMismatch { expected: usize, found: Vec<usize> },
    #[error("checkpoint lacks array '{0}'")]
    MissingArray(String),
    #[error("checkpoint repeats array '{0}'")]
    DuplicateArray(String),
    #[error("checkpoint array '{0}' does not belong to this network")]
    UnexpectedArray(String),
    #[error("checkpoint array '{name}' has shape {found:?}, network expects {expected:?}")]
    ArrayShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}
