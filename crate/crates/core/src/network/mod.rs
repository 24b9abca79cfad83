//! Dense-block encoder classifier and skip-connected mask decoder.
//!
//! The encoder is a four-block DenseNet ending in a single-logit head; its
//! four dense-block outputs double as skip features for the decoder. The
//! decoder receives those features and nothing else: there is no label or
//! class input anywhere on the mask path.

mod checkpoint;
mod decoder;
mod encoder;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMetadata, ModelCheckpoint};
pub use decoder::{decoder_forward, DecoderBlockConfig, DecoderConfig};
pub use encoder::{encoder_forward, DenseBlockConfig, EncoderConfig, EncoderOutput, FrozenEncoder};
pub use params::{init_params, Bound, Init, Norm, ParamSpec, ParamStore};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::scalar::Real;

/// Batch-norm epsilon used by every normalization layer.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

/// A model exposing `P(y = 1 | x)` for `[N, C, H, W]` inputs, differentiable in `x`.
pub trait PositiveProbability<T: Real> {
    fn positive_probability(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}
