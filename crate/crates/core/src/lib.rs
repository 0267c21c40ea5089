//! Encoder-decoder segmentation of ultrasound frames: max-pooling indices
//! drive the decoder's unpooling, matched-depth encoder activations are
//! concatenated into the decoder, and training minimises a cross-entropy
//! weighted towards the ground-truth contour.

pub mod autodiff;
pub mod checkpoint;
pub mod crossval;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use mask::BinaryMask;
pub use model::{ModelParams, SumNetConfig};
pub use tensor::{Shape, Tensor};
