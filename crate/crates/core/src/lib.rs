//! Linear segmentation probes on frozen self-supervised ViT features.
//!
//! The backbone is represented only by its stored patch features
//! ([`feature_store`]); the one trainable piece is an affine head
//! ([`probe`]) fitted with a masked pixel-wise cross-entropy so that sparse
//! (point, scribble) and noisy label masks ([`labels`]) can supervise it.
//! [`eval`] scores predictions with mIoU and [`cluster`] runs k-means over
//! the raw tokens to inspect what the features encode without supervision.

pub mod checkpoint;
pub mod cluster;
pub mod error;
pub mod eval;
pub mod feature_store;
pub mod labels;
pub mod npy;
pub mod probe;
pub mod rng;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
