//! Feature-extraction pipeline for static action recognition experiments.
//!
//! The pieces, bottom to top:
//!
//! - [`tensor`]: dense f32 tensors, rank 1 to 3, channel-major.
//! - [`layers`]: forward kernels for conv / relu / maxpool / lrn / fc /
//!   dropout / softmax, plus the backward kernels head fine-tuning needs.
//! - [`arch`] / [`network`]: a declarative layer list validated into a
//!   runnable network with feature taps on its fully connected layers and a
//!   bit-exact weight file format.
//! - [`dataio`]: tab-separated dataset manifests, portable pixmap decoding,
//!   bilinear resize / center crop / mean subtraction.
//! - [`classifiers`]: polynomial-kernel SVM trained by SMO, k-nearest
//!   neighbors, and a gain-ratio decision tree over extracted features.
//! - [`finetune`]: head replacement, SGD training of the fully connected
//!   stack over a frozen backbone, and the midpoint layer-size sweep.
//! - [`eval`]: video-consistent splits, confusion matrices, majority voting.

pub mod arch;
pub mod classifiers;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod layers;
pub mod network;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
