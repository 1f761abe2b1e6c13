//! Feature-norm domain generalization on small fully connected networks.
//!
//! The crate is organized bottom-up:
//!
//! * [`autodiff`]: a tape-based reverse-mode engine over dense matrices.
//! * [`network`]: feature extractor and classifier head.
//! * [`losses`]: cross-entropy, adaptive-radius feature-norm loss, KL mimicry.
//! * [`datagen`]: seeded synthetic multi-domain scenarios and balanced batching.
//! * [`trainer`]: source-only, feature-norm and collaborative training loops.
//! * [`harness`]: leave-one-domain-out, category-shift and sensitivity experiments.

pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod network;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Tensor, Var};
pub use error::{Error, Result};
