//! Adversarial discriminative domain adaptation on a small from-scratch
//! tensor engine.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f32` tensors, a reverse-mode tape, optimizers and the
//!   checkpoint format.
//! - [`models`]: the LeNet encoder, classifier head, domain discriminator and
//!   layer tying between source and target encoders.
//! - [`losses`]: classification, discriminator and the three mapping losses
//!   (minimax, inverted-label GAN, domain confusion).
//! - [`adaptation`]: source pretraining, adversarial adaptation, evaluation
//!   and method comparison.
//! - [`data`]: IDX ingestion, the digit sampling protocol and a synthetic
//!   rotated-blob domain shift.
//! - [`experiment`]: config files, run reports and the command drivers used by
//!   the `adda` binary.

pub mod adaptation;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod models;
pub mod tensor;
mod util;

pub use error::{Error, Result};
