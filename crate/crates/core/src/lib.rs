//! Medical-style visual question answering with cross-modal self-attention
//! (CMSA) fusion and multi-task pre-training of the image encoders.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: tensors, reverse-mode autodiff, gradient checking, Adam.
//! - [`question`]: vocabulary, padding, embeddings and the LSTM encoder.
//! - [`image`]: type-specific conv backbones, the type gate and spatial map.
//! - [`cmsa`]: multimodal feature map and self-attention glimpses.
//! - [`heads`]: answer, compatibility and image-task heads plus the losses.
//! - [`data`]: synthetic corpora, compatibility pairing, tensor bundles.
//! - [`harness`]: configs, models, training loops, evaluation, checkpoints.

pub mod cmsa;
pub mod data;
mod error;
pub mod harness;
pub mod heads;
pub mod image;
pub mod numerics;
pub mod question;

pub use error::{Error, Result};
