//! Desk-scale cascaded text-to-image GAN.
//!
//! A caption is encoded into word features and a conditioned sentence
//! embedding; a stack of generator stages turns noise into 8×8, 16×16 and
//! 32×32 images. Each refinement stage gates its features with learned
//! spatial masks and is pushed, through a statistics-matching loss, to keep
//! the key part close to features of real images. Every stage has a
//! discriminator whose embedding is regularized by a VAE branch.

pub mod ablation;
pub mod attention;
pub mod cli;
pub mod config;
pub mod data;
pub mod dnm;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod losses;
pub mod model;
pub mod nn;
pub mod text_encoding;
pub mod training;

pub use config::{Ablation, LossWeights, ModelConfig, TrainConfig};
pub use error::{Error, Result};
