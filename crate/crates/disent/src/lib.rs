//! Disentangled representation learning lab: beta-VAE and ID-GAN training
//! on a procedurally generated sprite factor lattice, with FVM/MIG scoring
//! and latent-traversal rendering.

pub mod cli;
pub mod config;
pub mod dsprites;
pub mod error;
pub mod idgan;
pub mod metrics;
pub mod models;
pub mod tensor;
pub mod traversal;
pub mod vae;

pub use error::{Error, Result};
