//! Condition-guided diffusion for text-driven video stylization, at desk scale.
//!
//! A small conditional ε-predictor is trained on synthetic content/style
//! video pairs and then used to stylize videos with composed
//! classifier-free guidance over three conditions (content latent, style
//! token, self-attention saliency mask), structure-loss gradient steering
//! of the latent, and a recurrent deflicker pass over the output frames.

pub mod error;
pub mod attention;
pub mod autoencoder;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod guidance;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod numerics;
pub mod parallel;
pub mod sampler;
pub mod schedule;
pub mod structure;
pub mod temporal;
pub mod video;
pub mod workflow;

pub use error::{Error, Result};
