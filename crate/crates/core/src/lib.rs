//! Graph-based generation of city block layouts.
//!
//! A city is a graph of blocks joined by adjacency. Each block's buildings
//! are compressed by a small variational autoencoder into a latent that is
//! quantized per dimension; a masked graph autoencoder then learns to
//! predict those codes from the surrounding context, and a scheduled
//! sampler fills unknown blocks in order of model confidence.

pub mod autodiff;
pub mod bvae;
pub mod citygraph;
pub mod error;
pub mod geometry;
pub mod gmae;
pub mod metrics;
pub mod pipeline;
pub mod quantizer;
pub mod sampler;
pub mod toy;

pub use error::{Error, Result};
