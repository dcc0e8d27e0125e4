//! Cross-modal pathology image search.
//!
//! A single-channel (H&E) query slide is tiled into patches, embedded with a
//! small variational autoencoder, and matched patch-by-patch against indexed
//! multi-channel (mIF) slides whose latents were mapped into the H&E latent
//! space by a linear map fitted on DTW-aligned pairs. Per-patch top-k hits
//! become ballots, and instant-runoff voting turns them into a slide ranking.

pub mod error;
pub mod dtw;
pub mod index;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod synthetic;
pub mod vae;
pub mod voting;

pub use error::{Error, Result};
