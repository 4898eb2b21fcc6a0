//! Arbitrary frame- and clip-conditioned one-shot video generation at desk
//! scale: causal latent geometry, an analytic video autoencoder, a tiny
//! flow-matching diffusion transformer, shared-position super-resolution,
//! preference optimization and segment-wise auto-regressive long generation.

pub mod autodiff;
pub mod cli;
pub mod conditioning;
pub mod corpus;
pub mod dit;
pub mod dpo;
pub mod error;
pub mod evalkit;
pub mod io;
pub mod latent_geometry;
pub mod sar;
pub mod seeding;
pub mod sr;
pub mod toy_vae;

pub use error::{Error, Result};
