//! A self-contained testbed for embedding-space illusion attacks on shared
//! multi-modal embeddings and consensus-based generative defenses.
//!
//! The pipeline, end to end:
//!
//! * [`synthdata`] builds a seeded synthetic dataset: smooth class
//!   prototypes on a pixel grid, noisy samples around them, and unit-norm
//!   label embeddings in a shared space.
//! * [`encoder`] maps pixels into the embedding space (ridge-fitted linear
//!   map or a small tanh MLP), classifies by cosine against the label
//!   bank, and exposes analytic input gradients of the cosine objective.
//! * [`attack`] runs projected gradient descent that drags an image's
//!   embedding toward an attacker-chosen label, plus the adaptive variant
//!   that differentiates through a sanitizer.
//! * [`reconstruct`] holds the sanitizer family: deterministic PCA
//!   autoencoder, its stochastic-latent variant, an exact-score diffusion
//!   purifier, and classic pixel transforms.
//! * [`consensus`] draws several sanitized reconstructions, votes, and
//!   aggregates by mode; it also carries the binomial success-probability
//!   model and the evaluation metrics.
//!
//! Everything is deterministic given a master seed; batch work is
//! parallelized with rayon behind the `parallel` feature (see [`exec`]).

pub mod attack;
pub mod consensus;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod img;
pub mod reconstruct;
pub mod rng;
pub mod synthdata;

pub use error::{CoreError, Result};

/// Clamp every component into `[0, 1]`.
pub fn clip01(x: nalgebra::DVector<f64>) -> nalgebra::DVector<f64> {
    x.map(|t| t.clamp(0.0, 1.0))
}
