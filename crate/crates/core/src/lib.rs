//! Paired autoencoders for inverse problems.
//!
//! Two autoencoders — one on the quantity of interest `x`, one on the
//! observations `y` — are joined by trainable latent-space maps `M` and
//! `M+`, giving surrogate forward and inverse mappings. On top of that
//! substrate this crate provides:
//!
//! - closed-form optimal linear autoencoders and latent maps ([`linear`]),
//! - joint training of the four-term paired objective ([`paired`]),
//! - variational variants with sampling inference ([`variational`]),
//! - latent-space inversion with warm starts ([`inversion`]),
//! - likelihood-free reconstruction-quality metrics and OOD scoring
//!   ([`metrics`]),
//! - deterministic datasets and corruption processes ([`data`]).
//!
//! Everything is 64-bit, seeded, and reproducible bit-for-bit within one
//! build.

pub mod data;
pub mod error;
pub mod inversion;
pub mod linalg;
pub mod linear;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod paired;
pub mod rng;
pub mod tensor;
pub mod variational;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::Tensor;
