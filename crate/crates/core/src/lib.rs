//! Federated, differentially private generative modeling over feature embeddings.
//!
//! The library simulates a federation of clients that hold private embedding
//! datasets and jointly train a conditional generative model (a conditional
//! VAE, or a conditional GAN baseline) under DP-SGD. Only the shared part of
//! each model (the decoder, or the generator) is transmitted and aggregated;
//! encoders and discriminators stay local. The aggregated global decoder is
//! then used by every client to generate a synthetic embedding dataset, on
//! which personalized downstream classifiers are trained and combined with
//! purely local classifiers through a validation-tuned interpolation weight.
//!
//! Everything is deterministic given a global seed: all randomness is drawn
//! from counter-based streams keyed by `(seed, client, round, purpose)`, so
//! results are independent of worker count and scheduling order.

pub mod config;
pub mod data;
pub mod downstream;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod federation;
pub mod models;
pub mod numerics;
pub mod privacy;

pub use error::{Error, Result};
