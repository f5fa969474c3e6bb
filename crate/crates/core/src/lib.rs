//! Cognitive diagnosis and adaptive testing with textual and ID embeddings.
//!
//! The pipeline has two stages. Stage 1 ([`raif`]) trains an attribute text
//! encoder through a concept-aligned response predictor and freezes the
//! resulting embeddings. Stage 2 ([`aari`], [`cdmodels`]) adapts those frozen
//! embeddings per task, fuses them with learnable ID embeddings, and trains a
//! diagnosis model for the transductive, inductive and zero-shot scenarios.
//! [`cat`] simulates computerized adaptive testing on top of a pretrained model.

pub mod aari;
pub mod attributes;
pub mod cat;
pub mod cdmodels;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod nncore;
pub mod raif;
pub mod rng;
pub mod synthetic;

pub use error::{Error, ErrorKind, Result};
