//! Bearing fault diagnosis from raw vibration segments.
//!
//! The crate covers the whole pipeline: segmenting and normalizing raw
//! series ([`ingest`]), ranking features by minimum-redundancy
//! maximum-relevance mutual information ([`mrmr`]), sparse autoencoder
//! primitives with exact gradients ([`nn`]), greedy stacking plus softmax
//! fine-tuning ([`dnn`]), weight transfer to a new operating condition
//! ([`transfer`]) and confusion-matrix evaluation ([`eval`]).
//!
//! With the default `parallel` feature, independent work items (feature
//! pairs, folds, sparsity sweeps, prediction blocks) run on rayon. Without it
//! the same code paths run sequentially and produce bit-identical results.

pub mod dnn;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod mrmr;
pub mod nn;
pub mod par;
pub mod rng;
pub mod transfer;

pub use error::{Error, Result};
