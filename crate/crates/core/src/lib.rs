//! Multimodal-query knowledge retrieval.
//!
//! A query pairs a text with an image (a sequence of discrete visual tokens);
//! the target is a text passage from a knowledge corpus. This crate provides
//! a trainable dual encoder scored by inner product, exact top-k search,
//! a BM25 baseline, late-fusion re-ranking, dataset forging, and evaluation.

pub mod cli;
pub mod dense;
pub mod encoder;
pub mod error;
pub mod forge;
pub mod metrics;
pub mod model;
pub mod sparse;
pub mod synthetic;
pub mod textproc;
pub mod trainer;

pub use error::{Error, Result};
