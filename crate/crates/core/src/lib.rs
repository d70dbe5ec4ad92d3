//! Stacked convolutional energy layers learned without labels.
//!
//! Pipeline: convolutional ZCA whitening, then energy layers whose kernels
//! are subspace bases found by minibatch K-Subspaces, then 2×2 average
//! pooling. Representations are clustered with K-Means and scored by the
//! best cluster-to-class matching.

pub mod cli;
pub mod config;
pub mod data;
pub mod energy;
pub mod error;
pub mod evaluation;
pub mod fetch;
pub mod inspect;
pub mod ksubspaces;
pub mod metalearn;
pub mod network;
pub mod seed;
pub mod zca;

pub use error::{Error, Result};
