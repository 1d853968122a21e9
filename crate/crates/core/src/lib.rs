//! Context-aware classification of large images.
//!
//! A local-representation network encodes every patch of an image into a
//! pooled feature vector; the vectors are laid out in the patches' spatial
//! order as a feature cube, and a cascade of context blocks aggregates that
//! cube into an image-level prediction (plus an optional per-cell map).

pub mod config;
pub mod context_net;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod layers;
pub mod local_repr;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
