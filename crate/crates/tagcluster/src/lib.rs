//! Semi-supervised part-of-speech tagging with task-specific word clusters.
//!
//! The pipeline trains a baseline linear-chain tagger, tags a large raw
//! corpus with it, collects per-word conditional tag distributions from the
//! machine-tagged text, clusters words by those distributions with k-means++,
//! and retrains the tagger with the induced cluster features (alongside
//! distributional exchange clusters).

pub mod cluster;
pub mod corpus;
pub mod error;
pub mod features;
pub mod pipeline;
pub mod stats;
pub mod tagger;

pub use error::{Error, Result};
