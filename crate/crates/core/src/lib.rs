//! Dense patient representations learned from free-text notes.
//!
//! The crate covers the whole pipeline: note normalization and TF-IDF
//! featurization ([`corpus`]), a small hand-differentiated neural substrate
//! ([`nn`]), a greedily trained stacked denoising autoencoder ([`sdae`]),
//! PV-DBOW paragraph vectors ([`doc2vec`]), feed-forward classifiers and
//! task metrics ([`classifier`]), feature attribution ([`interpret`]),
//! agreement and significance statistics ([`stats`]), the binary model
//! container ([`container`]) and the command-line front end ([`cli`]).

pub mod classifier;
pub mod cli;
pub mod container;
pub mod corpus;
pub mod doc2vec;
pub mod error;
pub mod interpret;
pub mod nn;
pub mod repr;
pub mod rng;
pub mod sdae;
pub mod stats;

pub use error::{Error, Result};
pub use repr::Representation;
pub use rng::Rng;
