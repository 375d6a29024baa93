//! Speaker diarization with a latent-class soft-clustering model over
//! i-vectors: UBM / total-variability / PLDA training, PLDA / SVM / hybrid
//! scoring back-ends, an eigenvoice baseline, temporal smoothing, and an
//! RT09-style scorer.

pub mod archive;
pub mod config;
pub mod corpus;
pub mod diarizer;
pub mod error;
pub mod evaluate;
pub mod gmm;
pub mod linalg;
pub mod scoring;
pub mod synth;
pub mod temporal;
pub mod tvspace;

pub use error::{Error, Result};
