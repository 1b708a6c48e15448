//! Desk-scale laboratory for word-level unsupervised speech recognition.
//!
//! The crate covers the full loop: synthesize speech-like corpora with known
//! word boundaries, learn segmentations from raw frames, quantize pooled
//! segments into pseudo-tokens, train recognizers from *unpaired* token
//! streams (a distribution-matching generator and a masked-infill transformer),
//! refine boundaries end-to-end through the trained model, self-train a frame
//! classifier on pseudo-labels, and score everything against gold labels.

pub mod autodiff;
pub mod corpus;
pub mod data;
pub mod error;
pub mod eval;
pub mod jstti;
pub mod linalg;
pub mod quantize;
pub mod rng;
pub mod selftrain;

pub mod nn;
pub mod boundary;
pub mod pooling;
pub mod pusm;

pub use error::{Error, Result};
