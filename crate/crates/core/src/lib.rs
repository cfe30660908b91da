//! Phonocardiogram murmur analysis: heartbeat segmentation front-end,
//! audio-conditioned multiple-choice language model with low-rank adapters,
//! task construction and evaluation metrics.

pub mod audio_lm;
pub mod checkpoint;
pub mod dsp;
pub mod eval;
pub mod error;
pub mod ingest;
pub mod nn;
pub mod segmenter;
pub mod tasks;

pub use error::{Error, Result};
