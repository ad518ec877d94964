//! Speaker verification with segment aggregation.
//!
//! An utterance is split into overlapping short segments, each segment is
//! embedded by a raw-waveform network (strided convolution, pre-activation
//! residual blocks, GRU, embedding layer) and the segment embeddings are
//! averaged into one speaker embedding. Training supervises both the averaged
//! embedding and every segment embedding, optionally distilling from a frozen
//! teacher network. Evaluation reports equal error rates per test duration.

pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod kv;
pub mod model;
pub mod numerics;
pub mod segmentation;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
