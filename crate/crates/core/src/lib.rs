//! Semantic log representation and log-event-level anomaly detection on CPU.
//!
//! The crate covers the whole path from raw log lines to per-event anomaly
//! decisions:
//!
//! * [`ingest`] parses raw lines into chronologically ordered, masked and
//!   normalized [`ingest::LogEvent`]s.
//! * [`drain`] mines log templates with a fixed-depth parse tree; the
//!   templates feed the TF-IDF weighting of [`static_embed`].
//! * [`wordpiece`] and [`encoder`] implement a BERT-style contextual encoder
//!   used both as the large FP32 teacher and as the small student.
//! * [`quant`] calibrates and quantizes selected linear layers of the student
//!   to INT8 and runs mixed-precision inference.
//! * [`enhancer`] trains the residual low-rank map that projects student
//!   embeddings into the teacher's embedding space.
//! * [`detector`] windows embedding sequences and classifies every event with
//!   a vanilla recurrent network trained by backpropagation through time.
//! * [`eval`] holds detection metrics, timing harnesses and embedding-space
//!   similarity measures.
//!
//! Tensors are persisted through the little-endian named-tensor
//! [`container`] format.

pub mod container;
pub mod detector;
pub mod drain;
pub mod encoder;
pub mod enhancer;
mod error;
pub mod eval;
pub mod ingest;
pub mod quant;
pub mod representation;
pub mod static_embed;
pub mod synth;
pub mod tensor;
pub mod wordpiece;

pub use error::{Error, Result};

/// A dense FP32 embedding vector.
pub type Embedding = Vec<f32>;
