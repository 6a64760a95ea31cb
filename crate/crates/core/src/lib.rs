//! Character-level neural transliteration.
//!
//! A bidirectional GRU encoder reads the source name, an attention decoder emits the target
//! name one character at a time, and the whole network is trained jointly on the negative
//! log-likelihood of reference transliterations. Inference uses beam search; evaluation
//! follows the NEWS shared-task metrics (ACC, mean F-score, MRR, MAP).

pub mod checkpoint;
pub mod data;
pub mod decoding;
mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use checkpoint::Checkpoint;
pub use data::{Batch, SequencePair, Vocabulary};
pub use decoding::{beam_search, greedy_search, transliterate, Candidate, DecodeOptions};
pub use error::{Error, Result};
pub use metrics::{EvalItem, MetricsReport};
pub use model::{ModelDims, ModelParams};
pub use numerics::{Tape, Tensor, Var};
pub use training::{train, TrainConfig, TrainReport};
