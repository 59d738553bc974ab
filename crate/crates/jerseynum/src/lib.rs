//! A desk-scale laboratory for multi-task jersey number recognition.
//!
//! The pipeline trains a small residual CNN with three softmax heads — one
//! over whole jersey numbers, two over individual digits — under a weighted
//! multi-task cross-entropy loss, on deterministic synthetic jersey images.
//! Everything is built to be verifiable: gradients check against central
//! finite differences, losses and metrics against independent oracles, and
//! whole training runs are bit-reproducible from their seeds.

pub mod codec;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod gradcheck;
pub mod loss;
pub mod tensor;
pub mod trainer;

pub use codec::{ClassSet, DigitClass, JerseyLabel, TargetTriple};
pub use loss::{LossBreakdown, LossWeights};
pub use model::{BackboneConfig, Network, PredictionTriple};
pub use tensor::{Element, Tape, Tensor, ValueId};
