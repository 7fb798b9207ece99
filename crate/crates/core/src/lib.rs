//! Convolutional word-sequence language model.
//!
//! The model predicts the next word from an unbounded history with a
//! front-end CNN (`αCNN`) over the most recent words and a chain of
//! shared-weight summarizer CNNs (`βCNN`) folding older history into a
//! single embedding-sized slot. Convolution layers mix location-shared
//! (Time-Flow) and location-specific (Time-Arrow) feature maps, and gating
//! networks replace pooling.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod layers;
pub mod model;
pub mod model_file;
pub mod rerank;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Activation, Tensor};
