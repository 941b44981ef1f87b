//! Spike-gated dual-path language model: LIF spike encoder, decay and
//! sparse-attention token mixing, dynamic-prior decoding head, surrogate
//! gradient training, decoding metrics and an analytical energy model.

pub mod block;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod decode;
pub mod energy;
pub mod error;
pub mod gating;
pub mod head;
pub mod lif;
pub mod model;
pub mod numerics;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use config::{AblationVariant, ModelConfig};
pub use error::{Error, Result};
pub use tensor::{BinaryTensor, Scalar, Tensor};
