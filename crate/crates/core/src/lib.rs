//! Two-stage audio-visual emotion representation learning.
//!
//! A shared transformer encoder tokenizes log-mel spectrograms and video
//! tubes, is pre-trained with masked reconstruction plus audio-visual
//! InfoNCE, then receives caption knowledge through a dual-path
//! contrastive objective that tunes only LayerNorm parameters.

pub mod ablation;
pub mod backbone;
pub mod captions;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod graph;
pub mod losses;
pub mod optim;
pub mod params;
pub mod rng;
pub mod stage1;
pub mod stage2;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
