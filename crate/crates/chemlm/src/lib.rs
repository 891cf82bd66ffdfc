//! A desk-scale SMILES language-model pipeline.
//!
//! The crate covers the full path from raw SMILES text to a trained
//! transformer encoder and back out to analysis artifacts:
//!
//! - [`tokenizer`]: regex-based SMILES tokenization and vocabulary handling
//! - [`dataset`]: adaptive length bucketing, masked-token corruption, corpus stats
//! - [`nn`]: a small dense-tensor engine with reverse-mode differentiation
//! - [`attention`]: rotary rotations, random feature maps, and four attention
//!   variants (full softmax with absolute or rotary positions, linear attention
//!   in its original and modified rotary forms)
//! - [`model`]: the encoder stack, MLM head, pooled embeddings, fine-tune heads
//! - [`checkpoint`]: a self-describing named-tensor container
//! - [`train`]: LAMB optimizer, pretraining and fine-tuning loops, metrics
//! - [`analysis`]: attention/geometry cosine analysis and n-gram fingerprints
//! - [`config`]: the key-value run configuration shared by all commands

pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod model;
pub mod nn;
pub mod tokenizer;
pub mod train;

pub use tokenizer::{Vocabulary, TokenSequence};
