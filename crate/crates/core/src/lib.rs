//! Permutation-invariant image-document score functions, contrastive training and evaluation on synthetic multimodal bags.

mod error;

pub mod aggregators;
pub mod cli;
pub mod config;
pub mod encoders;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod json;
pub mod numeric;
pub mod objective;
pub mod scoring;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
