#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

//! Speculative decoding with dynamically steered pretrained drafters.

pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod model;
pub mod specdec;
pub mod steering;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
