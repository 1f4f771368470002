//! Contrastive sentence embeddings with an attention mutual-information regularizer.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mistats;
pub mod momentum;
pub mod numerics;
pub mod textio;
pub mod trainer;

pub use error::{Error, Result};
