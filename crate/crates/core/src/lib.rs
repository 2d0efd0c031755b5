//! Generative recommendation with semantic reasoning, dual LightGCN
//! propagation and contrastive interest alignment.

pub mod align;
pub mod data;
pub mod embed;
pub mod error;
pub mod eval;
pub mod genrec;
pub mod graphs;
pub mod infer;
pub mod manifest;
pub mod reason;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
