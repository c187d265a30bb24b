//! Architecture search for ResNet-style image classifiers under an explicit
//! FLOP budget. The search grows networks by inserting near-identity
//! residual blocks at random positions, shears them back with an L1 penalty
//! that deletes whole blocks, and re-widths every layer with a cost-weighted
//! group-lasso shrink/expand routine.

pub mod arch;
pub mod config;
pub mod cost;
pub mod data;
pub mod dot;
pub mod error;
pub mod insert;
pub mod lasso;
pub mod morph;
pub mod optim;
pub mod rng;
pub mod runlog;
pub mod search;
pub mod serialize;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
