//! Energy-aware schedule search for tiled GPU tensor kernels.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod counters;
pub mod energymodel;
pub mod features;
mod fsutil;
pub mod measure;
pub mod opspace;
pub mod search;
pub mod stats;

pub use fsutil::write_atomic;
