//! Operator kernels and their tape bindings.

pub mod attention;
pub mod basic;
pub mod conv;
pub mod loss;
pub mod resize;

pub use attention::AttentionParams;
pub use basic::Pads;
