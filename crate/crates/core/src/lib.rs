//! Dual-stream vision-language video quality engine.
//!
//! Three feature heads (a frame-embedding adapter, a temporal context module
//! and a fragment detail head) are fused under text guidance and scored
//! against a pair of quality prompts. Training minimizes `1 - PLCC`.

pub mod bvfe;
pub mod fusion;
pub mod harness;
pub mod numerics;
pub mod scoring;
pub mod storage;
pub mod tcm;
pub mod vbtc;

pub use numerics::{NumericsError, Scalar, Tensor};
