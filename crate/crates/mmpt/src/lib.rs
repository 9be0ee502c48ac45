//! Multi-frame pointmap estimation from short RGB clips.
//!
//! A window of W frames goes through a two-branch (ego/target) transformer
//! decoder once per directed frame pair. A trajectory encoder ties the pairs
//! together along the partner axis, causally, so a processed window can later
//! be extended frame-by-frame from cached keys and values without recomputing
//! anything already emitted. Everything runs on a small deterministic tensor
//! core with its own reverse-mode gradients; f32 is the working precision and
//! f64 is available end to end for tight numerical checks.

pub mod attention;
pub mod data;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod ply;
pub mod refine;
pub mod rope;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod tokenize;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
