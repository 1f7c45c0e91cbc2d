//! Differentiable tree transduction at desk scale.
//!
//! Trees are embedded as tensor product representations (filler x role
//! matrices), the three Lisp operations car/cdr/cons become exact linear
//! maps on the role axis, and a transformer-based controller (a single
//! mixture-of-experts layer shared across steps, or one dedicated layer
//! per step) drives a differentiable interpreter loop over them. A
//! two-predictor "sluggish" termination mechanism lets the model pick its
//! own step count.

pub mod controller;
pub mod diffmath;
pub mod error;
pub mod machine;
pub mod nn;
pub mod symbolic;
pub mod termination;
pub mod tpr;

pub use error::{Error, Result};
