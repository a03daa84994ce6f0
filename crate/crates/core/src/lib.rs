//! Feature-interaction attributions for dual-encoder similarity models.
//!
//! A dual encoder scores a pair as `s = g(a) . h(b)`. The attribution
//! tensor produced by [`attribution::interaction_attributions`] assigns a
//! share of the four-corner score difference
//! `f(a,b) - f(r_a,b) - f(a,r_b) + f(r_a,r_b)` to every (image patch,
//! caption token) pair, using integrated Jacobians of both encoders along
//! straight-line paths from reference representations.

pub mod attribution;
pub mod baselines;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod method;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
