//! Plumbing behind the `interattr` binary: argument types, the subcommands
//! and the HTTP API used by the explorer.

pub mod args;
pub mod commands;
pub mod heatmap;
pub mod server;

use interattr::attribution::{AttributionConfig, InteractionTensor};
use interattr::data::GroundedPair;
use interattr::encoders::DualEncoder;
use interattr::{Error, Result};
use serde::{Deserialize, Serialize};

pub use interattr::method::Method;

pub fn attribute_pair(
    model: &DualEncoder,
    pair: &GroundedPair,
    method: Method,
    cfg: &AttributionConfig,
    seed: u64,
) -> Result<InteractionTensor> {
    interattr::method::attribute(model, &pair.image, &pair.caption, method, cfg, seed)
}

/// Machine-readable error body, written to stderr by the binary and
/// returned by the API.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

impl From<&Error> for ErrorBody {
    fn from(e: &Error) -> Self {
        Self {
            error: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}
