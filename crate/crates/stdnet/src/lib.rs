//! Compresses convolutional networks by replacing kernels with two-mode
//! Tucker-decomposed three-layer groups, choosing core-tensor ranks through
//! an unsupervised normalized-distortion search, and reporting analytic
//! parameter/FLOP costs.

pub mod cli;
pub mod convnet;
pub mod cost;
pub mod error;
pub mod io;
mod linalg;
pub mod search;
pub mod tensor;
pub mod tucker;
pub mod verify;

pub use error::{Error, Result};
