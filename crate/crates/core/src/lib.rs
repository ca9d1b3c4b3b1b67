//! Multi-class 2D laser detector with temporal cutouts, a 1D convolutional
//! voting network and the matching evaluation tools.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod net;
pub mod pipeline;
pub mod preproc;
pub mod types;
pub mod vote;

pub use error::{Error, Result};
