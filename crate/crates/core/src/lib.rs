//! Adaptive closed-loop neural decoding with a recursively trained mixture
//! of multilinear experts and HMM dynamic gating (REW-MSLM).

pub mod config;
pub mod error;
pub mod experiment;
pub mod features;
pub mod gating;
pub mod io;
pub mod metrics;
pub mod mslm;
pub mod npls;
pub mod runtime;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
