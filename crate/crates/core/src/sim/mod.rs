//! Closed-loop experimental harness.

pub mod chance;
pub mod effector;
pub mod neural;
pub mod session;
pub mod task;
