//! Self-corrected flow distillation at desk scale.
//!
//! A flow-matching teacher is trained on toy 2D data, then distilled into a
//! student that samples well with one step and with a few steps. The
//! distillation objective combines a truncated consistency loss, an
//! adversarial loss on one-step samples, a reflow loss on the student's own
//! one-step outputs, and a bidirectional consistency loss.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod distill;
pub mod error;
pub mod eval;
pub mod flow;
pub mod networks;
pub mod runner;
pub mod seeds;

pub use error::{Error, Result};
