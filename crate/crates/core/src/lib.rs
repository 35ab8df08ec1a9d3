//! Cycle-level simulator of a hybrid RPE/MAT accelerator for EfficientViT:
//! network IR, FIX8 reference semantics, engine models, the time-multiplexed
//! pipelined scheduler and reporting.

pub mod engine;
pub mod error;
pub mod functional;
pub mod ir;
pub mod par;
pub mod report;
pub mod sched;
pub mod verify;

pub use error::{Error, Result};
