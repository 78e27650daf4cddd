//! Temporal language localization with fine-grained iterative attention.
//!
//! A query and a video are encoded separately, exchanged through two
//! mirrored cross-modal attention branches, fused under a learned filter and
//! scored over multi-scale candidate windows.

pub mod attention;
pub mod config;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod localizer;
pub mod model;
pub mod nn;

pub use config::ModelConfig;
pub use error::{FianError, Result};
pub use model::{Fian, ModelInput};
