//! Data generation, file formats, training, evaluation and diagnostics.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod featfile;
pub mod gradcheck;
pub mod sweep;
pub mod train;
