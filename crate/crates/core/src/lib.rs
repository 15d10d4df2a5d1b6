//! Locate-and-edit workbench for a toy transformer used as a True/False
//! classifier: gradient-norm localization, rank-one MLP edits and the
//! efficacy / generalization / specificity benchmark.

pub mod cli;
pub mod error;
pub mod eval;
pub mod model;
pub mod prompt;
pub mod rome;
pub mod tensor;
pub mod trace;
pub mod train;
pub mod world;

pub use error::{Error, Result};
