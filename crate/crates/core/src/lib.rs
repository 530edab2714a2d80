//! Seeded generators for abstract-token and string-symbolic in-context
//! reasoning datasets, an evaluation harness with forcing strategies, and
//! token-budget analytics for CoT mixing schedules.

pub mod dag;
pub mod cli;
pub mod error;
pub mod eval;
pub mod langsym;
pub mod manifest;
pub mod processor;
pub mod recipe;
pub mod rng;
pub mod sequence;
pub mod vocab;

pub use error::{Error, Result};
