//! Bias-specialized Transformer teachers, ensemble distillation into a single
//! student, and the ranking-portfolio backtest and diagnostics around them.

pub mod backtest;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod exec;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod priors;
pub mod seed;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
