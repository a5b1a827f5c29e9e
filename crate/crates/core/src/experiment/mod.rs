//! Configured experiments: validation, deterministic execution, JSON-lines
//! persistence and reports.

mod config;
mod record;
mod report;
mod runner;

pub use config::*;
pub use record::*;
pub use report::*;
pub use runner::*;
