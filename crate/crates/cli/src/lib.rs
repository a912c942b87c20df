//! Data ingestion, proxy evaluation and experiment orchestration on top of
//! `evoprune-core`.

pub mod artifacts;
pub mod config;
pub mod data;
pub mod evaluate;
pub mod experiments;
pub mod fit;

use evoprune_core::Error;

pub use config::RunConfig;
pub use evaluate::{Prepared, ProxyEvaluator};

/// Process exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Config(_) | Error::Bounds(_) | Error::EmptySpace(_) | Error::Graph(_) => 2,
        Error::Format { .. } | Error::Io(_) | Error::Json(_) | Error::Dimension(_) => 3,
        Error::Numeric(_) => 4,
        Error::Layer { .. } => unreachable!("root strips layer context"),
    }
}
