//! Command-line surface of linkcap: policy loading, microbenchmarks,
//! fault-injection scenarios and compartment graphs.

pub mod bench;
pub mod graph;
pub mod resolve;
pub mod scenario;

use thiserror::Error;

/// Every way a CLI command can fail, mapped onto distinct exit codes.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Fault(String),
    #[error("{0}")]
    Mismatch(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 1,
            HarnessError::Validation(_) => 2,
            HarnessError::Fault(_) => 3,
            HarnessError::Mismatch(_) => 4,
        }
    }
}
