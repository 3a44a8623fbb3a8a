use thiserror::Error;
use vdkflow_core::al::AlError;
use vdkflow_core::stats::StatsError;
use vdkflow_core::{AcpfError, GpError, GridError, KernelError};

use crate::case::CaseError;
use crate::io::IoError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Acpf(#[from] AcpfError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Al(#[from] AlError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("CSV output failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bus {0} is not in the case")]
    UnknownBus(u32),
    #[error("trial {trial}: {source}")]
    Trial {
        trial: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{0}")]
    Usage(String),
}

impl Error {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Case(_) => "case",
            Error::Io(_) => "io",
            Error::Grid(_) => "grid",
            Error::Acpf(_) => "acpf",
            Error::Kernel(_) => "kernel",
            Error::Gp(_) => "gp",
            Error::Al(_) => "al",
            Error::Stats(_) => "stats",
            Error::Csv(_) => "csv",
            Error::Config(_) => "config",
            Error::UnknownBus(_) => "unknown_bus",
            Error::Trial { source, .. } => source.kind(),
            Error::Usage(_) => "usage",
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({
            "error": {
                "kind": self.kind(),
                "message": self.to_string(),
            }
        });
        if let Error::Trial { trial, .. } = self {
            v["error"]["trial"] = (*trial).into();
        }
        v
    }
}
