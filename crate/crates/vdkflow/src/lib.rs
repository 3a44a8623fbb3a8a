//! File formats, experiment drivers and the `vdkflow` command line on top
//! of [`vdkflow_core`].

use std::path::PathBuf;

pub mod bench;
pub mod case;
pub mod cli;
pub mod error;
pub mod io;

pub use error::Error;

/// The bundled case files.
pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}
