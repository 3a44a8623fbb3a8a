//! JSON file formats: injection samples, VDK structure dumps, fitted models
//! and active-learning runs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use vdkflow_core::gp::OutputScaling;
use vdkflow_core::space::{Component, InputScaling};
use vdkflow_core::{GpError, GpModel, InjectionSample, Kernel, LoadSpace, Network, VdkStructure};

pub const MODEL_FORMAT: &str = "vdkflow-gp";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: unsupported model format {format} v{version}")]
    ModelVersion { path: String, format: String, version: u32 },
    #[error("sample {index} has {got} buses, case has {expected}")]
    SampleSize { index: usize, expected: usize, got: usize },
    #[error(transparent)]
    Gp(#[from] GpError),
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let file = File::open(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_reader(BufReader::new(file)).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    let file_err = |source| IoError::File {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(file_err)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        source,
    })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(file_err)
}

pub fn read_samples(path: &Path, net: &Network) -> Result<Vec<InjectionSample>, IoError> {
    let samples: Vec<InjectionSample> = read_json(path)?;
    for (index, s) in samples.iter().enumerate() {
        if s.p.len() != net.n_buses() || s.q.len() != net.n_buses() {
            return Err(IoError::SampleSize {
                index,
                expected: net.n_buses(),
                got: s.p.len().min(s.q.len()),
            });
        }
    }
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordJson {
    pub bus: u32,
    pub component: Component,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnkJson {
    /// External number of the owning bus.
    pub owner: u32,
    pub support: Vec<u32>,
    /// Indices into the top-level `coords` list.
    pub coords: Vec<usize>,
    pub redundant: bool,
}

/// `vdk.json`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VdkJson {
    pub reduced: bool,
    pub n_active: usize,
    pub coords: Vec<CoordJson>,
    pub nnks: Vec<NnkJson>,
}

impl VdkJson {
    pub fn new(net: &Network, space: &LoadSpace, v: &VdkStructure, reduced: bool) -> Self {
        let id = |b: usize| net.buses[b].id;
        VdkJson {
            reduced,
            n_active: v.active.len(),
            coords: space
                .coords
                .iter()
                .map(|c| CoordJson {
                    bus: id(c.bus),
                    component: c.component,
                })
                .collect(),
            nnks: v
                .nnks
                .iter()
                .map(|n| NnkJson {
                    owner: id(n.owner_bus),
                    support: n.support.iter().map(|&b| id(b)).collect(),
                    coords: n.coords.clone(),
                    redundant: n.redundant,
                })
                .collect(),
        }
    }
}

/// Versioned on-disk GP model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    /// External number of the target bus.
    pub target: u32,
    pub fraction: f64,
    pub kernel: Kernel,
    pub input_scaling: InputScaling,
    pub output_scaling: OutputScaling,
    pub noise: f64,
    pub max_noise: f64,
    /// Standardized training inputs, one row per sample.
    pub design: Vec<Vec<f64>>,
    /// Raw target voltages, per unit.
    pub targets: Vec<f64>,
}

impl ModelFile {
    pub fn from_model(model: &GpModel, target: u32, fraction: f64) -> Self {
        ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            target,
            fraction,
            kernel: model.kernel().clone(),
            input_scaling: model.input_scaling().clone(),
            output_scaling: model.output_scaling(),
            noise: model.noise(),
            max_noise: model.max_noise(),
            design: model.design().to_vec(),
            targets: model.raw_targets().to_vec(),
        }
    }

    pub fn into_model(self) -> Result<GpModel, GpError> {
        GpModel::assemble(
            self.kernel,
            self.input_scaling,
            self.output_scaling,
            self.design,
            self.targets,
            self.noise,
            self.max_noise,
        )
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        let m: ModelFile = read_json(path)?;
        if m.format != MODEL_FORMAT || m.version != MODEL_VERSION {
            return Err(IoError::ModelVersion {
                path: path.display().to_string(),
                format: m.format,
                version: m.version,
            });
        }
        Ok(m)
    }
}
