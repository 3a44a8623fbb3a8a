//! Graph-structured Gaussian-process learning of AC power-flow voltage
//! functions.
//!
//! The crate is `no_std` (it needs `alloc`). Case-file parsing, JSON/CSV
//! formats, parallel batch drivers and the command line live in the
//! companion `vdkflow` crate.
//!
//! Module map:
//! - [`grid`]: validated network model, neighbourhoods, admittance matrix
//! - [`acpf`]: Newton-Raphson power flow, hypercube samplers, labeling
//! - [`space`]: the flattened space of uncertain load injections
//! - [`kernels`]: squared-exponential sub-kernels and the vertex-degree kernel
//! - [`gp`]: exact GP inference, likelihood gradients, fitting, updates
//! - [`al`]: layer decomposition and network-swipe active learning
//! - [`stats`]: error metrics, confidence coverage, KDE and KL divergence
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod acpf;
pub mod al;
pub mod gp;
pub mod grid;
pub mod kernels;
pub mod seed;
pub mod space;
pub mod sparse;
pub mod stats;

mod math;

pub use acpf::{AcpfError, AcpfOptions, Distribution, InjectionSample, PowerFlowSolution};
pub use al::{AlHistory, AlOptions, LayerDecomposition};
pub use gp::{FitOptions, GpError, GpModel};
pub use grid::{Branch, Bus, BusKind, GridError, Network};
pub use kernels::{Kernel, KernelError, VdkStructure};
pub use space::LoadSpace;
