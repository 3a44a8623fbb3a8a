//! The flattened space of uncertain injections.
//!
//! Only loads vary, so a coordinate is a `(bus, P|Q)` pair whose base load is
//! nonzero. Every other injection stays at its base value and never enters a
//! kernel.

use alloc::vec;
use alloc::vec::Vec;

use crate::acpf::{InjectionSample, SampleMeta};
use crate::grid::Network;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Component {
    P,
    Q,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LoadCoord {
    pub bus: usize,
    pub component: Component,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LoadSpace {
    pub coords: Vec<LoadCoord>,
    /// Base load at each coordinate, per unit (signed).
    pub base_load: Vec<f64>,
    /// Base net injection at each coordinate, per unit.
    pub base_injection: Vec<f64>,
    bus_coords: Vec<Vec<usize>>,
}

/// Per-coordinate affine map `x -> (x - center) / scale`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InputScaling {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaling {
    pub fn identity(dim: usize) -> Self {
        InputScaling {
            center: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.center.iter().zip(&self.scale))
            .map(|(v, (c, s))| (v - c) / s)
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }
}

impl LoadSpace {
    pub fn new(net: &Network) -> Self {
        let base = InjectionSample::base(net);
        let mut coords = Vec::new();
        let mut base_load = Vec::new();
        let mut base_injection = Vec::new();
        let mut bus_coords = vec![Vec::new(); net.n_buses()];
        for &b in &net.load_bus_indices {
            let bus = &net.buses[b];
            for (component, load, inj) in [
                (Component::P, bus.base_p_load, base.p[b]),
                (Component::Q, bus.base_q_load, base.q[b]),
            ] {
                if load != 0.0 {
                    bus_coords[b].push(coords.len());
                    coords.push(LoadCoord { bus: b, component });
                    base_load.push(load / net.base_mva);
                    base_injection.push(inj);
                }
            }
        }
        LoadSpace {
            coords,
            base_load,
            base_injection,
            bus_coords,
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn n_buses(&self) -> usize {
        self.bus_coords.len()
    }

    pub fn coords_of_bus(&self, bus: usize) -> &[usize] {
        &self.bus_coords[bus]
    }

    /// Sorted union of the coordinates of `buses`.
    pub fn coords_of_buses<'a>(&self, buses: impl IntoIterator<Item = &'a usize>) -> Vec<usize> {
        let mut out: Vec<usize> = buses
            .into_iter()
            .flat_map(|&b| self.bus_coords[b].iter().copied())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Extracts the varying coordinates of a full per-bus sample.
    pub fn flatten(&self, s: &InjectionSample) -> Vec<f64> {
        self.coords
            .iter()
            .map(|c| match c.component {
                Component::P => s.p[c.bus],
                Component::Q => s.q[c.bus],
            })
            .collect()
    }

    /// Rebuilds a full per-bus sample: base injections everywhere except the
    /// given coordinate values.
    pub fn unflatten(&self, net: &Network, x: &[f64], meta: SampleMeta) -> InjectionSample {
        let mut s = InjectionSample::base(net);
        s.meta = meta;
        for (c, &v) in self.coords.iter().zip(x) {
            match c.component {
                Component::P => s.p[c.bus] = v,
                Component::Q => s.q[c.bus] = v,
            }
        }
        s
    }

    /// Injection bounds of the `±fraction` load hypercube.
    pub fn bounds(&self, fraction: f64) -> (Vec<f64>, Vec<f64>) {
        self.base_injection
            .iter()
            .zip(&self.base_load)
            .map(|(inj, load)| {
                let half = fraction * load.abs();
                (inj - half, inj + half)
            })
            .unzip()
    }

    /// Maps the `±fraction` hypercube onto `[-1, 1]` per coordinate.
    pub fn scaling(&self, fraction: f64) -> InputScaling {
        InputScaling {
            center: self.base_injection.clone(),
            scale: self.base_load.iter().map(|l| fraction * l.abs()).collect(),
        }
    }
}
