//! Network model: buses, branches, adjacency and the bus admittance matrix.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("network has {0} slack buses, expected exactly one")]
    MultipleSlack(usize),
    #[error("network graph is disconnected: {unreached} of {total} buses unreachable from bus {root}")]
    DisconnectedGraph {
        root: u32,
        unreached: usize,
        total: usize,
    },
    #[error("branch {0} -> {1} has zero impedance")]
    ZeroImpedanceBranch(u32, u32),
    #[error("branch {0} -> {0} connects a bus to itself")]
    SelfLoop(u32),
    #[error("bus {0} has non-positive voltage magnitude")]
    NonPositiveVoltage(u32),
    #[error("bus id {0} appears more than once")]
    DuplicateBus(u32),
    #[error("branch references unknown bus {0}")]
    UnknownBus(u32),
    #[error("generator attached to PQ bus {0}")]
    GeneratorOnPqBus(u32),
    #[error("bus index {index} out of range for {len} buses")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("network has no buses")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

/// Aggregate of the in-service generators attached to a bus, in MW/MVAr.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BusGen {
    pub p_mw: f64,
    pub q_mvar: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub v_set: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Bus {
    /// External bus number as it appears in the case file.
    pub id: u32,
    pub kind: BusKind,
    pub base_p_load: f64,
    pub base_q_load: f64,
    pub base_v_mag: f64,
    /// Initial angle from the case file, degrees.
    pub base_v_ang: f64,
    /// Shunt conductance, MW consumed at 1 pu voltage.
    pub shunt_g: f64,
    /// Shunt susceptance, MVAr injected at 1 pu voltage.
    pub shunt_b: f64,
    pub gen: Option<BusGen>,
}

impl Bus {
    pub fn has_load(&self) -> bool {
        self.base_p_load != 0.0 || self.base_q_load != 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Branch {
    /// Internal (dense, 0-based) index of the from bus.
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    pub b_charging: f64,
    /// Off-nominal turns ratio; 1.0 when the branch is a plain line.
    pub tap_ratio: f64,
    /// Phase shift, degrees.
    pub phase_shift: f64,
    pub in_service: bool,
}

impl Branch {
    pub fn phase_shift_rad(&self) -> f64 {
        self.phase_shift.to_radians()
    }

    pub fn series_admittance(&self) -> Complex64 {
        Complex64::new(1.0, 0.0) / Complex64::new(self.r, self.x)
    }
}

/// Compressed-row complex matrix; the admittance matrix is stored this way.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ComplexCsr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<Complex64>,
}

impl ComplexCsr {
    /// Builds an `n x n` matrix from triplets, summing duplicates.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, Complex64)]) -> Self {
        let mut rows: Vec<BTreeMap<usize, Complex64>> = vec![BTreeMap::new(); n];
        for &(i, j, v) in triplets {
            *rows[i].entry(j).or_insert(Complex64::new(0.0, 0.0)) += v;
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for (j, v) in row {
                col_idx.push(j);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        ComplexCsr {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, Complex64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[span.clone()].binary_search(&j) {
            Ok(k) => self.values[span.start + k],
            Err(_) => Complex64::new(0.0, 0.0),
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn mul_vec(&self, v: &[Complex64]) -> Vec<Complex64> {
        (0..self.n)
            .map(|i| self.row(i).map(|(j, y)| y * v[j]).sum())
            .collect()
    }
}

/// A validated, immutable grid model.
///
/// Buses keep file order; every index used elsewhere in the crate is the
/// position in `buses`. `id_index` maps external bus numbers back.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Network {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub slack: usize,
    pub adjacency: Vec<Vec<usize>>,
    pub ybus: ComplexCsr,
    pub load_bus_indices: Vec<usize>,
    pub id_index: BTreeMap<u32, usize>,
}

impl Network {
    pub fn new(base_mva: f64, buses: Vec<Bus>, branches: Vec<Branch>) -> Result<Self, GridError> {
        if buses.is_empty() {
            return Err(GridError::Empty);
        }
        let mut id_index = BTreeMap::new();
        for (k, bus) in buses.iter().enumerate() {
            if id_index.insert(bus.id, k).is_some() {
                return Err(GridError::DuplicateBus(bus.id));
            }
            if !(bus.base_v_mag > 0.0) {
                return Err(GridError::NonPositiveVoltage(bus.id));
            }
            if bus.kind == BusKind::Pq && bus.gen.is_some() {
                return Err(GridError::GeneratorOnPqBus(bus.id));
            }
        }
        let slacks: Vec<usize> = buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.kind == BusKind::Slack)
            .map(|(k, _)| k)
            .collect();
        if slacks.len() != 1 {
            return Err(GridError::MultipleSlack(slacks.len()));
        }
        let n = buses.len();
        for br in &branches {
            if br.from >= n {
                return Err(GridError::IndexOutOfRange { index: br.from, len: n });
            }
            if br.to >= n {
                return Err(GridError::IndexOutOfRange { index: br.to, len: n });
            }
            if br.from == br.to {
                return Err(GridError::SelfLoop(buses[br.from].id));
            }
            if br.r == 0.0 && br.x == 0.0 {
                return Err(GridError::ZeroImpedanceBranch(
                    buses[br.from].id,
                    buses[br.to].id,
                ));
            }
        }

        let mut adjacency = vec![Vec::new(); n];
        for br in branches.iter().filter(|b| b.in_service) {
            adjacency[br.from].push(br.to);
            adjacency[br.to].push(br.from);
        }
        for nbrs in &mut adjacency {
            nbrs.sort_unstable();
            nbrs.dedup();
        }

        let slack = slacks[0];
        let reached = bfs_order(&adjacency, slack).len();
        if reached != n {
            return Err(GridError::DisconnectedGraph {
                root: buses[slack].id,
                unreached: n - reached,
                total: n,
            });
        }

        let ybus = build_ybus_parts(base_mva, &buses, &branches);
        let load_bus_indices = buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.has_load())
            .map(|(k, _)| k)
            .collect();

        Ok(Network {
            base_mva,
            buses,
            branches,
            slack,
            adjacency,
            ybus,
            load_bus_indices,
            id_index,
        })
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.id_index.get(&id).copied()
    }

    pub fn check_index(&self, j: usize) -> Result<(), GridError> {
        if j < self.buses.len() {
            Ok(())
        } else {
            Err(GridError::IndexOutOfRange {
                index: j,
                len: self.buses.len(),
            })
        }
    }
}

/// The bus itself plus its direct neighbours, ascending.
pub fn neighborhood(net: &Network, j: usize) -> Result<Vec<usize>, GridError> {
    net.check_index(j)?;
    let mut out = net.adjacency[j].clone();
    if let Err(pos) = out.binary_search(&j) {
        out.insert(pos, j);
    }
    Ok(out)
}

/// Recomputes the admittance matrix from the network's buses and branches.
pub fn build_ybus(net: &Network) -> ComplexCsr {
    build_ybus_parts(net.base_mva, &net.buses, &net.branches)
}

fn build_ybus_parts(base_mva: f64, buses: &[Bus], branches: &[Branch]) -> ComplexCsr {
    let mut trip = Vec::with_capacity(4 * branches.len() + buses.len());
    for br in branches.iter().filter(|b| b.in_service) {
        let ys = br.series_admittance();
        let half_b = Complex64::new(0.0, br.b_charging / 2.0);
        let tap = Complex64::from_polar(br.tap_ratio, br.phase_shift_rad());
        let ytt = ys + half_b;
        let yff = ytt / (tap * tap.conj());
        let yft = -ys / tap.conj();
        let ytf = -ys / tap;
        trip.push((br.from, br.from, yff));
        trip.push((br.from, br.to, yft));
        trip.push((br.to, br.from, ytf));
        trip.push((br.to, br.to, ytt));
    }
    for (k, bus) in buses.iter().enumerate() {
        let ysh = Complex64::new(bus.shunt_g, bus.shunt_b) / base_mva;
        trip.push((k, k, ysh));
    }
    ComplexCsr::from_triplets(buses.len(), &trip)
}

/// Breadth-first visiting order from `root`.
pub(crate) fn bfs_order(adjacency: &[Vec<usize>], root: usize) -> Vec<usize> {
    let mut seen = vec![false; adjacency.len()];
    let mut order = Vec::with_capacity(adjacency.len());
    let mut queue = VecDeque::new();
    seen[root] = true;
    queue.push_back(root);
    while let Some(u) = queue.pop_front() {
        order.push(u);
        for &v in &adjacency[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    order
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn bus(id: u32, kind: BusKind, p: f64, q: f64) -> Bus {
        Bus {
            id,
            kind,
            base_p_load: p,
            base_q_load: q,
            base_v_mag: 1.0,
            base_v_ang: 0.0,
            shunt_g: 0.0,
            shunt_b: 0.0,
            gen: match kind {
                BusKind::Pq => None,
                _ => Some(BusGen {
                    p_mw: 0.0,
                    q_mvar: 0.0,
                    q_min: f64::NEG_INFINITY,
                    q_max: f64::INFINITY,
                    v_set: 1.0,
                }),
            },
        }
    }

    pub fn line(from: usize, to: usize, r: f64, x: f64) -> Branch {
        Branch {
            from,
            to,
            r,
            x,
            b_charging: 0.0,
            tap_ratio: 1.0,
            phase_shift: 0.0,
            in_service: true,
        }
    }

    /// Slack bus 0 feeding a PQ load at bus 1 through `x = 0.1` pu.
    pub fn two_bus(p_mw: f64, q_mvar: f64) -> Network {
        Network::new(
            100.0,
            vec![
                bus(1, BusKind::Slack, 0.0, 0.0),
                bus(2, BusKind::Pq, p_mw, q_mvar),
            ],
            vec![line(0, 1, 0.0, 0.1)],
        )
        .unwrap()
    }

    /// Graph-only network over the given edge list (external ids `1..=n`),
    /// every bus loaded, bus 0 slack.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Network {
        let buses = (0..n)
            .map(|k| {
                let kind = if k == 0 { BusKind::Slack } else { BusKind::Pq };
                let mut b = bus(k as u32 + 1, kind, 10.0, 5.0);
                if k == 0 {
                    b.gen.as_mut().unwrap().p_mw = 10.0 * n as f64;
                }
                b
            })
            .collect();
        let branches = edges.iter().map(|&(a, b)| line(a, b, 0.01, 0.1)).collect();
        Network::new(100.0, buses, branches).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn two_bus_ybus_by_hand() {
        let net = two_bus(10.0, 0.0);
        let y = &net.ybus;
        assert!((y.get(0, 0) - c(0.0, -10.0)).norm() < 1e-12);
        assert!((y.get(0, 1) - c(0.0, 10.0)).norm() < 1e-12);
        assert!((y.get(1, 0) - c(0.0, 10.0)).norm() < 1e-12);
        assert!((y.get(1, 1) - c(0.0, -10.0)).norm() < 1e-12);
        // off-diagonal magnitude equals |1/(jx)|
        assert!((y.get(0, 1).norm() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn row_sums_reproduce_shunts() {
        let mut b0 = bus(1, BusKind::Slack, 0.0, 0.0);
        b0.shunt_b = 20.0;
        let mut b1 = bus(2, BusKind::Pq, 0.0, 0.0);
        b1.shunt_g = 5.0;
        let net = Network::new(100.0, vec![b0, b1], vec![line(0, 1, 0.02, 0.1)]).unwrap();
        let sums: Vec<Complex64> = (0..2).map(|i| net.ybus.row(i).map(|(_, v)| v).sum()).collect();
        assert!((sums[0] - c(0.0, 0.2)).norm() < 1e-12);
        assert!((sums[1] - c(0.05, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn out_of_service_branch_is_not_stamped() {
        let mut branches = vec![line(0, 1, 0.0, 0.1), line(1, 2, 0.0, 0.2), line(0, 2, 0.0, 0.3)];
        branches[2].in_service = false;
        let net = Network::new(
            100.0,
            vec![
                bus(1, BusKind::Slack, 0.0, 0.0),
                bus(2, BusKind::Pq, 1.0, 0.0),
                bus(3, BusKind::Pq, 1.0, 0.0),
            ],
            branches,
        )
        .unwrap();
        assert_eq!(net.ybus.get(0, 2), c(0.0, 0.0));
        assert_eq!(net.adjacency[0], vec![1]);
    }

    #[test]
    fn unit_tap_matches_plain_line() {
        let mut tapped = line(0, 1, 0.01, 0.1);
        tapped.b_charging = 0.04;
        let mut plain = tapped.clone();
        tapped.tap_ratio = 1.0;
        tapped.phase_shift = 0.0;
        plain.tap_ratio = 1.0;
        let mk = |br: Branch| {
            Network::new(
                100.0,
                vec![bus(1, BusKind::Slack, 0.0, 0.0), bus(2, BusKind::Pq, 1.0, 0.0)],
                vec![br],
            )
            .unwrap()
        };
        let ys = plain.series_admittance();
        let net = mk(tapped);
        assert!((net.ybus.get(0, 1) + ys).norm() < 1e-12);
        assert!((net.ybus.get(0, 0) - ys - c(0.0, 0.02)).norm() < 1e-12);
        assert_eq!(net.ybus, mk(plain).ybus);
    }

    #[test]
    fn parallel_branches_are_summed_and_adjacency_deduplicated() {
        let net = Network::new(
            100.0,
            vec![bus(1, BusKind::Slack, 0.0, 0.0), bus(2, BusKind::Pq, 1.0, 0.0)],
            vec![line(0, 1, 0.0, 0.1), line(0, 1, 0.0, 0.1)],
        )
        .unwrap();
        assert!((net.ybus.get(0, 1) - c(0.0, 20.0)).norm() < 1e-12);
        assert_eq!(net.adjacency[0], vec![1]);
    }

    #[test]
    fn validation_errors() {
        let slack = || bus(1, BusKind::Slack, 0.0, 0.0);
        let err = Network::new(
            100.0,
            vec![slack(), bus(2, BusKind::Slack, 0.0, 0.0)],
            vec![line(0, 1, 0.0, 0.1)],
        )
        .unwrap_err();
        assert_eq!(err, GridError::MultipleSlack(2));

        let err = Network::new(
            100.0,
            vec![slack(), bus(2, BusKind::Pq, 0.0, 0.0)],
            vec![line(0, 1, 0.0, 0.0)],
        )
        .unwrap_err();
        assert_eq!(err, GridError::ZeroImpedanceBranch(1, 2));

        let err = Network::new(
            100.0,
            vec![slack(), bus(2, BusKind::Pq, 0.0, 0.0), bus(3, BusKind::Pq, 0.0, 0.0)],
            vec![line(0, 1, 0.0, 0.1)],
        )
        .unwrap_err();
        assert!(matches!(err, GridError::DisconnectedGraph { unreached: 1, .. }));

        let err = Network::new(100.0, vec![slack()], vec![line(0, 0, 0.0, 0.1)]).unwrap_err();
        assert_eq!(err, GridError::SelfLoop(1));
    }

    #[test]
    fn neighborhood_contains_self_and_neighbours() {
        let net = two_bus(10.0, 0.0);
        assert_eq!(neighborhood(&net, 0).unwrap(), vec![0, 1]);
        // star: centre 0 with leaves 1, 2, 3
        let star = from_edges(4, &[(0, 1), (0, 2), (0, 3)]);
        assert_eq!(neighborhood(&star, 0).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(neighborhood(&star, 2).unwrap(), vec![0, 2]);
        assert!(matches!(
            neighborhood(&star, 4),
            Err(GridError::IndexOutOfRange { index: 4, len: 4 })
        ));
    }

    #[test]
    fn load_bus_indices_skip_unloaded_buses() {
        let net = two_bus(10.0, 0.0);
        assert_eq!(net.load_bus_indices, vec![1]);
    }
}
