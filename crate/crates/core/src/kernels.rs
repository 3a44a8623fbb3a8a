//! Squared-exponential sub-kernels and the vertex-degree kernel (VDK).
//!
//! A VDK is a sum of node-neighbourhood kernels (NNKs), one per bus, each an
//! isotropic squared-exponential kernel over the varying injections of the
//! bus and its direct neighbours. The full kernel is the same thing with a
//! single group spanning every coordinate, so both share one evaluation path
//! through [`Kernel::groups`].

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::al::LayerDecomposition;
use crate::grid::{neighborhood, Network};
use crate::math;
use crate::space::LoadSpace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("depth {depth} outside 1..={max}")]
    DepthOutOfRange { depth: usize, max: usize },
    #[error("kernel has no active sub-kernels")]
    NoActiveKernels,
    #[error("hyperparameters must be positive and finite")]
    InvalidHyper,
    #[error("expected {expected} hyperparameters, got {got}")]
    HyperCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SeHyper {
    pub amplitude: f64,
    pub lengthscale: f64,
}

impl SeHyper {
    #[inline]
    pub fn from_sqdist(&self, d2: f64) -> f64 {
        self.amplitude * self.amplitude * math::exp(-0.5 * d2 / (self.lengthscale * self.lengthscale))
    }

    fn is_valid(&self) -> bool {
        self.amplitude > 0.0 && self.lengthscale > 0.0 && self.amplitude.is_finite() && self.lengthscale.is_finite()
    }
}

/// `amplitude^2 * exp(-|x - y|^2 / (2 lengthscale^2))`
pub fn se_kernel(x: &[f64], y: &[f64], amplitude: f64, lengthscale: f64) -> Result<f64, KernelError> {
    if x.len() != y.len() {
        return Err(KernelError::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    let h = SeHyper { amplitude, lengthscale };
    if !h.is_valid() {
        return Err(KernelError::InvalidHyper);
    }
    let d2 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(h.from_sqdist(d2))
}

#[inline]
pub(crate) fn sqdist_on(coords: &[usize], x: &[f64], y: &[f64]) -> f64 {
    coords
        .iter()
        .map(|&c| {
            let d = x[c] - y[c];
            d * d
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NnkDescriptor {
    pub owner_bus: usize,
    /// The owner and its direct neighbours (bus indices, ascending).
    pub support: Vec<usize>,
    /// Varying load coordinates of `support` (ascending).
    pub coords: Vec<usize>,
    pub redundant: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VdkStructure {
    pub dim: usize,
    /// One descriptor per bus, indexed by bus.
    pub nnks: Vec<NnkDescriptor>,
    /// Indices into `nnks` of the sub-kernels in use.
    pub active: Vec<usize>,
    /// Hyperparameters aligned with `active`.
    pub hypers: Vec<SeHyper>,
}

impl VdkStructure {
    fn default_hypers(n_active: usize) -> Vec<SeHyper> {
        let amplitude = 1.0 / math::sqrt(n_active.max(1) as f64);
        (0..n_active)
            .map(|_| SeHyper {
                amplitude,
                lengthscale: 1.0,
            })
            .collect()
    }

    fn with_active(&self, active: Vec<usize>) -> Self {
        let mut nnks = self.nnks.clone();
        for nnk in &mut nnks {
            nnk.redundant = true;
        }
        for &a in &active {
            nnks[a].redundant = false;
        }
        VdkStructure {
            dim: self.dim,
            nnks,
            hypers: Self::default_hypers(active.len()),
            active,
        }
    }

    pub fn active_nnks(&self) -> impl Iterator<Item = &NnkDescriptor> + '_ {
        self.active.iter().map(move |&a| &self.nnks[a])
    }
}

/// One NNK per bus over its neighbourhood; all active, default hypers
/// (amplitude `1/sqrt(n)`, lengthscale 1).
pub fn build_vdk(net: &Network, space: &LoadSpace) -> VdkStructure {
    let nnks: Vec<NnkDescriptor> = (0..net.n_buses())
        .map(|b| {
            let support = neighborhood(net, b).expect("bus index in range");
            let coords = space.coords_of_buses(&support);
            NnkDescriptor {
                owner_bus: b,
                support,
                coords,
                redundant: false,
            }
        })
        .collect();
    let active: Vec<usize> = (0..nnks.len()).collect();
    VdkStructure {
        dim: space.dim(),
        hypers: VdkStructure::default_hypers(active.len()),
        nnks,
        active,
    }
}

/// Whether sorted `a` is a subset of sorted `b`.
fn is_subset(a: &[usize], b: &[usize]) -> bool {
    let mut it = b.iter();
    a.iter().all(|x| it.by_ref().any(|y| y == x))
}

/// Drops every active NNK whose support is a proper subset of another active
/// NNK's support; among equal supports the lowest owner survives.
///
/// Redundancy is decided on bus supports, so it is purely topological.
/// Survivors get fresh default hyperparameters.
pub fn reduce_vdk(v: &VdkStructure) -> VdkStructure {
    let mut is_active = alloc::vec![false; v.nnks.len()];
    for &a in &v.active {
        is_active[a] = true;
    }
    let keep: Vec<usize> = v
        .active
        .iter()
        .copied()
        .filter(|&i| {
            let si = &v.nnks[i].support;
            // a superset of N[i] must belong to a bus adjacent to i
            !si.iter().any(|&j| {
                if j == i || !is_active[j] {
                    return false;
                }
                let sj = &v.nnks[j].support;
                if !is_subset(si, sj) {
                    return false;
                }
                si.len() < sj.len() || j < i
            })
        })
        .collect();
    v.with_active(keep)
}

/// Keeps the active NNKs owned by buses in layers `1..=depth`.
pub fn truncate_vdk(v: &VdkStructure, layers: &LayerDecomposition, depth: usize) -> Result<VdkStructure, KernelError> {
    let max = layers.depth();
    if depth == 0 || depth > max {
        return Err(KernelError::DepthOutOfRange { depth, max });
    }
    let mut within = alloc::vec![false; v.nnks.len()];
    for layer in &layers.layers[..depth] {
        for &b in layer {
            within[b] = true;
        }
    }
    let keep: Vec<usize> = v.active.iter().copied().filter(|&a| within[v.nnks[a].owner_bus]).collect();
    if keep.is_empty() {
        return Err(KernelError::NoActiveKernels);
    }
    Ok(v.with_active(keep))
}

pub fn eval_vdk(v: &VdkStructure, s1: &[f64], s2: &[f64]) -> Result<f64, KernelError> {
    check_dim(v.dim, s1)?;
    check_dim(v.dim, s2)?;
    Ok(v
        .active_nnks()
        .zip(&v.hypers)
        .map(|(nnk, h)| h.from_sqdist(sqdist_on(&nnk.coords, s1, s2)))
        .sum())
}

fn check_dim(expected: usize, x: &[f64]) -> Result<(), KernelError> {
    if x.len() != expected {
        return Err(KernelError::DimensionMismatch { expected, got: x.len() });
    }
    Ok(())
}

/// A single squared-exponential kernel over every coordinate.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FullKernel {
    pub dim: usize,
    pub hyper: SeHyper,
    coords: Vec<usize>,
}

impl FullKernel {
    pub fn new(dim: usize) -> Self {
        FullKernel {
            dim,
            hyper: SeHyper {
                amplitude: 1.0,
                lengthscale: 1.0,
            },
            coords: (0..dim).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "lowercase"))]
pub enum Kernel {
    Vdk(VdkStructure),
    Full(FullKernel),
}

/// A squared-exponential term restricted to `coords`.
#[derive(Debug, Clone, Copy)]
pub struct Group<'a> {
    pub coords: &'a [usize],
    pub hyper: SeHyper,
}

impl Kernel {
    pub fn dim(&self) -> usize {
        match self {
            Kernel::Vdk(v) => v.dim,
            Kernel::Full(f) => f.dim,
        }
    }

    pub fn n_groups(&self) -> usize {
        match self {
            Kernel::Vdk(v) => v.active.len(),
            Kernel::Full(_) => 1,
        }
    }

    pub fn group(&self, g: usize) -> Group<'_> {
        match self {
            Kernel::Vdk(v) => Group {
                coords: &v.nnks[v.active[g]].coords,
                hyper: v.hypers[g],
            },
            Kernel::Full(f) => Group {
                coords: &f.coords,
                hyper: f.hyper,
            },
        }
    }

    pub fn groups(&self) -> impl Iterator<Item = Group<'_>> + '_ {
        (0..self.n_groups()).map(move |g| self.group(g))
    }

    /// `k(x, x)`, identical for every `x`.
    pub fn prior_variance(&self) -> f64 {
        self.groups().map(|g| g.hyper.amplitude * g.hyper.amplitude).sum()
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64, KernelError> {
        check_dim(self.dim(), x)?;
        check_dim(self.dim(), y)?;
        Ok(self.eval_unchecked(x, y))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        self.groups().map(|g| g.hyper.from_sqdist(sqdist_on(g.coords, x, y))).sum()
    }

    /// Restores the construction-time hyperparameters.
    pub fn reset_hypers(&mut self) {
        match self {
            Kernel::Vdk(v) => v.hypers = VdkStructure::default_hypers(v.active.len()),
            Kernel::Full(f) => *f = FullKernel::new(f.dim),
        }
    }

    pub fn n_hypers(&self) -> usize {
        2 * self.n_groups()
    }

    /// `[ln a_0, ln l_0, ln a_1, ln l_1, ...]`
    pub fn log_hypers(&self) -> Vec<f64> {
        self.groups()
            .flat_map(|g| [math::ln(g.hyper.amplitude), math::ln(g.hyper.lengthscale)])
            .collect()
    }

    pub fn set_log_hypers(&mut self, theta: &[f64]) -> Result<(), KernelError> {
        if theta.len() != self.n_hypers() {
            return Err(KernelError::HyperCount {
                expected: self.n_hypers(),
                got: theta.len(),
            });
        }
        let hypers: Vec<SeHyper> = theta
            .chunks(2)
            .map(|c| SeHyper {
                amplitude: math::exp(c[0]),
                lengthscale: math::exp(c[1]),
            })
            .collect();
        if !hypers.iter().all(SeHyper::is_valid) {
            return Err(KernelError::InvalidHyper);
        }
        match self {
            Kernel::Vdk(v) => v.hypers = hypers,
            Kernel::Full(f) => f.hyper = hypers[0],
        }
        Ok(())
    }

    /// Kernel values between `x` and each row of `xs`.
    pub fn cross(&self, xs: &[Vec<f64>], x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(xs.len(), xs.iter().map(|xi| self.eval_unchecked(xi, x)))
    }
}

/// Gram matrix over `xs`; the upper triangle is mirrored so the result is
/// exactly symmetric.
pub fn gram(kernel: &Kernel, xs: &[Vec<f64>]) -> Result<DMatrix<f64>, KernelError> {
    for x in xs {
        check_dim(kernel.dim(), x)?;
    }
    let n = xs.len();
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            let v = kernel.eval_unchecked(&xs[i], &xs[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::al::build_layers;
    use crate::grid::fixtures::from_edges;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};

    fn path3() -> (Network, LoadSpace) {
        let net = from_edges(3, &[(0, 1), (1, 2)]);
        let space = LoadSpace::new(&net);
        (net, space)
    }

    #[test]
    fn se_kernel_values() {
        assert_eq!(se_kernel(&[0.3, 0.1], &[0.3, 0.1], 2.0, 0.7).unwrap(), 4.0);
        let v = se_kernel(&[0.0], &[1.0], 1.0, 1.0).unwrap();
        assert!((v - 0.606_530_659_712_633_4).abs() < 1e-15);
        assert!(se_kernel(&[0.0], &[1e3], 1.0, 1.0).unwrap() < 1e-300);
        assert!(matches!(
            se_kernel(&[0.0], &[1.0, 2.0], 1.0, 1.0),
            Err(KernelError::DimensionMismatch { .. })
        ));
        assert_eq!(se_kernel(&[0.0], &[1.0], 0.0, 1.0), Err(KernelError::InvalidHyper));
    }

    #[test]
    fn path_graph_nnk_supports() {
        let (net, space) = path3();
        let v = build_vdk(&net, &space);
        let supports: Vec<&[usize]> = v.nnks.iter().map(|n| n.support.as_slice()).collect();
        assert_eq!(supports, vec![&[0, 1][..], &[0, 1, 2][..], &[1, 2][..]]);
        // both P and Q of every loaded bus are coordinates
        assert_eq!(v.nnks[0].coords, vec![0, 1, 2, 3]);
        assert_eq!(v.dim, 6);
        assert!(v.hypers.iter().all(|h| (h.amplitude - 1.0 / 3f64.sqrt()).abs() < 1e-15));
    }

    #[test]
    fn star_reduces_to_centre() {
        let net = from_edges(5, &[(0, 1), (0, 2), (0, 3), (0, 4)]);
        let space = LoadSpace::new(&net);
        let r = reduce_vdk(&build_vdk(&net, &space));
        assert_eq!(r.active, vec![0]);
        assert!(r.nnks[1..].iter().all(|n| n.redundant));
        assert!((r.hypers[0].amplitude - 1.0).abs() < 1e-15);
    }

    #[test]
    fn triangle_with_leaf_drops_leaf_and_inner_corner() {
        // buses 41, 42, 43, 44: triangle 42-43-44 with leaf 41 on 42,
        // and 44 continuing to the rest of the network (bus 45)
        let net = from_edges(5, &[(0, 1), (1, 2), (2, 3), (1, 3), (3, 4)]);
        let space = LoadSpace::new(&net);
        let r = reduce_vdk(&build_vdk(&net, &space));
        let removed: Vec<usize> = (0..5).filter(|k| !r.active.contains(k)).collect();
        // k41 (index 0) and k43 (index 2); the tail bus 45 is a leaf too
        assert_eq!(removed, vec![0, 2, 4]);
    }

    #[test]
    fn identical_supports_keep_lowest_owner() {
        // two buses joined only to each other and a common neighbour: triangle
        let net = from_edges(3, &[(0, 1), (1, 2), (0, 2)]);
        let space = LoadSpace::new(&net);
        let r = reduce_vdk(&build_vdk(&net, &space));
        assert_eq!(r.active, vec![0]);
    }

    #[test]
    fn reduction_is_idempotent_and_sound_on_random_graphs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let n = rng.random_range(4..25);
            let mut edges: Vec<(usize, usize)> = (1..n).map(|k| (rng.random_range(0..k), k)).collect();
            for _ in 0..rng.random_range(0..n) {
                let a = rng.random_range(0..n);
                let b = rng.random_range(0..n);
                if a != b {
                    edges.push((a, b));
                }
            }
            let net = from_edges(n, &edges);
            let space = LoadSpace::new(&net);
            let v = build_vdk(&net, &space);
            let r = reduce_vdk(&v);
            assert_eq!(reduce_vdk(&r), r);
            assert!(r.active.len() <= n);
            for nnk in &v.nnks {
                assert!(r.active_nnks().any(|k| is_subset(&nnk.coords, &k.coords)));
            }
            let any_subset = (0..n).any(|i| (0..n).any(|j| i != j && is_subset(&v.nnks[i].support, &v.nnks[j].support)));
            assert_eq!(r.active.len() == n, !any_subset);
        }
    }

    #[test]
    fn eval_vdk_matches_scalar_sum() {
        let (net, space) = path3();
        let mut v = build_vdk(&net, &space);
        for h in &mut v.hypers {
            *h = SeHyper {
                amplitude: 1.0,
                lengthscale: 1.0,
            };
        }
        let s1 = [0.1, -0.2, 0.3, 0.0, 0.5, -0.5];
        let s2 = [0.0, 0.1, 0.2, 0.4, -0.1, 0.2];
        let sq = |idx: &[usize]| -> f64 { idx.iter().map(|&i| (s1[i] - s2[i]) * (s1[i] - s2[i])).sum() };
        let expect = libm::exp(-0.5 * sq(&[0, 1, 2, 3])) + libm::exp(-0.5 * sq(&[0, 1, 2, 3, 4, 5])) + libm::exp(-0.5 * sq(&[2, 3, 4, 5]));
        let got = eval_vdk(&v, &s1, &s2).unwrap();
        assert!((got - expect).abs() < 1e-15);
        assert_eq!(got, eval_vdk(&v, &s2, &s1).unwrap());
        assert!((eval_vdk(&v, &s1, &s1).unwrap() - 3.0).abs() < 1e-15);
        assert!(eval_vdk(&v, &s1, &s2[..5]).is_err());
    }

    #[test]
    fn single_spanning_nnk_equals_full_kernel() {
        let (net, space) = path3();
        let v = build_vdk(&net, &space);
        // keep only the centre NNK, whose coords span everything
        let centre = v.with_active(vec![1]);
        let mut full = FullKernel::new(6);
        full.hyper = centre.hypers[0];
        let x = [0.1, 0.2, -0.3, 0.4, 0.0, 1.0];
        let y = [0.0, -0.2, 0.3, 0.1, 0.5, 0.2];
        assert_eq!(
            Kernel::Vdk(centre.clone()).eval(&x, &y).unwrap(),
            Kernel::Full(full).eval(&x, &y).unwrap()
        );
    }

    #[test]
    fn truncation_by_depth() {
        let (net, space) = path3();
        let v = build_vdk(&net, &space);
        let layers = build_layers(&net, &space, 0).unwrap();
        assert_eq!(truncate_vdk(&v, &layers, 1).unwrap().active, vec![0]);
        assert_eq!(truncate_vdk(&v, &layers, 3).unwrap().active, v.active);
        assert_eq!(
            truncate_vdk(&v, &layers, 4),
            Err(KernelError::DepthOutOfRange { depth: 4, max: 3 })
        );
        assert!(truncate_vdk(&v, &layers, 0).is_err());
    }

    #[test]
    fn gram_edge_cases() {
        let (net, space) = path3();
        let k = Kernel::Vdk(build_vdk(&net, &space));
        let x = vec![0.1; 6];
        let g = gram(&k, &[x.clone()]).unwrap();
        assert_eq!(g.shape(), (1, 1));
        assert!((g[(0, 0)] - k.prior_variance()).abs() < 1e-15);
        let g = gram(&k, &[x.clone(), x]).unwrap();
        assert!(g.iter().all(|&v| (v - g[(0, 0)]).abs() < 1e-15));
        assert!(g.determinant().abs() < 1e-12);
    }

    #[test]
    fn log_hyper_round_trip() {
        let (net, space) = path3();
        let mut k = Kernel::Vdk(build_vdk(&net, &space));
        let theta: Vec<f64> = (0..k.n_hypers()).map(|i| 0.1 * i as f64 - 0.2).collect();
        k.set_log_hypers(&theta).unwrap();
        for (a, b) in k.log_hypers().iter().zip(&theta) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(k.set_log_hypers(&theta[1..]).is_err());
        k.reset_hypers();
        assert_eq!(k, Kernel::Vdk(build_vdk(&net, &space)));
    }
}
