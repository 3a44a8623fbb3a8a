//! Newton-Raphson AC power flow in polar coordinates, injection samplers
//! and voltage labeling.

use alloc::vec;
use alloc::vec::Vec;

use log::warn;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution as _;
use thiserror::Error;

use crate::grid::{BusKind, GridError, Network};
use crate::math;
use crate::sparse::{minimum_degree_order, CscMatrix, SparseError, SparseLu};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AcpfError {
    #[error("power flow did not converge after {iterations} iterations (mismatch {mismatch:e} pu)")]
    NonConvergence { iterations: usize, mismatch: f64 },
    #[error("singular Jacobian at iteration {0}")]
    SingularJacobian(usize),
    #[error("sample has {got} entries, network has {expected} buses")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("network has no load buses to sample")]
    NoLoadBuses,
    #[error("hypercube fraction {0} outside (0, 1)")]
    InvalidFraction(f64),
    #[error("invalid option: {0}")]
    InvalidOption(&'static str),
    #[error("target bus {0} is not a PQ bus")]
    TargetNotPq(u32),
    #[error("{failed} of {total} samples failed to solve")]
    TooManyFailures { failed: usize, total: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "lowercase"))]
pub enum Distribution {
    #[default]
    Uniform,
    /// Normal around the base point; `sigma` is in units of the box
    /// half-width, draws outside the box are rejected.
    Normal { sigma: f64 },
    /// `Beta(alpha, beta)` rescaled onto the box.
    Beta { alpha: f64, beta: f64 },
}


impl Distribution {
    pub fn truncated_normal() -> Self {
        Distribution::Normal { sigma: 1.0 / 3.0 }
    }

    pub fn skewed_beta() -> Self {
        Distribution::Beta { alpha: 2.0, beta: 5.0 }
    }

    fn validate(&self) -> Result<(), AcpfError> {
        match *self {
            Distribution::Uniform => Ok(()),
            Distribution::Normal { sigma } if sigma > 0.0 => Ok(()),
            Distribution::Beta { alpha, beta } if alpha > 0.0 && beta > 0.0 => Ok(()),
            _ => Err(AcpfError::InvalidOption("distribution parameters must be positive")),
        }
    }

    /// Draws a position in `[-1, 1]` within the box.
    fn draw_unit<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Distribution::Uniform => rng.random_range(-1.0..=1.0),
            Distribution::Normal { sigma } => {
                let normal = rand_distr::StandardNormal;
                loop {
                    let z: f64 = normal.sample(rng);
                    let u = sigma * z;
                    if u.abs() <= 1.0 {
                        break u;
                    }
                }
            }
            Distribution::Beta { alpha, beta } => {
                let b = rand_distr::Beta::new(alpha, beta).expect("validated beta parameters");
                2.0 * b.sample(rng) - 1.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SampleMeta {
    pub distribution: Distribution,
    pub hypercube_fraction: f64,
    pub seed: u64,
}

/// Net per-bus injections (generation minus load), per unit.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct InjectionSample {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub meta: SampleMeta,
}

impl InjectionSample {
    /// The base operating point of the case.
    pub fn base(net: &Network) -> Self {
        Self::scaled_load(net, 1.0)
    }

    /// Base generation with every load multiplied by `factor`.
    pub fn scaled_load(net: &Network, factor: f64) -> Self {
        let (p, q) = net
            .buses
            .iter()
            .map(|b| {
                let (gp, gq) = b.gen.as_ref().map_or((0.0, 0.0), |g| (g.p_mw, g.q_mvar));
                (
                    (gp - factor * b.base_p_load) / net.base_mva,
                    (gq - factor * b.base_q_load) / net.base_mva,
                )
            })
            .unzip();
        InjectionSample {
            p,
            q,
            meta: SampleMeta::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct AcpfOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub flat_start: bool,
    /// Convert PV buses whose reactive output leaves finite limits to PQ
    /// buses held at the limit, then re-solve.
    pub enforce_q_limits: bool,
}

impl Default for AcpfOptions {
    fn default() -> Self {
        AcpfOptions {
            tol: 1e-8,
            max_iter: 30,
            flat_start: true,
            enforce_q_limits: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PowerFlowSolution {
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
    /// Newton passes, counting the final converged mismatch evaluation.
    pub iterations: usize,
    pub max_mismatch: f64,
}

/// Mismatch equations for one injection pattern and one bus classification.
///
/// The state vector is `[theta of PV and PQ buses, |V| of PQ buses]` in bus
/// order; the residual has the same layout (`P` rows then `Q` rows).
#[derive(Debug, Clone)]
pub struct PowerFlowProblem<'a> {
    net: &'a Network,
    kinds: Vec<BusKind>,
    p_spec: Vec<f64>,
    q_spec: Vec<f64>,
    v_set: Vec<f64>,
    pvpq: Vec<usize>,
    pq: Vec<usize>,
    theta_pos: Vec<Option<usize>>,
    vm_pos: Vec<Option<usize>>,
}

impl<'a> PowerFlowProblem<'a> {
    pub fn new(net: &'a Network, s: &InjectionSample) -> Result<Self, AcpfError> {
        let kinds = net.buses.iter().map(|b| b.kind).collect();
        Self::with_kinds(net, s, kinds)
    }

    fn with_kinds(net: &'a Network, s: &InjectionSample, kinds: Vec<BusKind>) -> Result<Self, AcpfError> {
        let n = net.n_buses();
        if s.p.len() != n || s.q.len() != n {
            return Err(AcpfError::DimensionMismatch {
                expected: n,
                got: s.p.len().min(s.q.len()),
            });
        }
        let v_set = net
            .buses
            .iter()
            .map(|b| b.gen.as_ref().map_or(b.base_v_mag, |g| g.v_set))
            .collect();
        let mut pvpq = Vec::new();
        let mut pq = Vec::new();
        let mut theta_pos = vec![None; n];
        let mut vm_pos = vec![None; n];
        for (k, kind) in kinds.iter().enumerate() {
            if *kind != BusKind::Slack {
                theta_pos[k] = Some(pvpq.len());
                pvpq.push(k);
            }
        }
        for (k, kind) in kinds.iter().enumerate() {
            if *kind == BusKind::Pq {
                vm_pos[k] = Some(pvpq.len() + pq.len());
                pq.push(k);
            }
        }
        Ok(PowerFlowProblem {
            net,
            kinds,
            p_spec: s.p.clone(),
            q_spec: s.q.clone(),
            v_set,
            pvpq,
            pq,
            theta_pos,
            vm_pos,
        })
    }

    pub fn n_state(&self) -> usize {
        self.pvpq.len() + self.pq.len()
    }

    /// Initial voltages: setpoints at voltage-controlled buses, flat or case
    /// values elsewhere; the slack angle is always zero.
    pub fn initial_voltages(&self, flat_start: bool) -> (Vec<f64>, Vec<f64>) {
        let n = self.net.n_buses();
        let mut vm = vec![1.0; n];
        let mut va = vec![0.0; n];
        for k in 0..n {
            if self.kinds[k] != BusKind::Pq {
                vm[k] = self.v_set[k];
            } else if !flat_start {
                vm[k] = self.net.buses[k].base_v_mag;
            }
            if !flat_start && self.kinds[k] != BusKind::Slack {
                va[k] = self.net.buses[k].base_v_ang.to_radians();
            }
        }
        (vm, va)
    }

    /// Calculated complex injections `V * conj(Y V)`.
    pub fn injections(&self, vm: &[f64], va: &[f64]) -> Vec<Complex64> {
        let v: Vec<Complex64> = vm
            .iter()
            .zip(va)
            .map(|(&m, &a)| Complex64::new(m * math::cos(a), m * math::sin(a)))
            .collect();
        let i = self.net.ybus.mul_vec(&v);
        v.iter().zip(&i).map(|(v, i)| v * i.conj()).collect()
    }

    pub fn state(&self, vm: &[f64], va: &[f64]) -> Vec<f64> {
        self.pvpq
            .iter()
            .map(|&k| va[k])
            .chain(self.pq.iter().map(|&k| vm[k]))
            .collect()
    }

    pub fn apply_state(&self, x: &[f64], vm: &mut [f64], va: &mut [f64]) {
        for (&k, &t) in self.pvpq.iter().zip(x) {
            va[k] = t;
        }
        for (&k, &m) in self.pq.iter().zip(&x[self.pvpq.len()..]) {
            vm[k] = m;
        }
    }

    /// Calculated minus specified power at the equations' buses.
    pub fn mismatch(&self, vm: &[f64], va: &[f64]) -> Vec<f64> {
        let s = self.injections(vm, va);
        self.pvpq
            .iter()
            .map(|&k| s[k].re - self.p_spec[k])
            .chain(self.pq.iter().map(|&k| s[k].im - self.q_spec[k]))
            .collect()
    }

    /// Analytic Jacobian of [`Self::mismatch`] with respect to the state.
    pub fn jacobian(&self, vm: &[f64], va: &[f64]) -> CscMatrix {
        let s = self.injections(vm, va);
        let n = self.n_state();
        let mut trip = Vec::with_capacity(4 * self.net.ybus.nnz());
        for &i in &self.pvpq {
            let rp = self.theta_pos[i].expect("pvpq bus has an angle");
            let rq = self.vm_pos[i];
            let (pi, qi) = (s[i].re, s[i].im);
            for (j, y) in self.net.ybus.row(i) {
                let (g, b) = (y.re, y.im);
                if j == i {
                    trip.push((rp, rp, -qi - b * vm[i] * vm[i]));
                    if let Some(cv) = self.vm_pos[i] {
                        trip.push((rp, cv, pi / vm[i] + g * vm[i]));
                    }
                    if let Some(rq) = rq {
                        trip.push((rq, rp, pi - g * vm[i] * vm[i]));
                        trip.push((rq, rq, qi / vm[i] - b * vm[i]));
                    }
                    continue;
                }
                let t = va[i] - va[j];
                let (st, ct) = (math::sin(t), math::cos(t));
                let gs_bc = g * st - b * ct;
                let gc_bs = g * ct + b * st;
                if let Some(cj) = self.theta_pos[j] {
                    trip.push((rp, cj, vm[i] * vm[j] * gs_bc));
                    if let Some(rq) = rq {
                        trip.push((rq, cj, -vm[i] * vm[j] * gc_bs));
                    }
                }
                if let Some(cj) = self.vm_pos[j] {
                    trip.push((rp, cj, vm[i] * gc_bs));
                    if let Some(rq) = rq {
                        trip.push((rq, cj, vm[i] * gs_bc));
                    }
                }
            }
        }
        CscMatrix::from_triplets(n, n, &trip)
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| if x.abs() > m || x.is_nan() { x.abs() } else { m })
}

/// Reusable solver for one network; caches the fill-reducing ordering of the
/// Jacobian pattern for the network's own bus classification.
#[derive(Debug, Clone)]
pub struct PowerFlowSolver<'a> {
    net: &'a Network,
    ordering: Vec<usize>,
}

impl<'a> PowerFlowSolver<'a> {
    pub fn new(net: &'a Network) -> Self {
        let base = InjectionSample::base(net);
        let problem = PowerFlowProblem::new(net, &base).expect("base sample matches network");
        let (vm, va) = problem.initial_voltages(true);
        let ordering = minimum_degree_order(&problem.jacobian(&vm, &va));
        PowerFlowSolver { net, ordering }
    }

    pub fn network(&self) -> &'a Network {
        self.net
    }

    pub fn solve(&self, s: &InjectionSample, opts: &AcpfOptions) -> Result<PowerFlowSolution, AcpfError> {
        if !(opts.tol > 0.0) {
            return Err(AcpfError::InvalidOption("tol must be positive"));
        }
        if opts.max_iter == 0 {
            return Err(AcpfError::InvalidOption("max_iter must be at least 1"));
        }
        let mut problem = PowerFlowProblem::new(self.net, s)?;
        let (mut vm, mut va) = problem.initial_voltages(opts.flat_start);
        let mut total_iter = 0;
        loop {
            let ordering = if problem.kinds.iter().zip(&self.net.buses).all(|(k, b)| *k == b.kind) {
                None
            } else {
                Some(minimum_degree_order(&problem.jacobian(&vm, &va)))
            };
            let order = ordering.as_deref().unwrap_or(&self.ordering);
            let (iterations, max_mismatch) = newton(&problem, order, opts, &mut vm, &mut va)?;
            total_iter += iterations;
            if !opts.enforce_q_limits || !switch_violated_pv(&mut problem, &vm, &va, s) {
                return Ok(PowerFlowSolution {
                    v_mag: vm,
                    v_ang: va,
                    iterations: total_iter,
                    max_mismatch,
                });
            }
        }
    }
}

fn newton(
    problem: &PowerFlowProblem<'_>,
    order: &[usize],
    opts: &AcpfOptions,
    vm: &mut [f64],
    va: &mut [f64],
) -> Result<(usize, f64), AcpfError> {
    let mut mismatch = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let f = problem.mismatch(vm, va);
        mismatch = max_abs(&f);
        if mismatch <= opts.tol {
            return Ok((it, mismatch));
        }
        if !mismatch.is_finite() || mismatch > 1e10 || vm.iter().any(|&m| !(m > 0.0)) {
            break;
        }
        let jac = problem.jacobian(vm, va);
        let lu = SparseLu::factor(&jac, order, 0.1).map_err(|e| match e {
            SparseError::Singular(_) => AcpfError::SingularJacobian(it),
            _ => AcpfError::SingularJacobian(it),
        })?;
        let mut dx: Vec<f64> = f.iter().map(|v| -v).collect();
        lu.solve(&mut dx).map_err(|_| AcpfError::SingularJacobian(it))?;
        let mut x = problem.state(vm, va);
        for (xi, di) in x.iter_mut().zip(&dx) {
            *xi += di;
        }
        problem.apply_state(&x, vm, va);
    }
    Err(AcpfError::NonConvergence {
        iterations: opts.max_iter,
        mismatch,
    })
}

/// Turns PV buses whose reactive generation violates a finite limit into PQ
/// buses fixed at that limit. Returns whether anything changed.
fn switch_violated_pv(problem: &mut PowerFlowProblem<'_>, vm: &[f64], va: &[f64], s: &InjectionSample) -> bool {
    let net = problem.net;
    let calc = problem.injections(vm, va);
    let mut kinds = problem.kinds.clone();
    let mut q_spec = problem.q_spec.clone();
    let mut changed = false;
    for (k, bus) in net.buses.iter().enumerate() {
        if kinds[k] != BusKind::Pv {
            continue;
        }
        let Some(gen) = bus.gen.as_ref() else { continue };
        // s.q nets the (possibly sampled) load against the case generator output
        let load_q = gen.q_mvar / net.base_mva - s.q[k];
        let q_gen = calc[k].im + load_q;
        let (lo, hi) = (gen.q_min / net.base_mva, gen.q_max / net.base_mva);
        let limit = if hi.is_finite() && q_gen > hi {
            Some(hi)
        } else if lo.is_finite() && q_gen < lo {
            Some(lo)
        } else {
            None
        };
        if let Some(limit) = limit {
            warn!("bus {} reactive output {:.4} pu outside limits, switching to PQ", bus.id, q_gen);
            kinds[k] = BusKind::Pq;
            q_spec[k] = limit - load_q;
            changed = true;
        }
    }
    if changed {
        let mut next = PowerFlowProblem::with_kinds(net, s, kinds).expect("dimensions already checked");
        next.q_spec = q_spec;
        *problem = next;
    }
    changed
}

pub fn solve_acpf(net: &Network, s: &InjectionSample, opts: &AcpfOptions) -> Result<PowerFlowSolution, AcpfError> {
    PowerFlowSolver::new(net).solve(s, opts)
}

/// Draws `n` samples with every load's P and Q multiplied independently by a
/// factor in `[1 - fraction, 1 + fraction]`.
pub fn sample_hypercube(
    net: &Network,
    fraction: f64,
    n: usize,
    dist: Distribution,
    seed: u64,
) -> Result<Vec<InjectionSample>, AcpfError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(AcpfError::InvalidFraction(fraction));
    }
    if n == 0 {
        return Err(AcpfError::InvalidOption("sample count must be at least 1"));
    }
    if net.load_bus_indices.is_empty() {
        return Err(AcpfError::NoLoadBuses);
    }
    dist.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = InjectionSample::base(net);
    let meta = SampleMeta {
        distribution: dist,
        hypercube_fraction: fraction,
        seed,
    };
    Ok((0..n)
        .map(|_| {
            let mut s = base.clone();
            s.meta = meta.clone();
            for &b in &net.load_bus_indices {
                let bus = &net.buses[b];
                let up = dist.draw_unit(&mut rng);
                let uq = dist.draw_unit(&mut rng);
                s.p[b] -= fraction * up * bus.base_p_load / net.base_mva;
                s.q[b] -= fraction * uq * bus.base_q_load / net.base_mva;
            }
            s
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct LabelOptions {
    pub acpf: AcpfOptions,
    /// Largest tolerated share of non-convergent samples.
    pub max_failure_fraction: f64,
}

impl Default for LabelOptions {
    fn default() -> Self {
        LabelOptions {
            acpf: AcpfOptions::default(),
            max_failure_fraction: 0.2,
        }
    }
}

/// Samples paired with the solved target-bus voltage magnitude.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LabeledSet {
    pub samples: Vec<InjectionSample>,
    pub voltages: Vec<f64>,
    /// Input positions that failed to solve and were dropped.
    pub dropped: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.voltages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voltages.is_empty()
    }
}

pub fn check_target(net: &Network, target: usize) -> Result<(), AcpfError> {
    net.check_index(target)?;
    if net.buses[target].kind != BusKind::Pq {
        return Err(AcpfError::TargetNotPq(net.buses[target].id));
    }
    Ok(())
}

pub fn label_one(
    solver: &PowerFlowSolver<'_>,
    s: &InjectionSample,
    target: usize,
    opts: &AcpfOptions,
) -> Result<f64, AcpfError> {
    solver.solve(s, opts).map(|sol| sol.v_mag[target])
}

/// Pairs samples with per-sample solve results, dropping failures.
pub fn collect_labels<I>(samples: &[InjectionSample], results: I, max_failure_fraction: f64) -> Result<LabeledSet, AcpfError>
where
    I: IntoIterator<Item = Result<f64, AcpfError>>,
{
    let mut out = LabeledSet::default();
    for (k, (s, r)) in samples.iter().zip(results).enumerate() {
        match r {
            Ok(v) => {
                out.samples.push(s.clone());
                out.voltages.push(v);
            }
            Err(e) => {
                warn!("dropping sample {k}: {e}");
                out.dropped.push(k);
            }
        }
    }
    let failed = out.dropped.len();
    if failed as f64 > max_failure_fraction * samples.len() as f64 || out.is_empty() {
        return Err(AcpfError::TooManyFailures {
            failed,
            total: samples.len(),
        });
    }
    Ok(out)
}

pub fn label_samples(
    net: &Network,
    samples: &[InjectionSample],
    target: usize,
    opts: &LabelOptions,
) -> Result<LabeledSet, AcpfError> {
    check_target(net, target)?;
    let solver = PowerFlowSolver::new(net);
    let results = samples.iter().map(|s| label_one(&solver, s, target, &opts.acpf));
    collect_labels(samples, results, opts.max_failure_fraction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::fixtures::{bus, from_edges, line, two_bus};
    use crate::grid::Branch;
    use alloc::vec;
    use alloc::vec::Vec;

    /// Receiving-end voltage of a lossless line `x` from a 1.0 pu source,
    /// high-voltage root: `V - sqrt(1 - (p x / V)^2) + q x / V = 0`.
    fn two_bus_oracle(p: f64, q: f64, x: f64) -> (f64, f64) {
        let g = |v: f64| v - libm::sqrt(1.0 - (p * x / v) * (p * x / v)) + q * x / v;
        let (mut lo, mut hi) = (0.6, 1.2);
        assert!(g(lo) < 0.0 && g(hi) > 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let v = 0.5 * (lo + hi);
        (v, libm::asin(-p * x / v))
    }

    fn meshed_with_pv() -> Network {
        let mut buses = vec![
            bus(1, BusKind::Slack, 0.0, 0.0),
            bus(2, BusKind::Pv, 20.0, 5.0),
            bus(3, BusKind::Pq, 45.0, 15.0),
            bus(4, BusKind::Pq, 40.0, 5.0),
        ];
        buses[1].gen.as_mut().unwrap().p_mw = 40.0;
        buses[1].gen.as_mut().unwrap().v_set = 1.02;
        buses[3].shunt_b = 10.0;
        let mut xfmr = line(2, 3, 0.005, 0.08);
        xfmr.tap_ratio = 0.98;
        xfmr.phase_shift = 2.0;
        let mut charged: Branch = line(0, 2, 0.02, 0.12);
        charged.b_charging = 0.05;
        Network::new(
            100.0,
            buses,
            vec![line(0, 1, 0.01, 0.06), line(1, 2, 0.02, 0.1), charged, xfmr, line(1, 3, 0.03, 0.15)],
        )
        .unwrap()
    }

    #[test]
    fn two_bus_matches_closed_form() {
        for (p, q) in [(10.0, 0.0), (30.0, 10.0), (50.0, -5.0)] {
            let net = two_bus(p, q);
            let sol = solve_acpf(&net, &InjectionSample::base(&net), &AcpfOptions::default()).unwrap();
            let (v, th) = two_bus_oracle(p / 100.0, q / 100.0, 0.1);
            assert!((sol.v_mag[1] - v).abs() <= 1e-8, "{} vs {v}", sol.v_mag[1]);
            assert!((sol.v_ang[1] - th).abs() <= 1e-8);
            assert_eq!((sol.v_mag[0], sol.v_ang[0]), (1.0, 0.0));
        }
    }

    #[test]
    fn zero_load_is_flat_in_one_pass() {
        let net = two_bus(0.0, 0.0);
        let sol = solve_acpf(&net, &InjectionSample::base(&net), &AcpfOptions::default()).unwrap();
        assert_eq!(sol.iterations, 1);
        assert_eq!(sol.v_mag, vec![1.0, 1.0]);
        assert_eq!(sol.v_ang, vec![0.0, 0.0]);
    }

    #[test]
    fn heavy_load_does_not_converge() {
        let net = two_bus(100.0, 50.0);
        let s = InjectionSample::scaled_load(&net, 50.0);
        assert!(matches!(
            solve_acpf(&net, &s, &AcpfOptions::default()),
            Err(AcpfError::NonConvergence { .. })
        ));
    }

    #[test]
    fn meshed_case_converges_and_is_deterministic() {
        let net = meshed_with_pv();
        let s = InjectionSample::base(&net);
        let a = solve_acpf(&net, &s, &AcpfOptions::default()).unwrap();
        let b = solve_acpf(&net, &s, &AcpfOptions::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.max_mismatch <= 1e-8);
        assert_eq!(a.v_mag[1], 1.02);
        let problem = PowerFlowProblem::new(&net, &s).unwrap();
        assert!(max_abs(&problem.mismatch(&a.v_mag, &a.v_ang)) <= 1e-8);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let net = meshed_with_pv();
        let s = InjectionSample::base(&net);
        let problem = PowerFlowProblem::new(&net, &s).unwrap();
        let vm = vec![1.0, 1.02, 0.97, 0.95];
        let va = vec![0.0, -0.02, -0.05, -0.07];
        let jac = problem.jacobian(&vm, &va).to_dense();
        let x0 = problem.state(&vm, &va);
        let h = 1e-6;
        for j in 0..x0.len() {
            let eval = |delta: f64| {
                let mut x = x0.clone();
                x[j] += delta;
                let (mut m, mut a) = (vm.clone(), va.clone());
                problem.apply_state(&x, &mut m, &mut a);
                problem.mismatch(&m, &a)
            };
            let (fp, fm) = (eval(h), eval(-h));
            for i in 0..x0.len() {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                let an = jac[i][j];
                assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "J[{i},{j}] fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn q_limits_pin_reactive_output() {
        let mut net = meshed_with_pv();
        let s = InjectionSample::base(&net);
        let problem = PowerFlowProblem::new(&net, &s).unwrap();
        let free = solve_acpf(&net, &s, &AcpfOptions::default()).unwrap();
        // bus 2 carries a 5 MVAr load, so generation = injection + 0.05
        let q_free = problem.injections(&free.v_mag, &free.v_ang)[1].im + 0.05;
        let cap = q_free - 0.1;
        net.buses[1].gen.as_mut().unwrap().q_max = cap * 100.0;
        let opts = AcpfOptions {
            enforce_q_limits: true,
            ..Default::default()
        };
        let limited = solve_acpf(&net, &s, &opts).unwrap();
        let problem = PowerFlowProblem::new(&net, &s).unwrap();
        let q = problem.injections(&limited.v_mag, &limited.v_ang)[1].im + 0.05;
        assert!((q - cap).abs() < 1e-7);
        assert!(limited.v_mag[1] < 1.02);
        assert_eq!(solve_acpf(&net, &s, &AcpfOptions::default()).unwrap(), free);
    }

    #[test]
    fn sampler_stays_in_box_and_is_seeded() {
        let net = from_edges(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5)]);
        let base = InjectionSample::base(&net);
        for dist in [Distribution::Uniform, Distribution::truncated_normal(), Distribution::skewed_beta()] {
            let a = sample_hypercube(&net, 0.1, 200, dist, 42).unwrap();
            assert_eq!(a, sample_hypercube(&net, 0.1, 200, dist, 42).unwrap());
            assert_ne!(a, sample_hypercube(&net, 0.1, 200, dist, 43).unwrap());
            for s in &a {
                for &b in &net.load_bus_indices {
                    let bus = &net.buses[b];
                    assert!((s.p[b] - base.p[b]).abs() <= 0.1 * bus.base_p_load / 100.0 + 1e-15);
                    assert!((s.q[b] - base.q[b]).abs() <= 0.1 * bus.base_q_load / 100.0 + 1e-15);
                }
            }
        }
        assert!(sample_hypercube(&net, 1.5, 1, Distribution::Uniform, 0).is_err());
    }

    #[test]
    fn truncated_normal_respects_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = Distribution::truncated_normal();
        let draws: Vec<f64> = (0..100_000).map(|_| d.draw_unit(&mut rng)).collect();
        assert!(draws.iter().all(|u| u.abs() <= 1.0));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|u| u * u).sum::<f64>() / draws.len() as f64 - mean * mean;
        assert!(mean.abs() < 0.005);
        // truncation at three sigma trims the variance by about 2.7%
        assert!((var / (1.0 / 9.0) - 0.973).abs() < 0.02);
        let beta = Distribution::skewed_beta();
        let m: f64 = (0..100_000).map(|_| beta.draw_unit(&mut rng)).sum::<f64>() / 100_000.0;
        assert!((m - (2.0 * 2.0 / 7.0 - 1.0)).abs() < 0.01);
    }

    #[test]
    fn labeling_drops_failed_samples() {
        let net = two_bus(30.0, 10.0);
        let mut samples = sample_hypercube(&net, 0.1, 5, Distribution::Uniform, 1).unwrap();
        samples[2] = InjectionSample::scaled_load(&net, 50.0);
        let set = label_samples(&net, &samples, 1, &LabelOptions::default()).unwrap();
        assert_eq!(set.len(), 4);
        assert_eq!(set.dropped, vec![2]);
        assert_eq!(set.samples[2], samples[3]);
        let strict = LabelOptions {
            max_failure_fraction: 0.1,
            ..Default::default()
        };
        assert!(matches!(
            label_samples(&net, &samples, 1, &strict),
            Err(AcpfError::TooManyFailures { failed: 1, total: 5 })
        ));
        assert!(matches!(label_samples(&net, &samples, 0, &LabelOptions::default()), Err(AcpfError::TargetNotPq(1))));
    }
}
