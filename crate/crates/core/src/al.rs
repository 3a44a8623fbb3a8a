//! Network-swipe active learning.
//!
//! Buses are layered by BFS distance from the target. A swipe visits the
//! layers in order and, for each, picks the block of newly appearing load
//! coordinates that maximizes predictive variance while the other blocks stay
//! fixed. The incumbent block is always a candidate, so a swipe never lowers
//! the variance of the working sample.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::acpf::{check_target, sample_hypercube, AcpfError, AcpfOptions, Distribution, PowerFlowSolver, SampleMeta};
use crate::gp::{FitOptions, GpError, GpModel, OutputScaling};
use crate::grid::{neighborhood, Network};
use crate::kernels::Kernel;
use crate::math;
use crate::seed;
use crate::space::LoadSpace;
use crate::stats::{metrics, Metrics};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlError {
    #[error("{0} buses are unreachable from the target")]
    UnreachableBuses(usize),
    #[error("invalid option: {0}")]
    InvalidOption(&'static str),
    #[error("no convergent sample after {0} redraws")]
    RedrawsExhausted(usize),
    #[error("incumbent has {got} coordinates, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Acpf(#[from] AcpfError),
    #[error(transparent)]
    Gp(#[from] GpError),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerDecomposition {
    pub target: usize,
    /// `layers[i]` holds the buses at hop distance `i` from the target.
    pub layers: Vec<Vec<usize>>,
    /// Buses whose injections first enter an NNK support at each depth.
    pub unique_buses: Vec<Vec<usize>>,
    /// Load coordinates of `unique_buses`, per layer.
    pub unique_vars: Vec<Vec<usize>>,
}

impl LayerDecomposition {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

pub fn build_layers(net: &Network, space: &LoadSpace, target: usize) -> Result<LayerDecomposition, AlError> {
    net.check_index(target).map_err(AcpfError::from)?;
    let n = net.n_buses();
    let mut dist = vec![usize::MAX; n];
    dist[target] = 0;
    let mut queue = VecDeque::from([target]);
    let mut layers: Vec<Vec<usize>> = Vec::new();
    while let Some(b) = queue.pop_front() {
        let d = dist[b];
        if layers.len() <= d {
            layers.push(Vec::new());
        }
        layers[d].push(b);
        for &nb in &net.adjacency[b] {
            if dist[nb] == usize::MAX {
                dist[nb] = d + 1;
                queue.push_back(nb);
            }
        }
    }
    let unreached = dist.iter().filter(|&&d| d == usize::MAX).count();
    if unreached > 0 {
        return Err(AlError::UnreachableBuses(unreached));
    }
    for layer in &mut layers {
        layer.sort_unstable();
    }
    let mut seen = vec![false; n];
    let mut unique_buses = Vec::with_capacity(layers.len());
    for layer in &layers {
        let mut fresh = Vec::new();
        for &b in layer {
            for nb in neighborhood(net, b).map_err(AcpfError::from)? {
                if !seen[nb] {
                    seen[nb] = true;
                    fresh.push(nb);
                }
            }
        }
        fresh.sort_unstable();
        unique_buses.push(fresh);
    }
    let unique_vars = unique_buses.iter().map(|bs| space.coords_of_buses(bs)).collect();
    Ok(LayerDecomposition {
        target,
        layers,
        unique_buses,
        unique_vars,
    })
}

/// Supplies candidate blocks for one layer of a swipe.
pub trait CandidateSource {
    /// Fills `out` (length `coords.len()`) with one candidate; `lo`/`hi`
    /// are the box bounds of the full coordinate vector.
    fn draw(&mut self, layer: usize, coords: &[usize], lo: &[f64], hi: &[f64], out: &mut [f64]);
}

/// Independent uniform draws inside the box.
pub struct UniformCandidates {
    rng: ChaCha8Rng,
}

impl UniformCandidates {
    pub fn new(seed: u64) -> Self {
        UniformCandidates {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl CandidateSource for UniformCandidates {
    fn draw(&mut self, _layer: usize, coords: &[usize], lo: &[f64], hi: &[f64], out: &mut [f64]) {
        for (o, &c) in out.iter_mut().zip(coords) {
            *o = if hi[c] > lo[c] { self.rng.random_range(lo[c]..=hi[c]) } else { lo[c] };
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwipeOutcome {
    pub sample: Vec<f64>,
    /// Predictive std of the incumbent.
    pub initial_sigma: f64,
    /// Predictive std of the working sample after each visited layer.
    pub sigma_trace: Vec<f64>,
}

impl SwipeOutcome {
    pub fn sigma(&self) -> f64 {
        self.sigma_trace.last().copied().unwrap_or(self.initial_sigma)
    }
}

/// One network swipe over all layers with `batch` candidates per layer.
/// `incumbent`, `lo` and `hi` are flattened raw coordinate vectors.
pub fn swipe<C: CandidateSource>(
    model: &GpModel,
    layers: &LayerDecomposition,
    incumbent: &[f64],
    lo: &[f64],
    hi: &[f64],
    batch: usize,
    source: &mut C,
) -> Result<SwipeOutcome, AlError> {
    let dim = model.kernel().dim();
    for v in [incumbent, lo, hi] {
        if v.len() != dim {
            return Err(AlError::DimensionMismatch { expected: dim, got: v.len() });
        }
    }
    let mut x = incumbent.to_vec();
    let mut best = model.predict_var(&x)?;
    let initial_sigma = math::sqrt(best);
    let mut sigma_trace = Vec::with_capacity(layers.depth());
    let mut cand = Vec::new();
    for (i, coords) in layers.unique_vars.iter().enumerate() {
        if coords.is_empty() {
            debug!("layer {} has no load coordinates; skipped", i + 1);
            continue;
        }
        let probe = model.variance_probe(&x, coords)?;
        let mut block: Vec<f64> = coords.iter().map(|&c| x[c]).collect();
        cand.resize(coords.len(), 0.0);
        for _ in 0..batch {
            source.draw(i, coords, lo, hi, &mut cand);
            let v = probe.variance(&cand);
            if v > best {
                best = v;
                block.copy_from_slice(&cand);
            }
        }
        for (&c, &v) in coords.iter().zip(&block) {
            x[c] = v;
        }
        sigma_trace.push(math::sqrt(best));
    }
    Ok(SwipeOutcome {
        sample: x,
        initial_sigma,
        sigma_trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct AlOptions {
    /// Total labeled samples, including the initial random one.
    pub budget: usize,
    pub swipes_per_iter: usize,
    pub batch: usize,
    /// Re-tune hyperparameters every this many iterations; `None` never.
    pub retune_every: Option<usize>,
    pub retune_iters: usize,
    pub fraction: f64,
    pub seed: u64,
    pub max_redraws: usize,
    pub fit: FitOptions,
    pub acpf: AcpfOptions,
}

impl Default for AlOptions {
    fn default() -> Self {
        AlOptions {
            budget: 100,
            swipes_per_iter: 3,
            batch: 100,
            retune_every: Some(1),
            retune_iters: 25,
            fraction: 0.1,
            seed: 0,
            max_redraws: 5,
            fit: FitOptions::default(),
            acpf: AcpfOptions::default(),
        }
    }
}

/// Held-out points scored after every update.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProbeSet {
    pub inputs: Vec<Vec<f64>>,
    pub truths: Vec<f64>,
}

impl ProbeSet {
    pub fn score(&self, model: &GpModel) -> Result<Metrics, AlError> {
        let mut preds = Vec::with_capacity(self.inputs.len());
        let mut vars = Vec::with_capacity(self.inputs.len());
        for x in &self.inputs {
            let p = model.predict(x)?;
            preds.push(p.mean);
            vars.push(p.variance);
        }
        metrics(&preds, &self.truths, &vars).map_err(|_| AlError::InvalidOption("probe set is empty or ragged"))
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AlRecord {
    pub iteration: usize,
    /// Flattened raw load coordinates of the chosen sample.
    pub sample: Vec<f64>,
    /// Predictive std at the chosen sample before labeling.
    pub sigma: f64,
    pub voltage: f64,
    pub retuned: bool,
    pub redraws: usize,
    pub probe: Option<Metrics>,
    /// Seconds since the run started.
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AlHistory {
    pub target: usize,
    pub options: AlOptions,
    pub initial_sample: Vec<f64>,
    pub initial_voltage: f64,
    pub records: Vec<AlRecord>,
    /// Power-flow solves issued, failed ones included.
    pub acpf_solves: usize,
}

/// Algorithm loop: one random labeled sample, then `budget - 1` iterations
/// of swipes, labeling and model update. `clock` returns seconds.
pub fn run_al(
    net: &Network,
    target: usize,
    kernel: Kernel,
    opts: &AlOptions,
    probe: Option<&ProbeSet>,
    clock: &mut dyn FnMut() -> f64,
) -> Result<(GpModel, AlHistory), AlError> {
    if opts.budget < 2 {
        return Err(AlError::InvalidOption("budget must be at least 2"));
    }
    if opts.swipes_per_iter == 0 || opts.batch == 0 {
        return Err(AlError::InvalidOption("swipes and batch must be at least 1"));
    }
    if opts.retune_every == Some(0) {
        return Err(AlError::InvalidOption("retune interval must be at least 1"));
    }
    check_target(net, target)?;
    let space = LoadSpace::new(net);
    if kernel.dim() != space.dim() {
        return Err(AlError::DimensionMismatch {
            expected: space.dim(),
            got: kernel.dim(),
        });
    }
    let layers = build_layers(net, &space, target)?;
    let (lo, hi) = space.bounds(opts.fraction);
    let scaling = space.scaling(opts.fraction);
    let solver = PowerFlowSolver::new(net);
    let t0 = clock();
    let mut solves = 0;
    let mut label = |x: &[f64]| -> Result<f64, AcpfError> {
        solves += 1;
        let s = space.unflatten(net, x, SampleMeta::default());
        solver.solve(&s, &opts.acpf).map(|sol| sol.v_mag[target])
    };

    let mut init = None;
    for attempt in 0..=opts.max_redraws {
        let s = sample_hypercube(net, opts.fraction, 1, Distribution::Uniform, seed::derive(opts.seed, attempt as u64))?;
        let x = space.flatten(&s[0]);
        match label(&x) {
            Ok(v) => {
                init = Some((x, v));
                break;
            }
            Err(e) => warn!("initial sample failed to solve ({e}); redrawing"),
        }
    }
    let (x0, v0) = init.ok_or(AlError::RedrawsExhausted(opts.max_redraws))?;
    let design = vec![scaling.apply(&x0)];
    let mut model = GpModel::assemble(
        kernel,
        scaling,
        OutputScaling {
            mean: v0,
            scale: 1.0,
        },
        design,
        vec![v0],
        opts.fit.noise,
        opts.fit.max_noise,
    )?;

    let mut records = Vec::with_capacity(opts.budget - 1);
    let mut incumbent = x0.clone();
    for it in 1..opts.budget {
        let mut chosen = None;
        for redraw in 0..=opts.max_redraws {
            let stream = seed::derive(opts.seed, ((it as u64) << 8) | redraw as u64);
            let mut source = UniformCandidates::new(stream);
            // a redraw restarts from a fresh random point
            let mut x = if redraw == 0 {
                incumbent.clone()
            } else {
                let s = sample_hypercube(net, opts.fraction, 1, Distribution::Uniform, stream)?;
                space.flatten(&s[0])
            };
            let mut sigma = 0.0;
            for _ in 0..opts.swipes_per_iter {
                let out = swipe(&model, &layers, &x, &lo, &hi, opts.batch, &mut source)?;
                sigma = out.sigma();
                x = out.sample;
            }
            match label(&x) {
                Ok(v) => {
                    chosen = Some((x, sigma, v, redraw));
                    break;
                }
                Err(e) => warn!("iteration {it}: chosen sample failed to solve ({e}); redrawing"),
            }
        }
        let (x, sigma, v, redraws) = chosen.ok_or(AlError::RedrawsExhausted(opts.max_redraws))?;
        model.update(&x, v)?;
        let retuned = opts.retune_every.is_some_and(|k| it % k == 0);
        if retuned {
            if let Err(e) = model.retune(opts.retune_iters, opts.fit.lr) {
                warn!("iteration {it}: re-tuning failed ({e}); keeping hyperparameters");
            }
        }
        let probe = probe.map(|p| p.score(&model)).transpose()?;
        if let Some(m) = &probe {
            debug!("iteration {it}: sigma {sigma:.3e}, probe MAE {:.3e}", m.mae);
        }
        records.push(AlRecord {
            iteration: it,
            sample: x.clone(),
            sigma,
            voltage: v,
            retuned,
            redraws,
            probe,
            wall_time: clock() - t0,
        });
        incumbent = x;
    }
    info!("active learning finished: {} samples, {solves} power-flow solves", model.n_train());
    let history = AlHistory {
        target,
        options: *opts,
        initial_sample: x0,
        initial_voltage: v0,
        records,
        acpf_solves: solves,
    };
    Ok((model, history))
}
