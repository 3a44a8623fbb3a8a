//! Experiment drivers: random train/test trials, extrapolation, depth and
//! distribution-shift studies.
//!
//! Every trial draws its RNG streams from the master seed through
//! [`seed::derive`], so any row can be regenerated from the seeds it records.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vdkflow_core::acpf::{check_target, collect_labels, label_one, sample_hypercube, LabelOptions, LabeledSet, PowerFlowSolver};
use vdkflow_core::al::{build_layers, run_al, AlOptions};
use vdkflow_core::gp::FitOptions;
use vdkflow_core::kernels::{build_vdk, reduce_vdk, truncate_vdk, FullKernel};
use vdkflow_core::seed;
use vdkflow_core::stats::{compare_densities, coverage, metrics, DensityComparison, Metrics};
use vdkflow_core::{AcpfError, Distribution, GpModel, InjectionSample, Kernel, LoadSpace, Network};

use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Method {
    FullGp,
    VdkGp,
    VdkAl,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::FullGp => "full_gp",
            Method::VdkGp => "vdk_gp",
            Method::VdkAl => "vdk_al",
        })
    }
}

/// Kernel used by the VDK methods. Parsed from `full`, `vdk`,
/// `vdk_reduced` or `vdk_depth:K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum KernelVariant {
    Full,
    Vdk,
    VdkReduced,
    VdkDepth(usize),
}

impl fmt::Display for KernelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelVariant::Full => f.write_str("full"),
            KernelVariant::Vdk => f.write_str("vdk"),
            KernelVariant::VdkReduced => f.write_str("vdk_reduced"),
            KernelVariant::VdkDepth(k) => write!(f, "vdk_depth:{k}"),
        }
    }
}

impl FromStr for KernelVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(KernelVariant::Full),
            "vdk" => Ok(KernelVariant::Vdk),
            "vdk_reduced" => Ok(KernelVariant::VdkReduced),
            _ => s
                .strip_prefix("vdk_depth:")
                .and_then(|k| k.parse().ok())
                .map(KernelVariant::VdkDepth)
                .ok_or_else(|| format!("unknown kernel variant `{s}`")),
        }
    }
}

impl TryFrom<String> for KernelVariant {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<KernelVariant> for String {
    fn from(k: KernelVariant) -> String {
        k.to_string()
    }
}

pub fn build_kernel(net: &Network, space: &LoadSpace, target: usize, variant: KernelVariant) -> Result<Kernel, Error> {
    Ok(match variant {
        KernelVariant::Full => Kernel::Full(FullKernel::new(space.dim())),
        KernelVariant::Vdk => Kernel::Vdk(build_vdk(net, space)),
        KernelVariant::VdkReduced => Kernel::Vdk(reduce_vdk(&build_vdk(net, space))),
        KernelVariant::VdkDepth(depth) => {
            let layers = build_layers(net, space, target)?;
            Kernel::Vdk(truncate_vdk(&build_vdk(net, space), &layers, depth)?)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub case: PathBuf,
    /// External bus numbers of the target voltages.
    pub targets: Vec<u32>,
    /// Half-width of the training load box, as a fraction of base load.
    pub fraction: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_trials: usize,
    pub methods: Vec<Method>,
    pub kernel: KernelVariant,
    pub fit: FitOptions,
    pub al: AlOptions,
    pub label: LabelOptions,
    pub seed: u64,
    /// Test box half-widths for the extrapolation study.
    pub test_fractions: Vec<f64>,
    /// Depths for the depth study; empty means every depth.
    pub depths: Vec<usize>,
    /// Test distributions for the UQ study.
    pub test_distributions: Vec<Distribution>,
    pub kde_grid: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            case: crate::data_dir().join("case118.m"),
            targets: vec![2],
            fraction: 0.1,
            n_train: 100,
            n_test: 1000,
            n_trials: 20,
            methods: vec![Method::FullGp, Method::VdkGp],
            kernel: KernelVariant::Vdk,
            fit: FitOptions::default(),
            al: AlOptions::default(),
            label: LabelOptions::default(),
            seed: 0,
            test_fractions: vec![0.1, 0.15, 0.2, 0.25],
            depths: Vec::new(),
            test_distributions: vec![Distribution::truncated_normal(), Distribution::skewed_beta()],
            kde_grid: 1024,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.targets.is_empty() {
            return bad("at least one target bus is required");
        }
        if self.n_train < 2 || self.n_test == 0 || self.n_trials == 0 {
            return bad("n_train must be at least 2; n_test and n_trials at least 1");
        }
        if !(self.fraction > 0.0 && self.fraction < 1.0) {
            return bad("fraction must lie in (0, 1)");
        }
        if self.test_fractions.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
            return bad("test fractions must lie in (0, 1)");
        }
        if self.methods.is_empty() {
            return bad("at least one method is required");
        }
        if self.kde_grid < 2 {
            return bad("kde_grid must be at least 2");
        }
        Ok(())
    }

    pub fn case_name(&self) -> String {
        self.case
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

pub fn resolve_bus(net: &Network, id: u32) -> Result<usize, Error> {
    net.index_of(id).ok_or(Error::UnknownBus(id))
}

/// Solves each sample (in parallel) and keeps the convergent ones, in input
/// order.
pub fn label_parallel(
    net: &Network,
    samples: &[InjectionSample],
    target: usize,
    opts: &LabelOptions,
) -> Result<LabeledSet, AcpfError> {
    check_target(net, target)?;
    let solver = PowerFlowSolver::new(net);
    let results: Vec<Result<f64, AcpfError>> = samples
        .par_iter()
        .map(|s| label_one(&solver, s, target, &opts.acpf))
        .collect();
    collect_labels(samples, results, opts.max_failure_fraction)
}

/// Flattened inputs with their labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub truths: Vec<f64>,
}

pub fn labeled_dataset(
    net: &Network,
    space: &LoadSpace,
    target: usize,
    fraction: f64,
    n: usize,
    dist: Distribution,
    seed: u64,
    opts: &LabelOptions,
) -> Result<Dataset, Error> {
    let samples = sample_hypercube(net, fraction, n, dist, seed)?;
    let set = label_parallel(net, &samples, target, opts)?;
    Ok(Dataset {
        inputs: set.samples.iter().map(|s| space.flatten(s)).collect(),
        truths: set.voltages,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub preds: Vec<f64>,
    pub vars: Vec<f64>,
}

pub fn evaluate(model: &GpModel, test: &Dataset) -> Result<Evaluation, Error> {
    let out: Vec<(f64, f64)> = test
        .inputs
        .par_iter()
        .map(|x| model.predict(x).map(|p| (p.mean, p.variance)))
        .collect::<Result<_, _>>()?;
    let (preds, vars): (Vec<f64>, Vec<f64>) = out.into_iter().unzip();
    let metrics = metrics(&preds, &test.truths, &vars)?;
    Ok(Evaluation { metrics, preds, vars })
}

/// Fraction of test points whose error exceeds 1, 2 and 3 predictive
/// standard deviations.
pub fn coverage_study(model: &GpModel, test: &Dataset) -> Result<[f64; 3], Error> {
    let e = evaluate(model, test)?;
    let c = coverage(&e.preds, &test.truths, &e.vars, &[1.0, 2.0, 3.0])?;
    Ok([c[0], c[1], c[2]])
}

/// One CSV row of `bench trials`. Column order is the field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub case: String,
    pub target: u32,
    pub method: Method,
    pub kernel: String,
    pub fraction: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub mae: f64,
    pub me: f64,
    pub mpv: f64,
    pub outside_1sigma: f64,
    pub outside_2sigma: f64,
    pub outside_3sigma: f64,
    pub train_seed: u64,
    pub test_seed: u64,
}

/// The documented CSV header of [`TrialResult`].
pub const TRIAL_COLUMNS: [&str; 16] = [
    "trial",
    "case",
    "target",
    "method",
    "kernel",
    "fraction",
    "n_train",
    "n_test",
    "mae",
    "me",
    "mpv",
    "outside_1sigma",
    "outside_2sigma",
    "outside_3sigma",
    "train_seed",
    "test_seed",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialSeeds {
    pub train: u64,
    pub test: u64,
    pub al: u64,
}

impl TrialSeeds {
    pub fn new(master: u64, trial: usize) -> Self {
        let t = seed::derive(master, trial as u64);
        TrialSeeds {
            train: seed::derive(t, 1),
            test: seed::derive(t, 2),
            al: seed::derive(t, 3),
        }
    }
}

/// Fits `method` on `train`; the AL method ignores `train` and collects
/// its own samples.
pub fn train_method(
    cfg: &ExperimentConfig,
    net: &Network,
    space: &LoadSpace,
    target: usize,
    method: Method,
    train: &Dataset,
    al_seed: u64,
) -> Result<GpModel, Error> {
    let scaling = space.scaling(cfg.fraction);
    Ok(match method {
        Method::FullGp => GpModel::fit(
            &train.inputs,
            &train.truths,
            build_kernel(net, space, target, KernelVariant::Full)?,
            scaling,
            &cfg.fit,
        )?,
        Method::VdkGp => GpModel::fit(
            &train.inputs,
            &train.truths,
            build_kernel(net, space, target, cfg.kernel)?,
            scaling,
            &cfg.fit,
        )?,
        Method::VdkAl => {
            let opts = AlOptions {
                budget: cfg.n_train,
                fraction: cfg.fraction,
                seed: al_seed,
                fit: cfg.fit,
                acpf: cfg.label.acpf,
                ..cfg.al
            };
            let kernel = build_kernel(net, space, target, cfg.kernel)?;
            run_al(net, target, kernel, &opts, None, &mut || 0.0)?.0
        }
    })
}

fn run_one_trial(cfg: &ExperimentConfig, net: &Network, space: &LoadSpace, trial: usize) -> Result<Vec<TrialResult>, Error> {
    let seeds = TrialSeeds::new(cfg.seed, trial);
    let mut rows = Vec::new();
    for &target_id in &cfg.targets {
        let target = resolve_bus(net, target_id)?;
        let needs_train = cfg.methods.iter().any(|m| *m != Method::VdkAl);
        let train = if needs_train {
            labeled_dataset(net, space, target, cfg.fraction, cfg.n_train, Distribution::Uniform, seeds.train, &cfg.label)?
        } else {
            Dataset::default()
        };
        let test = labeled_dataset(net, space, target, cfg.fraction, cfg.n_test, Distribution::Uniform, seeds.test, &cfg.label)?;
        for &method in &cfg.methods {
            let model = train_method(cfg, net, space, target, method, &train, seeds.al)?;
            let e = evaluate(&model, &test)?;
            let c = coverage(&e.preds, &test.truths, &e.vars, &[1.0, 2.0, 3.0])?;
            let kernel = match method {
                Method::FullGp => KernelVariant::Full.to_string(),
                _ => cfg.kernel.to_string(),
            };
            rows.push(TrialResult {
                trial,
                case: cfg.case_name(),
                target: target_id,
                method,
                kernel,
                fraction: cfg.fraction,
                n_train: model.n_train(),
                n_test: test.truths.len(),
                mae: e.metrics.mae,
                me: e.metrics.me,
                mpv: e.metrics.mpv,
                outside_1sigma: c[0],
                outside_2sigma: c[1],
                outside_3sigma: c[2],
                train_seed: seeds.train,
                test_seed: seeds.test,
            });
            info!("trial {trial} target {target_id} {method}: MAE {:.3e}", e.metrics.mae);
        }
    }
    Ok(rows)
}

/// Runs every trial, handing rows to `sink` in trial order as each batch of
/// parallel trials completes.
pub fn run_trials(
    cfg: &ExperimentConfig,
    net: &Network,
    mut sink: impl FnMut(&TrialResult) -> Result<(), Error>,
) -> Result<Vec<TrialResult>, Error> {
    cfg.validate()?;
    let space = LoadSpace::new(net);
    let chunk = rayon::current_num_threads().max(1);
    let mut all = Vec::new();
    let trials: Vec<usize> = (0..cfg.n_trials).collect();
    for batch in trials.chunks(chunk) {
        let results: Vec<Result<Vec<TrialResult>, Error>> = batch
            .par_iter()
            .map(|&t| {
                run_one_trial(cfg, net, &space, t).map_err(|e| Error::Trial {
                    trial: t,
                    source: Box::new(e),
                })
            })
            .collect();
        for r in results {
            for row in r? {
                sink(&row)?;
                all.push(row);
            }
        }
    }
    Ok(all)
}

pub fn trial_csv_writer<W: Write>(w: W) -> Result<csv::Writer<W>, Error> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wtr.write_record(TRIAL_COLUMNS)?;
    Ok(wtr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationRow {
    pub trial: usize,
    pub target: u32,
    pub train_fraction: f64,
    pub test_fraction: f64,
    pub mae: f64,
    pub me: f64,
    pub mpv: f64,
    pub test_seed: u64,
}

/// Trains a VDK model inside the training box and scores it on fresh test
/// sets drawn from each wider box.
pub fn extrapolation_study(cfg: &ExperimentConfig, net: &Network) -> Result<Vec<ExtrapolationRow>, Error> {
    cfg.validate()?;
    if cfg.test_fractions.iter().any(|&f| f < cfg.fraction) {
        return Err(Error::Config("test fractions must not be smaller than the training fraction".into()));
    }
    let space = LoadSpace::new(net);
    let mut rows = Vec::new();
    for trial in 0..cfg.n_trials {
        let seeds = TrialSeeds::new(cfg.seed, trial);
        for &target_id in &cfg.targets {
            let target = resolve_bus(net, target_id)?;
            let train = labeled_dataset(net, &space, target, cfg.fraction, cfg.n_train, Distribution::Uniform, seeds.train, &cfg.label)?;
            let model = train_method(cfg, net, &space, target, Method::VdkGp, &train, seeds.al)?;
            for &f in &cfg.test_fractions {
                // the same stream for every width, so each box scales one draw
                let test = labeled_dataset(net, &space, target, f, cfg.n_test, Distribution::Uniform, seeds.test, &cfg.label)?;
                let m = evaluate(&model, &test)?.metrics;
                rows.push(ExtrapolationRow {
                    trial,
                    target: target_id,
                    train_fraction: cfg.fraction,
                    test_fraction: f,
                    mae: m.mae,
                    me: m.me,
                    mpv: m.mpv,
                    test_seed: seeds.test,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub target: u32,
    pub depth: usize,
    pub n_nnk: usize,
    pub mae: Option<f64>,
    pub me: Option<f64>,
    pub mpv: Option<f64>,
}

/// Cumulative number of active NNKs owned by buses within each depth.
pub fn depth_counts(net: &Network, target: usize, reduced: bool) -> Result<Vec<(usize, usize)>, Error> {
    let space = LoadSpace::new(net);
    let layers = build_layers(net, &space, target)?;
    let mut vdk = build_vdk(net, &space);
    if reduced {
        vdk = reduce_vdk(&vdk);
    }
    (1..=layers.depth())
        .map(|d| Ok((d, truncate_vdk(&vdk, &layers, d)?.active.len())))
        .collect()
}

/// One model per truncation depth on a shared training and test set.
/// With `train` false only the NNK counts are reported.
pub fn depth_study(cfg: &ExperimentConfig, net: &Network, train: bool) -> Result<Vec<DepthRow>, Error> {
    cfg.validate()?;
    let space = LoadSpace::new(net);
    let seeds = TrialSeeds::new(cfg.seed, 0);
    let mut rows = Vec::new();
    for &target_id in &cfg.targets {
        let target = resolve_bus(net, target_id)?;
        let layers = build_layers(net, &space, target)?;
        let depths: Vec<usize> = if cfg.depths.is_empty() {
            (1..=layers.depth()).collect()
        } else {
            cfg.depths.clone()
        };
        let base = match cfg.kernel {
            KernelVariant::VdkReduced => reduce_vdk(&build_vdk(net, &space)),
            _ => build_vdk(net, &space),
        };
        let data = if train {
            let tr = labeled_dataset(net, &space, target, cfg.fraction, cfg.n_train, Distribution::Uniform, seeds.train, &cfg.label)?;
            let te = labeled_dataset(net, &space, target, cfg.fraction, cfg.n_test, Distribution::Uniform, seeds.test, &cfg.label)?;
            Some((tr, te))
        } else {
            None
        };
        for d in depths {
            let vdk = truncate_vdk(&base, &layers, d)?;
            let n_nnk = vdk.active.len();
            let m = match &data {
                Some((tr, te)) => {
                    let model = GpModel::fit(&tr.inputs, &tr.truths, Kernel::Vdk(vdk), space.scaling(cfg.fraction), &cfg.fit)?;
                    Some(evaluate(&model, te)?.metrics)
                }
                None => None,
            };
            rows.push(DepthRow {
                target: target_id,
                depth: d,
                n_nnk,
                mae: m.map(|m| m.mae),
                me: m.map(|m| m.me),
                mpv: m.map(|m| m.mpv),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqResult {
    pub target: u32,
    pub distribution: Distribution,
    pub n_test: usize,
    pub mae: f64,
    pub density: DensityComparison,
}

/// Trains on uniform box samples and compares predicted and true voltage
/// densities under each shifted test distribution.
pub fn uq_study(cfg: &ExperimentConfig, net: &Network) -> Result<Vec<UqResult>, Error> {
    cfg.validate()?;
    let space = LoadSpace::new(net);
    let seeds = TrialSeeds::new(cfg.seed, 0);
    let mut out = Vec::new();
    for &target_id in &cfg.targets {
        let target = resolve_bus(net, target_id)?;
        let train = labeled_dataset(net, &space, target, cfg.fraction, cfg.n_train, Distribution::Uniform, seeds.train, &cfg.label)?;
        let model = train_method(cfg, net, &space, target, Method::VdkGp, &train, seeds.al)?;
        for (k, &dist) in cfg.test_distributions.iter().enumerate() {
            let test_seed = seed::derive(seeds.test, k as u64);
            let test = labeled_dataset(net, &space, target, cfg.fraction, cfg.n_test, dist, test_seed, &cfg.label)?;
            let e = evaluate(&model, &test)?;
            let density = compare_densities(&test.truths, &e.preds, cfg.kde_grid)?;
            info!("UQ target {target_id} {dist:?}: KL {:.3e}", density.kl);
            out.push(UqResult {
                target: target_id,
                distribution: dist,
                n_test: test.truths.len(),
                mae: e.metrics.mae,
                density,
            });
        }
    }
    Ok(out)
}
