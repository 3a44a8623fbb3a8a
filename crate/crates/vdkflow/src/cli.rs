//! Command-line interface.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use vdkflow_core::acpf::{sample_hypercube, PowerFlowSolver};
use vdkflow_core::al::{run_al, AlHistory, ProbeSet};
use vdkflow_core::gp::FitOptions;
use vdkflow_core::kernels::{build_vdk, reduce_vdk, truncate_vdk};
use vdkflow_core::{AcpfOptions, Bus, Distribution, GpModel, LoadSpace, Network, PowerFlowSolution};

use crate::bench::{self, build_kernel, label_parallel, resolve_bus, ExperimentConfig, KernelVariant, Method};
use crate::case::load_case;
use crate::io::{read_json, read_samples, write_json, ModelFile, VdkJson};
use crate::Error;

#[derive(Debug, Parser)]
#[command(name = "vdkflow", version, about = "Graph-structured GP learning of power-flow voltages")]
pub struct Cli {
    /// Experiment configuration (JSON); supplies defaults for every command.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file; stdout when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Network inspection.
    #[command(subcommand)]
    Grid(GridCmd),
    /// Power flow and injection sampling.
    #[command(subcommand)]
    Acpf(AcpfCmd),
    /// Kernel structure.
    #[command(subcommand)]
    Kernel(KernelCmd),
    /// Gaussian-process models.
    #[command(subcommand)]
    Gp(GpCmd),
    /// Active learning.
    #[command(subcommand)]
    Al(AlCmd),
    /// Experiment protocols.
    #[command(subcommand)]
    Bench(BenchCmd),
}

#[derive(Debug, Args, Clone, Default)]
pub struct CaseArgs {
    /// MATPOWER case file.
    #[arg(long, value_name = "FILE")]
    pub case: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TargetArgs {
    #[command(flatten)]
    pub case: CaseArgs,
    /// Target bus number (as in the case file).
    #[arg(long)]
    pub target: Option<u32>,
}

#[derive(Debug, Subcommand)]
pub enum GridCmd {
    /// Buses, branches, adjacency and load buses as JSON.
    Dump(CaseArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DistArg {
    Uniform,
    Normal,
    Beta,
}

impl From<DistArg> for Distribution {
    fn from(d: DistArg) -> Self {
        match d {
            DistArg::Uniform => Distribution::Uniform,
            DistArg::Normal => Distribution::truncated_normal(),
            DistArg::Beta => Distribution::skewed_beta(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum AcpfCmd {
    /// Solve the base case, or every sample of a samples file.
    Solve {
        #[command(flatten)]
        case: CaseArgs,
        #[arg(long, value_name = "FILE")]
        samples: Option<PathBuf>,
        /// Convert PV buses to PQ when reactive limits are violated.
        #[arg(long)]
        q_limits: bool,
    },
    /// Draw load samples from the ±fraction hypercube.
    Sample {
        #[command(flatten)]
        case: CaseArgs,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long, value_enum, default_value = "uniform")]
        dist: DistArg,
    },
}

#[derive(Debug, Subcommand)]
pub enum KernelCmd {
    /// Write the VDK structure (`vdk.json`).
    Build {
        #[command(flatten)]
        case: CaseArgs,
        /// Drop redundant NNKs.
        #[arg(long)]
        reduced: bool,
        /// Keep only NNKs within this many BFS layers of --target.
        #[arg(long, requires = "target")]
        depth: Option<usize>,
        #[arg(long)]
        target: Option<u32>,
    },
}

#[derive(Debug, Subcommand)]
pub enum GpCmd {
    /// Label samples and fit a model.
    Fit {
        #[command(flatten)]
        target: TargetArgs,
        /// Training samples; drawn from the box when omitted.
        #[arg(long, value_name = "FILE")]
        samples: Option<PathBuf>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        fraction: Option<f64>,
        /// full, vdk, vdk_reduced or vdk_depth:K
        #[arg(long)]
        kernel: Option<KernelVariant>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Predict mean and variance for every sample of a samples file.
    Predict {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[command(flatten)]
        case: CaseArgs,
        #[arg(long, value_name = "FILE")]
        samples: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum AlCmd {
    /// Network-swipe active learning.
    Run {
        #[command(flatten)]
        target: TargetArgs,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        swipes: Option<usize>,
        /// Never re-tune hyperparameters during the loop.
        #[arg(long)]
        no_retune: bool,
        #[arg(long)]
        kernel: Option<KernelVariant>,
        #[arg(long)]
        fraction: Option<f64>,
        /// Score a held-out probe set of this size after every update.
        #[arg(long)]
        probe: Option<usize>,
        /// Where to write the final model; next to --out by default.
        #[arg(long, value_name = "FILE")]
        model_out: Option<PathBuf>,
    },
}

#[derive(Debug, Args, Clone, Default)]
pub struct BenchArgs {
    #[command(flatten)]
    pub case: CaseArgs,
    /// Target bus numbers (repeatable).
    #[arg(long)]
    pub target: Vec<u32>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub kernel: Option<KernelVariant>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub methods: Vec<Method>,
}

#[derive(Debug, Subcommand)]
pub enum BenchCmd {
    /// Random train/test trials (CSV).
    Trials(BenchArgs),
    /// Error and NNK count per truncation depth (CSV).
    Depth {
        #[command(flatten)]
        args: BenchArgs,
        /// Report NNK counts without training.
        #[arg(long)]
        counts_only: bool,
    },
    /// Density comparison under shifted test distributions (JSON).
    Uq(BenchArgs),
    /// Error on boxes wider than the training box (CSV).
    Extrapolate {
        #[command(flatten)]
        args: BenchArgs,
        #[arg(long, value_delimiter = ',')]
        test_fractions: Vec<f64>,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    out: Option<PathBuf>,
}

impl Ctx {
    fn case_path(&self, c: &CaseArgs) -> PathBuf {
        c.case.clone().unwrap_or_else(|| self.cfg.case.clone())
    }

    fn load(&self, c: &CaseArgs) -> Result<Network, Error> {
        Ok(load_case(&self.case_path(c))?)
    }

    fn target(&self, net: &Network, t: &TargetArgs) -> Result<(u32, usize), Error> {
        let id = t.target.or(self.cfg.targets.first().copied()).ok_or_else(|| Error::Usage("--target is required".into()))?;
        Ok((id, resolve_bus(net, id)?))
    }

    fn writer(&self) -> Result<Box<dyn Write>, Error> {
        Ok(match &self.out {
            Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|source| crate::io::IoError::File {
                path: p.display().to_string(),
                source,
            })?)),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        })
    }

    fn emit_json<T: Serialize + ?Sized>(&self, value: &T) -> Result<(), Error> {
        match &self.out {
            Some(p) => Ok(write_json(p, value)?),
            None => {
                let mut w = io::stdout().lock();
                serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Usage(e.to_string()))?;
                writeln!(w).ok();
                Ok(())
            }
        }
    }

    fn emit_csv<T: Serialize>(&self, rows: &[T]) -> Result<(), Error> {
        let mut w = csv::Writer::from_writer(self.writer()?);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Serialize)]
struct BranchDump {
    from: u32,
    to: u32,
    r: f64,
    x: f64,
    b_charging: f64,
    tap_ratio: f64,
    phase_shift: f64,
    in_service: bool,
}

#[derive(Serialize)]
struct GridDump<'a> {
    base_mva: f64,
    slack: u32,
    buses: &'a [Bus],
    branches: Vec<BranchDump>,
    adjacency: Vec<(u32, Vec<u32>)>,
    load_buses: Vec<u32>,
}

fn grid_dump(net: &Network) -> GridDump<'_> {
    let id = |b: usize| net.buses[b].id;
    GridDump {
        base_mva: net.base_mva,
        slack: id(net.slack),
        buses: &net.buses,
        branches: net
            .branches
            .iter()
            .map(|b| BranchDump {
                from: id(b.from),
                to: id(b.to),
                r: b.r,
                x: b.x,
                b_charging: b.b_charging,
                tap_ratio: b.tap_ratio,
                phase_shift: b.phase_shift,
                in_service: b.in_service,
            })
            .collect(),
        adjacency: net
            .adjacency
            .iter()
            .enumerate()
            .map(|(b, nbrs)| (id(b), nbrs.iter().map(|&n| id(n)).collect()))
            .collect(),
        load_buses: net.load_bus_indices.iter().map(|&b| id(b)).collect(),
    }
}

#[derive(Serialize)]
struct SolveRecord {
    index: usize,
    converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    solution: Option<PowerFlowSolution>,
}

#[derive(Serialize)]
struct PredictRecord {
    mean: f64,
    variance: f64,
}

#[derive(Serialize)]
struct RunFile<'a> {
    case: String,
    target_bus: u32,
    model: String,
    history: &'a AlHistory,
}

fn model_path_for(out: &Option<PathBuf>) -> PathBuf {
    match out {
        Some(p) => p.with_extension("model.json"),
        None => PathBuf::from("model.json"),
    }
}

fn fit_opts(base: FitOptions, iters: Option<usize>, lr: Option<f64>) -> FitOptions {
    FitOptions {
        iters: iters.unwrap_or(base.iters),
        lr: lr.unwrap_or(base.lr),
        ..base
    }
}

fn apply_bench(cfg: &mut ExperimentConfig, a: &BenchArgs) {
    if let Some(c) = &a.case.case {
        cfg.case = c.clone();
    }
    if !a.target.is_empty() {
        cfg.targets = a.target.clone();
    }
    if let Some(t) = a.trials {
        cfg.n_trials = t;
    }
    if let Some(n) = a.n_train {
        cfg.n_train = n;
    }
    if let Some(n) = a.n_test {
        cfg.n_test = n;
    }
    if let Some(k) = a.kernel {
        cfg.kernel = k;
    }
    if !a.methods.is_empty() {
        cfg.methods = a.methods.clone();
    }
}

pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Error> {
    match path {
        Some(p) => Ok(read_json(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

pub fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let mut ctx = Ctx { cfg, out: cli.out };
    match cli.command {
        Command::Grid(GridCmd::Dump(c)) => {
            let net = ctx.load(&c)?;
            ctx.emit_json(&grid_dump(&net))
        }
        Command::Acpf(AcpfCmd::Solve { case, samples, q_limits }) => {
            let net = ctx.load(&case)?;
            let opts = AcpfOptions {
                enforce_q_limits: q_limits,
                ..ctx.cfg.label.acpf
            };
            let solver = PowerFlowSolver::new(&net);
            match samples {
                None => {
                    let sol = solver.solve(&vdkflow_core::InjectionSample::base(&net), &opts)?;
                    ctx.emit_json(&sol)
                }
                Some(p) => {
                    use rayon::prelude::*;
                    let samples = read_samples(&p, &net)?;
                    let recs: Vec<SolveRecord> = samples
                        .par_iter()
                        .enumerate()
                        .map(|(index, s)| match solver.solve(s, &opts) {
                            Ok(sol) => SolveRecord {
                                index,
                                converged: true,
                                error: None,
                                solution: Some(sol),
                            },
                            Err(e) => SolveRecord {
                                index,
                                converged: false,
                                error: Some(e.to_string()),
                                solution: None,
                            },
                        })
                        .collect();
                    ctx.emit_json(&recs)
                }
            }
        }
        Command::Acpf(AcpfCmd::Sample { case, n, fraction, dist }) => {
            let net = ctx.load(&case)?;
            let f = fraction.unwrap_or(ctx.cfg.fraction);
            let samples = sample_hypercube(&net, f, n, dist.into(), ctx.cfg.seed)?;
            ctx.emit_json(&samples)
        }
        Command::Kernel(KernelCmd::Build {
            case,
            reduced,
            depth,
            target,
        }) => {
            let net = ctx.load(&case)?;
            let space = LoadSpace::new(&net);
            let mut v = build_vdk(&net, &space);
            if reduced {
                v = reduce_vdk(&v);
            }
            if let (Some(d), Some(t)) = (depth, target) {
                let layers = vdkflow_core::al::build_layers(&net, &space, resolve_bus(&net, t)?)?;
                v = truncate_vdk(&v, &layers, d)?;
            }
            ctx.emit_json(&VdkJson::new(&net, &space, &v, reduced))
        }
        Command::Gp(GpCmd::Fit {
            target,
            samples,
            n_train,
            fraction,
            kernel,
            iters,
            lr,
        }) => {
            let net = ctx.load(&target.case)?;
            let (tid, t) = ctx.target(&net, &target)?;
            let space = LoadSpace::new(&net);
            let f = fraction.unwrap_or(ctx.cfg.fraction);
            let samples = match samples {
                Some(p) => read_samples(&p, &net)?,
                None => sample_hypercube(&net, f, n_train.unwrap_or(ctx.cfg.n_train), Distribution::Uniform, ctx.cfg.seed)?,
            };
            let set = label_parallel(&net, &samples, t, &ctx.cfg.label)?;
            let xs: Vec<Vec<f64>> = set.samples.iter().map(|s| space.flatten(s)).collect();
            let k = build_kernel(&net, &space, t, kernel.unwrap_or(ctx.cfg.kernel))?;
            let model = GpModel::fit(&xs, &set.voltages, k, space.scaling(f), &fit_opts(ctx.cfg.fit, iters, lr))?;
            ctx.emit_json(&ModelFile::from_model(&model, tid, f))
        }
        Command::Gp(GpCmd::Predict { model, case, samples }) => {
            let net = ctx.load(&case)?;
            let space = LoadSpace::new(&net);
            let model = ModelFile::read(&model)?.into_model()?;
            let samples = read_samples(&samples, &net)?;
            let recs = samples
                .iter()
                .map(|s| {
                    model.predict(&space.flatten(s)).map(|p| PredictRecord {
                        mean: p.mean,
                        variance: p.variance,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            ctx.emit_json(&recs)
        }
        Command::Al(AlCmd::Run {
            target,
            budget,
            batch,
            swipes,
            no_retune,
            kernel,
            fraction,
            probe,
            model_out,
        }) => {
            let case_path = ctx.case_path(&target.case);
            let net = load_case(&case_path)?;
            let (tid, t) = ctx.target(&net, &target)?;
            let space = LoadSpace::new(&net);
            let base = ctx.cfg.al;
            let opts = vdkflow_core::AlOptions {
                budget: budget.unwrap_or(base.budget),
                batch: batch.unwrap_or(base.batch),
                swipes_per_iter: swipes.unwrap_or(base.swipes_per_iter),
                retune_every: if no_retune { None } else { base.retune_every },
                fraction: fraction.unwrap_or(ctx.cfg.fraction),
                seed: ctx.cfg.seed,
                fit: ctx.cfg.fit,
                acpf: ctx.cfg.label.acpf,
                ..base
            };
            let probe_set = match probe {
                Some(n) => {
                    let d = bench::labeled_dataset(
                        &net,
                        &space,
                        t,
                        opts.fraction,
                        n,
                        Distribution::Uniform,
                        vdkflow_core::seed::derive(opts.seed, u64::MAX),
                        &ctx.cfg.label,
                    )?;
                    Some(ProbeSet {
                        inputs: d.inputs,
                        truths: d.truths,
                    })
                }
                None => None,
            };
            let k = build_kernel(&net, &space, t, kernel.unwrap_or(ctx.cfg.kernel))?;
            let start = Instant::now();
            let (model, history) = run_al(&net, t, k, &opts, probe_set.as_ref(), &mut || start.elapsed().as_secs_f64())?;
            let model_path = model_out.unwrap_or_else(|| model_path_for(&ctx.out));
            write_json(&model_path, &ModelFile::from_model(&model, tid, opts.fraction))?;
            ctx.out.get_or_insert_with(|| PathBuf::from("run.json"));
            ctx.emit_json(&RunFile {
                case: case_path.display().to_string(),
                target_bus: tid,
                model: model_path.display().to_string(),
                history: &history,
            })
        }
        Command::Bench(cmd) => run_bench(&mut ctx, cmd),
    }
}

fn run_bench(ctx: &mut Ctx, cmd: BenchCmd) -> Result<(), Error> {
    match cmd {
        BenchCmd::Trials(a) => {
            apply_bench(&mut ctx.cfg, &a);
            let net = load_case(&ctx.cfg.case)?;
            let mut w = bench::trial_csv_writer(ctx.writer()?)?;
            bench::run_trials(&ctx.cfg, &net, |row| {
                w.serialize(row)?;
                w.flush().map_err(csv::Error::from)?;
                Ok(())
            })?;
            Ok(())
        }
        BenchCmd::Depth { args, counts_only } => {
            apply_bench(&mut ctx.cfg, &args);
            let net = load_case(&ctx.cfg.case)?;
            let rows = bench::depth_study(&ctx.cfg, &net, !counts_only)?;
            ctx.emit_csv(&rows)
        }
        BenchCmd::Uq(a) => {
            apply_bench(&mut ctx.cfg, &a);
            let net = load_case(&ctx.cfg.case)?;
            let res = bench::uq_study(&ctx.cfg, &net)?;
            ctx.emit_json(&res)
        }
        BenchCmd::Extrapolate { args, test_fractions } => {
            apply_bench(&mut ctx.cfg, &args);
            if !test_fractions.is_empty() {
                ctx.cfg.test_fractions = test_fractions;
            }
            let net = load_case(&ctx.cfg.case)?;
            let rows = bench::extrapolation_study(&ctx.cfg, &net)?;
            ctx.emit_csv(&rows)
        }
    }
}

/// Parses `args`, runs the command and reports failures as JSON on stderr.
/// Returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            eprintln!("{}", Error::Usage(e.to_string().trim().to_string()).to_json());
            return 2;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            1
        }
    }
}
