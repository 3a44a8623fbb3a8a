//! Exact Gaussian-process regression on standardized data.
//!
//! Inputs pass through an [`InputScaling`] and targets through an
//! [`OutputScaling`] before they reach the kernel, so a model trained on a
//! `±f` load box sees every coordinate in `[-1, 1]` and unit-variance labels.
//! Predictions are returned in raw units.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::kernels::{gram, sqdist_on, Kernel, KernelError};
use crate::math;
use crate::space::InputScaling;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("Cholesky factorization failed with noise raised to {noise:e}")]
    CholeskyFailure { noise: f64 },
    #[error("likelihood gradient is not finite")]
    NonFiniteGradient,
    #[error("need at least {needed} training samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid option: {0}")]
    InvalidOption(&'static str),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct FitOptions {
    pub lr: f64,
    pub iters: usize,
    /// Noise variance on standardized targets.
    pub noise: f64,
    /// Ceiling for noise escalation when the Cholesky factorization fails.
    pub max_noise: f64,
    pub learn_noise: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            lr: 0.1,
            iters: 200,
            noise: 1e-8,
            max_noise: 1e-4,
            learn_noise: false,
        }
    }
}

impl FitOptions {
    fn validate(&self) -> Result<(), GpError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(GpError::InvalidOption("learning rate must be positive"));
        }
        if !(self.noise > 0.0 && self.max_noise >= self.noise) {
            return Err(GpError::InvalidOption("noise must be positive and below max_noise"));
        }
        Ok(())
    }
}

/// `y -> (y - mean) / scale`
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OutputScaling {
    pub mean: f64,
    pub scale: f64,
}

impl OutputScaling {
    pub fn identity() -> Self {
        OutputScaling { mean: 0.0, scale: 1.0 }
    }

    /// Sample mean and population standard deviation; a zero spread maps to 1.
    pub fn from_targets(y: &[f64]) -> Self {
        if y.is_empty() {
            return Self::identity();
        }
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = math::sqrt(var);
        OutputScaling {
            mean,
            scale: if sd > 0.0 && sd.is_finite() { sd } else { 1.0 },
        }
    }

    fn apply(&self, y: f64) -> f64 {
        (y - self.mean) / self.scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

impl Prediction {
    pub fn std_dev(&self) -> f64 {
        math::sqrt(self.variance)
    }
}

#[derive(Debug)]
pub struct GpModel {
    kernel: Kernel,
    input: InputScaling,
    output: OutputScaling,
    /// Standardized training inputs, one row per sample.
    design: Vec<Vec<f64>>,
    raw_targets: Vec<f64>,
    targets: DVector<f64>,
    noise: f64,
    base_noise: f64,
    max_noise: f64,
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
    lml: f64,
    clamp_events: AtomicUsize,
}

impl Clone for GpModel {
    fn clone(&self) -> Self {
        GpModel {
            kernel: self.kernel.clone(),
            input: self.input.clone(),
            output: self.output,
            design: self.design.clone(),
            raw_targets: self.raw_targets.clone(),
            targets: self.targets.clone(),
            noise: self.noise,
            base_noise: self.base_noise,
            max_noise: self.max_noise,
            chol: self.chol.clone(),
            alpha: self.alpha.clone(),
            lml: self.lml,
            clamp_events: AtomicUsize::new(self.clamp_events.load(Ordering::Relaxed)),
        }
    }
}

/// Adds `noise * I` to `k` and factors, raising the noise tenfold on failure.
fn factor_with_escalation(k: &DMatrix<f64>, noise: f64, max_noise: f64) -> Result<(Cholesky<f64, Dyn>, f64), GpError> {
    let mut nu = noise;
    loop {
        let mut m = k.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += nu;
        }
        if let Some(c) = Cholesky::new(m) {
            if nu > noise {
                debug!("Cholesky needed noise {nu:e} (requested {noise:e})");
            }
            return Ok((c, nu));
        }
        if nu >= max_noise {
            return Err(GpError::CholeskyFailure { noise: nu });
        }
        nu = (nu * 10.0).min(max_noise);
    }
}

fn lml_from(chol: &DMatrix<f64>, y: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let logdet: f64 = chol.diagonal().iter().map(|d| math::ln(*d)).sum();
    -0.5 * y.dot(alpha) - logdet - 0.5 * n * math::LN_2PI
}

/// Per-group squared distances between training inputs, packed over `i < j`.
struct PairCache {
    n: usize,
    per_group: Vec<Vec<f64>>,
}

impl PairCache {
    fn new(kernel: &Kernel, xs: &[Vec<f64>]) -> Self {
        let n = xs.len();
        let per_group = kernel
            .groups()
            .map(|g| {
                let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
                for j in 0..n {
                    for i in 0..j {
                        d.push(sqdist_on(g.coords, &xs[i], &xs[j]));
                    }
                }
                d
            })
            .collect();
        PairCache { n, per_group }
    }

    fn gram(&self, kernel: &Kernel) -> DMatrix<f64> {
        let n = self.n;
        let mut k = DMatrix::from_diagonal_element(n, n, kernel.prior_variance());
        for (g, d) in self.per_group.iter().enumerate() {
            let h = kernel.group(g).hyper;
            let a2 = h.amplitude * h.amplitude;
            let c = -0.5 / (h.lengthscale * h.lengthscale);
            let mut idx = 0;
            for j in 0..n {
                for i in 0..j {
                    k[(i, j)] += a2 * math::exp(c * d[idx]);
                    idx += 1;
                }
            }
        }
        for j in 0..n {
            for i in 0..j {
                k[(j, i)] = k[(i, j)];
            }
        }
        k
    }
}

struct Evaluation {
    lml: f64,
    grad: Vec<f64>,
}

/// Log marginal likelihood and its gradient in log-hyperparameter space.
/// The gradient is ordered like [`Kernel::log_hypers`], with `d/d ln noise`
/// appended when `with_noise` is set.
fn evaluate(
    kernel: &Kernel,
    cache: &PairCache,
    y: &DVector<f64>,
    noise: f64,
    max_noise: f64,
    with_noise: bool,
) -> Result<Evaluation, GpError> {
    let k = cache.gram(kernel);
    let (chol, nu) = factor_with_escalation(&k, noise, max_noise)?;
    let alpha = chol.solve(y);
    let lml = lml_from(chol.l_dirty(), y, &alpha);
    let kinv = chol.inverse();
    let n = cache.n;
    // W = alpha alpha^T - K^-1
    let mut w = -kinv;
    w.ger(1.0, &alpha, &alpha, 1.0);
    let diag_w: f64 = w.diagonal().sum();

    let mut grad = Vec::with_capacity(kernel.n_hypers() + 1);
    for (g, d) in cache.per_group.iter().enumerate() {
        let h = kernel.group(g).hyper;
        let a2 = h.amplitude * h.amplitude;
        let inv_l2 = 1.0 / (h.lengthscale * h.lengthscale);
        let mut ga = a2 * diag_w;
        let mut gl = 0.0;
        let mut idx = 0;
        for j in 0..n {
            for i in 0..j {
                let kij = a2 * math::exp(-0.5 * inv_l2 * d[idx]);
                let wk = 2.0 * w[(i, j)] * kij;
                ga += wk;
                gl += wk * d[idx];
                idx += 1;
            }
        }
        grad.push(ga);
        grad.push(0.5 * gl * inv_l2);
    }
    if with_noise {
        grad.push(0.5 * nu * diag_w);
    }
    if !lml.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(GpError::NonFiniteGradient);
    }
    Ok(Evaluation { lml, grad })
}

/// Adaptive-gradient ascent on the log marginal likelihood; leaves the best
/// hyperparameters seen in `kernel` and returns the matching noise.
fn optimize(
    kernel: &mut Kernel,
    design: &[Vec<f64>],
    y: &DVector<f64>,
    noise: f64,
    opts: &FitOptions,
    iters: usize,
) -> Result<(f64, f64), GpError> {
    let cache = PairCache::new(kernel, design);
    let mut theta = kernel.log_hypers();
    if opts.learn_noise {
        theta.push(math::ln(noise));
    }
    let mut sq = vec![0.0; theta.len()];
    let mut best: Option<(f64, Vec<f64>)> = None;
    let set = |kernel: &mut Kernel, theta: &[f64]| -> Result<f64, GpError> {
        let nh = kernel.n_hypers();
        kernel.set_log_hypers(&theta[..nh])?;
        Ok(if opts.learn_noise {
            math::exp(theta[nh]).clamp(opts.noise, 1.0)
        } else {
            noise
        })
    };
    for it in 0..=iters {
        let nu = set(kernel, &theta)?;
        let eval = match evaluate(kernel, &cache, y, nu, opts.max_noise, opts.learn_noise) {
            Ok(e) => e,
            Err(e) if best.is_some() => {
                warn!("stopping hyperparameter ascent at step {it}: {e}");
                break;
            }
            Err(e) => return Err(e),
        };
        if best.as_ref().is_none_or(|(l, _)| eval.lml > *l) {
            best = Some((eval.lml, theta.clone()));
        }
        if it == iters {
            break;
        }
        for ((t, s), g) in theta.iter_mut().zip(&mut sq).zip(&eval.grad) {
            *s += g * g;
            *t += opts.lr * g / (math::sqrt(*s) + 1e-8);
        }
    }
    let (lml, theta) = best.expect("at least one evaluation");
    debug!("hyperparameter ascent finished at LML {lml:.6}");
    Ok((set(kernel, &theta)?, lml))
}

impl GpModel {
    /// Builds a model from already standardized inputs without touching the
    /// hyperparameters.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        kernel: Kernel,
        input: InputScaling,
        output: OutputScaling,
        design: Vec<Vec<f64>>,
        raw_targets: Vec<f64>,
        noise: f64,
        max_noise: f64,
    ) -> Result<Self, GpError> {
        if design.is_empty() {
            return Err(GpError::TooFewSamples { needed: 1, got: 0 });
        }
        if design.len() != raw_targets.len() {
            return Err(GpError::DimensionMismatch {
                expected: design.len(),
                got: raw_targets.len(),
            });
        }
        if input.dim() != kernel.dim() {
            return Err(GpError::DimensionMismatch {
                expected: kernel.dim(),
                got: input.dim(),
            });
        }
        if !(noise > 0.0) {
            return Err(GpError::InvalidOption("noise must be positive"));
        }
        let k = gram(&kernel, &design)?;
        let targets = DVector::from_iterator(raw_targets.len(), raw_targets.iter().map(|&v| output.apply(v)));
        let (chol, nu) = factor_with_escalation(&k, noise, max_noise.max(noise))?;
        let alpha = chol.solve(&targets);
        let chol = chol.unpack();
        let lml = lml_from(&chol, &targets, &alpha);
        Ok(GpModel {
            kernel,
            input,
            output,
            design,
            raw_targets,
            targets,
            noise: nu,
            base_noise: noise,
            max_noise: max_noise.max(noise),
            chol,
            alpha,
            lml,
            clamp_events: AtomicUsize::new(0),
        })
    }

    /// Fits hyperparameters by maximizing the log marginal likelihood from
    /// the kernel's current values. `inputs` are raw flattened samples.
    pub fn fit(
        inputs: &[Vec<f64>],
        targets: &[f64],
        mut kernel: Kernel,
        input: InputScaling,
        opts: &FitOptions,
    ) -> Result<Self, GpError> {
        opts.validate()?;
        if inputs.len() < 2 {
            return Err(GpError::TooFewSamples {
                needed: 2,
                got: inputs.len(),
            });
        }
        if inputs.len() != targets.len() {
            return Err(GpError::DimensionMismatch {
                expected: inputs.len(),
                got: targets.len(),
            });
        }
        if input.dim() != kernel.dim() {
            return Err(GpError::DimensionMismatch {
                expected: kernel.dim(),
                got: input.dim(),
            });
        }
        for x in inputs {
            if x.len() != kernel.dim() {
                return Err(GpError::DimensionMismatch {
                    expected: kernel.dim(),
                    got: x.len(),
                });
            }
        }
        let output = OutputScaling::from_targets(targets);
        let design: Vec<Vec<f64>> = inputs.iter().map(|x| input.apply(x)).collect();
        let y = DVector::from_iterator(targets.len(), targets.iter().map(|&v| output.apply(v)));
        let (noise, _) = optimize(&mut kernel, &design, &y, opts.noise, opts, opts.iters)?;
        Self::assemble(kernel, input, output, design, targets.to_vec(), noise, opts.max_noise)
    }

    /// Re-fits hyperparameters on the current training set, starting from
    /// the current values, and re-derives the output standardization.
    pub fn retune(&mut self, iters: usize, lr: f64) -> Result<(), GpError> {
        let opts = FitOptions {
            lr,
            iters,
            noise: self.base_noise,
            max_noise: self.max_noise,
            learn_noise: false,
        };
        opts.validate()?;
        let output = if self.raw_targets.len() >= 2 {
            OutputScaling::from_targets(&self.raw_targets)
        } else {
            self.output
        };
        let y = DVector::from_iterator(self.raw_targets.len(), self.raw_targets.iter().map(|&v| output.apply(v)));
        // A warm start alone can stay trapped in the degenerate optimum
        // reached while the design was tiny, so also restart from defaults.
        let mut kernel = self.kernel.clone();
        let warm = optimize(&mut kernel, &self.design, &y, self.base_noise, &opts, iters);
        let mut fresh = self.kernel.clone();
        fresh.reset_hypers();
        let cold = optimize(&mut fresh, &self.design, &y, self.base_noise, &opts, iters);
        let noise = match (warm, cold) {
            (Ok((_, lw)), Ok((nc, lc))) if lc > lw => {
                kernel = fresh;
                nc
            }
            (Err(_), Ok((nc, _))) => {
                kernel = fresh;
                nc
            }
            (Ok((nw, _)), _) => nw,
            (Err(e), Err(_)) => return Err(e),
        };
        *self = Self::assemble(
            kernel,
            self.input.clone(),
            output,
            self.design.clone(),
            self.raw_targets.clone(),
            noise,
            self.max_noise,
        )?;
        Ok(())
    }

    /// Appends one raw sample, extending the Cholesky factor by bordering.
    /// Hyperparameters and standardization are left unchanged.
    pub fn update(&mut self, s: &[f64], v: f64) -> Result<(), GpError> {
        self.check_dim(s)?;
        let x = self.input.apply(s);
        let k = self.kernel.cross(&self.design, &x);
        let l = self
            .chol
            .solve_lower_triangular(&k)
            .expect("Cholesky factor has a positive diagonal");
        let d2 = self.kernel.prior_variance() + self.noise - l.norm_squared();
        let n = self.design.len();
        if d2 > 0.0 && d2.is_finite() {
            self.design.push(x);
            self.raw_targets.push(v);
            self.targets = self.targets.clone().push(self.output.apply(v));
            let mut chol = self.chol.clone().resize(n + 1, n + 1, 0.0);
            for j in 0..n {
                chol[(n, j)] = l[j];
            }
            chol[(n, n)] = math::sqrt(d2);
            self.chol = chol;
            let z = self.chol.solve_lower_triangular(&self.targets).expect("positive diagonal");
            self.alpha = self.chol.tr_solve_lower_triangular(&z).expect("positive diagonal");
            self.lml = lml_from(&self.chol, &self.targets, &self.alpha);
            Ok(())
        } else {
            debug!("bordering lost definiteness (d2 = {d2:e}); refactoring with escalated noise");
            let mut design = self.design.clone();
            let mut raw = self.raw_targets.clone();
            design.push(x);
            raw.push(v);
            let refit = Self::assemble(
                self.kernel.clone(),
                self.input.clone(),
                self.output,
                design,
                raw,
                (self.noise * 10.0).min(self.max_noise),
                self.max_noise,
            )?;
            let clamps = self.clamp_events.load(Ordering::Relaxed);
            *self = refit;
            self.base_noise = self.base_noise.min(self.noise);
            self.clamp_events.store(clamps, Ordering::Relaxed);
            Ok(())
        }
    }

    fn check_dim(&self, s: &[f64]) -> Result<(), GpError> {
        if s.len() != self.kernel.dim() {
            return Err(GpError::DimensionMismatch {
                expected: self.kernel.dim(),
                got: s.len(),
            });
        }
        Ok(())
    }

    fn standardized_variance(&self, k: &DVector<f64>) -> f64 {
        let v = self.chol.solve_lower_triangular(k).expect("positive diagonal");
        let var = self.kernel.prior_variance() - v.norm_squared();
        if var < 0.0 {
            let count = self.clamp_events.fetch_add(1, Ordering::Relaxed) + 1;
            debug!("predictive variance {var:e} clamped to 0 (event {count})");
            0.0
        } else {
            var
        }
    }

    pub fn predict(&self, s: &[f64]) -> Result<Prediction, GpError> {
        self.check_dim(s)?;
        let x = self.input.apply(s);
        let k = self.kernel.cross(&self.design, &x);
        let mean = self.output.mean + self.output.scale * k.dot(&self.alpha);
        let variance = self.output.scale * self.output.scale * self.standardized_variance(&k);
        Ok(Prediction { mean, variance })
    }

    pub fn predict_mean(&self, s: &[f64]) -> Result<f64, GpError> {
        self.check_dim(s)?;
        let x = self.input.apply(s);
        Ok(self.output.mean + self.output.scale * self.kernel.cross(&self.design, &x).dot(&self.alpha))
    }

    pub fn predict_var(&self, s: &[f64]) -> Result<f64, GpError> {
        self.check_dim(s)?;
        let x = self.input.apply(s);
        let k = self.kernel.cross(&self.design, &x);
        Ok(self.output.scale * self.output.scale * self.standardized_variance(&k))
    }

    /// Prepares repeated variance queries that only change `varying`
    /// coordinates of `base` (raw units). Kernel groups not touching those
    /// coordinates are evaluated once.
    pub fn variance_probe(&self, base: &[f64], varying: &[usize]) -> Result<VarianceProbe<'_>, GpError> {
        self.check_dim(base)?;
        let x = self.input.apply(base);
        let n = self.design.len();
        let mut in_varying = vec![false; x.len()];
        for &c in varying {
            if c >= x.len() {
                return Err(GpError::DimensionMismatch {
                    expected: x.len(),
                    got: c + 1,
                });
            }
            in_varying[c] = true;
        }
        let mut fixed = vec![0.0; n];
        let mut affected = Vec::new();
        for g in self.kernel.groups() {
            let (moving, still): (Vec<usize>, Vec<usize>) = g.coords.iter().partition(|&&c| in_varying[c]);
            let still_d2: Vec<f64> = self.design.iter().map(|xi| sqdist_on(&still, xi, &x)).collect();
            if moving.is_empty() {
                for (f, d) in fixed.iter_mut().zip(&still_d2) {
                    *f += g.hyper.from_sqdist(*d);
                }
            } else {
                let slots = moving.iter().map(|c| varying.iter().position(|v| v == c).expect("in varying")).collect();
                affected.push(AffectedGroup {
                    hyper: g.hyper,
                    coords: moving,
                    slots,
                    still_d2,
                });
            }
        }
        Ok(VarianceProbe {
            model: self,
            varying: varying.to_vec(),
            fixed,
            affected,
        })
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn input_scaling(&self) -> &InputScaling {
        &self.input
    }

    pub fn output_scaling(&self) -> OutputScaling {
        self.output
    }

    /// Standardized training inputs.
    pub fn design(&self) -> &[Vec<f64>] {
        &self.design
    }

    pub fn raw_targets(&self) -> &[f64] {
        &self.raw_targets
    }

    /// Noise variance in use (after any escalation), standardized units.
    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn max_noise(&self) -> f64 {
        self.max_noise
    }

    pub fn n_train(&self) -> usize {
        self.design.len()
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Lower-triangular factor of `K + noise * I`.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn clamp_events(&self) -> usize {
        self.clamp_events.load(Ordering::Relaxed)
    }

    /// Log marginal likelihood of the standardized targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        self.lml
    }

    /// Gradient of the log marginal likelihood with respect to
    /// [`Kernel::log_hypers`], plus `ln noise` when `with_noise` is set.
    pub fn lml_gradient(&self, with_noise: bool) -> Result<Vec<f64>, GpError> {
        let cache = PairCache::new(&self.kernel, &self.design);
        evaluate(&self.kernel, &cache, &self.targets, self.noise, self.noise, with_noise).map(|e| e.grad)
    }
}

struct AffectedGroup {
    hyper: crate::kernels::SeHyper,
    coords: Vec<usize>,
    /// Position of each of `coords` in the probe's `varying` list.
    slots: Vec<usize>,
    still_d2: Vec<f64>,
}

/// Cached predictive-variance evaluation for block-coordinate search.
pub struct VarianceProbe<'m> {
    model: &'m GpModel,
    varying: Vec<usize>,
    fixed: Vec<f64>,
    affected: Vec<AffectedGroup>,
}

impl VarianceProbe<'_> {
    pub fn varying(&self) -> &[usize] {
        &self.varying
    }

    /// Raw-unit predictive variance with the varying coordinates set to
    /// `values` (raw units, in the order given at construction).
    pub fn variance(&self, values: &[f64]) -> f64 {
        let m = self.model;
        let z: Vec<f64> = values
            .iter()
            .zip(&self.varying)
            .map(|(v, &c)| (v - m.input.center[c]) / m.input.scale[c])
            .collect();
        let mut k = DVector::from_column_slice(&self.fixed);
        for g in &self.affected {
            for (i, xi) in m.design.iter().enumerate() {
                let d2 = g.still_d2[i]
                    + g.coords
                        .iter()
                        .zip(&g.slots)
                        .map(|(&c, &s)| {
                            let d = xi[c] - z[s];
                            d * d
                        })
                        .sum::<f64>();
                k[i] += g.hyper.from_sqdist(d2);
            }
        }
        m.output.scale * m.output.scale * m.standardized_variance(&k)
    }
}

/// `0.5 * ln det(I + K / noise)` over inputs already in kernel space.
pub fn information_gain(kernel: &Kernel, xs: &[Vec<f64>], noise: f64) -> Result<f64, GpError> {
    if !(noise > 0.0) {
        return Err(GpError::InvalidOption("noise must be positive"));
    }
    if xs.is_empty() {
        return Ok(0.0);
    }
    let mut m = gram(kernel, xs)? / noise;
    for i in 0..xs.len() {
        m[(i, i)] += 1.0;
    }
    let c = Cholesky::new(m).ok_or(GpError::CholeskyFailure { noise })?;
    Ok(c.l_dirty().diagonal().iter().map(|d| math::ln(*d)).sum())
}
