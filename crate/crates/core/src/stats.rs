//! Error metrics, confidence-band coverage, kernel density estimates and
//! KL divergence.

use alloc::vec::Vec;

use thiserror::Error;

use crate::math;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("all values are equal; the density is degenerate")]
    DegenerateDensity,
    #[error("quadrature grid needs at least 2 points")]
    InvalidGrid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Metrics {
    /// Mean absolute error.
    pub mae: f64,
    /// Maximum absolute error.
    pub me: f64,
    /// Maximum predictive variance.
    pub mpv: f64,
}

fn check_lengths(a: usize, b: usize) -> Result<(), StatsError> {
    if a != b {
        return Err(StatsError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(StatsError::EmptyInput);
    }
    Ok(())
}

pub fn metrics(preds: &[f64], truths: &[f64], vars: &[f64]) -> Result<Metrics, StatsError> {
    check_lengths(preds.len(), truths.len())?;
    check_lengths(preds.len(), vars.len())?;
    let mut sum = 0.0;
    let mut me: f64 = 0.0;
    for (p, t) in preds.iter().zip(truths) {
        let e = (p - t).abs();
        sum += e;
        me = me.max(e);
    }
    let mpv = vars.iter().copied().fold(0.0, f64::max);
    Ok(Metrics {
        mae: sum / preds.len() as f64,
        me,
        mpv,
    })
}

/// Fraction of samples with `|pred - truth| > c * sigma` for each `c` in
/// `bands`.
pub fn coverage(preds: &[f64], truths: &[f64], vars: &[f64], bands: &[f64]) -> Result<Vec<f64>, StatsError> {
    check_lengths(preds.len(), truths.len())?;
    check_lengths(preds.len(), vars.len())?;
    let n = preds.len() as f64;
    Ok(bands
        .iter()
        .map(|&c| {
            let outside = preds
                .iter()
                .zip(truths)
                .zip(vars)
                .filter(|((p, t), v)| (*p - *t).abs() > c * math::sqrt(v.max(0.0)))
                .count();
            outside as f64 / n
        })
        .collect())
}

pub fn mean(xs: &[f64]) -> Result<f64, StatsError> {
    if xs.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn median(xs: &[f64]) -> Result<f64, StatsError> {
    if xs.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Ok(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Sample standard deviation (`n - 1` denominator).
pub fn std_dev(xs: &[f64]) -> Result<f64, StatsError> {
    let mu = mean(xs)?;
    if xs.len() < 2 {
        return Ok(0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mu) * (x - mu)).sum();
    Ok(math::sqrt(ss / (xs.len() - 1) as f64))
}

/// Silverman's rule of thumb, `1.06 * sd * n^(-1/5)`.
pub fn silverman_bandwidth(xs: &[f64]) -> Result<f64, StatsError> {
    let sd = std_dev(xs)?;
    if !(sd > 0.0) {
        return Err(StatsError::DegenerateDensity);
    }
    Ok(1.06 * sd * math::powf(xs.len() as f64, -0.2))
}

/// Gaussian kernel density estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct Kde {
    points: Vec<f64>,
    bandwidth: f64,
}

impl Kde {
    pub fn new(points: &[f64], bandwidth: f64) -> Result<Self, StatsError> {
        if points.is_empty() {
            return Err(StatsError::EmptyInput);
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(StatsError::DegenerateDensity);
        }
        Ok(Kde {
            points: points.to_vec(),
            bandwidth,
        })
    }

    pub fn silverman(points: &[f64]) -> Result<Self, StatsError> {
        Self::new(points, silverman_bandwidth(points)?)
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let norm = 1.0 / (self.points.len() as f64 * h * math::sqrt(2.0 * core::f64::consts::PI));
        norm * self
            .points
            .iter()
            .map(|p| {
                let z = (x - p) / h;
                math::exp(-0.5 * z * z)
            })
            .sum::<f64>()
    }
}

/// Evenly spaced grid covering both samples plus four bandwidths of margin.
pub fn shared_grid(a: &[f64], b: &[f64], bandwidth: f64, points: usize) -> Result<Vec<f64>, StatsError> {
    if points < 2 {
        return Err(StatsError::InvalidGrid);
    }
    let all = a.iter().chain(b);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min) - 4.0 * bandwidth;
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max) + 4.0 * bandwidth;
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(StatsError::EmptyInput);
    }
    let step = (hi - lo) / (points - 1) as f64;
    Ok((0..points).map(|i| lo + step * i as f64).collect())
}

/// `∫ p ln(p / q)` by the trapezoid rule over `grid`.
pub fn kl_on_grid(grid: &[f64], p: &[f64], q: &[f64]) -> Result<f64, StatsError> {
    check_lengths(grid.len(), p.len())?;
    check_lengths(grid.len(), q.len())?;
    if grid.len() < 2 {
        return Err(StatsError::InvalidGrid);
    }
    let f: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi <= 0.0 {
                0.0
            } else {
                pi * math::ln(pi / qi.max(f64::MIN_POSITIVE))
            }
        })
        .collect();
    Ok(grid
        .windows(2)
        .zip(f.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum())
}

/// Densities and divergence between true and predicted value samples.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DensityComparison {
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub truth_density: Vec<f64>,
    pub predicted_density: Vec<f64>,
    /// `KL(truth || predicted)` in nats.
    pub kl: f64,
}

/// Gaussian KDEs of both samples with one Silverman bandwidth taken from
/// the truths, and their KL divergence on a shared grid.
pub fn compare_densities(truths: &[f64], preds: &[f64], grid_points: usize) -> Result<DensityComparison, StatsError> {
    if preds.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let bandwidth = silverman_bandwidth(truths)?;
    let p = Kde::new(truths, bandwidth)?;
    let q = Kde::new(preds, bandwidth)?;
    let grid = shared_grid(truths, preds, bandwidth, grid_points)?;
    let truth_density: Vec<f64> = grid.iter().map(|&x| p.density(x)).collect();
    let predicted_density: Vec<f64> = grid.iter().map(|&x| q.density(x)).collect();
    let kl = kl_on_grid(&grid, &truth_density, &predicted_density)?;
    Ok(DensityComparison {
        bandwidth,
        grid,
        truth_density,
        predicted_density,
        kl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn metric_arithmetic() {
        let m = metrics(&[1.0, 2.0], &[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!((m.mae, m.me), (0.0, 0.0));
        let m = metrics(&[1.01, 0.97], &[1.0, 1.0], &[1e-6, 3e-6]).unwrap();
        assert!((m.mae - 0.02).abs() < 1e-12);
        assert!((m.me - 0.03).abs() < 1e-12);
        assert_eq!(m.mpv, 3e-6);
        assert_eq!(metrics(&[1.0], &[1.0, 2.0], &[0.0]), Err(StatsError::LengthMismatch(1, 2)));
        assert_eq!(metrics(&[], &[], &[]), Err(StatsError::EmptyInput));
    }

    #[test]
    fn coverage_is_nested() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truths: Vec<f64> = (0..500).map(|_| StandardNormal.sample(&mut rng)).collect();
        let preds = vec![0.0; 500];
        let vars = vec![0.8; 500];
        let c = coverage(&preds, &truths, &vars, &[1.0, 2.0, 3.0]).unwrap();
        assert!(c[0] >= c[1] && c[1] >= c[2]);
        assert_eq!(coverage(&truths, &truths, &vars, &[1.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn identical_samples_have_zero_kl() {
        let xs: Vec<f64> = (0..50).map(|i| libm::sin(i as f64)).collect();
        let c = compare_densities(&xs, &xs, 512).unwrap();
        assert!(c.kl.abs() <= 1e-12);
        assert_eq!(compare_densities(&[1.0; 4], &xs, 64), Err(StatsError::DegenerateDensity));
    }

    #[test]
    fn gaussian_kl_on_grid_matches_closed_form() {
        // KL(N(0,1) || N(0.1,1)) = 0.005
        let grid: Vec<f64> = (0..4001).map(|i| -10.0 + 0.005 * i as f64).collect();
        let pdf = |x: f64, m: f64| libm::exp(-0.5 * (x - m) * (x - m)) / libm::sqrt(2.0 * core::f64::consts::PI);
        let p: Vec<f64> = grid.iter().map(|&x| pdf(x, 0.0)).collect();
        let q: Vec<f64> = grid.iter().map(|&x| pdf(x, 0.1)).collect();
        let kl = kl_on_grid(&grid, &p, &q).unwrap();
        assert!((kl - 0.005).abs() <= 0.05 * 0.005);
    }

    #[test]
    fn kde_integrates_to_one() {
        let xs = [0.0, 0.5, 2.0, 2.1];
        let kde = Kde::silverman(&xs).unwrap();
        let grid = shared_grid(&xs, &[], kde.bandwidth(), 2001).unwrap();
        let d: Vec<f64> = grid.iter().map(|&x| kde.density(x)).collect();
        let area: f64 = grid.windows(2).zip(d.windows(2)).map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1])).sum();
        assert!((area - 1.0).abs() < 1e-4);
    }

    #[test]
    fn median_and_std() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
        assert!((std_dev(&[1.0, 2.0, 3.0, 4.0]).unwrap() - 1.290_994_448_735_805_6).abs() < 1e-15);
    }
}
