//! Estimators shared by the Monte-Carlo diagnostics: least-squares fits,
//! binomial intervals, batch means and autocorrelation times.

use serde::{Deserialize, Serialize};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
}

/// Ordinary least squares on `(x, y)` pairs; `None` with fewer than two
/// distinct abscissae.
pub fn linear_fit(pts: &[(f64, f64)]) -> Option<LinearFit> {
    let w = vec![1.0; pts.len()];
    let (x, y): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
    weighted_linear_fit(&x, &y, &w)
}

pub fn weighted_linear_fit(x: &[f64], y: &[f64], w: &[f64]) -> Option<LinearFit> {
    let sw: f64 = w.iter().sum();
    if x.len() < 2 || sw <= 0.0 {
        return None;
    }
    let mx = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let my = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = x.iter().zip(w).map(|(a, b)| b * (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).zip(w).map(|((a, c), b)| b * (a - mx) * (c - my)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some(LinearFit {
        slope,
        intercept: my - slope * mx,
    })
}

/// Wilson score interval for a proportion with (effective) sample size `n`.
pub fn wilson_interval(p: f64, n: f64, z: f64) -> (f64, f64) {
    if n <= 0.0 {
        return (0.0, 1.0);
    }
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if p <= 0.0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if p >= 1.0 { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Standard error of the mean of a correlated series by non-overlapping
/// batch means.
pub fn batch_means_se(xs: &[f64], n_batches: usize) -> f64 {
    let nb = n_batches.max(2).min(xs.len());
    let size = xs.len() / nb;
    if size == 0 {
        return f64::NAN;
    }
    let means: Vec<f64> = xs.chunks_exact(size).take(nb).map(mean).collect();
    (variance(&means) / means.len() as f64).sqrt()
}

/// Integrated autocorrelation time with Sokal's adaptive window (`c = 5`).
/// Returns 1 for constant series.
pub fn integrated_autocorr_time(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return 1.0;
    }
    let m = mean(xs);
    let c0: f64 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return 1.0;
    }
    let mut tau = 1.0;
    for lag in 1..n / 2 {
        let c: f64 = xs[..n - lag]
            .iter()
            .zip(&xs[lag..])
            .map(|(a, b)| (a - m) * (b - m))
            .sum::<f64>()
            / n as f64;
        tau += 2.0 * c / c0;
        if lag as f64 >= 5.0 * tau {
            break;
        }
    }
    tau.max(1.0)
}

/// Point estimate with a 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
    pub se: f64,
    /// Effective sample size behind the interval.
    pub n_eff: f64,
}

impl Estimate {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

/// Proportion of a correlated 0/1 series with a Wilson interval on the
/// batch-means effective sample size. When every batch agrees the batch
/// variance is uninformative and `fallback_tau` (an autocorrelation time
/// measured on another observable) sets the effective size instead.
pub fn proportion_estimate(hits: &[bool], n_batches: usize, fallback_tau: f64) -> Estimate {
    let n = hits.len() as f64;
    let xs: Vec<f64> = hits.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect();
    let p = mean(&xs);
    let se_bm = batch_means_se(&xs, n_batches);
    let binom = p * (1.0 - p);
    let n_eff = if se_bm > 0.0 && binom > 0.0 {
        (binom / (se_bm * se_bm)).min(n)
    } else {
        n / fallback_tau.max(1.0)
    };
    let (lo, hi) = wilson_interval(p, n_eff, Z95);
    Estimate {
        value: p,
        lo,
        hi,
        se: if n_eff > 0.0 { (binom / n_eff).sqrt() } else { f64::NAN },
        n_eff,
    }
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// KS critical value at level 1% for effective sample sizes `n`, `m`.
pub fn ks_critical_1pct(n: f64, m: f64) -> f64 {
    1.627_624 * ((n + m) / (n * m)).sqrt()
}
