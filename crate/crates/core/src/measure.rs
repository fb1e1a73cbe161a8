//! Monte-Carlo estimates of the stationary measure `μ^ε` and the
//! large-deviation diagnostics built on them: decay of `μ^ε` outside a
//! neighbourhood of the attractor, weak exponential tightness, tube
//! probabilities of the trajectory LDP and the singleton lower bound.
//!
//! Every rare-event probability is reported with a 95% interval. Counts of
//! zero are never fitted; they enter as one-sided bounds.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::action_of_trajectory;
use crate::attractor::AttractorSet;
use crate::error::{invalid, Error, Result};
use crate::flow::{FlowConfig, StochasticFlow, Trajectory};
use crate::spectral::{BasisSpec, SpectralField};
use crate::stats::{
    integrated_autocorr_time, ks_critical_1pct, ks_statistic, mean, variance, weighted_linear_fit, wilson_interval,
    Estimate, Z95,
};

/// Batches per chain for the batch-means standard errors.
pub const BATCHES_PER_CHAIN: usize = 20;
/// Residual-bootstrap resamples behind a slope interval.
pub const BOOTSTRAP_RESAMPLES: usize = 200;

/// `10/λ₁·(1 + 1/ε)`, capped at `50/λ₁`.
pub fn default_burn_in(eps: f64, basis: &BasisSpec) -> f64 {
    let l1 = basis.lambda_min();
    (10.0 / l1 * (1.0 + 1.0 / eps)).min(50.0 / l1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSettings {
    pub burn_in: Option<f64>,
    pub horizon: f64,
    /// Steps between retained states.
    pub stride: usize,
    pub chains: usize,
    /// Initial state of every chain; zero when absent.
    pub u0: Option<SpectralField>,
    /// Noise stream of the first chain.
    pub first_stream: u64,
}

impl SamplerSettings {
    pub fn new(horizon: f64, stride: usize) -> Self {
        SamplerSettings {
            burn_in: None,
            horizon,
            stride,
            chains: 1,
            u0: None,
            first_stream: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureMeta {
    pub eps: f64,
    pub dt: f64,
    pub burn_in: f64,
    pub horizon: f64,
    pub stride: usize,
    pub chains: usize,
    pub seed: u64,
    pub first_stream: u64,
}

/// Equally weighted states of one or more post-burn-in chains, stored chain
/// after chain.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    samples: Vec<SpectralField>,
    chain_len: usize,
    meta: MeasureMeta,
}

impl EmpiricalMeasure {
    pub fn samples(&self) -> &[SpectralField] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.samples.len() as f64
    }

    pub fn meta(&self) -> &MeasureMeta {
        &self.meta
    }

    pub fn eps(&self) -> f64 {
        self.meta.eps
    }

    pub fn basis(&self) -> &Arc<BasisSpec> {
        self.samples[0].basis()
    }

    pub fn chains(&self) -> impl Iterator<Item = &[SpectralField]> {
        self.samples.chunks(self.chain_len)
    }

    /// Two measures over the halves of the chain list (for split-sample
    /// checks); needs at least two chains.
    pub fn split_chains(&self) -> Result<(EmpiricalMeasure, EmpiricalMeasure)> {
        let c = self.meta.chains;
        if c < 2 {
            return invalid("split needs at least two chains");
        }
        let cut = (c / 2) * self.chain_len;
        let half = |samples: Vec<SpectralField>, chains: usize| EmpiricalMeasure {
            samples,
            chain_len: self.chain_len,
            meta: MeasureMeta { chains, ..self.meta },
        };
        Ok((
            half(self.samples[..cut].to_vec(), c / 2),
            half(self.samples[cut..].to_vec(), c - c / 2),
        ))
    }

    /// Integrated autocorrelation time of `‖u‖` in samples, averaged over
    /// chains.
    pub fn autocorr_time(&self) -> f64 {
        let taus: Vec<f64> = self
            .chains()
            .map(|c| integrated_autocorr_time(&c.iter().map(SpectralField::norm).collect::<Vec<_>>()))
            .collect();
        mean(&taus)
    }

    /// Writes `samples.csv` (`chain,index,h_norm,v_norm` then the real
    /// coordinates) and `measure.toml`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let path = dir.join("samples.csv");
        let mut wtr = csv::Writer::from_writer(fs::File::create(&path)?);
        let mut header = vec!["chain".to_string(), "index".into(), "h_norm".into(), "v_norm".into()];
        for k in self.basis().modes() {
            header.push(format!("re_{}_{}", k[0], k[1]));
            header.push(format!("im_{}_{}", k[0], k[1]));
        }
        wtr.write_record(&header)?;
        for (c, chain) in self.chains().enumerate() {
            for (i, u) in chain.iter().enumerate() {
                let mut rec = vec![
                    c.to_string(),
                    i.to_string(),
                    u.norm().to_string(),
                    u.v_norm().to_string(),
                ];
                rec.extend(u.to_real_vec().iter().map(f64::to_string));
                wtr.write_record(&rec)?;
            }
        }
        wtr.flush()?;
        let meta = dir.join("measure.toml");
        let text = toml::to_string(&self.meta).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(&meta, text)?;
        Ok(vec![path, meta])
    }
}

/// Time-average sampling of `μ^ε`: each chain starts at `u0`, discards
/// `[0, burn_in)` and keeps every `stride`-th state up to `horizon`.
/// Chain `c` uses noise stream `first_stream + c`.
pub fn sample_stationary(eps: f64, cfg: &FlowConfig, s: &SamplerSettings) -> Result<EmpiricalMeasure> {
    if !(eps > 0.0) {
        return invalid(format!("eps must be positive, got {eps}"));
    }
    let burn_in = s.burn_in.unwrap_or_else(|| default_burn_in(eps, cfg.basis()));
    if !(burn_in >= 0.0 && burn_in < s.horizon) {
        return invalid(format!("burn-in {burn_in} must lie in [0, horizon = {})", s.horizon));
    }
    if s.stride == 0 || s.chains == 0 {
        return invalid("stride and chains must be at least 1");
    }
    let c = cfg.clone().with_epsilon(eps)?;
    let u0 = match &s.u0 {
        Some(u) => {
            u.check_same_basis(c.forcing())?;
            u.clone()
        }
        None => SpectralField::zeros(c.basis()),
    };
    let n_burn = (burn_in / c.dt()).round() as usize;
    let n_total = (s.horizon / c.dt()).round() as usize;
    let chains = (0..s.chains)
        .into_par_iter()
        .map(|k| {
            let mut flow = StochasticFlow::new(u0.clone(), c.clone(), s.first_stream + k as u64)?;
            let mut out = Vec::with_capacity((n_total - n_burn) / s.stride + 1);
            for n in 1..=n_total {
                flow.advance()?;
                if n > n_burn && (n - n_burn).is_multiple_of(s.stride) {
                    out.push(flow.state().clone());
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let chain_len = chains[0].len();
    if chain_len == 0 {
        return invalid("no states retained after burn-in; lower stride or extend horizon");
    }
    Ok(EmpiricalMeasure {
        samples: chains.into_iter().flatten().collect(),
        chain_len,
        meta: MeasureMeta {
            eps,
            dt: c.dt(),
            burn_in,
            horizon: s.horizon,
            stride: s.stride,
            chains: s.chains,
            seed: c.seed(),
            first_stream: s.first_stream,
        },
    })
}

/// One measure per `ε` in list order; the `j`-th uses its own block of
/// noise streams.
pub fn sample_sweep(eps_list: &[f64], cfg: &FlowConfig, s: &SamplerSettings) -> Result<Vec<EmpiricalMeasure>> {
    eps_list
        .iter()
        .enumerate()
        .map(|(j, &e)| {
            let sj = SamplerSettings {
                first_stream: s.first_stream + (j * s.chains) as u64,
                ..s.clone()
            };
            sample_stationary(e, cfg, &sj)
        })
        .collect()
}

/// Sample fraction satisfying `pred`, with a Wilson interval on the
/// batch-means effective sample size (batches never straddle chains).
pub fn event_probability<F>(m: &EmpiricalMeasure, pred: F) -> Estimate
where
    F: Fn(&SpectralField) -> bool + Sync,
{
    let hits: Vec<bool> = m.samples.par_iter().map(&pred).collect();
    let n = hits.len() as f64;
    let count = hits.iter().filter(|&&h| h).count();
    let p = count as f64 / n;
    let size = (m.chain_len / BATCHES_PER_CHAIN).max(1);
    let mut batch_means = Vec::new();
    for chain in hits.chunks(m.chain_len) {
        for b in chain.chunks_exact(size) {
            batch_means.push(b.iter().filter(|&&h| h).count() as f64 / size as f64);
        }
    }
    let binom = p * (1.0 - p);
    let se_bm = if batch_means.len() > 1 {
        (variance(&batch_means) / batch_means.len() as f64).sqrt()
    } else {
        0.0
    };
    let n_eff = if se_bm > 0.0 && binom > 0.0 {
        (binom / (se_bm * se_bm)).min(n)
    } else {
        n / m.autocorr_time().max(1.0)
    };
    let (lo, hi) = wilson_interval(p, n_eff, Z95);
    Estimate {
        value: p,
        lo,
        hi,
        se: (binom / n_eff).sqrt(),
        n_eff,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsCheck {
    pub statistic: f64,
    pub critical: f64,
    pub n_eff: f64,
    pub pass: bool,
}

/// Two-sample KS test at the 1% level on `‖u‖` between the first and
/// second half of every chain, with sizes deflated by the autocorrelation
/// time.
pub fn stationarity_check(m: &EmpiricalMeasure) -> KsCheck {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for chain in m.chains() {
        let h = chain.len() / 2;
        a.extend(chain[..h].iter().map(SpectralField::norm));
        b.extend(chain[h..].iter().map(SpectralField::norm));
    }
    let tau = m.autocorr_time().max(1.0);
    let (na, nb) = (a.len() as f64 / tau, b.len() as f64 / tau);
    let statistic = ks_statistic(&a, &b);
    let critical = ks_critical_1pct(na, nb);
    KsCheck {
        statistic,
        critical,
        n_eff: na + nb,
        pass: statistic <= critical,
    }
}

/// One `ε` of a decay study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub eps: f64,
    pub p_hat: f64,
    pub lo: f64,
    pub hi: f64,
    pub n_eff: f64,
    /// Zero hits: `hi` is an upper bound and the point is not fitted.
    pub censored: bool,
}

impl DecayPoint {
    pub fn from_estimate(eps: f64, e: &Estimate) -> Self {
        DecayPoint {
            eps,
            p_hat: e.value,
            lo: e.lo,
            hi: e.hi,
            n_eff: e.n_eff,
            censored: e.value <= 0.0,
        }
    }

    /// `ε ln p̂`, or `ε ln hi` when censored.
    pub fn exponent(&self) -> f64 {
        self.eps * if self.censored { self.hi.ln() } else { self.p_hat.ln() }
    }

    fn log_sd(&self) -> f64 {
        let p = self.p_hat;
        ((1.0 - p) / (p * self.n_eff)).sqrt().max(1.0 / self.n_eff)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slope {
    pub value: f64,
    pub intercept: f64,
    /// 95% bootstrap band.
    pub lo: f64,
    pub hi: f64,
}

/// Weighted least squares of `ln p̂` against `1/ε` over the uncensored
/// points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub points: Vec<DecayPoint>,
    /// Absent with fewer than two uncensored points.
    pub slope: Option<Slope>,
    /// `min ε ln hi` over censored points: an upper bound on the exponent.
    pub censored_bound: Option<f64>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (i, f) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[i]
    }
}

impl DecayFit {
    /// Fits the points; the slope band comes from a residual bootstrap
    /// in which every resampled point is also perturbed by its own
    /// sampling error, so exactly collinear points still get a band.
    pub fn fit(points: Vec<DecayPoint>) -> Result<DecayFit> {
        if points.iter().any(|p| !(p.eps > 0.0)) {
            return invalid("all epsilon must be positive");
        }
        let used: Vec<&DecayPoint> = points.iter().filter(|p| !p.censored).collect();
        let censored_bound = points
            .iter()
            .filter(|p| p.censored)
            .map(DecayPoint::exponent)
            .reduce(f64::min);
        let x: Vec<f64> = used.iter().map(|p| 1.0 / p.eps).collect();
        let y: Vec<f64> = used.iter().map(|p| p.p_hat.ln()).collect();
        let sd: Vec<f64> = used.iter().map(|p| p.log_sd()).collect();
        let w: Vec<f64> = sd.iter().map(|s| 1.0 / (s * s)).collect();
        let slope = match weighted_linear_fit(&x, &y, &w) {
            None => None,
            Some(f) => {
                let fitted: Vec<f64> = x.iter().map(|xi| f.intercept + f.slope * xi).collect();
                let std_res: Vec<f64> = (0..x.len()).map(|i| (y[i] - fitted[i]) / sd[i]).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
                let mut boot = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
                for _ in 0..BOOTSTRAP_RESAMPLES {
                    let yb: Vec<f64> = (0..x.len())
                        .map(|i| {
                            let r = std_res[rng.random_range(0..x.len())];
                            let z: f64 = StandardNormal.sample(&mut rng);
                            fitted[i] + (r + z) * sd[i]
                        })
                        .collect();
                    if let Some(b) = weighted_linear_fit(&x, &yb, &w) {
                        boot.push(b.slope);
                    }
                }
                boot.sort_by(f64::total_cmp);
                Some(Slope {
                    value: f.slope,
                    intercept: f.intercept,
                    lo: percentile(&boot, 0.025),
                    hi: percentile(&boot, 0.975),
                })
            }
        };
        Ok(DecayFit {
            points,
            slope,
            censored_bound,
        })
    }

    /// Slope band below zero, or (all censored) a negative bound.
    pub fn confident_negative(&self) -> bool {
        match (&self.slope, self.censored_bound) {
            (Some(s), _) => s.hi < 0.0,
            (None, Some(b)) => b < 0.0,
            _ => false,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// CSV with columns `eps,p_hat,lo,hi,n_eff,censored`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for p in &self.points {
            wtr.serialize(p)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Self-contained SVG of `ln p̂` against `1/ε` with 95% bars, censored
    /// bounds as open triangles and the fitted line.
    pub fn to_svg(&self, title: &str) -> String {
        let (w, h, m) = (480.0, 360.0, 50.0);
        let pts: Vec<(f64, f64, f64, f64, bool)> = self
            .points
            .iter()
            .map(|p| {
                let y = if p.censored { p.hi.ln() } else { p.p_hat.ln() };
                let lo = if p.lo > 0.0 { p.lo.ln() } else { y };
                (1.0 / p.eps, y, lo, p.hi.ln(), p.censored)
            })
            .collect();
        let xmin = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let xmax = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let ymin = pts.iter().map(|p| p.2).fold(f64::INFINITY, f64::min);
        let ymax = pts.iter().map(|p| p.3).fold(f64::NEG_INFINITY, f64::max).max(0.0);
        let pad = |a: f64, b: f64| {
            if b > a {
                (a - 0.05 * (b - a), b + 0.05 * (b - a))
            } else {
                (a - 1.0, b + 1.0)
            }
        };
        let (x0, x1) = pad(xmin, xmax);
        let (y0, y1) = pad(ymin, ymax);
        let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
        let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#,
            w / 2.0,
            escape(title)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
            h - m,
            w - m,
            h - m
        );
        let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">1/eps</text>"#,
            w / 2.0,
            h - 12.0
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">ln p</text>"#,
            h / 2.0,
            h / 2.0
        );
        for (v, anchor) in [(x0, "start"), (x1, "end")] {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{}" text-anchor="{anchor}">{v:.3}</text>"#,
                sx(v),
                h - m + 15.0
            );
        }
        for v in [y0, y1] {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
                m - 4.0,
                sy(v) + 4.0
            );
        }
        for &(x, y, lo, hi, censored) in &pts {
            let (cx, cy) = (sx(x), sy(y));
            let _ = writeln!(
                s,
                r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="gray"/>"#,
                sy(lo),
                sy(hi)
            );
            if censored {
                let _ = writeln!(
                    s,
                    r#"<path d="M{:.1},{:.1} L{:.1},{:.1} L{cx:.1},{:.1} Z" fill="none" stroke="firebrick"/>"#,
                    cx - 5.0,
                    cy - 4.0,
                    cx + 5.0,
                    cy - 4.0,
                    cy + 5.0
                );
            } else {
                let _ = writeln!(s, r#"<circle cx="{cx:.1}" cy="{cy:.1}" r="3.5" fill="steelblue"/>"#);
            }
        }
        if let Some(f) = &self.slope {
            let (ya, yb) = (f.intercept + f.value * x0, f.intercept + f.value * x1);
            let _ = writeln!(
                s,
                r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="steelblue" stroke-dasharray="4 3"/>"#,
                sx(x0),
                sy(ya),
                sx(x1),
                sy(yb)
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">slope {:.4} [{:.4}, {:.4}]</text>"#,
                w - m,
                m - 8.0,
                f.value,
                f.lo,
                f.hi
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn check_sweep(measures: &[EmpiricalMeasure]) -> Result<()> {
    if measures.is_empty() {
        return invalid("no measures given");
    }
    if measures.windows(2).any(|w| w[1].eps() >= w[0].eps()) {
        return invalid("measures must be ordered by decreasing eps");
    }
    Ok(())
}

/// `μ̂^ε(𝒪_η^c)` per `ε` and the fitted exponent; the open complement
/// `dist > η` is used.
pub fn attracting_decay(set: &AttractorSet, eta: f64, measures: &[EmpiricalMeasure]) -> Result<DecayFit> {
    if !(eta > 0.0) {
        return invalid("eta must be positive");
    }
    check_sweep(measures)?;
    let points = measures
        .iter()
        .map(|m| DecayPoint::from_estimate(m.eps(), &event_probability(m, |u| set.distance(u) > eta)))
        .collect();
    DecayFit::fit(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightnessRow {
    pub radius: f64,
    pub fit: DecayFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightnessProfile {
    pub rows: Vec<TightnessRow>,
    /// Successive fitted slopes never increase beyond the overlap of their
    /// bands.
    pub monotone: bool,
}

/// `μ̂^ε(B_R^c)` (`‖u‖ > R`) for each radius and `ε`.
pub fn tightness_profile(radii: &[f64], measures: &[EmpiricalMeasure]) -> Result<TightnessProfile> {
    if radii.windows(2).any(|w| w[1] <= w[0]) || radii.first().is_some_and(|r| *r < 0.0) {
        return invalid("radii must be nonnegative and increasing");
    }
    check_sweep(measures)?;
    let rows = radii
        .iter()
        .map(|&r| {
            let points = measures
                .iter()
                .map(|m| DecayPoint::from_estimate(m.eps(), &event_probability(m, |u| u.norm() > r)))
                .collect();
            Ok(TightnessRow {
                radius: r,
                fit: DecayFit::fit(points)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let monotone = rows.windows(2).all(|w| match (&w[0].fit.slope, &w[1].fit.slope) {
        (Some(a), Some(b)) => b.lo <= a.hi,
        _ => true,
    });
    Ok(TightnessProfile { rows, monotone })
}

/// Tube probabilities with the action of the reference path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeEstimate {
    pub fit: DecayFit,
    /// `I_T(ref)`.
    pub reference_action: f64,
    pub radius: f64,
    pub horizon: f64,
}

/// `P(sup_{t ≤ T} ‖S^ε(t)v − ref(t)‖ < r)` over the grid of `reference`,
/// from `n` independent paths per `ε` (stream `j·n + i`).
pub fn tube_probability(
    v: &SpectralField,
    reference: &Trajectory,
    r: f64,
    eps_list: &[f64],
    n: usize,
    cfg: &FlowConfig,
) -> Result<TubeEstimate> {
    if !(r > 0.0) {
        return invalid("tube radius must be positive");
    }
    if n == 0 || eps_list.is_empty() || eps_list.iter().any(|e| !(*e > 0.0)) {
        return invalid("need n > 0 and positive eps values");
    }
    if (reference.dt - cfg.dt()).abs() > 1e-12 * cfg.dt() {
        return invalid("reference grid differs from the flow time step");
    }
    v.check_same_basis(cfg.forcing())?;
    let reference_action = action_of_trajectory(reference, cfg)?;
    let mut points = Vec::new();
    for (j, &eps) in eps_list.iter().enumerate() {
        let c = cfg.clone().with_epsilon(eps)?;
        let inside = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut flow = StochasticFlow::new(v.clone(), c.clone(), (j * n + i) as u64)?;
                for (k, target) in reference.states.iter().enumerate() {
                    if k > 0 {
                        flow.advance()?;
                    }
                    if flow.state().distance(target) >= r {
                        return Ok(false);
                    }
                }
                Ok(true)
            })
            .collect::<Result<Vec<bool>>>()?;
        let count = inside.iter().filter(|&&b| b).count();
        let p = count as f64 / n as f64;
        let (lo, hi) = wilson_interval(p, n as f64, Z95);
        points.push(DecayPoint {
            eps,
            p_hat: p,
            lo,
            hi,
            n_eff: n as f64,
            censored: count == 0,
        });
    }
    Ok(TubeEstimate {
        fit: DecayFit::fit(points)?,
        reference_action,
        radius: r,
        horizon: reference.dt * (reference.len() - 1) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBound {
    pub fit: DecayFit,
    /// `−ε ln μ̂^ε(B_δ(u))` per `ε` (censored points use their bound).
    pub exponents: Vec<(f64, f64)>,
    /// Minus the fitted slope.
    pub exponent: Option<f64>,
    pub quasipotential: f64,
    pub delta_prime: f64,
    pub pass: bool,
}

/// Compares the Monte-Carlo exponent of the open ball `B_δ(target)` with
/// the quasipotential `v_a` of the target. Only meaningful, and only
/// run, when the attractor is a single point.
pub fn lower_bound_check(
    target: &SpectralField,
    delta: f64,
    delta_prime: f64,
    v_a: f64,
    set: &AttractorSet,
    measures: &[EmpiricalMeasure],
) -> Result<LowerBound> {
    if set.len() != 1 {
        return Err(Error::Refused(format!(
            "the lower bound is established for a singleton attractor; this approximation has {} points",
            set.len()
        )));
    }
    if !(delta > 0.0 && delta_prime >= 0.0) {
        return invalid("delta must be positive and delta_prime nonnegative");
    }
    check_sweep(measures)?;
    target.check_same_basis(&measures[0].samples[0])?;
    let points: Vec<DecayPoint> = measures
        .iter()
        .map(|m| DecayPoint::from_estimate(m.eps(), &event_probability(m, |u| u.distance(target) < delta)))
        .collect();
    let exponents = points.iter().map(|p| (p.eps, -p.exponent())).collect();
    let fit = DecayFit::fit(points)?;
    let exponent = fit.slope.map(|s| -s.value);
    let pass = exponent.is_some_and(|e| e <= v_a + delta_prime);
    Ok(LowerBound {
        fit,
        exponents,
        exponent,
        quasipotential: v_a,
        delta_prime,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    fn ou(eps: f64, horizon: f64, chains: usize) -> EmpiricalMeasure {
        let cfg = presets::ou_flow(1, 0.0, 0.01, 3).unwrap();
        let mut s = SamplerSettings::new(horizon, 10);
        s.burn_in = Some(5.0);
        s.chains = chains;
        sample_stationary(eps, &cfg, &s).unwrap()
    }

    #[test]
    fn trivial_events() {
        let m = ou(0.1, 50.0, 2);
        assert_eq!(event_probability(&m, |_| true).value, 1.0);
        assert_eq!(event_probability(&m, |_| false).value, 0.0);
        let a = event_probability(&m, |u| u.norm() > 0.3).value;
        let b = event_probability(&m, |u| u.norm() <= 0.3).value;
        assert_eq!(a + b, 1.0);
    }

    #[test]
    fn rejects_bad_windows() {
        let cfg = presets::ou_flow(1, 0.0, 0.01, 3).unwrap();
        let mut s = SamplerSettings::new(10.0, 1);
        s.burn_in = Some(10.0);
        assert!(sample_stationary(0.1, &cfg, &s).is_err());
        s.burn_in = Some(1.0);
        assert!(sample_stationary(0.0, &cfg, &s).is_err());
    }

    #[test]
    fn exact_line_has_tight_band() {
        let points = [0.1, 0.05, 0.025]
            .iter()
            .map(|&e: &f64| DecayPoint {
                eps: e,
                p_hat: (-0.2 / e).exp(),
                lo: 0.0,
                hi: 1.0,
                n_eff: 1e12,
                censored: false,
            })
            .collect();
        let f = DecayFit::fit(points).unwrap();
        let s = f.slope.unwrap();
        assert!((s.value + 0.2).abs() < 1e-10);
        assert!(s.lo <= s.value && s.value <= s.hi && s.hi - s.lo < 1e-3);
        assert!(f.confident_negative());
    }

    #[test]
    fn censored_points_are_not_fitted() {
        let pt = |eps, p: f64, censored| DecayPoint {
            eps,
            p_hat: p,
            lo: 0.0,
            hi: if censored { 3e-3 } else { p * 1.2 },
            n_eff: 1000.0,
            censored,
        };
        let f = DecayFit::fit(vec![pt(0.1, 0.2, false), pt(0.05, 0.0, true)]).unwrap();
        assert!(f.slope.is_none());
        assert!((f.censored_bound.unwrap() - 0.05 * 3e-3f64.ln()).abs() < 1e-15);
        assert!(f.confident_negative());
        let svg = f.to_svg("censored");
        assert!(svg.starts_with("<svg") && svg.contains("<path"));
    }

    #[test]
    fn lower_bound_refuses_non_singleton() {
        let m = ou(0.1, 20.0, 1);
        let b = m.basis().clone();
        let e = SpectralField::unit(&b, [1, 0]).unwrap();
        let set = AttractorSet::singleton(SpectralField::zeros(&b), 0.01).unwrap();
        let two = AttractorSet::from_points(
            vec![SpectralField::zeros(&b), e.clone()],
            crate::attractor::AttractorKind::Omega,
            0.01,
            *set.provenance(),
        )
        .unwrap();
        assert!(matches!(
            lower_bound_check(&e, 0.1, 0.0, 1.0, &two, std::slice::from_ref(&m)),
            Err(Error::Refused(_))
        ));
    }
}
