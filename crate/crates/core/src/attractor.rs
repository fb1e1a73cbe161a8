//! Point-cloud approximations of the global attractor and of the ω-limit
//! set, and deterministic and stochastic hitting times of their
//! neighbourhoods.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flow::{integrate_deterministic, step_deterministic, FlowConfig, StochasticFlow};
use crate::spectral::{BasisSpec, SpectralField};
use crate::stats::{linear_fit, wilson_interval, Z95};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttractorKind {
    /// Long-time sample points of `S(t)`.
    Omega,
    /// Global attractor: ω-limit points plus any added connecting points.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub ensemble_size: usize,
    pub transient: f64,
    pub collect: f64,
    pub sample_dt: f64,
    /// Largest `|u|_V` seen on the collection windows.
    pub v_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttractorSet {
    points: Vec<SpectralField>,
    kind: AttractorKind,
    cluster_tol: f64,
    provenance: Provenance,
}

/// Greedy merge in input order: keeps a sample only if it is at least
/// `tol` away from every kept one.
fn merge(samples: impl IntoIterator<Item = SpectralField>, tol: f64) -> Vec<SpectralField> {
    let mut kept: Vec<SpectralField> = Vec::new();
    for s in samples {
        if kept.iter().all(|k| k.distance(&s) >= tol) {
            kept.push(s);
        }
    }
    kept
}

impl AttractorSet {
    /// A set from given points, merged at `cluster_tol`.
    pub fn from_points(
        points: Vec<SpectralField>,
        kind: AttractorKind,
        cluster_tol: f64,
        provenance: Provenance,
    ) -> Result<Self> {
        if points.is_empty() {
            return invalid("attractor approximation needs at least one point");
        }
        if !(cluster_tol > 0.0) {
            return invalid("cluster_tol must be positive");
        }
        for p in &points[1..] {
            points[0].check_same_basis(p)?;
        }
        Ok(AttractorSet {
            points: merge(points, cluster_tol),
            kind,
            cluster_tol,
            provenance,
        })
    }

    /// The set `{u}` (e.g. a known equilibrium).
    pub fn singleton(u: SpectralField, cluster_tol: f64) -> Result<Self> {
        let v = u.v_norm();
        Self::from_points(
            vec![u],
            AttractorKind::Omega,
            cluster_tol,
            Provenance {
                ensemble_size: 1,
                transient: 0.0,
                collect: 0.0,
                sample_dt: 0.0,
                v_bound: v,
            },
        )
    }

    pub fn points(&self) -> &[SpectralField] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn kind(&self) -> AttractorKind {
        self.kind
    }

    pub fn cluster_tol(&self) -> f64 {
        self.cluster_tol
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn basis(&self) -> &Arc<BasisSpec> {
        self.points[0].basis()
    }

    /// `dist(u, set)` in H.
    pub fn distance(&self, u: &SpectralField) -> f64 {
        self.points.iter().map(|p| p.distance(u)).fold(f64::INFINITY, f64::min)
    }

    /// Set-wise agreement: the Hausdorff distance between point clouds.
    pub fn hausdorff(&self, other: &AttractorSet) -> f64 {
        let a = self.points.iter().map(|p| other.distance(p)).fold(0.0, f64::max);
        let b = other.points.iter().map(|p| self.distance(p)).fold(0.0, f64::max);
        a.max(b)
    }

    /// Largest distance from the set reached by `S(t)p`, `t ∈ [0, horizon]`,
    /// over the stored points.
    pub fn invariance_defect(&self, cfg: &FlowConfig, horizon: f64) -> Result<f64> {
        let n = (horizon / cfg.dt()).round() as usize;
        let worst = self
            .points
            .par_iter()
            .map(|p| {
                let traj = integrate_deterministic(p, cfg, n)?;
                Ok(traj.states.iter().map(|u| self.distance(u)).fold(0.0, f64::max))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(worst.into_iter().fold(0.0, f64::max))
    }

    /// Writes `point_<i>.csv` per point and `manifest.toml`; returns the paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        let mut files = Vec::new();
        for (i, p) in self.points.iter().enumerate() {
            let name = format!("point_{i:05}.csv");
            let path = dir.join(&name);
            p.write_csv(fs::File::create(&path)?)?;
            files.push(name);
            paths.push(path);
        }
        let manifest = Manifest {
            kind: self.kind,
            cluster_tol: self.cluster_tol,
            cutoff: self.basis().cutoff(),
            provenance: self.provenance,
            files,
        };
        let path = dir.join("manifest.toml");
        let text = toml::to_string(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
        fs::File::create(&path)?.write_all(text.as_bytes())?;
        paths.push(path);
        Ok(paths)
    }

    pub fn read(dir: &Path, basis: &Arc<BasisSpec>) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.toml"))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
        if m.cutoff != basis.cutoff() {
            return invalid(format!(
                "stored cutoff {} differs from basis cutoff {}",
                m.cutoff,
                basis.cutoff()
            ));
        }
        let points = m
            .files
            .iter()
            .map(|f| SpectralField::read_csv(fs::File::open(dir.join(f))?, Some(basis)))
            .collect::<Result<Vec<_>>>()?;
        if points.is_empty() {
            return invalid("manifest lists no points");
        }
        Ok(AttractorSet {
            points,
            kind: m.kind,
            cluster_tol: m.cluster_tol,
            provenance: m.provenance,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: AttractorKind,
    cluster_tol: f64,
    cutoff: u32,
    provenance: Provenance,
    files: Vec<String>,
}

/// Integrates `S(t)` from each ensemble member, discards `[0, transient)`,
/// samples every `sample_dt` over the collection window and merges the
/// samples at `cluster_tol` in (member, time) order.
pub fn approximate_omega_set(
    ensemble: &[SpectralField],
    transient: f64,
    collect: f64,
    sample_dt: f64,
    cluster_tol: f64,
    cfg: &FlowConfig,
) -> Result<AttractorSet> {
    if ensemble.is_empty() {
        return invalid("empty ensemble");
    }
    if !(transient > 0.0 && collect > 0.0 && sample_dt > 0.0) {
        return invalid("transient, collect and sample_dt must be positive");
    }
    let dt = cfg.dt();
    let n_transient = (transient / dt).round() as usize;
    let stride = ((sample_dt / dt).round() as usize).max(1);
    let n_collect = (collect / dt).round() as usize;
    let per_member = ensemble
        .par_iter()
        .map(|u0| {
            u0.check_same_basis(cfg.forcing())?;
            let mut u = u0.clone();
            for _ in 0..n_transient {
                u = step_deterministic(&u, cfg)?;
            }
            let mut samples = vec![u.clone()];
            let mut v_max = u.v_norm();
            for n in 1..=n_collect {
                u = step_deterministic(&u, cfg)?;
                v_max = v_max.max(u.v_norm());
                if n % stride == 0 {
                    samples.push(u.clone());
                }
            }
            // merge early so the sequential pass stays small
            Ok((merge(samples, cluster_tol), v_max))
        })
        .collect::<Result<Vec<_>>>()?;
    let v_bound = per_member.iter().map(|(_, v)| *v).fold(0.0, f64::max);
    let all = per_member.into_iter().flat_map(|(s, _)| s);
    AttractorSet::from_points(
        all.collect(),
        AttractorKind::Omega,
        cluster_tol,
        Provenance {
            ensemble_size: ensemble.len(),
            transient,
            collect,
            sample_dt,
            v_bound,
        },
    )
}

/// First grid time at which `S(t)v` is within `radius` of the set
/// (`dist ≤ radius`), or `∞` if not reached by `t_max`.
pub fn entry_time(v: &SpectralField, set: &AttractorSet, radius: f64, cfg: &FlowConfig, t_max: f64) -> Result<f64> {
    v.check_same_basis(cfg.forcing())?;
    let n_max = (t_max / cfg.dt()).round() as usize;
    let mut u = v.clone();
    for n in 0..=n_max {
        if set.distance(&u) <= radius {
            return Ok(n as f64 * cfg.dt());
        }
        if n < n_max {
            u = step_deterministic(&u, cfg)?;
        }
    }
    Ok(f64::INFINITY)
}

/// `τ(v)`: first grid time with `dist(S(t)v, 𝒪) < η/4`; `∞` if not hit by
/// `t_max`.
pub fn deterministic_hitting_time(
    v: &SpectralField,
    set: &AttractorSet,
    eta: f64,
    cfg: &FlowConfig,
    t_max: f64,
) -> Result<f64> {
    if !(eta > 0.0 && t_max > 0.0) {
        return invalid("eta and t_max must be positive");
    }
    v.check_same_basis(cfg.forcing())?;
    let n_max = (t_max / cfg.dt()).round() as usize;
    let mut u = v.clone();
    for n in 0..=n_max {
        if set.distance(&u) < eta / 4.0 {
            return Ok(n as f64 * cfg.dt());
        }
        if n < n_max {
            u = step_deterministic(&u, cfg)?;
        }
    }
    Ok(f64::INFINITY)
}

/// Entry times of the closed `η`-neighbourhood for each sample; the
/// supremum is the finiteness diagnostic for bounded sets of starts.
pub fn absorption_times(
    samples: &[SpectralField],
    set: &AttractorSet,
    eta: f64,
    cfg: &FlowConfig,
    t_max: f64,
) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|v| entry_time(v, set, eta, cfg, t_max))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub eps: f64,
    pub s: f64,
    pub count: usize,
    pub n: usize,
    pub p_hat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Zero hits: only `ci_hi` is meaningful, as an upper bound.
    pub censored: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HittingTable {
    pub rows: Vec<TailRow>,
    /// Per `ε`: least-squares slope of `ε ln P̂` against `s` over the
    /// uncensored cells with `P̂ < 1`; `None` with fewer than two such cells.
    pub trend: Vec<(f64, Option<f64>)>,
}

impl HittingTable {
    pub fn row(&self, eps: f64, s: f64) -> Option<&TailRow> {
        self.rows.iter().find(|r| r.eps == eps && r.s == s)
    }

    /// CSV with columns `eps,s,count,n,p_hat,ci_lo,ci_hi,censored`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Monte-Carlo tail `P̂(τ^ε_η(v) ≥ s)` where `τ^ε_η` is the first grid
/// time the stochastic flow from `v` enters the closed `η`-neighbourhood.
/// Samples use streams `seed ⊕ (j·n_samples + i)` for `ε = eps_list[j]`.
pub fn stochastic_hitting_tail(
    v: &SpectralField,
    set: &AttractorSet,
    eta: f64,
    eps_list: &[f64],
    s_list: &[f64],
    n_samples: usize,
    cfg: &FlowConfig,
) -> Result<HittingTable> {
    if eps_list.iter().any(|e| !(*e > 0.0)) {
        return invalid("all epsilon must be positive");
    }
    if s_list.is_empty() || s_list.windows(2).any(|w| w[1] <= w[0]) || s_list[0] < 0.0 {
        return invalid("s_list must be nonempty, nonnegative and increasing");
    }
    if n_samples == 0 {
        return invalid("n_samples must be positive");
    }
    v.check_same_basis(cfg.forcing())?;
    let s_max = *s_list.last().expect("nonempty");
    let n_max = (s_max / cfg.dt()).ceil() as usize;
    let mut rows = Vec::new();
    let mut trend = Vec::new();
    for (j, &eps) in eps_list.iter().enumerate() {
        let c = cfg.clone().with_epsilon(eps)?;
        let taus = (0..n_samples)
            .into_par_iter()
            .map(|i| {
                let mut flow = StochasticFlow::new(v.clone(), c.clone(), (j * n_samples + i) as u64)?;
                for n in 0..=n_max {
                    if set.distance(flow.state()) <= eta {
                        return Ok(n as f64 * c.dt());
                    }
                    if n < n_max {
                        flow.advance()?;
                    }
                }
                Ok(f64::INFINITY)
            })
            .collect::<Result<Vec<f64>>>()?;
        let mut pts = Vec::new();
        for &s in s_list {
            // grid times are compared with a half-step slack
            let count = taus.iter().filter(|&&t| t >= s - 0.5 * c.dt()).count();
            let p = count as f64 / n_samples as f64;
            let (lo, hi) = wilson_interval(p, n_samples as f64, Z95);
            rows.push(TailRow {
                eps,
                s,
                count,
                n: n_samples,
                p_hat: p,
                ci_lo: lo,
                ci_hi: hi,
                censored: count == 0,
            });
            if count > 0 && count < n_samples {
                pts.push((s, eps * p.ln()));
            }
        }
        trend.push((eps, linear_fit(&pts).map(|f| f.slope)));
    }
    Ok(HittingTable { rows, trend })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    #[test]
    fn merge_respects_tolerance() {
        let b = BasisSpec::new(1).unwrap();
        let e = SpectralField::unit(&b, [1, 0]).unwrap();
        let pts = vec![e.scaled(0.0), e.scaled(0.05), e.scaled(0.2), e.scaled(0.21)];
        let set = AttractorSet::from_points(
            pts,
            AttractorKind::Omega,
            0.1,
            Provenance {
                ensemble_size: 1,
                transient: 1.0,
                collect: 1.0,
                sample_dt: 0.1,
                v_bound: 1.0,
            },
        )
        .unwrap();
        assert_eq!(set.len(), 2);
        for (i, p) in set.points().iter().enumerate() {
            for q in &set.points()[i + 1..] {
                assert!(p.distance(q) >= 0.1);
            }
        }
    }

    #[test]
    fn linear_flow_collapses_to_origin() {
        let cfg = presets::ou_flow(2, 0.0, 0.01, 0).unwrap();
        let mut rng = cfg.rng_for(0);
        let ens: Vec<_> = (0..4)
            .map(|_| SpectralField::random(cfg.basis(), 1.0, &mut rng))
            .collect();
        let set = approximate_omega_set(&ens, 20.0, 2.0, 0.5, 1e-3, &cfg).unwrap();
        assert_eq!(set.len(), 1);
        assert!(set.points()[0].norm() < 1e-3);
    }

    #[test]
    fn hitting_time_zero_inside() {
        let cfg = presets::ou_flow(1, 0.0, 0.01, 0).unwrap();
        let set = AttractorSet::singleton(SpectralField::zeros(cfg.basis()), 1e-3).unwrap();
        let v = SpectralField::unit(cfg.basis(), [1, 0]).unwrap().scaled(0.01);
        assert_eq!(deterministic_hitting_time(&v, &set, 0.1, &cfg, 1.0).unwrap(), 0.0);
        let far = v.scaled(1e6);
        assert!(deterministic_hitting_time(&far, &set, 0.1, &cfg, 1.0)
            .unwrap()
            .is_infinite());
    }
}
