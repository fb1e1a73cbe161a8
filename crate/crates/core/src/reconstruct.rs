//! Reconstruction of a stationary measure from windows after a stopping
//! time:
//!
//! ```text
//! R_δψ(v) = (1/δ) E_v ∫_τ^{τ+δ} ψ(u_t) dt,      λ(ψ) = (R_δψ, μ)
//! ```
//!
//! Finite chains are evaluated exactly by matrix powers (discrete time:
//! the window is the `δ` steps `τ+1, …, τ+δ`); simulated models by nested
//! Monte Carlo. The stopping times are deterministic functions of the
//! starting state.

use std::fmt::Write as _;
use std::io::Read;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attractor::{deterministic_hitting_time, AttractorSet};
use crate::error::{invalid, Error, Result};
use crate::flow::{derive_seed, step_deterministic, step_stochastic, FlowConfig, StochasticFlow};
use crate::measure::{event_probability, EmpiricalMeasure};
use crate::spectral::SpectralField;
use crate::stats::{mean, variance, Estimate, Z95};

/// A Markov process observed on a uniform grid, with a deterministic
/// stopping time per starting state.
pub trait MarkovModel: Sync {
    type State: Clone + Send + Sync;

    /// Time per step.
    fn dt(&self) -> f64;

    fn step(&self, x: &Self::State, rng: &mut ChaCha8Rng) -> Result<Self::State>;

    /// `τ(x)` in steps; [`Error::Timeout`] if it is not resolved.
    fn stopping_time(&self, x: &Self::State) -> Result<usize>;

    /// Size of a state, for bounded-set checks.
    fn gauge(&self, x: &Self::State) -> f64;
}

fn mc_estimate(xs: &[f64]) -> Estimate {
    let n = xs.len() as f64;
    let m = mean(xs);
    let se = if xs.len() > 1 {
        (variance(xs) / n).sqrt()
    } else {
        f64::NAN
    };
    Estimate {
        value: m,
        lo: m - Z95 * se,
        hi: m + Z95 * se,
        se,
        n_eff: n,
    }
}

/// One path from `v`: the window average of `ψ` over steps
/// `τ(v)+1, …, τ(v)+δ`.
fn window_average<M, F>(model: &M, v: &M::State, delta: usize, psi: &F, rng: &mut ChaCha8Rng) -> Result<f64>
where
    M: MarkovModel,
    F: Fn(&M::State) -> f64,
{
    let tau = model.stopping_time(v)?;
    let mut x = v.clone();
    for _ in 0..tau {
        x = model.step(&x, rng)?;
    }
    let mut acc = 0.0;
    for _ in 0..delta {
        x = model.step(&x, rng)?;
        acc += psi(&x);
    }
    Ok(acc / delta as f64)
}

/// Monte-Carlo `R_δψ(v)` over `n` independent paths (stream `seed ⊕ i`),
/// `δ` in steps.
pub fn r_delta<M, F>(model: &M, v: &M::State, delta: usize, psi: F, n: usize, seed: u64) -> Result<Estimate>
where
    M: MarkovModel,
    F: Fn(&M::State) -> f64 + Sync,
{
    if delta == 0 || n == 0 {
        return invalid("delta and n must be positive");
    }
    let xs = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            window_average(model, v, delta, &psi, &mut rng)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mc_estimate(&xs))
}

/// Monte-Carlo `λ(ψ)`: one inner path per outer sample of `μ`.
pub fn lambda_functional<M, F>(model: &M, mu: &[M::State], delta: usize, psi: F, seed: u64) -> Result<Estimate>
where
    M: MarkovModel,
    F: Fn(&M::State) -> f64 + Sync,
{
    if delta == 0 || mu.is_empty() {
        return invalid("delta must be positive and mu nonempty");
    }
    let xs = mu
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            window_average(model, v, delta, &psi, &mut rng)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mc_estimate(&xs))
}

/// Monte-Carlo semigroup `P_tψ(v)` with `t` in steps.
pub fn semigroup<M, F>(model: &M, v: &M::State, steps: usize, psi: F, n: usize, seed: u64) -> Result<Estimate>
where
    M: MarkovModel,
    F: Fn(&M::State) -> f64 + Sync,
{
    if n == 0 {
        return invalid("n must be positive");
    }
    let xs = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let mut x = v.clone();
            for _ in 0..steps {
                x = model.step(&x, &mut rng)?;
            }
            Ok(psi(&x))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mc_estimate(&xs))
}

/// Fraction of paths from each start whose gauge exceeds `radius` on
/// `[0, steps]`; the worst start is returned.
pub fn condition_a_gauge<M: MarkovModel>(
    model: &M,
    starts: &[M::State],
    radius: f64,
    steps: usize,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if n == 0 || starts.is_empty() {
        return invalid("need starts and n > 0");
    }
    let mut worst = 0.0f64;
    for (j, v) in starts.iter().enumerate() {
        let left = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (j * n + i) as u64));
                let mut x = v.clone();
                if model.gauge(&x) > radius {
                    return Ok(true);
                }
                for _ in 0..steps {
                    x = model.step(&x, &mut rng)?;
                    if model.gauge(&x) > radius {
                        return Ok(true);
                    }
                }
                Ok(false)
            })
            .collect::<Result<Vec<bool>>>()?;
        worst = worst.max(left.iter().filter(|&&b| b).count() as f64 / n as f64);
    }
    Ok(worst)
}

/// Discrete-time chain with a deterministic stopping time per state.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteChain {
    p: DMatrix<f64>,
    tau: Vec<usize>,
}

impl FiniteChain {
    pub fn new(rows: Vec<Vec<f64>>, tau: Vec<usize>) -> Result<Self> {
        let n = rows.len();
        if n == 0 || tau.len() != n || rows.iter().any(|r| r.len() != n) {
            return invalid("transition matrix must be square and match the tau vector");
        }
        for (i, r) in rows.iter().enumerate() {
            if r.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return invalid(format!("row {i} has a negative or non-finite entry"));
            }
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return invalid(format!("row {i} sums to {s}"));
            }
        }
        Ok(FiniteChain {
            p: DMatrix::from_fn(n, n, |i, j| rows[i][j]),
            tau,
        })
    }

    /// Dense random chain (all entries positive, so irreducible and
    /// aperiodic) with `τ` uniform on `0..=tau_max`.
    pub fn random<R: Rng + ?Sized>(n: usize, tau_max: usize, rng: &mut R) -> Result<Self> {
        let rows = (0..n)
            .map(|_| {
                let r: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
                let s: f64 = r.iter().sum();
                r.into_iter().map(|x| x / s).collect::<Vec<f64>>()
            })
            .map(|mut r| {
                // absorb rounding so the row sums to 1 within 1 ulp-ish
                let s: f64 = r.iter().sum();
                r[0] += 1.0 - s;
                r
            })
            .collect();
        let tau = (0..n).map(|_| rng.random_range(0..=tau_max)).collect();
        Self::new(rows, tau)
    }

    /// The same chain with stopping time `τ` replaced.
    pub fn with_tau(&self, tau: Vec<usize>) -> Result<Self> {
        if tau.len() != self.len() {
            return invalid("tau length differs from the number of states");
        }
        Ok(FiniteChain { p: self.p.clone(), tau })
    }

    /// Text format: `n`, then `n` rows of `P`, then the `n` values of `τ`;
    /// blank lines and `#` comments are ignored.
    pub fn parse<R: Read>(mut r: R) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let mut lines = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty());
        let n: usize = lines
            .next()
            .ok_or_else(|| Error::Parse("empty chain file".into()))?
            .parse()
            .map_err(|e| Error::Parse(format!("state count: {e}")))?;
        let mut nums = |what: &str| -> Result<Vec<String>> {
            let l = lines.next().ok_or_else(|| Error::Parse(format!("missing {what}")))?;
            Ok(l.split_whitespace().map(str::to_string).collect())
        };
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let row = nums(&format!("row {i}"))?
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Parse(format!("row {i}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let tau = nums("tau")?
            .iter()
            .map(|s| s.parse::<usize>().map_err(|e| Error::Parse(format!("tau: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows, tau)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.len());
        for i in 0..self.len() {
            let row: Vec<String> = (0..self.len()).map(|j| format!("{:e}", self.p[(i, j)])).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        let tau: Vec<String> = self.tau.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "{}", tau.join(" "));
        s
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn tau(&self) -> &[usize] {
        &self.tau
    }

    pub fn is_irreducible(&self) -> bool {
        let n = self.len();
        let reach = |from: usize, forward: bool| {
            let mut seen = vec![false; n];
            let mut stack = vec![from];
            seen[from] = true;
            while let Some(i) = stack.pop() {
                for j in 0..n {
                    let e = if forward { self.p[(i, j)] } else { self.p[(j, i)] };
                    if e > 0.0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        reach(0, true) && reach(0, false)
    }

    /// Primitivity: some power of `P` up to Wielandt's bound is positive.
    pub fn is_aperiodic(&self) -> bool {
        let n = self.len();
        let pattern = self.p.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        let mut q = pattern.clone();
        for _ in 0..(n - 1) * (n - 1) + 1 {
            if q.iter().all(|&x| x > 0.0) {
                return true;
            }
            q = (&q * &pattern).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        }
        false
    }

    /// `π` with `πP = π`, by a linear solve with one balance equation
    /// replaced by normalization.
    pub fn stationary(&self) -> Result<Vec<f64>> {
        if !self.is_irreducible() || !self.is_aperiodic() {
            return Err(Error::Refused(
                "stationary distribution requested for a reducible or periodic chain".into(),
            ));
        }
        let n = self.len();
        let mut a = self.p.transpose() - DMatrix::identity(n, n);
        let mut b = DVector::zeros(n);
        for j in 0..n {
            a[(n - 1, j)] = 1.0;
        }
        b[n - 1] = 1.0;
        let pi = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Refused("singular balance system".into()))?;
        let res = (pi.transpose() * &self.p - pi.transpose()).amax();
        if res > 1e-12 {
            return Err(Error::Refused(format!("stationary residual {res:e} above 1e-12")));
        }
        Ok(pi.iter().copied().collect())
    }

    /// `ψ, Pψ, …, P^t ψ`.
    fn powers(&self, psi: &[f64], t: usize) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(t + 1);
        out.push(DVector::from_column_slice(psi));
        for k in 0..t {
            let next = &self.p * &out[k];
            out.push(next);
        }
        out
    }

    /// `P^t ψ`.
    pub fn apply_power(&self, psi: &[f64], t: usize) -> Vec<f64> {
        self.powers(psi, t).pop().expect("nonempty").iter().copied().collect()
    }

    /// Exact `R_δψ(v) = (1/δ) Σ_{j=1..δ} (P^{τ(v)+j} ψ)(v)`.
    pub fn r_delta(&self, v: usize, delta: usize, psi: &[f64]) -> Result<f64> {
        Ok(self.r_delta_all(delta, psi)?[v])
    }

    fn r_delta_all(&self, delta: usize, psi: &[f64]) -> Result<Vec<f64>> {
        if delta == 0 {
            return invalid("delta must be positive");
        }
        if psi.len() != self.len() {
            return invalid("psi length differs from the number of states");
        }
        let t_max = self.tau.iter().max().copied().unwrap_or(0) + delta;
        let pw = self.powers(psi, t_max);
        Ok((0..self.len())
            .map(|v| (1..=delta).map(|j| pw[self.tau[v] + j][v]).sum::<f64>() / delta as f64)
            .collect())
    }

    /// Exact `λ(ψ) = Σ_v μ(v) R_δψ(v)`.
    pub fn lambda(&self, mu: &[f64], delta: usize, psi: &[f64]) -> Result<f64> {
        if mu.len() != self.len() {
            return invalid("mu length differs from the number of states");
        }
        let r = self.r_delta_all(delta, psi)?;
        Ok(mu.iter().zip(&r).map(|(m, x)| m * x).sum())
    }

    /// `μ(Γ̊) ≤ λ(Γ̊) ≤ λ(Γ̄) ≤ μ(Γ̄)` for index sets given as masks.
    pub fn sandwich_check(
        &self,
        mu: &[f64],
        delta: usize,
        interior: &[bool],
        closure: &[bool],
        tol: f64,
    ) -> Result<SandwichReport> {
        if interior.len() != self.len() || closure.len() != self.len() {
            return invalid("set masks must cover every state");
        }
        if interior.iter().zip(closure).any(|(i, c)| *i && !*c) {
            return invalid("interior must be contained in closure");
        }
        let ind = |m: &[bool]| m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let (fi, fc) = (ind(interior), ind(closure));
        let dot = |f: &[f64]| mu.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
        Ok(SandwichReport::new(
            dot(&fi),
            self.lambda(mu, delta, &fi)?,
            self.lambda(mu, delta, &fc)?,
            dot(&fc),
            tol,
        ))
    }

    /// `|λ(P_sψ) − λ(ψ)|` for each `s`.
    pub fn shift_invariance_check(
        &self,
        mu: &[f64],
        delta: usize,
        psi: &[f64],
        s_list: &[usize],
    ) -> Result<Vec<ShiftRow>> {
        let base = self.lambda(mu, delta, psi)?;
        s_list
            .iter()
            .map(|&s| {
                let shifted = self.lambda(mu, delta, &self.apply_power(psi, s))?;
                Ok(ShiftRow {
                    s,
                    lambda_shifted: shifted,
                    lambda: base,
                    defect: (shifted - base).abs(),
                })
            })
            .collect()
    }

    /// Largest modulus among the non-unit eigenvalues.
    pub fn second_eigenvalue(&self) -> f64 {
        let mut m: Vec<f64> = self.p.complex_eigenvalues().iter().map(|z| z.norm()).collect();
        m.sort_by(|a, b| b.total_cmp(a));
        m.get(1).copied().unwrap_or(0.0)
    }

    /// `sup_v |P_tψ(v) − (ψ, π)|` along `t_list` for each `ψ`, compared
    /// with the spectral-gap envelope `C·|λ₂|^t`, `C` fitted at the first
    /// time.
    pub fn b0_mixing_check(&self, psi_list: &[Vec<f64>], t_list: &[usize]) -> Result<MixingReport> {
        if t_list.windows(2).any(|w| w[1] <= w[0]) || t_list.is_empty() {
            return invalid("t_list must be nonempty and increasing");
        }
        let pi = self.stationary()?;
        let l2 = self.second_eigenvalue();
        let t_max = *t_list.last().expect("nonempty");
        let mut rows = Vec::new();
        let mut pass = true;
        for psi in psi_list {
            if psi.len() != self.len() {
                return invalid("psi length differs from the number of states");
            }
            let mean: f64 = pi.iter().zip(psi).map(|(a, b)| a * b).sum();
            let pw = self.powers(psi, t_max);
            let sup: Vec<f64> = t_list
                .iter()
                .map(|&t| pw[t].iter().map(|x| (x - mean).abs()).fold(0.0, f64::max))
                .collect();
            let bound = psi.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max);
            let uniformly_bounded = pw
                .iter()
                .all(|v| v.amax() <= psi.iter().map(|x| x.abs()).fold(0.0, f64::max) + 1e-12);
            // envelope with a polynomial allowance for non-normal P
            let c = sup[0] / l2.powi(t_list[0] as i32).max(1e-300);
            let within = t_list.iter().zip(&sup).all(|(&t, s)| {
                *s <= (1e-12 + c * (1.0 + t as f64).powi(self.len() as i32) * l2.powi(t as i32)) || *s < 1e-13
            });
            let decreasing = sup.windows(2).all(|w| w[1] <= w[0] + 1e-15);
            pass &= within && decreasing && uniformly_bounded && sup[0] <= bound + 1e-12;
            rows.push(MixingRow {
                sup,
                uniformly_bounded,
                decreasing,
                within_envelope: within,
            });
        }
        Ok(MixingReport {
            t_list: t_list.to_vec(),
            second_eigenvalue: l2,
            rows,
            pass,
        })
    }
}

impl MarkovModel for FiniteChain {
    type State = usize;

    fn dt(&self) -> f64 {
        1.0
    }

    fn step(&self, x: &usize, rng: &mut ChaCha8Rng) -> Result<usize> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for j in 0..self.len() {
            acc += self.p[(*x, j)];
            if u < acc {
                return Ok(j);
            }
        }
        Ok(self.len() - 1)
    }

    fn stopping_time(&self, x: &usize) -> Result<usize> {
        Ok(self.tau[*x])
    }

    fn gauge(&self, x: &usize) -> f64 {
        *x as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SandwichReport {
    pub mu_interior: f64,
    pub lambda_interior: f64,
    pub lambda_closure: f64,
    pub mu_closure: f64,
    pub tol: f64,
    pub pass: bool,
}

impl SandwichReport {
    pub fn new(mu_i: f64, lam_i: f64, lam_c: f64, mu_c: f64, tol: f64) -> Self {
        SandwichReport {
            mu_interior: mu_i,
            lambda_interior: lam_i,
            lambda_closure: lam_c,
            mu_closure: mu_c,
            tol,
            pass: mu_i <= lam_i + tol && lam_i <= lam_c + tol && lam_c <= mu_c + tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub s: usize,
    pub lambda_shifted: f64,
    pub lambda: f64,
    pub defect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingRow {
    pub sup: Vec<f64>,
    pub uniformly_bounded: bool,
    pub decreasing: bool,
    pub within_envelope: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingReport {
    pub t_list: Vec<usize>,
    pub second_eigenvalue: f64,
    pub rows: Vec<MixingRow>,
    pub pass: bool,
}

/// The stochastic flow with `τ(v)` the first grid time at which the
/// deterministic flow from `v` is within `η/4` of the attractor
/// approximation.
#[derive(Debug, Clone)]
pub struct NseModel {
    cfg: FlowConfig,
    set: AttractorSet,
    eta: f64,
    t_max: f64,
}

impl NseModel {
    pub fn new(cfg: FlowConfig, set: AttractorSet, eta: f64, t_max: f64) -> Result<Self> {
        if !(eta > 0.0 && t_max > 0.0) {
            return invalid("eta and t_max must be positive");
        }
        set.points()[0].check_same_basis(cfg.forcing())?;
        Ok(NseModel { cfg, set, eta, t_max })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }
}

impl MarkovModel for NseModel {
    type State = SpectralField;

    fn dt(&self) -> f64 {
        self.cfg.dt()
    }

    fn step(&self, x: &SpectralField, rng: &mut ChaCha8Rng) -> Result<SpectralField> {
        step_stochastic(x, &self.cfg, rng)
    }

    fn stopping_time(&self, x: &SpectralField) -> Result<usize> {
        let t = deterministic_hitting_time(x, &self.set, self.eta, &self.cfg, self.t_max)?;
        if t.is_finite() {
            Ok((t / self.cfg.dt()).round() as usize)
        } else {
            Err(Error::Timeout { horizon: self.t_max })
        }
    }

    fn gauge(&self, x: &SpectralField) -> f64 {
        x.norm()
    }
}

/// Outcome of the empirical window selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaSelection {
    pub delta: f64,
    pub probes: usize,
    /// The cap was binding for every probe.
    pub capped: bool,
}

/// Largest `δ ≤ delta_max` such that `S(t)v` stays in `𝒪̄_{η/2}` on
/// `[τ(v), τ(v)+δ]` for every probe `v`.
pub fn select_delta(
    set: &AttractorSet,
    eta: f64,
    probes: &[SpectralField],
    delta_max: f64,
    t_max: f64,
    cfg: &FlowConfig,
) -> Result<DeltaSelection> {
    if probes.is_empty() || !(delta_max > 0.0) {
        return invalid("need probes and a positive delta cap");
    }
    let n_cap = (delta_max / cfg.dt()).round() as usize;
    let stays = probes
        .par_iter()
        .map(|v| {
            let tau = deterministic_hitting_time(v, set, eta, cfg, t_max)?;
            if !tau.is_finite() {
                return Err(Error::Timeout { horizon: t_max });
            }
            let mut u = v.clone();
            for _ in 0..(tau / cfg.dt()).round() as usize {
                u = step_deterministic(&u, cfg)?;
            }
            for n in 0..n_cap {
                if set.distance(&u) > eta / 2.0 {
                    return Ok(n);
                }
                u = step_deterministic(&u, cfg)?;
            }
            Ok(n_cap)
        })
        .collect::<Result<Vec<usize>>>()?;
    let n = stays.iter().copied().min().expect("nonempty");
    if n == 0 {
        return Err(Error::Refused(format!(
            "no admissible window: a probe leaves the closed {}-neighbourhood at its stopping time",
            eta / 2.0
        )));
    }
    Ok(DeltaSelection {
        delta: n as f64 * cfg.dt(),
        probes: probes.len(),
        capped: n == n_cap,
    })
}

/// `λ̂^ε(𝒪̄_η^c)` next to `μ̂^ε(𝒪̄_η^c)` from the same measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaEstimate {
    pub eps: f64,
    pub eta: f64,
    pub delta: DeltaSelection,
    pub outer_samples: usize,
    /// Window fraction with `dist ≥ η` (closed complement).
    pub lambda: Estimate,
    /// Window fraction with `dist > η` (open complement).
    pub lambda_open: Estimate,
    pub mu: Estimate,
    pub mu_open: Estimate,
    /// `μ̂ ≤ λ̂ + 1.96·√(se_μ² + se_λ²)`.
    pub ordering_holds: bool,
    pub sandwich: SandwichReport,
}

/// Stream offset of the inner paths, clear of the sampling chains.
pub const LAMBDA_STREAM_BASE: u64 = 1 << 40;

/// Settings of the nested estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaSettings {
    /// Fixed window; selected from probes when absent.
    pub delta: Option<f64>,
    /// Cap on the selected window.
    pub delta_max: f64,
    pub n_outer: usize,
    pub n_probe: usize,
    /// Horizon for resolving `τ(v)`.
    pub t_max: f64,
}

impl Default for LambdaSettings {
    fn default() -> Self {
        LambdaSettings {
            delta: None,
            delta_max: 5.0,
            n_outer: 1000,
            n_probe: 50,
            t_max: 100.0,
        }
    }
}

/// Nested Monte Carlo for `λ^ε(𝒪̄_η^c)`: outer states are `n_outer`
/// equally spaced samples of `measure`; each runs the stochastic flow for
/// `τ(v) + δ` and averages the indicator over the window. `δ` is selected
/// on the first `n_probe` outer states unless given.
pub fn nse_lambda_estimator(
    set: &AttractorSet,
    eta: f64,
    measure: &EmpiricalMeasure,
    s: &LambdaSettings,
    cfg: &FlowConfig,
) -> Result<LambdaEstimate> {
    let (n_outer, t_max) = (s.n_outer, s.t_max);
    if n_outer == 0 || n_outer > measure.len() {
        return invalid(format!("n_outer must be in 1..={}", measure.len()));
    }
    let c = cfg.clone().with_epsilon(measure.eps())?;
    let stride = measure.len() / n_outer;
    let outer: Vec<SpectralField> = measure
        .samples()
        .iter()
        .step_by(stride)
        .take(n_outer)
        .cloned()
        .collect();
    let sel = match s.delta {
        Some(d) if d > 0.0 => DeltaSelection {
            delta: d,
            probes: 0,
            capped: false,
        },
        Some(d) => return invalid(format!("delta must be positive, got {d}")),
        None => select_delta(
            set,
            eta,
            &outer[..s.n_probe.clamp(1, outer.len())],
            s.delta_max,
            t_max,
            &c,
        )?,
    };
    let n_delta = ((sel.delta / c.dt()).round() as usize).max(1);
    let model = NseModel::new(c.clone(), set.clone(), eta, t_max)?;
    let pairs = outer
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let tau = model.stopping_time(v)?;
            let mut flow = StochasticFlow::new(v.clone(), c.clone(), LAMBDA_STREAM_BASE + i as u64)?;
            for _ in 0..tau {
                flow.advance()?;
            }
            let (mut closed, mut open) = (0usize, 0usize);
            for _ in 0..n_delta {
                let d = set.distance(flow.advance()?);
                closed += (d >= eta) as usize;
                open += (d > eta) as usize;
            }
            Ok((closed as f64 / n_delta as f64, open as f64 / n_delta as f64))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let (closed, open): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let clamp = |mut e: Estimate| {
        e.lo = e.lo.max(0.0);
        e.hi = e.hi.min(1.0);
        e
    };
    let lambda = clamp(mc_estimate(&closed));
    let lambda_open = clamp(mc_estimate(&open));
    let mu = event_probability(measure, |u| set.distance(u) >= eta);
    let mu_open = event_probability(measure, |u| set.distance(u) > eta);
    let slack = Z95 * (mu.se.powi(2) + lambda.se.powi(2)).sqrt();
    let ordering_holds = mu.value <= lambda.value + slack;
    let sandwich = SandwichReport::new(
        mu_open.value,
        lambda_open.value,
        lambda.value,
        mu.value,
        Z95 * (mu.se.powi(2) + lambda.se.powi(2) + mu_open.se.powi(2) + lambda_open.se.powi(2)).sqrt(),
    );
    Ok(LambdaEstimate {
        eps: measure.eps(),
        eta,
        delta: sel,
        outer_samples: n_outer,
        lambda,
        lambda_open,
        mu,
        mu_open,
        ordering_holds,
        sandwich,
    })
}
