//! Time integration of the truncated Navier–Stokes system
//!
//! ```text
//! u̇ + Lu + B(u,u) = h + φ + √ε Σ b_k β̇_k e_k
//! ```
//!
//! by exponential Euler: the Stokes part is integrated exactly mode by mode,
//! forcing and advection are frozen over a step, and the additive noise is
//! the exact Ornstein–Uhlenbeck increment of each mode.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::spectral::{bilinear_unchecked, project_low, BasisSpec, NoiseSpec, SpectralField};

/// Amplitudes above this modulus abort integration.
pub const BLOWUP_THRESHOLD: f64 = 1e12;

/// Per-mode exponential-integrator coefficients for a fixed `dt`.
#[derive(Debug, Clone)]
struct StepCoeffs {
    decay: Vec<f64>,
    weight: Vec<f64>,
    noise_std: Vec<f64>,
}

impl StepCoeffs {
    fn new(basis: &BasisSpec, noise: &NoiseSpec, dt: f64, epsilon: f64) -> Self {
        let lams = basis.eigenvalues();
        let decay = lams.iter().map(|l| (-l * dt).exp()).collect();
        // (1 − e^{−λdt})/λ without cancellation
        let weight = lams.iter().map(|l| -(-l * dt).exp_m1() / l).collect();
        let noise_std = lams
            .iter()
            .zip(noise.weights())
            .map(|(l, b)| (epsilon * b * b * -(-2.0 * l * dt).exp_m1() / (2.0 * l)).sqrt())
            .collect();
        StepCoeffs {
            decay,
            weight,
            noise_std,
        }
    }
}

/// Data of the flow: time step, forcing `h`, noise coefficients, noise
/// amplitude `ε` and the base seed.
#[derive(Debug, Clone)]
pub struct FlowConfig {
    dt: f64,
    forcing: SpectralField,
    noise: NoiseSpec,
    epsilon: f64,
    seed: u64,
    nonlinear: bool,
    coeffs: StepCoeffs,
}

impl FlowConfig {
    pub fn new(dt: f64, forcing: SpectralField, noise: NoiseSpec, epsilon: f64, seed: u64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return invalid(format!("dt must be positive, got {dt}"));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return invalid(format!("epsilon must be >= 0, got {epsilon}"));
        }
        if noise.weights().len() != forcing.basis().len() {
            return invalid("noise weights and forcing live on different bases");
        }
        if !forcing.is_finite() {
            return invalid("forcing has non-finite amplitudes");
        }
        let coeffs = StepCoeffs::new(forcing.basis(), &noise, dt, epsilon);
        Ok(FlowConfig {
            dt,
            forcing,
            noise,
            epsilon,
            seed,
            nonlinear: true,
            coeffs,
        })
    }

    /// Same configuration with the advection term switched off (the
    /// Ornstein–Uhlenbeck reference system).
    pub fn linear(mut self) -> Self {
        self.nonlinear = false;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return invalid(format!("epsilon must be >= 0, got {epsilon}"));
        }
        self.epsilon = epsilon;
        self.coeffs = StepCoeffs::new(self.forcing.basis(), &self.noise, self.dt, epsilon);
        Ok(self)
    }

    pub fn with_dt(mut self, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return invalid(format!("dt must be positive, got {dt}"));
        }
        self.dt = dt;
        self.coeffs = StepCoeffs::new(self.forcing.basis(), &self.noise, dt, self.epsilon);
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_forcing(mut self, forcing: SpectralField) -> Result<Self> {
        forcing.check_same_basis(&self.forcing)?;
        self.forcing = forcing;
        Ok(self)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn forcing(&self) -> &SpectralField {
        &self.forcing
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_nonlinear(&self) -> bool {
        self.nonlinear
    }

    pub fn basis(&self) -> &Arc<BasisSpec> {
        self.forcing.basis()
    }

    /// `e^{−λ_k dt}` per mode.
    pub fn decay_factors(&self) -> &[f64] {
        &self.coeffs.decay
    }

    /// `(1 − e^{−λ_k dt})/λ_k` per mode.
    pub fn forcing_weights(&self) -> &[f64] {
        &self.coeffs.weight
    }

    /// Advection term `B(u, u)`, or zero for the linear system.
    pub fn advection(&self, u: &SpectralField) -> SpectralField {
        if self.nonlinear {
            bilinear_unchecked(u, u)
        } else {
            SpectralField::zeros(u.basis())
        }
    }

    /// Fresh generator for trajectory `index`; streams are `seed ⊕ index`.
    pub fn rng_for(&self, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, index))
    }
}

pub fn derive_seed(base: u64, index: u64) -> u64 {
    base ^ index
}

fn check_state(u: &SpectralField, step: usize, dt: f64) -> Result<()> {
    for (i, a) in u.amps().iter().enumerate() {
        if !(a.re.is_finite() && a.im.is_finite()) || a.norm_sqr() > BLOWUP_THRESHOLD * BLOWUP_THRESHOLD {
            let k = u.basis().modes()[i];
            return Err(Error::Blowup {
                step,
                time: step as f64 * dt,
                detail: format!("amplitude {a} on mode ({}, {}); reduce dt", k[0], k[1]),
            });
        }
    }
    Ok(())
}

/// One exponential-Euler step with extra forcing `extra` (held constant
/// over the step) and optional noise.
fn advance(
    u: &SpectralField,
    cfg: &FlowConfig,
    extra: Option<&SpectralField>,
    rng: Option<&mut ChaCha8Rng>,
    step: usize,
) -> Result<SpectralField> {
    let adv = cfg.advection(u);
    let c = &cfg.coeffs;
    let h = cfg.forcing.amps();
    let mut out: Vec<Complex64> = u
        .amps()
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut f = h[i] - adv.amps()[i];
            if let Some(e) = extra {
                f += e.amps()[i];
            }
            a * c.decay[i] + f * c.weight[i]
        })
        .collect();
    if let Some(rng) = rng {
        if cfg.epsilon > 0.0 {
            for (a, s) in out.iter_mut().zip(&c.noise_std) {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                *a += Complex64::new(s * re, s * im);
            }
        }
    }
    let next = SpectralField::from_amps(u.basis(), out)?;
    check_state(&next, step + 1, cfg.dt)?;
    Ok(next)
}

/// `S(dt)u` for `u̇ + Lu + B(u,u) = h`.
pub fn step_deterministic(u: &SpectralField, cfg: &FlowConfig) -> Result<SpectralField> {
    u.check_same_basis(&cfg.forcing)?;
    advance(u, cfg, None, None, 0)
}

/// One step of the stochastic flow. With `ε = 0` this is bit-for-bit
/// [`step_deterministic`].
pub fn step_stochastic(u: &SpectralField, cfg: &FlowConfig, rng: &mut ChaCha8Rng) -> Result<SpectralField> {
    u.check_same_basis(&cfg.forcing)?;
    advance(u, cfg, None, Some(rng), 0)
}

/// One step of the controlled flow with forcing `h + φ`.
pub fn step_controlled(u: &SpectralField, cfg: &FlowConfig, phi: &SpectralField) -> Result<SpectralField> {
    u.check_same_basis(&cfg.forcing)?;
    phi.check_same_basis(&cfg.forcing)?;
    advance(u, cfg, Some(phi), None, 0)
}

/// `‖u‖` and `|u|_V` at one grid time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observables {
    pub h_norm: f64,
    pub v_norm: f64,
}

impl Observables {
    pub fn of(u: &SpectralField) -> Self {
        Observables {
            h_norm: u.norm(),
            v_norm: u.v_norm(),
        }
    }
}

/// States on a uniform grid starting at `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<SpectralField>,
    pub observables: Vec<Observables>,
}

impl Trajectory {
    pub fn new(dt: f64, u0: SpectralField) -> Self {
        let obs = Observables::of(&u0);
        Trajectory {
            dt,
            states: vec![u0],
            observables: vec![obs],
        }
    }

    pub fn push(&mut self, u: SpectralField) {
        self.observables.push(Observables::of(&u));
        self.states.push(u);
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.states.len()).map(|i| self.time(i)).collect()
    }

    pub fn last(&self) -> &SpectralField {
        self.states.last().expect("trajectory holds at least the initial state")
    }

    /// CSV with columns `t,h_norm,v_norm`.
    pub fn write_observables_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", "h_norm", "v_norm"])?;
        for (i, o) in self.observables.iter().enumerate() {
            wtr.write_record([self.time(i).to_string(), o.h_norm.to_string(), o.v_norm.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Full-state snapshots every `every` steps as `state_<step>.csv`.
    /// Returns the written paths.
    pub fn write_snapshots(&self, dir: &Path, every: usize) -> Result<Vec<std::path::PathBuf>> {
        if every == 0 {
            return invalid("snapshot stride must be >= 1");
        }
        fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for (i, u) in self.states.iter().enumerate().step_by(every) {
            let p = dir.join(format!("state_{i:08}.csv"));
            u.write_csv(fs::File::create(&p)?)?;
            paths.push(p);
        }
        Ok(paths)
    }
}

pub fn integrate_deterministic(u0: &SpectralField, cfg: &FlowConfig, n_steps: usize) -> Result<Trajectory> {
    u0.check_same_basis(&cfg.forcing)?;
    let mut traj = Trajectory::new(cfg.dt, u0.clone());
    for n in 0..n_steps {
        let next = advance(traj.last(), cfg, None, None, n)?;
        traj.push(next);
    }
    Ok(traj)
}

/// Controlled trajectory with `controls[n]` acting on `[n·dt, (n+1)·dt)`.
pub fn integrate_controlled(u0: &SpectralField, cfg: &FlowConfig, controls: &[SpectralField]) -> Result<Trajectory> {
    u0.check_same_basis(&cfg.forcing)?;
    let mut traj = Trajectory::new(cfg.dt, u0.clone());
    for (n, phi) in controls.iter().enumerate() {
        phi.check_same_basis(&cfg.forcing)?;
        let next = advance(traj.last(), cfg, Some(phi), None, n)?;
        traj.push(next);
    }
    Ok(traj)
}

pub fn integrate_stochastic(
    u0: &SpectralField,
    cfg: &FlowConfig,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    u0.check_same_basis(&cfg.forcing)?;
    let mut traj = Trajectory::new(cfg.dt, u0.clone());
    for n in 0..n_steps {
        let next = advance(traj.last(), cfg, None, Some(rng), n)?;
        traj.push(next);
    }
    Ok(traj)
}

/// Single-writer stochastic integrator that keeps only the current state;
/// used for long runs and resumable through [`Checkpoint`].
#[derive(Debug, Clone)]
pub struct StochasticFlow {
    cfg: FlowConfig,
    state: SpectralField,
    step: usize,
    stream_seed: u64,
    rng: ChaCha8Rng,
}

impl StochasticFlow {
    pub fn new(u0: SpectralField, cfg: FlowConfig, stream: u64) -> Result<Self> {
        u0.check_same_basis(&cfg.forcing)?;
        let stream_seed = derive_seed(cfg.seed, stream);
        Ok(StochasticFlow {
            rng: ChaCha8Rng::seed_from_u64(stream_seed),
            cfg,
            state: u0,
            step: 0,
            stream_seed,
        })
    }

    pub fn advance(&mut self) -> Result<&SpectralField> {
        self.state = advance(&self.state, &self.cfg, None, Some(&mut self.rng), self.step)?;
        self.step += 1;
        Ok(&self.state)
    }

    pub fn state(&self) -> &SpectralField {
        &self.state
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.cfg.dt
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            stream_seed: self.stream_seed,
            word_pos: self.rng.get_word_pos(),
            state: self.state.clone(),
        }
    }

    /// Resume from a checkpoint taken with the same configuration.
    pub fn resume(cfg: FlowConfig, ck: Checkpoint) -> Result<Self> {
        ck.state.check_same_basis(&cfg.forcing)?;
        let mut rng = ChaCha8Rng::seed_from_u64(ck.stream_seed);
        rng.set_word_pos(ck.word_pos);
        Ok(StochasticFlow {
            cfg,
            state: ck.state,
            step: ck.step,
            stream_seed: ck.stream_seed,
            rng,
        })
    }
}

/// Resumable state of a [`StochasticFlow`].
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub stream_seed: u64,
    pub word_pos: u128,
    pub state: SpectralField,
}

impl Checkpoint {
    /// Header lines `# key=value` followed by the state CSV.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# step={}", self.step)?;
        writeln!(w, "# stream_seed={}", self.stream_seed)?;
        writeln!(w, "# word_pos={}", self.word_pos)?;
        self.state.write_csv(w)
    }

    pub fn read(path: &Path, basis: &Arc<BasisSpec>) -> Result<Self> {
        let text = fs::read(path)?;
        let mut step = None;
        let mut stream_seed = None;
        let mut word_pos = None;
        for line in BufReader::new(&text[..]).lines() {
            let line = line?;
            let Some(rest) = line.strip_prefix("# ") else {
                break;
            };
            let (k, v) = rest
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad checkpoint header `{line}`")))?;
            let bad = |_| Error::Parse(format!("bad checkpoint value `{line}`"));
            match k {
                "step" => step = Some(v.parse().map_err(bad)?),
                "stream_seed" => stream_seed = Some(v.parse().map_err(bad)?),
                "word_pos" => word_pos = Some(v.parse().map_err(bad)?),
                _ => return Err(Error::Parse(format!("unknown checkpoint key `{k}`"))),
            }
        }
        let missing = |k: &str| Error::Parse(format!("checkpoint lacks `{k}`"));
        Ok(Checkpoint {
            step: step.ok_or_else(|| missing("step"))?,
            stream_seed: stream_seed.ok_or_else(|| missing("stream_seed"))?,
            word_pos: word_pos.ok_or_else(|| missing("word_pos"))?,
            state: SpectralField::read_csv(&text[..], Some(basis))?,
        })
    }
}

/// Gain and number of nudged low modes of the auxiliary flow
/// `ẇ + Lw + B(w,w) = h + φ + κ P_N(u − w)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingConfig {
    pub gain: f64,
    pub n_modes: usize,
}

impl CouplingConfig {
    pub fn new(gain: f64, n_modes: usize) -> Result<Self> {
        if !(gain >= 0.0 && gain.is_finite()) {
            return invalid(format!("coupling gain must be >= 0, got {gain}"));
        }
        Ok(CouplingConfig { gain, n_modes })
    }
}

/// Distance and running enstrophy integral `∫₀ᵗ ‖∇u‖² ds` along a coupled run.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractionLog {
    pub times: Vec<f64>,
    pub distance: Vec<f64>,
    pub enstrophy_integral: Vec<f64>,
}

impl ContractionLog {
    /// Least-squares slope of `ln ‖u − w‖` against `t`, over points with
    /// distance above `floor`.
    pub fn log_distance_slope(&self, floor: f64) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .times
            .iter()
            .zip(&self.distance)
            .filter(|(_, d)| **d > floor)
            .map(|(t, d)| (*t, d.ln()))
            .collect();
        crate::stats::linear_fit(&pts).map(|f| f.slope)
    }
}

#[derive(Debug, Clone)]
pub struct CoupledRun {
    pub reference: Trajectory,
    pub nudged: Trajectory,
    pub log: ContractionLog,
}

/// Advance the controlled flow `u` and the nudged flow `w` side by side on
/// `[0, t_final]`. `phi`, when given, holds one control per step.
pub fn integrate_coupled(
    u0: &SpectralField,
    w0: &SpectralField,
    cfg: &FlowConfig,
    coupling: CouplingConfig,
    phi: Option<&[SpectralField]>,
    t_final: f64,
) -> Result<CoupledRun> {
    u0.check_same_basis(&cfg.forcing)?;
    w0.check_same_basis(&cfg.forcing)?;
    if !(t_final > 0.0) {
        return invalid(format!("horizon must be positive, got {t_final}"));
    }
    let n = (t_final / cfg.dt).round() as usize;
    if let Some(p) = phi {
        if p.len() < n {
            return invalid(format!("need {n} controls, got {}", p.len()));
        }
    }
    let zero = SpectralField::zeros(cfg.basis());
    let mut u_traj = Trajectory::new(cfg.dt, u0.clone());
    let mut w_traj = Trajectory::new(cfg.dt, w0.clone());
    let mut log = ContractionLog {
        times: vec![0.0],
        distance: vec![u0.distance(w0)],
        enstrophy_integral: vec![0.0],
    };
    for step in 0..n {
        let u = u_traj.last();
        let w = w_traj.last();
        let ctrl = phi.map_or(&zero, |p| &p[step]);
        let nudge = project_low(&u.sub(w), coupling.n_modes).scaled(coupling.gain);
        let w_force = ctrl.add_scaled(&nudge, 1.0);
        let u_next = advance(u, cfg, Some(ctrl), None, step)?;
        let w_next = advance(w, cfg, Some(&w_force), None, step)?;
        let ens = log.enstrophy_integral[step] + cfg.dt * u.v_norm().powi(2);
        log.times.push((step + 1) as f64 * cfg.dt);
        log.distance.push(u_next.distance(&w_next));
        log.enstrophy_integral.push(ens);
        u_traj.push(u_next);
        w_traj.push(w_next);
    }
    Ok(CoupledRun {
        reference: u_traj,
        nudged: w_traj,
        log,
    })
}

/// Fitted constants of the deviation bound
/// `‖S^φ(t)u₀ − S(t)u₀‖² ≤ C e^{c(‖u₀‖² + t‖h‖²)} ∫₀ᵗ e^{−λ₁(t−s)}‖φ(s)‖² ds`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationFit {
    pub c_exp: f64,
    pub c_pre: f64,
    /// Smallest RHS/LHS ratio seen over the fitting samples (≥ 1 by construction).
    pub min_ratio: f64,
}

/// One sample of the deviation bound: squared deviation and the pieces of
/// the right-hand side, per grid time `t > 0`.
#[derive(Debug, Clone)]
pub struct DeviationSample {
    pub times: Vec<f64>,
    pub deviation_sq: Vec<f64>,
    pub exponent_arg: Vec<f64>,
    pub memory_integral: Vec<f64>,
}

/// Run the controlled and uncontrolled flows from `u0` and tabulate the
/// deviation bound ingredients.
pub fn deviation_sample(u0: &SpectralField, cfg: &FlowConfig, controls: &[SpectralField]) -> Result<DeviationSample> {
    let lam1 = cfg.basis().lambda_min();
    let h2 = cfg.forcing.norm().powi(2);
    let u02 = u0.norm().powi(2);
    let ctrl = integrate_controlled(u0, cfg, controls)?;
    let free = integrate_deterministic(u0, cfg, controls.len())?;
    let decay = (-lam1 * cfg.dt).exp();
    let mut mem = 0.0;
    let mut out = DeviationSample {
        times: Vec::with_capacity(controls.len()),
        deviation_sq: Vec::with_capacity(controls.len()),
        exponent_arg: Vec::with_capacity(controls.len()),
        memory_integral: Vec::with_capacity(controls.len()),
    };
    for (n, phi) in controls.iter().enumerate() {
        // ∫ over [0, t_{n+1}] of e^{−λ₁(t−s)}‖φ(s)‖², φ piecewise constant
        mem = mem * decay + phi.norm().powi(2) * (-(-lam1 * cfg.dt).exp_m1() / lam1);
        let t = (n + 1) as f64 * cfg.dt;
        out.times.push(t);
        out.deviation_sq
            .push(ctrl.states[n + 1].distance(&free.states[n + 1]).powi(2));
        out.exponent_arg.push(u02 + t * h2);
        out.memory_integral.push(mem);
    }
    Ok(out)
}

fn max_log_ratio(samples: &[DeviationSample], c_exp: f64) -> f64 {
    samples
        .iter()
        .flat_map(|s| {
            (0..s.times.len())
                .filter(|&i| s.deviation_sq[i] > 0.0 && s.memory_integral[i] > 0.0)
                .map(|i| s.deviation_sq[i].ln() - c_exp * s.exponent_arg[i] - s.memory_integral[i].ln())
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Fit `(C, c)`: for each `c` on `c_grid`, `C(c)` is the smallest prefactor
/// that bounds every sample; the pair minimising the mean log-slack wins.
pub fn fit_deviation_constants(samples: &[DeviationSample], c_grid: &[f64]) -> Result<DeviationFit> {
    if samples.is_empty() || c_grid.is_empty() {
        return invalid("deviation fit needs samples and a grid of exponents");
    }
    let mut best: Option<(f64, f64, f64)> = None;
    for &c in c_grid {
        if !(c >= 0.0) {
            return invalid("deviation exponent grid must be nonnegative");
        }
        let log_c = max_log_ratio(samples, c);
        if !log_c.is_finite() {
            continue;
        }
        let (mut slack, mut count) = (0.0, 0usize);
        for s in samples {
            for i in 0..s.times.len() {
                if s.deviation_sq[i] > 0.0 && s.memory_integral[i] > 0.0 {
                    slack += log_c + c * s.exponent_arg[i] + s.memory_integral[i].ln() - s.deviation_sq[i].ln();
                    count += 1;
                }
            }
        }
        let mean = slack / count as f64;
        if best.is_none_or(|b| mean < b.2) {
            best = Some((c, log_c, mean));
        }
    }
    let (c_exp, log_c, _) = best.ok_or_else(|| Error::InvalidArgument("no admissible deviation samples".into()))?;
    let fit = DeviationFit {
        c_exp,
        c_pre: log_c.exp(),
        min_ratio: 1.0,
    };
    let min_ratio = deviation_ratios(samples, &fit)
        .into_iter()
        .flatten()
        .fold(f64::INFINITY, f64::min);
    Ok(DeviationFit { min_ratio, ..fit })
}

/// RHS/LHS of the deviation bound at every grid time of every sample
/// (`+∞` where the deviation vanishes).
pub fn deviation_ratios(samples: &[DeviationSample], fit: &DeviationFit) -> Vec<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            (0..s.times.len())
                .map(|i| {
                    let rhs = fit.c_pre * (fit.c_exp * s.exponent_arg[i]).exp() * s.memory_integral[i];
                    if s.deviation_sq[i] > 0.0 {
                        rhs / s.deviation_sq[i]
                    } else {
                        f64::INFINITY
                    }
                })
                .collect()
        })
        .collect()
}
