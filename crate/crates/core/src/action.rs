//! The action functional `J_T(φ) = ½∫|φ|²_{H_θ}` and minimum-action paths.
//!
//! Endpoint constraints are imposed by a quadratic penalty on the distance
//! to the target ball. Gradients come from the discrete adjoint of the
//! exponential-Euler stencil, so the optimizer and the simulator agree to
//! rounding. Controls are optimized in whitened coordinates
//! `ψ = φ·√dt / b`, in which `J_T = ½|ψ|²`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flow::{FlowConfig, Trajectory};
use crate::optim::{lbfgs, Outcome};
use crate::spectral::{bilinear_jacobian_transpose_unchecked, htheta_norm_sq, BasisSpec, NoiseSpec, SpectralField};

pub use crate::optim::OptimizerSettings;

/// Piecewise-constant control: `values[i]` acts on `[i·dt, (i+1)·dt)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    dt: f64,
    values: Vec<SpectralField>,
}

impl ControlPath {
    pub fn new(dt: f64, values: Vec<SpectralField>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return invalid(format!("dt must be positive, got {dt}"));
        }
        let Some(first) = values.first() else {
            return invalid("control path needs at least one interval");
        };
        for v in &values[1..] {
            first.check_same_basis(v)?;
        }
        Ok(ControlPath { dt, values })
    }

    pub fn zeros(basis: &Arc<BasisSpec>, dt: f64, n_steps: usize) -> Result<Self> {
        Self::new(dt, vec![SpectralField::zeros(basis); n_steps])
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn values(&self) -> &[SpectralField] {
        &self.values
    }

    pub fn into_values(self) -> Vec<SpectralField> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn basis(&self) -> &Arc<BasisSpec> {
        self.values[0].basis()
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.values.len() as f64
    }

    /// Grid `0, dt, …, T`.
    pub fn times(&self) -> Vec<f64> {
        (0..=self.values.len()).map(|i| i as f64 * self.dt).collect()
    }

    /// Prepends `n` zero intervals, extending the horizon at the start.
    pub fn padded_front(&self, n: usize) -> ControlPath {
        let mut values = vec![SpectralField::zeros(self.basis()); n];
        values.extend(self.values.iter().cloned());
        ControlPath { dt: self.dt, values }
    }

    /// CSV with a `# dt=` comment and columns `step,k1,k2,re,im`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# dt={}", self.dt)?;
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["step", "k1", "k2", "re", "im"])?;
        for (i, v) in self.values.iter().enumerate() {
            for (k, a) in v.basis().modes().iter().zip(v.amps()) {
                wtr.write_record([
                    i.to_string(),
                    k[0].to_string(),
                    k[1].to_string(),
                    a.re.to_string(),
                    a.im.to_string(),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(mut r: R, basis: &Arc<BasisSpec>) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let dt = text
            .lines()
            .filter_map(|l| l.strip_prefix("# dt="))
            .next()
            .ok_or_else(|| Error::Parse("missing `# dt=` line".into()))?
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::Parse(format!("dt: {e}")))?;
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut values: Vec<SpectralField> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<&str> {
                rec.get(i)
                    .map(str::trim)
                    .ok_or_else(|| Error::Parse(format!("short record {rec:?}")))
            };
            let step: usize = num(0)?.parse().map_err(|e| Error::Parse(format!("step: {e}")))?;
            let k1: i32 = num(1)?.parse().map_err(|e| Error::Parse(format!("k1: {e}")))?;
            let k2: i32 = num(2)?.parse().map_err(|e| Error::Parse(format!("k2: {e}")))?;
            let re: f64 = num(3)?.parse().map_err(|e| Error::Parse(format!("re: {e}")))?;
            let im: f64 = num(4)?.parse().map_err(|e| Error::Parse(format!("im: {e}")))?;
            let idx = basis
                .index_of([k1, k2])
                .ok_or_else(|| Error::Parse(format!("mode ({k1}, {k2}) not in basis")))?;
            if step > values.len() {
                return Err(Error::Parse(format!("step {step} out of order")));
            }
            if step == values.len() {
                values.push(SpectralField::zeros(basis));
            }
            values[step].amps_mut()[idx] = Complex64::new(re, im);
        }
        ControlPath::new(dt, values)
    }
}

/// `J_T(φ) = ½ Σ_i dt |φ_i|²_{H_θ}`.
pub fn path_action(phi: &ControlPath, noise: &NoiseSpec) -> f64 {
    0.5 * phi.dt * phi.values.iter().map(|v| htheta_norm_sq(v, noise)).sum::<f64>()
}

/// The unique control that reproduces `u` under the exponential-Euler
/// stencil: `φ_i = (u_{i+1} − e^{−λdt}u_i)/w − h + B(u_i, u_i)`.
pub fn recover_controls(u: &Trajectory, cfg: &FlowConfig) -> Result<ControlPath> {
    if (u.dt - cfg.dt()).abs() > 1e-12 * cfg.dt() {
        return invalid(format!("trajectory dt {} differs from flow dt {}", u.dt, cfg.dt()));
    }
    if u.len() < 2 {
        return invalid("trajectory needs at least two states");
    }
    let decay = cfg.decay_factors();
    let weight = cfg.forcing_weights();
    let h = cfg.forcing().amps();
    let mut values = Vec::with_capacity(u.len() - 1);
    for w in u.states.windows(2) {
        w[0].check_same_basis(cfg.forcing())?;
        let adv = cfg.advection(&w[0]);
        let mut phi = SpectralField::zeros(cfg.basis());
        for (i, p) in phi.amps_mut().iter_mut().enumerate() {
            *p = (w[1].amps()[i] - w[0].amps()[i] * decay[i]) / weight[i] - h[i] + adv.amps()[i];
        }
        values.push(phi);
    }
    ControlPath::new(cfg.dt(), values)
}

/// `I_T(u)`: the action of the control realizing `u` exactly.
pub fn action_of_trajectory(u: &Trajectory, cfg: &FlowConfig) -> Result<f64> {
    Ok(path_action(&recover_controls(u, cfg)?, cfg.noise()))
}

/// One row of a continuation trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Radius used in the penalty term (may be shifted inward of the
    /// requested `η` so the final endpoint lands inside the ball).
    pub eta: f64,
    pub rho: f64,
    pub horizon: f64,
    pub value: f64,
    pub terminal_gap: f64,
}

/// Steering problem: reach `B_η(target)` at time `T` from one of `starts`.
#[derive(Debug, Clone)]
pub struct ActionProblem {
    pub starts: Vec<SpectralField>,
    pub target: SpectralField,
    pub eta: f64,
    pub horizon: f64,
    pub rho: f64,
    pub settings: OptimizerSettings,
    /// Warm start; zero control otherwise.
    pub initial: Option<ControlPath>,
}

impl ActionProblem {
    pub fn new(starts: Vec<SpectralField>, target: SpectralField, eta: f64, horizon: f64) -> Self {
        ActionProblem {
            starts,
            target,
            eta,
            horizon,
            rho: 1e3,
            settings: OptimizerSettings::default(),
            initial: None,
        }
    }

    fn validate(&self, cfg: &FlowConfig) -> Result<usize> {
        if self.starts.is_empty() {
            return invalid("no start points");
        }
        if !(self.eta > 0.0) || !(self.horizon > 0.0) || !(self.rho > 0.0) {
            return invalid("eta, horizon and rho must be positive");
        }
        self.target.check_same_basis(cfg.forcing())?;
        for s in &self.starts {
            s.check_same_basis(cfg.forcing())?;
        }
        n_steps(self.horizon, cfg.dt())
    }
}

fn n_steps(horizon: f64, dt: f64) -> Result<usize> {
    let n = (horizon / dt).round();
    if n < 1.0 {
        return invalid(format!("horizon {horizon} shorter than one step {dt}"));
    }
    Ok(n as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionResult {
    /// Achieved `J_T` (penalty excluded).
    pub value: f64,
    pub control: ControlPath,
    pub start: SpectralField,
    pub start_index: usize,
    pub terminal_gap: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub message: String,
    pub continuation_trace: Vec<TraceEntry>,
    /// Worst relative disagreement between adjoint and central-difference
    /// directional derivatives, when requested.
    pub gradient_check: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ResultDoc {
    value: f64,
    terminal_gap: f64,
    converged: bool,
    iterations: usize,
    grad_norm: f64,
    message: String,
    start_index: usize,
    horizon: f64,
    dt: f64,
    gradient_check: Option<f64>,
    trace: Vec<TraceEntry>,
}

impl ActionResult {
    /// Writes `<stem>.toml`, `<stem>_control.csv` and `<stem>_start.csv`
    /// into `dir`; returns the paths.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let doc = ResultDoc {
            value: self.value,
            terminal_gap: self.terminal_gap,
            converged: self.converged,
            iterations: self.iterations,
            grad_norm: self.grad_norm,
            message: self.message.clone(),
            start_index: self.start_index,
            horizon: self.control.horizon(),
            dt: self.control.dt(),
            gradient_check: self.gradient_check,
            trace: self.continuation_trace.clone(),
        };
        let toml_path = dir.join(format!("{stem}.toml"));
        let text = toml::to_string(&doc).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(&toml_path, text)?;
        let ctrl = dir.join(format!("{stem}_control.csv"));
        self.control.write_csv(fs::File::create(&ctrl)?)?;
        let start = dir.join(format!("{stem}_start.csv"));
        self.start.write_csv(fs::File::create(&start)?)?;
        Ok(vec![toml_path, ctrl, start])
    }
}

/// Endpoint penalty.
#[derive(Debug, Clone)]
enum Terminal<'a> {
    /// `ρ·max(0, ‖u−target‖ − η)²`
    Reach {
        target: &'a SpectralField,
        eta: f64,
        rho: f64,
    },
    /// `ρ·max(0, η − dist(u, set))²`
    Exit {
        set: &'a [SpectralField],
        eta: f64,
        rho: f64,
    },
}

impl Terminal<'_> {
    /// Penalty, its gradient and the distance it is built on.
    fn eval(&self, u: &SpectralField) -> (f64, SpectralField, f64) {
        match *self {
            Terminal::Reach { target, eta, rho } => {
                let diff = u.sub(target);
                let d = diff.norm();
                if d > eta {
                    let pen = rho * (d - eta).powi(2);
                    (pen, diff.scaled(2.0 * rho * (d - eta) / d), d)
                } else {
                    (0.0, SpectralField::zeros(u.basis()), d)
                }
            }
            Terminal::Exit { set, eta, rho } => {
                let (j, d) = nearest(set, u);
                if d < eta {
                    let pen = rho * (eta - d).powi(2);
                    let g = if d > 0.0 {
                        u.sub(&set[j]).scaled(-2.0 * rho * (eta - d) / d)
                    } else {
                        SpectralField::zeros(u.basis())
                    };
                    (pen, g, d)
                } else {
                    (0.0, SpectralField::zeros(u.basis()), d)
                }
            }
        }
    }
}

fn nearest(set: &[SpectralField], u: &SpectralField) -> (usize, f64) {
    set.iter()
        .enumerate()
        .map(|(j, a)| (j, a.distance(u)))
        .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc })
}

/// How the initial state enters the optimization.
#[derive(Debug, Clone, Copy)]
enum Start<'a> {
    Fixed(&'a SpectralField),
    /// Free in the ball of radius `R` around `centre`, parametrized as
    /// `centre + R·tanh(|z|)/|z|·z`.
    Ball {
        centre: &'a SpectralField,
        radius: f64,
    },
}

fn ball_map(z: &SpectralField, radius: f64) -> (f64, f64) {
    // returns g(s) and g'(s)/s for u = g(|z|) z
    let s = z.norm();
    if s < 1e-6 {
        let g = radius * (1.0 - s * s / 3.0);
        (g, -2.0 * radius / 3.0)
    } else {
        let t = s.tanh();
        let g = radius * t / s;
        let dg = radius * ((1.0 - t * t) * s - t) / (s * s);
        (g, dg / s)
    }
}

/// Discretized objective over `x = [z (if free start)] ++ [ψ_0, …, ψ_{N−1}]`,
/// each block laid out as `re, im` per mode.
struct Objective<'a> {
    cfg: &'a FlowConfig,
    start: Start<'a>,
    terminal: Terminal<'a>,
    n_steps: usize,
    /// `b/√dt` per mode: `φ = scale·ψ`.
    scale: Vec<f64>,
}

struct Evaluation {
    objective: f64,
    action: f64,
    distance: f64,
    grad: Vec<f64>,
}

impl<'a> Objective<'a> {
    fn new(cfg: &'a FlowConfig, start: Start<'a>, terminal: Terminal<'a>, n_steps: usize) -> Self {
        let sdt = cfg.dt().sqrt();
        let scale = cfg.noise().weights().iter().map(|b| b / sdt).collect();
        Objective {
            cfg,
            start,
            terminal,
            n_steps,
            scale,
        }
    }

    fn m(&self) -> usize {
        self.scale.len()
    }

    fn offset(&self) -> usize {
        match self.start {
            Start::Fixed(_) => 0,
            Start::Ball { .. } => 2 * self.m(),
        }
    }

    fn dim(&self) -> usize {
        self.offset() + 2 * self.m() * self.n_steps
    }

    fn block_field(&self, x: &[f64], scaled: bool) -> SpectralField {
        let mut f = SpectralField::zeros(self.cfg.basis());
        for (i, a) in f.amps_mut().iter_mut().enumerate() {
            let s = if scaled { self.scale[i] } else { 1.0 };
            *a = Complex64::new(s * x[2 * i], s * x[2 * i + 1]);
        }
        f
    }

    fn initial_state(&self, x: &[f64]) -> SpectralField {
        match self.start {
            Start::Fixed(u) => u.clone(),
            Start::Ball { centre, radius } => {
                let z = self.block_field(&x[..2 * self.m()], false);
                let (g, _) = ball_map(&z, radius);
                centre.add_scaled(&z, g)
            }
        }
    }

    fn control(&self, x: &[f64]) -> Result<ControlPath> {
        let o = self.offset();
        let bs = 2 * self.m();
        let values = (0..self.n_steps)
            .map(|i| self.block_field(&x[o + i * bs..o + (i + 1) * bs], true))
            .collect();
        ControlPath::new(self.cfg.dt(), values)
    }

    fn encode_control(&self, phi: &ControlPath, x: &mut [f64]) {
        let o = self.offset();
        let bs = 2 * self.m();
        for (i, v) in phi.values().iter().enumerate().take(self.n_steps) {
            for (j, a) in v.amps().iter().enumerate() {
                x[o + i * bs + 2 * j] = a.re / self.scale[j];
                x[o + i * bs + 2 * j + 1] = a.im / self.scale[j];
            }
        }
    }

    fn eval(&self, x: &[f64]) -> Result<Evaluation> {
        let cfg = self.cfg;
        let m = self.m();
        let bs = 2 * m;
        let o = self.offset();
        let decay = cfg.decay_factors();
        let weight = cfg.forcing_weights();
        let h = cfg.forcing().amps();

        let mut states = Vec::with_capacity(self.n_steps + 1);
        states.push(self.initial_state(x));
        let mut action = 0.0;
        for n in 0..self.n_steps {
            let psi = &x[o + n * bs..o + (n + 1) * bs];
            action += 0.5 * psi.iter().map(|v| v * v).sum::<f64>();
            let u = &states[n];
            let adv = cfg.advection(u);
            let mut next = SpectralField::zeros(cfg.basis());
            for (i, a) in next.amps_mut().iter_mut().enumerate() {
                let phi = Complex64::new(psi[2 * i], psi[2 * i + 1]) * self.scale[i];
                *a = u.amps()[i] * decay[i] + (h[i] + phi - adv.amps()[i]) * weight[i];
            }
            if !next.is_finite() || next.max_abs() > crate::flow::BLOWUP_THRESHOLD {
                return Err(Error::Blowup {
                    step: n + 1,
                    time: (n + 1) as f64 * cfg.dt(),
                    detail: "controlled path diverged".into(),
                });
            }
            states.push(next);
        }
        let (pen, mut p, distance) = self.terminal.eval(&states[self.n_steps]);

        let mut grad = vec![0.0; self.dim()];
        for n in (0..self.n_steps).rev() {
            let mut wp = p.clone();
            for (i, a) in wp.amps_mut().iter_mut().enumerate() {
                *a *= weight[i];
            }
            let g = &mut grad[o + n * bs..o + (n + 1) * bs];
            let psi = &x[o + n * bs..o + (n + 1) * bs];
            for (i, a) in wp.amps().iter().enumerate() {
                g[2 * i] = psi[2 * i] + self.scale[i] * a.re;
                g[2 * i + 1] = psi[2 * i + 1] + self.scale[i] * a.im;
            }
            let mut prev = p.clone();
            for (i, a) in prev.amps_mut().iter_mut().enumerate() {
                *a *= decay[i];
            }
            if cfg.is_nonlinear() {
                let jt = bilinear_jacobian_transpose_unchecked(&states[n], &wp);
                prev = prev.add_scaled(&jt, -1.0);
            }
            p = prev;
        }
        if let Start::Ball { radius, .. } = self.start {
            // u0 = centre + g(s) z: ∇_z = g p + (g'(s)/s)(z·p) z
            let z = self.block_field(&x[..bs], false);
            let (gv, dgs) = ball_map(&z, radius);
            let gz = p.scaled(gv).add_scaled(&z, dgs * z.dot(&p));
            for (i, a) in gz.amps().iter().enumerate() {
                grad[2 * i] = a.re;
                grad[2 * i + 1] = a.im;
            }
        }
        Ok(Evaluation {
            objective: action + pen,
            action,
            distance,
            grad,
        })
    }

    fn optimize(&self, x0: Vec<f64>, settings: &OptimizerSettings) -> Result<Outcome> {
        lbfgs(|x| self.eval(x).map(|e| (e.objective, e.grad)), x0, settings)
    }

    /// Worst relative error of adjoint directional derivatives against
    /// central differences along `n_dirs` random directions.
    fn directional_check(&self, x: &[f64], n_dirs: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = self.eval(x)?;
        let mut worst: f64 = 0.0;
        for _ in 0..n_dirs {
            let d: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let dn = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            let h = 1e-5 * (1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt()) / dn;
            let shifted = |s: f64| -> Vec<f64> { x.iter().zip(&d).map(|(a, b)| a + s * b).collect() };
            let fp = self.eval(&shifted(h))?.objective;
            let fm = self.eval(&shifted(-h))?.objective;
            let fd = (fp - fm) / (2.0 * h);
            let ad: f64 = base.grad.iter().zip(&d).map(|(a, b)| a * b).sum();
            worst = worst.max((fd - ad).abs() / ad.abs().max(fd.abs()).max(1e-12));
        }
        Ok(worst)
    }
}

/// Relative error `‖g_adj − g_fd‖/‖g_fd‖` of the adjoint gradient of the
/// penalized reach objective against full central differences, at the
/// control `phi` from `start`. Intended for small instances.
pub fn adjoint_gradient_error(
    cfg: &FlowConfig,
    start: &SpectralField,
    target: &SpectralField,
    eta: f64,
    rho: f64,
    phi: &ControlPath,
) -> Result<f64> {
    let obj = Objective::new(
        cfg,
        Start::Fixed(start),
        Terminal::Reach { target, eta, rho },
        phi.len(),
    );
    let mut x = vec![0.0; obj.dim()];
    obj.encode_control(phi, &mut x);
    let adj = obj.eval(&x)?.grad;
    let mut num = 0.0;
    let mut den = 0.0;
    for j in 0..x.len() {
        let h = 1e-6 * (1.0 + x[j].abs());
        let mut xp = x.clone();
        xp[j] += h;
        let mut xm = x.clone();
        xm[j] -= h;
        let fd = (obj.eval(&xp)?.objective - obj.eval(&xm)?.objective) / (2.0 * h);
        num += (fd - adj[j]).powi(2);
        den += fd * fd;
    }
    Ok((num / den.max(1e-300)).sqrt())
}

/// Penalized minimum-action steering with the penalty radius shifted
/// inward until the endpoint lands in `B_η(target)`; multi-start over
/// `p.starts`, reduced to the smallest action (ties by start index).
pub fn minimize_action(p: &ActionProblem, cfg: &FlowConfig) -> Result<ActionResult> {
    let n = p.validate(cfg)?;
    if let Some(init) = &p.initial {
        init.values()[0].check_same_basis(cfg.forcing())?;
    }

    // V_A vanishes when the target ball already contains a start point.
    let (j, d) = nearest(&p.starts, &p.target);
    if d < p.eta {
        return Ok(ActionResult {
            value: 0.0,
            control: ControlPath::zeros(cfg.basis(), cfg.dt(), n)?,
            start: p.starts[j].clone(),
            start_index: j,
            terminal_gap: d,
            converged: true,
            iterations: 0,
            grad_norm: 0.0,
            message: "target ball contains a start point".into(),
            continuation_trace: vec![TraceEntry {
                eta: p.eta,
                rho: p.rho,
                horizon: n as f64 * cfg.dt(),
                value: 0.0,
                terminal_gap: d,
            }],
            gradient_check: None,
        });
    }

    let runs: Vec<Result<ActionResult>> = p
        .starts
        .par_iter()
        .enumerate()
        .map(|(i, s)| reach_from(p, cfg, s, i, n))
        .collect();
    pick_best(runs)
}

fn pick_best(runs: Vec<Result<ActionResult>>) -> Result<ActionResult> {
    let mut best: Option<ActionResult> = None;
    let mut first_err = None;
    for r in runs {
        match r {
            Ok(r) => {
                let better = match &best {
                    None => true,
                    Some(b) => (r.converged && !b.converged) || (r.converged == b.converged && r.value < b.value),
                };
                if better {
                    best = Some(r);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match (best, first_err) {
        (Some(b), _) => Ok(b),
        (None, Some(e)) => Err(e),
        (None, None) => invalid("no runs"),
    }
}

fn reach_from(
    p: &ActionProblem,
    cfg: &FlowConfig,
    start: &SpectralField,
    index: usize,
    n: usize,
) -> Result<ActionResult> {
    let mut eta_pen = p.eta;
    let mut rho = p.rho;
    let mut trace = Vec::new();
    let mut x = {
        let obj = Objective::new(
            cfg,
            Start::Fixed(start),
            Terminal::Reach {
                target: &p.target,
                eta: eta_pen,
                rho,
            },
            n,
        );
        let mut x = vec![0.0; obj.dim()];
        if let Some(init) = &p.initial {
            let shift = n.saturating_sub(init.len());
            obj.encode_control(&init.padded_front(shift), &mut x);
        }
        x
    };
    let mut gradient_check = None;
    let mut out;
    let mut iterations = 0;
    let mut round = 0;
    loop {
        let obj = Objective::new(
            cfg,
            Start::Fixed(start),
            Terminal::Reach {
                target: &p.target,
                eta: eta_pen,
                rho,
            },
            n,
        );
        if p.settings.gradient_check && gradient_check.is_none() {
            gradient_check = Some(obj.directional_check(&x, 3, index as u64)?);
        }
        out = obj.optimize(x, &p.settings)?;
        iterations += out.iterations;
        x = out.x.clone();
        let ev = obj.eval(&x)?;
        trace.push(TraceEntry {
            eta: eta_pen,
            rho,
            horizon: n as f64 * cfg.dt(),
            value: ev.action,
            terminal_gap: ev.distance,
        });
        round += 1;
        let excess = ev.distance - p.eta;
        if excess <= 0.0 || round >= 12 || !out.converged {
            return Ok(ActionResult {
                value: ev.action,
                control: obj.control(&x)?,
                start: start.clone(),
                start_index: index,
                terminal_gap: ev.distance,
                converged: out.converged && excess <= 0.0,
                iterations,
                grad_norm: out.grad_norm,
                message: if out.converged && excess > 0.0 {
                    format!("endpoint outside target ball by {excess:e}")
                } else {
                    out.message
                },
                continuation_trace: trace,
                gradient_check,
            });
        }
        let shifted = eta_pen - 2.0 * excess - 1e-12 * p.eta;
        if shifted > 0.0 {
            eta_pen = shifted;
        } else {
            eta_pen = 0.0;
            rho *= 10.0;
        }
    }
}

/// One stage of a quasipotential continuation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub eta: f64,
    pub rho: f64,
    pub horizon: f64,
}

#[derive(Debug, Clone)]
pub struct QuasipotentialEstimate {
    /// Result of the final stage.
    pub result: ActionResult,
    /// Final value per stage, in schedule order.
    pub stages: Vec<TraceEntry>,
    /// Monotonicity violations (value growing with `T` at fixed `η`, or
    /// shrinking as `η` decreases at fixed `T`), read as optimizer failures.
    pub violations: Vec<String>,
    /// Whether the last two stages agree to 1%, i.e. the final value is a
    /// settled estimate rather than an extrapolation.
    pub settled: bool,
}

/// Relative slack allowed before a monotonicity violation is reported.
const MONOTONE_TOL: f64 = 1e-3;

/// `V_A(target)` by continuation over `schedule`, warm-starting each stage
/// from the previous control (zero-padded at the start when `T` grows).
pub fn quasipotential(
    target: &SpectralField,
    attractor: &[SpectralField],
    schedule: &[Stage],
    settings: &OptimizerSettings,
    cfg: &FlowConfig,
) -> Result<QuasipotentialEstimate> {
    if schedule.is_empty() {
        return invalid("empty continuation schedule");
    }
    let mut stages: Vec<TraceEntry> = Vec::new();
    let mut violations = Vec::new();
    let mut prev: Option<ActionResult> = None;
    for (k, st) in schedule.iter().enumerate() {
        let mut p = ActionProblem::new(attractor.to_vec(), target.clone(), st.eta, st.horizon);
        p.rho = st.rho;
        p.settings = *settings;
        if let Some(r) = &prev {
            p.starts = vec![r.start.clone()];
            p.initial = Some(r.control.clone());
        }
        let mut r = minimize_action(&p, cfg)?;
        if let Some(pr) = &prev {
            r.start_index = pr.start_index;
        }
        let entry = TraceEntry {
            eta: st.eta,
            rho: st.rho,
            horizon: st.horizon,
            value: r.value,
            terminal_gap: r.terminal_gap,
        };
        if let Some(last) = stages.last() {
            let same_eta = (last.eta - entry.eta).abs() <= 1e-15 * last.eta;
            let same_t = (last.horizon - entry.horizon).abs() <= 1e-12 * last.horizon;
            let tol = MONOTONE_TOL * last.value.abs().max(1e-12);
            if same_eta && entry.horizon > last.horizon && entry.value > last.value + tol {
                violations.push(format!(
                    "stage {k}: value rose from {} to {} as T grew",
                    last.value, entry.value
                ));
            }
            if same_t && entry.eta < last.eta && entry.value < last.value - tol {
                violations.push(format!(
                    "stage {k}: value fell from {} to {} as eta shrank",
                    last.value, entry.value
                ));
            }
        }
        if !r.converged {
            violations.push(format!("stage {k}: {}", r.message));
        }
        stages.push(entry);
        prev = Some(r);
    }
    let settled = match stages.as_slice() {
        [.., a, b] => (a.value - b.value).abs() <= 0.01 * b.value.abs().max(1e-12),
        _ => false,
    };
    Ok(QuasipotentialEstimate {
        result: prev.expect("schedule is nonempty"),
        stages,
        violations,
        settled,
    })
}

/// The final stage of `schedule` re-solved at twice its horizon.
/// Returns `(V_T, V_2T, relative difference)`.
pub fn horizon_doubling(
    estimate: &QuasipotentialEstimate,
    target: &SpectralField,
    schedule: &[Stage],
    settings: &OptimizerSettings,
    cfg: &FlowConfig,
) -> Result<(f64, f64, f64)> {
    let st = schedule
        .last()
        .ok_or_else(|| Error::InvalidArgument("empty schedule".into()))?;
    let mut p = ActionProblem::new(
        vec![estimate.result.start.clone()],
        target.clone(),
        st.eta,
        2.0 * st.horizon,
    );
    p.rho = st.rho;
    p.settings = *settings;
    p.initial = Some(estimate.result.control.clone());
    let r = minimize_action(&p, cfg)?;
    let v = estimate.result.value;
    Ok((v, r.value, (r.value - v).abs() / v.abs().max(1e-300)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitSettings {
    pub rho: f64,
    pub n_starts: usize,
    pub seed: u64,
    /// Values at or below this are flagged degenerate.
    pub degenerate_below: f64,
}

impl Default for ExitSettings {
    fn default() -> Self {
        ExitSettings {
            rho: 1e3,
            n_starts: 4,
            seed: 0,
            degenerate_below: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExitAction {
    /// Estimated constant `a`.
    pub value: f64,
    pub degenerate: bool,
    pub result: ActionResult,
}

/// `a = inf{J_T(φ) : |u(0)| ≤ R, dist(S^φ(T)u(0), 𝒜) ≥ η}`, with the start
/// free in `B_R` (centred at the origin) and multi-started along random
/// directions.
pub fn min_exit_action(
    radius: f64,
    eta: f64,
    horizon: f64,
    attractor: &[SpectralField],
    exit: &ExitSettings,
    settings: &OptimizerSettings,
    cfg: &FlowConfig,
) -> Result<ExitAction> {
    if !(radius > 0.0 && eta > 0.0 && horizon > 0.0) {
        return invalid("R, eta and T must be positive");
    }
    if attractor.is_empty() {
        return invalid("empty attractor approximation");
    }
    for a in attractor {
        a.check_same_basis(cfg.forcing())?;
    }
    let n = n_steps(horizon, cfg.dt())?;
    let origin = SpectralField::zeros(cfg.basis());
    let mut rng = ChaCha8Rng::seed_from_u64(exit.seed);
    let dirs: Vec<SpectralField> = (0..exit.n_starts.max(1))
        .map(|_| {
            let z = SpectralField::random(cfg.basis(), 1.0, &mut rng);
            z.scaled(1.0 / z.norm())
        })
        .collect();
    let runs: Vec<Result<ActionResult>> = dirs
        .par_iter()
        .enumerate()
        .map(|(i, z)| exit_from(cfg, &origin, radius, eta, attractor, exit.rho, z, i, n, settings))
        .collect();
    let best = pick_best(runs)?;
    Ok(ExitAction {
        value: best.value,
        degenerate: best.value <= exit.degenerate_below,
        result: best,
    })
}

#[allow(clippy::too_many_arguments)]
fn exit_from(
    cfg: &FlowConfig,
    centre: &SpectralField,
    radius: f64,
    eta: f64,
    set: &[SpectralField],
    rho0: f64,
    dir: &SpectralField,
    index: usize,
    n: usize,
    settings: &OptimizerSettings,
) -> Result<ActionResult> {
    let mut eta_pen = eta;
    let mut rho = rho0;
    let mut trace = Vec::new();
    let mut iterations = 0;
    // start on the sphere of radius 0.9 R: tanh(s) = 0.9
    let s0 = 0.9f64.atanh();
    let mut x = {
        let obj = Objective::new(
            cfg,
            Start::Ball { centre, radius },
            Terminal::Exit { set, eta: eta_pen, rho },
            n,
        );
        let mut x = vec![0.0; obj.dim()];
        for (i, a) in dir.amps().iter().enumerate() {
            x[2 * i] = s0 * a.re;
            x[2 * i + 1] = s0 * a.im;
        }
        x
    };
    for round in 0.. {
        let obj = Objective::new(
            cfg,
            Start::Ball { centre, radius },
            Terminal::Exit { set, eta: eta_pen, rho },
            n,
        );
        let out = obj.optimize(x, settings)?;
        iterations += out.iterations;
        x = out.x;
        let ev = obj.eval(&x)?;
        trace.push(TraceEntry {
            eta: eta_pen,
            rho,
            horizon: n as f64 * cfg.dt(),
            value: ev.action,
            terminal_gap: ev.distance,
        });
        let deficit = eta - ev.distance;
        if deficit <= 0.0 || round >= 11 || !out.converged {
            return Ok(ActionResult {
                value: ev.action,
                control: obj.control(&x)?,
                start: obj.initial_state(&x),
                start_index: index,
                terminal_gap: ev.distance,
                converged: out.converged && deficit <= 0.0,
                iterations,
                grad_norm: out.grad_norm,
                message: if out.converged && deficit > 0.0 {
                    format!("endpoint inside the eta-neighbourhood by {deficit:e}")
                } else {
                    out.message
                },
                continuation_trace: trace,
                gradient_check: None,
            });
        }
        eta_pen += 2.0 * deficit + 1e-12 * eta;
        if round % 4 == 3 {
            rho *= 10.0;
        }
    }
    unreachable!("the continuation loop returns")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::integrate_controlled;
    use crate::presets;

    fn small_cfg(nonlinear: bool) -> FlowConfig {
        let b = BasisSpec::new(1).unwrap();
        let noise = NoiseSpec::power_law(&b, 1.0, 3.0).unwrap();
        let mut h = SpectralField::zeros(&b);
        h.amps_mut()[0] = Complex64::new(0.7, 0.2);
        let cfg = FlowConfig::new(0.05, h, noise, 0.0, 0).unwrap();
        if nonlinear {
            cfg
        } else {
            cfg.linear()
        }
    }

    #[test]
    fn action_of_constant_unit_control() {
        let cfg = small_cfg(false);
        let b = cfg.basis();
        let e = SpectralField::unit(b, [1, 1]).unwrap();
        let phi = ControlPath::new(0.1, vec![e; 30]).unwrap();
        let bj = cfg.noise().weights()[b.index_of([1, 1]).unwrap()];
        assert!((path_action(&phi, cfg.noise()) - 3.0 / (2.0 * bj * bj)).abs() < 1e-12);
        assert_eq!(path_action(&ControlPath::zeros(b, 0.1, 5).unwrap(), cfg.noise()), 0.0);
    }

    #[test]
    fn recovered_controls_round_trip() {
        let cfg = small_cfg(true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u0 = SpectralField::random(cfg.basis(), 1.0, &mut rng);
        let phi: Vec<_> = (0..40)
            .map(|_| SpectralField::random(cfg.basis(), 0.5, &mut rng))
            .collect();
        let traj = integrate_controlled(&u0, &cfg, &phi).unwrap();
        let rec = recover_controls(&traj, &cfg).unwrap();
        for (a, b) in rec.values().iter().zip(&phi) {
            assert!(a.distance(b) < 1e-10 * (1.0 + b.norm()));
        }
        let wrong = cfg.clone().with_dt(0.01).unwrap();
        assert!(action_of_trajectory(&traj, &wrong).is_err());
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        for nonlinear in [false, true] {
            let cfg = small_cfg(nonlinear);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let u0 = SpectralField::random(cfg.basis(), 1.0, &mut rng);
            let target = SpectralField::random(cfg.basis(), 2.0, &mut rng);
            let phi = ControlPath::new(
                cfg.dt(),
                (0..5)
                    .map(|_| SpectralField::random(cfg.basis(), 1.0, &mut rng))
                    .collect(),
            )
            .unwrap();
            let err = adjoint_gradient_error(&cfg, &u0, &target, 0.1, 10.0, &phi).unwrap();
            assert!(err < 1e-6, "nonlinear={nonlinear}: {err}");
        }
    }

    #[test]
    fn ball_start_gradient() {
        let cfg = small_cfg(true);
        let origin = SpectralField::zeros(cfg.basis());
        let set = [SpectralField::zeros(cfg.basis())];
        let obj = Objective::new(
            &cfg,
            Start::Ball {
                centre: &origin,
                radius: 2.0,
            },
            Terminal::Exit {
                set: &set,
                eta: 5.0,
                rho: 3.0,
            },
            6,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..obj.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
        assert!(obj.directional_check(&x, 5, 1).unwrap() < 1e-6);
    }

    #[test]
    fn zero_action_when_target_is_a_start() {
        let cfg = presets::default_flow(0.0, 0).unwrap();
        let u = SpectralField::random(cfg.basis(), 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let p = ActionProblem::new(vec![u.clone()], u.clone(), 0.1, 1.0);
        let r = minimize_action(&p, &cfg).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.converged);
    }

    #[test]
    fn control_csv_round_trip() {
        let cfg = small_cfg(false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let phi = ControlPath::new(
            0.25,
            (0..3)
                .map(|_| SpectralField::random(cfg.basis(), 1.0, &mut rng))
                .collect(),
        )
        .unwrap();
        let mut buf = Vec::new();
        phi.write_csv(&mut buf).unwrap();
        let back = ControlPath::read_csv(buf.as_slice(), cfg.basis()).unwrap();
        assert_eq!(back, phi);
    }
}
