//! Batch front end: typed configuration with `--set` overrides, the
//! subcommands, run manifests with content digests, and exit codes.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 assertion failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::{self, ExitSettings, OptimizerSettings, Stage};
use crate::attractor::{approximate_omega_set, entry_time, stochastic_hitting_tail, AttractorSet};
use crate::error::{Error, Result};
use crate::flow::{integrate_controlled, integrate_coupled, CouplingConfig, StochasticFlow};
use crate::measure::{
    attracting_decay, lower_bound_check, sample_sweep, stationarity_check, tightness_profile, tube_probability,
    EmpiricalMeasure, SamplerSettings,
};
use crate::reconstruct::{nse_lambda_estimator, FiniteChain, LambdaSettings};
use crate::spectral::{bilinear, BasisSpec, NoiseSpec, SpectralField, Wavevector};
use crate::{presets, stats, FlowConfig, Trajectory};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_ASSERTION: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "nsldp",
    version,
    about = "Small-noise diagnostics for Galerkin-truncated stochastic 2D Navier-Stokes"
)]
pub struct Cli {
    /// TOML configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set flow.dt=0.01` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Worker threads; 0 lets the pool decide.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Only warnings and errors on the terminal.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Integrate one trajectory and write its observables.
    Simulate,
    /// Approximate the ω-limit set and tabulate stochastic hitting times.
    Attractor,
    /// Quasipotential of the configured target by continuation.
    Quasipotential,
    /// Minimal action to leave the η-neighbourhood of the attractor.
    ExitAction,
    /// Sample the stationary measures of the ε sweep.
    Stationary,
    /// Decay fits: attracting neighbourhoods, tightness, tubes, lower bound.
    Decay,
    /// Reconstruction functional on a finite chain or the flow.
    Reconstruct,
    /// Fast property suite on small instances.
    Selftest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Attractor => "attractor",
            Command::Quasipotential => "quasipotential",
            Command::ExitAction => "exit-action",
            Command::Stationary => "stationary",
            Command::Decay => "decay",
            Command::Reconstruct => "reconstruct",
            Command::Selftest => "selftest",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub threads: usize,
    pub basis: BasisSection,
    pub noise: NoiseSection,
    pub flow: FlowSection,
    pub simulate: SimulateSection,
    pub attractor: AttractorSection,
    pub action: ActionSection,
    pub measure: MeasureSection,
    pub reconstruct: ReconstructSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasisSection {
    pub cutoff: i64,
    /// Explicit representative wavevectors; overrides `cutoff` when set.
    pub modes: Vec<Wavevector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub b0: f64,
    pub decay: f64,
    /// Explicit weights in basis order; overrides the power law when set.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForcingKind {
    Default,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    pub dt: f64,
    pub epsilon: f64,
    pub nonlinear: bool,
    pub forcing: ForcingKind,
    pub forcing_amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartKind {
    Rest,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub horizon: f64,
    pub stochastic: bool,
    pub start: StartKind,
    pub start_scale: f64,
    /// Steps between recorded states.
    pub every: usize,
    pub snapshots: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttractorSection {
    /// Directory written by a previous `attractor` run; computed when empty.
    pub input: String,
    pub ensemble: usize,
    pub scale: f64,
    pub transient: f64,
    pub collect: f64,
    pub sample_dt: f64,
    pub cluster_tol: f64,
    pub eta: f64,
    pub hitting: bool,
    pub hitting_eps: Vec<f64>,
    pub hitting_samples: usize,
    /// Tail times as multiples of the deterministic entry time.
    pub hitting_multiples: Vec<f64>,
    /// Distance of the hitting-time start from the first attractor point.
    pub start_distance: f64,
    pub t_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionSection {
    /// Time step of the control problems; the flow step when 0.
    pub dt: f64,
    pub target_mode: Wavevector,
    /// Target is the first attractor point plus this multiple of the mode.
    pub target_amplitude: f64,
    pub stage_eta: Vec<f64>,
    pub stage_horizon: Vec<f64>,
    pub rho: f64,
    pub exit_radius: f64,
    pub exit_eta: f64,
    pub exit_horizon: f64,
    pub exit_starts: usize,
    pub optimizer: OptimizerSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainStart {
    Rest,
    Attractor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasureSection {
    pub eps: Vec<f64>,
    pub horizon: f64,
    pub stride: usize,
    pub chains: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<f64>,
    pub start: ChainStart,
    pub eta: f64,
    /// Tightness radii; profile skipped when empty.
    pub radii: Vec<f64>,
    pub tube: bool,
    pub tube_mode: Wavevector,
    /// Constant control amplitude along `tube_mode` generating the reference.
    pub tube_amplitude: f64,
    pub tube_radius: f64,
    pub tube_horizon: f64,
    pub tube_samples: usize,
    pub lower_bound: bool,
    pub lb_mode: Wavevector,
    pub lb_amplitude: f64,
    pub lb_delta: f64,
    pub lb_delta_prime: f64,
    /// Quasipotential of the target; computed by continuation when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lb_quasipotential: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconstructMode {
    Chain,
    Nse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructSection {
    pub mode: ReconstructMode,
    /// Chain in the text format of [`FiniteChain::parse`]; random when empty.
    pub chain_file: String,
    pub states: usize,
    pub random_chains: usize,
    /// Per-state stopping times are drawn from `0..=tau_max`.
    pub tau_max: usize,
    /// One stopping time shared by all states of a random chain.
    pub constant_tau: bool,
    pub delta: usize,
    pub shifts: Vec<usize>,
    pub mixing_times: Vec<usize>,
    pub lambda: LambdaSettings,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            threads: 0,
            basis: BasisSection {
                cutoff: presets::DEFAULT_CUTOFF,
                modes: Vec::new(),
            },
            noise: NoiseSection {
                b0: presets::DEFAULT_B0,
                decay: presets::DEFAULT_DECAY,
                weights: Vec::new(),
            },
            flow: FlowSection {
                dt: presets::DEFAULT_DT,
                epsilon: 0.05,
                nonlinear: true,
                forcing: ForcingKind::Default,
                forcing_amplitude: presets::DEFAULT_FORCING_AMPLITUDE,
            },
            simulate: SimulateSection::default(),
            attractor: AttractorSection::default(),
            action: ActionSection::default(),
            measure: MeasureSection::default(),
            reconstruct: ReconstructSection::default(),
        }
    }
}

impl Default for BasisSection {
    fn default() -> Self {
        Config::default().basis
    }
}

impl Default for NoiseSection {
    fn default() -> Self {
        Config::default().noise
    }
}

impl Default for FlowSection {
    fn default() -> Self {
        Config::default().flow
    }
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            horizon: 10.0,
            stochastic: true,
            start: StartKind::Rest,
            start_scale: 1.0,
            every: 100,
            snapshots: false,
        }
    }
}

impl Default for AttractorSection {
    fn default() -> Self {
        AttractorSection {
            input: String::new(),
            ensemble: 6,
            scale: 3.0,
            transient: 30.0,
            collect: 10.0,
            sample_dt: 0.5,
            cluster_tol: 0.05,
            eta: 0.13,
            hitting: true,
            hitting_eps: vec![0.1, 0.05, 0.02],
            hitting_samples: 200,
            hitting_multiples: vec![1.0, 3.0],
            start_distance: 3.0,
            t_max: 50.0,
        }
    }
}

impl Default for ActionSection {
    fn default() -> Self {
        ActionSection {
            dt: 0.01,
            target_mode: [1, 0],
            target_amplitude: 0.3,
            stage_eta: vec![0.02, 0.01, 0.005],
            stage_horizon: vec![2.0, 2.0, 2.0],
            rho: 1e3,
            exit_radius: 1.0,
            exit_eta: 0.2,
            exit_horizon: 6.0,
            exit_starts: 2,
            optimizer: OptimizerSettings::default(),
        }
    }
}

impl Default for MeasureSection {
    fn default() -> Self {
        MeasureSection {
            eps: vec![0.1, 0.05, 0.02],
            horizon: 500.0,
            stride: 20,
            chains: 4,
            burn_in: Some(10.0),
            start: ChainStart::Attractor,
            eta: 0.3,
            radii: vec![5.3, 5.6, 6.0],
            tube: false,
            tube_mode: [1, 0],
            tube_amplitude: 2.5,
            tube_radius: 1.0,
            tube_horizon: 1.0,
            tube_samples: 2000,
            lower_bound: false,
            lb_mode: [1, 0],
            lb_amplitude: 1.0,
            lb_delta: 0.1,
            lb_delta_prime: 0.0,
            lb_quasipotential: None,
        }
    }
}

impl Default for ReconstructSection {
    fn default() -> Self {
        ReconstructSection {
            mode: ReconstructMode::Chain,
            chain_file: String::new(),
            states: 6,
            random_chains: 100,
            tau_max: 4,
            constant_tau: true,
            delta: 3,
            shifts: vec![1, 2, 5],
            mixing_times: vec![1, 2, 4, 8, 16],
            lambda: LambdaSettings::default(),
        }
    }
}

fn config_err<T>(key: &str, msg: impl Into<String>) -> Result<T> {
    Err(Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    })
}

/// Dotted key of the assignment at byte `offset` of a TOML document.
fn key_at(text: &str, offset: usize) -> String {
    let head = &text[..offset.min(text.len())];
    let line_start = head.rfind('\n').map_or(0, |i| i + 1);
    let line = text[line_start..].lines().next().unwrap_or("");
    let key = line
        .split('=')
        .next()
        .unwrap_or("")
        .trim()
        .trim_matches(['[', ']'])
        .trim();
    let section = head[..line_start]
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| l.starts_with('['))
        .map(|l| l.trim_matches(['[', ']']).trim().to_string());
    match section {
        Some(s) if !line.trim_start().starts_with('[') => format!("{s}.{key}"),
        _ => key.to_string(),
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config> {
        let c: Config = toml::from_str(text).map_err(|e| {
            let key = e.span().map(|s| key_at(text, s.start)).unwrap_or_default();
            Error::Config {
                key,
                msg: e.message().to_string(),
            }
        })?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Reads `path` (defaults when `None`) and applies `key=value`
    /// overrides in order; a failing override is reported by its key.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
        let base = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config {
                    key: "--config".into(),
                    msg: format!("{}: {e}", p.display()),
                })?;
                Config::from_toml(&text)?
            }
            None => Config::default(),
        };
        if overrides.is_empty() {
            return Ok(base);
        }
        let mut root = toml::Table::try_from(&base).map_err(|e| Error::Parse(e.to_string()))?;
        for spec in overrides {
            let Some((key, raw)) = spec.split_once('=') else {
                return config_err(spec, "expected key=value");
            };
            let key = key.trim();
            set_dotted(&mut root, key, parse_value(raw.trim()))?;
            let c: Config = root.clone().try_into().map_err(|e: toml::de::Error| Error::Config {
                key: key.to_string(),
                msg: e.message().to_string(),
            })?;
            c.validate_key(key)?;
        }
        let c: Config = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    fn validate_key(&self, key: &str) -> Result<()> {
        match self.validate() {
            Err(Error::Config { key: k, msg }) if k == key => config_err(&k, msg),
            Err(Error::Config { key: k, msg }) => config_err(&k, format!("{msg} (after setting {key})")),
            other => other,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |key: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                config_err(key, format!("must be positive, got {x}"))
            }
        };
        if self.basis.modes.is_empty() && self.basis.cutoff < 1 {
            return config_err("basis.cutoff", "must be at least 1");
        }
        pos("flow.dt", self.flow.dt)?;
        if !(self.flow.epsilon >= 0.0) {
            return config_err("flow.epsilon", "must be nonnegative");
        }
        pos("noise.b0", self.noise.b0)?;
        pos("simulate.horizon", self.simulate.horizon)?;
        if self.simulate.every == 0 {
            return config_err("simulate.every", "must be at least 1");
        }
        pos("attractor.eta", self.attractor.eta)?;
        pos("attractor.t_max", self.attractor.t_max)?;
        if self.attractor.hitting_eps.iter().any(|e| !(*e > 0.0)) {
            return config_err("attractor.hitting_eps", "values must be positive");
        }
        if self.action.stage_eta.len() != self.action.stage_horizon.len() || self.action.stage_eta.is_empty() {
            return config_err(
                "action.stage_eta",
                "stage_eta and stage_horizon must be nonempty and of equal length",
            );
        }
        if self.action.dt < 0.0 {
            return config_err("action.dt", "must be nonnegative");
        }
        if self.measure.eps.iter().any(|e| !(*e > 0.0)) {
            return config_err("measure.eps", "values must be positive");
        }
        if self.measure.eps.windows(2).any(|w| w[1] >= w[0]) {
            return config_err("measure.eps", "values must be strictly decreasing");
        }
        pos("measure.horizon", self.measure.horizon)?;
        pos("measure.eta", self.measure.eta)?;
        if self.measure.stride == 0 {
            return config_err("measure.stride", "must be at least 1");
        }
        if self.measure.chains == 0 {
            return config_err("measure.chains", "must be at least 1");
        }
        if let Some(b) = self.measure.burn_in {
            if !(b >= 0.0 && b < self.measure.horizon) {
                return config_err("measure.burn_in", format!("must lie in [0, measure.horizon), got {b}"));
            }
        }
        if self.reconstruct.delta == 0 {
            return config_err("reconstruct.delta", "must be at least 1");
        }
        if self.reconstruct.states < 2 {
            return config_err("reconstruct.states", "need at least 2 states");
        }
        Ok(())
    }

    /// The flow configuration described by the basis, noise and flow sections.
    pub fn flow_config(&self) -> Result<FlowConfig> {
        let basis = if self.basis.modes.is_empty() {
            BasisSpec::new(self.basis.cutoff)
        } else {
            BasisSpec::from_modes(self.basis.modes.clone())
        }
        .or_else(|e| config_err("basis", e.to_string()))?;
        let noise = if self.noise.weights.is_empty() {
            NoiseSpec::power_law(&basis, self.noise.b0, self.noise.decay)
        } else {
            NoiseSpec::from_weights(&basis, self.noise.weights.clone())
        }
        .or_else(|e| config_err("noise", e.to_string()))?;
        let h = match self.flow.forcing {
            ForcingKind::Default => presets::default_forcing(&basis, self.flow.forcing_amplitude)?,
            ForcingKind::Zero => SpectralField::zeros(&basis),
        };
        let cfg = FlowConfig::new(self.flow.dt, h, noise, self.flow.epsilon, self.seed)
            .or_else(|e| config_err("flow", e.to_string()))?;
        Ok(if self.flow.nonlinear { cfg } else { cfg.linear() })
    }

    fn action_config(&self) -> Result<FlowConfig> {
        let cfg = self.flow_config()?;
        if self.action.dt > 0.0 {
            cfg.with_dt(self.action.dt)
        } else {
            Ok(cfg)
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return config_err(key, "malformed key");
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return config_err(key, format!("`{p}` is not a section")),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileDigest {
    pub fn of(path: &Path, root: &Path) -> Result<Self> {
        let data = fs::read(path)?;
        let rel = path.strip_prefix(root).unwrap_or(path);
        Ok(FileDigest {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: hex::encode(Sha256::digest(&data)),
            bytes: data.len() as u64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub subcommand: String,
    pub seed: u64,
    pub threads: usize,
    pub started: String,
    pub finished: String,
    pub status: i32,
    pub warnings: Vec<String>,
    pub failures: Vec<String>,
    pub config: Config,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub const MANIFEST_NAME: &str = "manifest.toml";

impl RunManifest {
    pub fn read(path: &Path) -> Result<Self> {
        toml::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// What a subcommand asserted and noticed.
#[derive(Debug, Default)]
struct Report {
    quiet: bool,
    warnings: Vec<String>,
    failures: Vec<String>,
    inputs: Vec<PathBuf>,
}

impl Report {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        self.say(format_args!("{} {what}", if ok { "ok  " } else { "FAIL" }));
        if !ok {
            self.failures.push(what);
        }
    }

    fn say(&self, line: std::fmt::Arguments) {
        if !self.quiet {
            println!("{line}");
        }
    }

    fn warn(&mut self, what: impl Into<String>) {
        let what = what.into();
        eprintln!("warning: {what}");
        self.warnings.push(what);
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Blowup { .. } | Error::Timeout { .. } => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

/// Parses arguments, runs, and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(status) => status,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs one subcommand and writes its manifest; `Err` only when the run
/// could not produce a manifest.
pub fn run(cli: &Cli) -> Result<i32> {
    let mut config = Config::load(cli.config.as_deref(), &cli.set)?;
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(t) = cli.threads {
        config.threads = t;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .or_else(|e| config_err("threads", e.to_string()))?;
    let out = cli.out_dir.clone();
    fs::create_dir_all(&out)?;
    let started = chrono::Utc::now().to_rfc3339();
    let mut report = Report {
        quiet: cli.quiet,
        ..Report::default()
    };
    if let Some(p) = &cli.config {
        report.inputs.push(p.clone());
    }
    let outcome = pool.install(|| dispatch(cli.command, &config, &out, &mut report));
    let status = match &outcome {
        Ok(()) if report.failures.is_empty() => EXIT_OK,
        Ok(()) => EXIT_ASSERTION,
        Err(e) => {
            report.failures.push(e.to_string());
            exit_code(e)
        }
    };
    write_manifest(cli.command, &config, &out, started, status, report)?;
    if let Err(e) = outcome {
        eprintln!("error: {e}");
    }
    Ok(status)
}

fn write_manifest(
    cmd: Command,
    config: &Config,
    out: &Path,
    started: String,
    status: i32,
    report: Report,
) -> Result<()> {
    let inputs = report
        .inputs
        .iter()
        .map(|p| FileDigest::of(p, Path::new("")))
        .collect::<Result<Vec<_>>>()?;
    let mut files = Vec::new();
    collect_files(out, &mut files)?;
    files.retain(|p| p != &out.join(MANIFEST_NAME));
    files.sort();
    let outputs = files
        .iter()
        .map(|p| FileDigest::of(p, out))
        .collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest {
        toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
        subcommand: cmd.name().to_string(),
        seed: config.seed,
        threads: config.threads,
        started,
        finished: chrono::Utc::now().to_rfc3339(),
        status,
        warnings: report.warnings,
        failures: report.failures,
        config: config.clone(),
        inputs,
        outputs,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(out.join(MANIFEST_NAME), text)?;
    Ok(())
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn dispatch(cmd: Command, c: &Config, out: &Path, rep: &mut Report) -> Result<()> {
    match cmd {
        Command::Simulate => simulate(c, out, rep),
        Command::Attractor => attractor(c, out, rep),
        Command::Quasipotential => quasipotential(c, out, rep),
        Command::ExitAction => exit_action(c, out, rep),
        Command::Stationary => stationary(c, out, rep),
        Command::Decay => decay(c, out, rep),
        Command::Reconstruct => reconstruct(c, out, rep),
        Command::Selftest => selftest(out, rep),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::File::create(path)?.write_all(text.as_bytes())?;
    Ok(())
}

fn to_toml<T: Serialize>(x: &T) -> Result<String> {
    toml::to_string(x).map_err(|e| Error::Parse(e.to_string()))
}

fn simulate(c: &Config, out: &Path, rep: &mut Report) -> Result<()> {
    let cfg = c.flow_config()?;
    let s = &c.simulate;
    let u0 = match s.start {
        StartKind::Rest => SpectralField::zeros(cfg.basis()),
        StartKind::Random => SpectralField::random(cfg.basis(), s.start_scale, &mut cfg.rng_for(u64::MAX)),
    };
    let n = (s.horizon / cfg.dt()).round() as usize;
    let cfg_run = if s.stochastic {
        cfg.clone()
    } else {
        cfg.clone().with_epsilon(0.0)?
    };
    let mut flow = StochasticFlow::new(u0.clone(), cfg_run, 0)?;
    let mut traj = Trajectory::new(cfg.dt() * s.every as f64, u0);
    for k in 1..=n {
        flow.advance()?;
        if k % s.every == 0 {
            traj.push(flow.state().clone());
        }
    }
    traj.write_observables_csv(fs::File::create(out.join("observables.csv"))?)?;
    flow.state().write_csv(fs::File::create(out.join("final_state.csv"))?)?;
    if s.snapshots {
        traj.write_snapshots(&out.join("snapshots"), 1)?;
    }
    if s.stochastic && cfg.epsilon() == 0.0 {
        rep.warn("simulate.stochastic is set but flow.epsilon = 0");
    }
    rep.say(format_args!(
        "simulated {} steps to t = {}; final |u| = {:.6}",
        n,
        n as f64 * cfg.dt(),
        flow.state().norm()
    ));
    Ok(())
}

fn build_attractor(c: &Config, cfg: &FlowConfig, rep: &mut Report) -> Result<AttractorSet> {
    let a = &c.attractor;
    if !a.input.is_empty() {
        let dir = PathBuf::from(&a.input);
        rep.inputs.push(dir.join("manifest.toml"));
        let set = AttractorSet::read(&dir, cfg.basis())?;
        for i in 0..set.len() {
            rep.inputs.push(dir.join(format!("point_{i:05}.csv")));
        }
        return Ok(set);
    }
    let det = cfg.clone().with_epsilon(0.0)?;
    let mut rng = det.rng_for(99);
    let starts: Vec<SpectralField> = (0..a.ensemble.max(1))
        .map(|_| SpectralField::random(cfg.basis(), a.scale, &mut rng))
        .collect();
    approximate_omega_set(&starts, a.transient, a.collect, a.sample_dt, a.cluster_tol, &det)
}

fn attractor(c: &Config, out: &Path, rep: &mut Report) -> Result<()> {
    let cfg = c.flow_config()?;
    let set = build_attractor(c, &cfg, rep)?;
    set.write(&out.join("attractor"))?;
    let det = cfg.clone().with_epsilon(0.0)?;
    let defect = set.invariance_defect(&det, 5.0)?;
    rep.say(format_args!(
        "attractor approximation: {} point(s), invariance defect {defect:.3e}",
        set.len()
    ));
    if defect > set.cluster_tol() {
        rep.warn(format!("invariance defect {defect:.3e} exceeds the cluster tolerance"));
    }
    let a = &c.attractor;
    if !a.hitting {
        return Ok(());
    }
    let mut rng = det.rng_for(5);
    let dir = SpectralField::random(cfg.basis(), 1.0, &mut rng);
    let v = set.points()[0].add_scaled(&dir, a.start_distance / dir.norm());
    let l = entry_time(&v, &set, a.eta, &det, a.t_max)?;
    if !l.is_finite() {
        return Err(Error::Timeout { horizon: a.t_max });
    }
    if l == 0.0 {
        return config_err(
            "attractor.start_distance",
            "the start already lies in the eta-neighbourhood",
        );
    }
    let s_list: Vec<f64> = a.hitting_multiples.iter().map(|m| m * l).collect();
    let table = stochastic_hitting_tail(&v, &set, a.eta, &a.hitting_eps, &s_list, a.hitting_samples, &cfg)?;
    table.write_csv(fs::File::create(out.join("hitting_tail.csv"))?)?;
    for r in &table.rows {
        if r.censored {
            rep.warn(format!(
                "no paths left at eps = {}, s = {:.4}; only the upper bound {:.3e} is meaningful",
                r.eps, r.s, r.ci_hi
            ));
        }
    }
    rep.say(format_args!("deterministic entry time {l:.4}"));
    for (eps, slope) in &table.trend {
        rep.say(format_args!("eps = {eps}: slope of eps ln P against s = {slope:?}"));
    }
    Ok(())
}

fn action_target(c: &Config, cfg: &FlowConfig, set: &AttractorSet) -> Result<SpectralField> {
    let e = SpectralField::unit(cfg.basis(), c.action.target_mode)
        .or_else(|e| config_err("action.target_mode", e.to_string()))?;
    Ok(set.points()[0].add_scaled(&e, c.action.target_amplitude))
}

fn schedule(c: &Config) -> Vec<Stage> {
    c.action
        .stage_eta
        .iter()
        .zip(&c.action.stage_horizon)
        .map(|(&eta, &horizon)| Stage {
            eta,
            rho: c.action.rho,
            horizon,
        })
        .collect()
}

fn net_note(set: &AttractorSet, rep: &mut Report) {
    rep.warn(format!(
        "start set is a net of {} point(s) at resolution {:.3e}; the error this induces is not bounded",
        set.len(),
        set.cluster_tol()
    ));
}

fn quasipotential(c: &Config, out: &Path, rep: &mut Report) -> Result<()> {
    let set = build_attractor(c, &c.flow_config()?, rep)?;
    let cfg = c.action_config()?.with_epsilon(0.0)?;
    let target = action_target(c, &cfg, &set)?;
    net_note(&set, rep);
    let est = action::quasipotential(&target, set.points(), &schedule(c), &c.action.optimizer, &cfg)?;
    est.result.write(out, "quasipotential")?;
    target.write_csv(fs::File::create(out.join("target.csv"))?)?;
    let mut w = csv::Writer::from_path(out.join("stages.csv"))?;
    for s in &est.stages {
        w.serialize(s)?;
    }
    w.flush()?;
    rep.say(format_args!(
        "quasipotential {:.6e} (settled: {})",
        est.result.value, est.settled
    ));
    rep.check(
        est.violations.is_empty(),
        format!("continuation monotone ({} violation(s))", est.violations.len()),
    );
    for v in est.violations {
        rep.warn(v);
    }
    if !est.settled {
        rep.warn("the last two stages differ by more than 1%");
    }
    Ok(())
}

fn exit_action(c: &Config, out: &Path, rep: &mut Report) -> Result<()> {
    let set = build_attractor(c, &c.flow_config()?, rep)?;
    let cfg = c.action_config()?.with_epsilon(0.0)?;
    let a = &c.action;
    let exit = ExitSettings {
        rho: a.rho,
        n_starts: a.exit_starts,
        seed: c.seed,
        ..ExitSettings::default()
    };
    net_note(&set, rep);
    let r = action::min_exit_action(
        a.exit_radius,
        a.exit_eta,
        a.exit_horizon,
        set.points(),
        &exit,
        &a.optimizer,
        &cfg,
    )?;
    r.result.write(out, "exit_action")?;
    rep.say(format_args!("exit action {:.6e}", r.value));
    if r.degenerate {
        rep.warn("exit action is degenerate (the ball already reaches outside the neighbourhood)");
    }
    if !r.result.converged {
        rep.warn(format!("optimizer: {}", r.result.message));
    }
    Ok(())
}

fn sweep(c: &Config, cfg: &FlowConfig, set: Option<&AttractorSet>) -> Result<Vec<EmpiricalMeasure>> {
    let m = &c.measure;
    let mut s = SamplerSettings::new(m.horizon, m.stride);
    s.burn_in = m.burn_in;
    s.chains = m.chains;
    if let (ChainStart::Attractor, Some(set)) = (m.start, set) {
        s.u0 = Some(set.points()[0].clone());
    }
    sample_sweep(&m.eps, cfg, &s)
}

fn stationary(c: &Config, out: &Path, rep: &mut Report) -> Result<()> {
    let cfg = c.flow_config()?;
    let set = match c.measure.start {
        ChainStart::Attractor => Some(build_attractor(c, &cfg, rep)?),
        ChainStart::Rest => None,
    };
    let ms = sweep(c, &cfg, set.as_ref())?;
    let mut w = csv::Writer::from_path(out.join("stationary.csv"))?;
    w.write_record([
        "eps",
        "samples",
        "autocorr_time",
        "mean_energy",
        "ks_statistic",
        "ks_critical",
        "ks_pass",
    ])?;
    for (j, m) in ms.iter().enumerate() {
        m.write(&out.join(format!("measure_{j:02}")))?;
        let ks = stationarity_check(m);
        let energy: Vec<f64> = m.samples().iter().map(|u| u.norm().powi(2)).collect();
        w.write_record([
            m.eps().to_string(),
            m.len().to_string(),
            m.autocorr_time().to_string(),
            stats::mean(&energy).to_string(),
            ks.statistic.to_string(),
            ks.critical.to_string(),
            ks.pass.to_string(),
        ])?;
        rep.check(
            ks.pass,
            format!(
                "eps = {}: chain halves agree (KS {:.4} vs {:.4})",
                m.eps(),
                ks.statistic,
                ks.critical
            ),
        );
    }
    w.flush()?;
    Ok(())
}

fn decay(c: &Config, out: &Path, rep: &mut Report) -> Result<()> {
    let m = &c.measure;
    if m.eps.len() < 3 {
        return Err(Error::Refused(format!(
            "measure.eps has {} value(s); a slope needs at least 3",
            m.eps.len()
        )));
    }
    let cfg = c.flow_config()?;
    let set = build_attractor(c, &cfg, rep)?;
    let ms = sweep(c, &cfg, Some(&set))?;

    let fit = attracting_decay(&set, m.eta, &ms)?;
    emit_fit(out, "attracting", &fit, "eps ln mu(dist > eta)")?;
    if fit.points.iter().any(|p| p.censored) {
        rep.warn("attracting decay has censored points; they enter only as upper bounds");
    }
    match &fit.slope {
        Some(s) => rep.say(format_args!(
            "attracting slope {:.4e} [{:.4e}, {:.4e}]",
            s.value, s.lo, s.hi
        )),
        None => rep.warn("attracting decay: fewer than two uncensored points, no slope"),
    }
    if !fit.confident_negative() {
        rep.warn("attracting slope is not negative with 95% confidence");
    }

    if !m.radii.is_empty() {
        let prof = tightness_profile(&m.radii, &ms)?;
        let mut w = csv::Writer::from_path(out.join("tightness.csv"))?;
        w.write_record(["radius", "slope", "lo", "hi"])?;
        for r in &prof.rows {
            let s = r.fit.slope;
            w.write_record([
                r.radius.to_string(),
                s.map_or(String::new(), |s| s.value.to_string()),
                s.map_or(String::new(), |s| s.lo.to_string()),
                s.map_or(String::new(), |s| s.hi.to_string()),
            ])?;
        }
        w.flush()?;
        rep.check(prof.monotone, "tightness profile monotone in R");
    }

    if m.tube {
        let e = SpectralField::unit(cfg.basis(), m.tube_mode)
            .or_else(|e| config_err("measure.tube_mode", e.to_string()))?;
        let n = (m.tube_horizon / cfg.dt()).round() as usize;
        let v = set.points()[0].clone();
        let reference = integrate_controlled(&v, &cfg, &vec![e.scaled(m.tube_amplitude); n])?;
        let est = tube_probability(&v, &reference, m.tube_radius, &m.eps, m.tube_samples, &cfg)?;
        emit_fit(out, "tube", &est.fit, "eps ln P(tube)")?;
        rep.say(format_args!(
            "tube exponent {:?}; reference action {:.4e}",
            est.fit.slope.map(|s| -s.value),
            est.reference_action
        ));
    }

    if m.lower_bound {
        let e =
            SpectralField::unit(cfg.basis(), m.lb_mode).or_else(|e| config_err("measure.lb_mode", e.to_string()))?;
        let target = set.points()[0].add_scaled(&e, m.lb_amplitude);
        let v_a = match m.lb_quasipotential {
            Some(v) => v,
            None => {
                let acfg = c.action_config()?.with_epsilon(0.0)?;
                action::quasipotential(&target, set.points(), &schedule(c), &c.action.optimizer, &acfg)?
                    .result
                    .value
            }
        };
        let lb = lower_bound_check(&target, m.lb_delta, m.lb_delta_prime, v_a, &set, &ms)?;
        emit_fit(out, "lower_bound", &lb.fit, "eps ln mu(B(u, delta))")?;
        write_text(&out.join("lower_bound.toml"), &to_toml(&lb)?)?;
        rep.check(
            lb.pass,
            format!(
                "lower bound: exponent {:?} <= V + delta' = {:.4e}",
                lb.exponent,
                v_a + m.lb_delta_prime
            ),
        );
    }
    Ok(())
}

fn emit_fit(out: &Path, stem: &str, fit: &crate::measure::DecayFit, title: &str) -> Result<()> {
    fit.write_csv(fs::File::create(out.join(format!("{stem}.csv")))?)?;
    write_text(&out.join(format!("{stem}.toml")), &fit.to_toml()?)?;
    write_text(&out.join(format!("{stem}.svg")), &fit.to_svg(title))
}

fn random_subset<R: rand::Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect()
}

fn reconstruct(c: &Config, out: &Path, rep: &mut Report) -> Result<()> {
    match c.reconstruct.mode {
        ReconstructMode::Chain => reconstruct_chain(c, out, rep),
        ReconstructMode::Nse => reconstruct_nse(c, out, rep),
    }
}

fn reconstruct_chain(c: &Config, out: &Path, rep: &mut Report) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let r = &c.reconstruct;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(c.seed);
    let chains: Vec<FiniteChain> = if r.chain_file.is_empty() {
        (0..r.random_chains.max(1))
            .map(|_| {
                let ch = FiniteChain::random(r.states, r.tau_max, &mut rng)?;
                if r.constant_tau {
                    let t = rng.random_range(0..=r.tau_max);
                    ch.with_tau(vec![t; r.states])
                } else {
                    Ok(ch)
                }
            })
            .collect::<Result<_>>()?
    } else {
        let p = PathBuf::from(&r.chain_file);
        rep.inputs.push(p.clone());
        vec![FiniteChain::parse(fs::File::open(&p)?)?]
    };
    let mut w = csv::Writer::from_path(out.join("reconstruct.csv"))?;
    w.write_record([
        "chain",
        "states",
        "constant_tau",
        "identity_defect",
        "shift_defect",
        "sandwich",
        "mixing",
    ])?;
    let (mut worst_id, mut worst_shift, mut worst_id_var) = (0.0f64, 0.0f64, 0.0f64);
    let mut all_sandwich = true;
    let mut all_mixing = true;
    let mut n_constant = 0usize;
    for (i, ch) in chains.iter().enumerate() {
        let mu = ch.stationary()?;
        let n = ch.len();
        let gamma = random_subset(n, &mut rng);
        let mass: f64 = mu.iter().zip(&gamma).map(|(a, b)| a * b).sum();
        let id = (ch.lambda(&mu, r.delta, &gamma)? - mass).abs();
        let shift = ch
            .shift_invariance_check(&mu, r.delta, &gamma, &r.shifts)?
            .iter()
            .map(|s| s.defect)
            .fold(0.0, f64::max);
        let closure: Vec<bool> = gamma.iter().map(|&x| x > 0.0).collect();
        let mut interior = closure.clone();
        if let Some(k) = interior.iter().position(|&b| b) {
            interior[k] = false;
        }
        let constant = ch.tau().windows(2).all(|w| w[0] == w[1]);
        let sandwich = constant && ch.sandwich_check(&mu, r.delta, &interior, &closure, 1e-10)?.pass;
        let psi: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mixing = ch.b0_mixing_check(&psi, &r.mixing_times)?.pass;
        if constant {
            n_constant += 1;
            worst_id = worst_id.max(id);
            worst_shift = worst_shift.max(shift);
            all_sandwich &= sandwich;
        } else {
            worst_id_var = worst_id_var.max(id.max(shift));
        }
        all_mixing &= mixing;
        w.write_record([
            i.to_string(),
            n.to_string(),
            constant.to_string(),
            id.to_string(),
            shift.to_string(),
            sandwich.to_string(),
            mixing.to_string(),
        ])?;
    }
    w.flush()?;
    if n_constant > 0 {
        rep.check(
            worst_id <= 1e-10,
            format!("lambda = mu on {n_constant} constant-tau chain(s) (worst {worst_id:.2e})"),
        );
        rep.check(
            worst_shift <= 1e-10,
            format!("shift identity on constant-tau chains (worst {worst_shift:.2e})"),
        );
        rep.check(all_sandwich, "sandwich ordering on constant-tau chains");
    }
    rep.check(all_mixing, "mixing within the spectral-gap envelope");
    if worst_id_var > 0.0 {
        rep.warn(format!(
            "state-dependent tau: lambda differs from mu by up to {worst_id_var:.2e}; the identity needs a common tau"
        ));
    }
    Ok(())
}

fn reconstruct_nse(c: &Config, out: &Path, rep: &mut Report) -> Result<()> {
    let cfg = c.flow_config()?;
    let set = build_attractor(c, &cfg, rep)?;
    let ms = sweep(c, &cfg, Some(&set))?;
    let mut w = csv::Writer::from_path(out.join("lambda.csv"))?;
    w.write_record([
        "eps",
        "delta",
        "lambda",
        "lambda_se",
        "mu",
        "mu_se",
        "lambda_open",
        "mu_open",
        "ordering_holds",
        "sandwich",
    ])?;
    for m in &ms {
        let e = nse_lambda_estimator(&set, c.measure.eta, m, &c.reconstruct.lambda, &cfg)?;
        w.write_record([
            e.eps.to_string(),
            e.delta.delta.to_string(),
            e.lambda.value.to_string(),
            e.lambda.se.to_string(),
            e.mu.value.to_string(),
            e.mu.se.to_string(),
            e.lambda_open.value.to_string(),
            e.mu_open.value.to_string(),
            e.ordering_holds.to_string(),
            e.sandwich.pass.to_string(),
        ])?;
        rep.check(
            e.ordering_holds,
            format!(
                "eps = {}: mu {:.4} <= lambda {:.4} + CI",
                e.eps, e.mu.value, e.lambda.value
            ),
        );
        if e.delta.capped {
            rep.warn(format!("eps = {}: window held at its cap {}", e.eps, e.delta.delta));
        }
    }
    w.flush()?;
    Ok(())
}

/// One line of the self-test table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestRow {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// The property suite behind `selftest`, on one-shell and two-shell
/// instances.
pub fn selftest_rows() -> Result<Vec<SelftestRow>> {
    use rand::SeedableRng;
    let mut rows = Vec::new();
    let mut push = |name: &str, value: f64, threshold: f64, pass: bool| {
        rows.push(SelftestRow {
            name: name.to_string(),
            value,
            threshold,
            pass,
        })
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);

    // trilinear form: (B(u,v),w) = −(B(u,w),v), so (B(u,u),u) = 0
    let b2 = BasisSpec::new(2)?;
    let (mut orth, mut anti) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let u = SpectralField::random(&b2, 1.0, &mut rng);
        let v = SpectralField::random(&b2, 1.0, &mut rng);
        let w = SpectralField::random(&b2, 1.0, &mut rng);
        let buu = bilinear(&u, &u)?;
        orth = orth.max(buu.dot(&u).abs() / (buu.norm() * u.norm()).max(1e-300));
        let a = bilinear(&u, &v)?.dot(&w);
        let b = bilinear(&u, &w)?.dot(&v);
        anti = anti.max((a + b).abs() / (a.abs() + b.abs()).max(1e-300));
    }
    push("trilinear orthogonality", orth, 1e-12, orth <= 1e-12);
    push("trilinear antisymmetry", anti, 1e-12, anti <= 1e-12);

    // linear decay on the first shell is exactly e^{-t}
    let ou = presets::ou_flow(1, 0.0, 0.01, 0)?;
    let e = SpectralField::unit(ou.basis(), [1, 0])?;
    let t = crate::flow::integrate_deterministic(&e, &ou, 100)?;
    let err = (t.last().norm() - (-1.0f64).exp()).abs();
    push("linear decay e^-t", err, 1e-12, err <= 1e-12);

    // stationary variance εb²/(2λ) per real coordinate
    let eps = 0.05;
    let mut s = SamplerSettings::new(2000.0, 10);
    s.chains = 2;
    let m = crate::measure::sample_stationary(eps, &ou, &s)?;
    let coords: Vec<Vec<f64>> = m.samples().iter().map(SpectralField::to_real_vec).collect();
    let mut worst_z = 0.0f64;
    for k in 0..coords[0].len() {
        let b = ou.noise().weights()[k / 2];
        let lam = ou.basis().eigenvalues()[k / 2];
        let sq: Vec<f64> = coords.iter().map(|c| c[k] * c[k]).collect();
        let z = (stats::mean(&sq) - eps * b * b / (2.0 * lam)).abs() / stats::batch_means_se(&sq, 40);
        worst_z = worst_z.max(z);
    }
    push("OU variance (z-score)", worst_z, 3.0, worst_z <= 3.0);

    // quasipotential of the linear system: Σ λ|u_k|²/b²
    let u = SpectralField::random(ou.basis(), 0.5, &mut rng);
    let exact: f64 = (0..u.basis().len())
        .map(|k| ou.basis().eigenvalues()[k] * u.amps()[k].norm_sqr() / ou.noise().weights()[k].powi(2))
        .sum();
    let p = action::ActionProblem::new(vec![SpectralField::zeros(ou.basis())], u.clone(), 1e-3 * u.norm(), 8.0);
    let r = action::minimize_action(&p, &ou)?;
    let rel = (r.value - exact).abs() / exact;
    push("OU quasipotential (relative)", rel, 0.05, rel <= 0.05);

    let phi = action::ControlPath::new(
        ou.dt(),
        (0..20)
            .map(|_| SpectralField::random(ou.basis(), 0.3, &mut rng))
            .collect(),
    )?;
    let g = action::adjoint_gradient_error(&ou, &SpectralField::zeros(ou.basis()), &u, 0.01, 1e3, &phi)?;
    push("adjoint gradient (relative)", g, 1e-4, g <= 1e-4);

    // nudging all modes contracts
    let nl = presets::default_flow(0.0, 1)?;
    let u0 = SpectralField::random(nl.basis(), 1.0, &mut rng);
    let w0 = u0.add_scaled(&SpectralField::random(nl.basis(), 0.3, &mut rng), 1.0);
    let run = integrate_coupled(&u0, &w0, &nl, CouplingConfig::new(50.0, nl.basis().len())?, None, 1.0)?;
    let slope = run.log.log_distance_slope(1e-12).unwrap_or(0.0);
    push("Foias-Prodi log-distance slope", slope, -0.9, slope <= -0.9);

    // reconstruction with a common stopping time
    let mut worst = 0.0f64;
    for _ in 0..20 {
        use rand::Rng;
        let n = rng.random_range(2..=8);
        let tau = rng.random_range(0..=3);
        let ch = FiniteChain::random(n, 0, &mut rng)?.with_tau(vec![tau; n])?;
        let mu = ch.stationary()?;
        let g = random_subset(n, &mut rng);
        let mass: f64 = mu.iter().zip(&g).map(|(a, b)| a * b).sum();
        worst = worst.max((ch.lambda(&mu, 2, &g)? - mass).abs());
    }
    push("reconstruction identity", worst, 1e-10, worst <= 1e-10);

    // same seed, same path
    let cfg = ou.clone().with_epsilon(0.1)?;
    let a = crate::flow::integrate_stochastic(&e, &cfg, 200, &mut cfg.rng_for(3))?;
    let b = crate::flow::integrate_stochastic(&e, &cfg, 200, &mut cfg.rng_for(3))?;
    let same = a == b;
    push("determinism", if same { 0.0 } else { 1.0 }, 0.0, same);
    Ok(rows)
}

fn selftest(out: &Path, rep: &mut Report) -> Result<()> {
    let rows = selftest_rows()?;
    let mut w = csv::Writer::from_path(out.join("selftest.csv"))?;
    for r in &rows {
        w.serialize(r)?;
        rep.check(
            r.pass,
            format!("{}: {:.3e} (threshold {:.1e})", r.name, r.value, r.threshold),
        );
    }
    w.flush()?;
    Ok(())
}
