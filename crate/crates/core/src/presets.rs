//! Reference configurations used by the examples, the CLI defaults and the
//! acceptance suite.

use num_complex::Complex64;

use crate::error::Result;
use crate::flow::{integrate_deterministic, FlowConfig};
use crate::spectral::{BasisSpec, NoiseSpec, SpectralField};

pub const DEFAULT_CUTOFF: i64 = 4;
pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_DECAY: f64 = 3.0;
pub const DEFAULT_B0: f64 = 1.0;
/// Forcing amplitude on modes (1,0) and (1,2).
pub const DEFAULT_FORCING_AMPLITUDE: f64 = 5.0;

/// `h = A·e_{(1,0)} + iA·e_{(1,2)}`: two shells, so advection is active at
/// the (unique, stable) steady state.
pub fn default_forcing(basis: &std::sync::Arc<BasisSpec>, amplitude: f64) -> Result<SpectralField> {
    let mut h = SpectralField::zeros(basis);
    if let Some(i) = basis.index_of([1, 0]) {
        h.amps_mut()[i] = Complex64::new(amplitude, 0.0);
    }
    if let Some(i) = basis.index_of([1, 2]) {
        h.amps_mut()[i] = Complex64::new(0.0, amplitude);
    }
    Ok(h)
}

/// The default nonlinear flow at cutoff 4.
pub fn default_flow(epsilon: f64, seed: u64) -> Result<FlowConfig> {
    let basis = BasisSpec::new(DEFAULT_CUTOFF)?;
    let noise = NoiseSpec::power_law(&basis, DEFAULT_B0, DEFAULT_DECAY)?;
    let h = default_forcing(&basis, DEFAULT_FORCING_AMPLITUDE)?;
    FlowConfig::new(DEFAULT_DT, h, noise, epsilon, seed)
}

/// Unforced Ornstein–Uhlenbeck system (advection disabled).
pub fn ou_flow(cutoff: i64, epsilon: f64, dt: f64, seed: u64) -> Result<FlowConfig> {
    let basis = BasisSpec::new(cutoff)?;
    let noise = NoiseSpec::power_law(&basis, DEFAULT_B0, DEFAULT_DECAY)?;
    Ok(FlowConfig::new(dt, SpectralField::zeros(&basis), noise, epsilon, seed)?.linear())
}

/// Long-time limit of the deterministic flow from rest.
pub fn default_equilibrium(cfg: &FlowConfig) -> Result<SpectralField> {
    let n = (40.0 / cfg.dt()).round() as usize;
    let traj = integrate_deterministic(&SpectralField::zeros(cfg.basis()), cfg, n)?;
    Ok(traj.last().clone())
}
