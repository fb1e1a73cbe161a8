//! Foias-Prodi nudging: a copy of the flow started elsewhere is pulled onto
//! the reference through its low modes, at a rate set by the gain.

use nsldp::flow::{integrate_coupled, CouplingConfig};
use nsldp::{presets, SpectralField};

fn main() -> nsldp::Result<()> {
    let cfg = presets::default_flow(0.0, 1)?;
    let mut rng = cfg.rng_for(21);
    let u0 = SpectralField::random(cfg.basis(), 1.0, &mut rng);
    let w0 = u0.add_scaled(&SpectralField::random(cfg.basis(), 0.3, &mut rng), 1.0);
    let full = cfg.basis().len();
    for (kappa, modes) in [(0.0, full), (5.0, 4), (5.0, full), (50.0, full)] {
        let run = integrate_coupled(&u0, &w0, &cfg, CouplingConfig::new(kappa, modes)?, None, 2.0)?;
        let slope = run.log.log_distance_slope(1e-12).unwrap_or(f64::NAN);
        println!("kappa {kappa:>5}  N {modes:>2}  log-distance slope {slope:>9.3}");
    }
    Ok(())
}
