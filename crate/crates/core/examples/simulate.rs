//! One stochastic trajectory of the default K = 4 flow, printed as a short
//! table of energy and enstrophy norms.

use nsldp::flow::integrate_stochastic;
use nsldp::{presets, SpectralField};

fn main() -> nsldp::Result<()> {
    let cfg = presets::default_flow(0.05, 1)?;
    let u0 = SpectralField::zeros(cfg.basis());
    let n = (20.0 / cfg.dt()).round() as usize;
    let traj = integrate_stochastic(&u0, &cfg, n, &mut cfg.rng_for(0))?;
    println!("{:>6} {:>10} {:>10}", "t", "|u|", "|u|_V");
    for (i, o) in traj.observables.iter().enumerate().step_by(n / 10) {
        println!("{:>6.2} {:>10.5} {:>10.5}", i as f64 * cfg.dt(), o.h_norm, o.v_norm);
    }
    Ok(())
}
