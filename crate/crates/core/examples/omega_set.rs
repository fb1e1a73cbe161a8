//! Approximate the ω-limit set of the default flow and tabulate how long
//! the noisy flow takes to come back from a point three units away.

use nsldp::attractor::{approximate_omega_set, entry_time, stochastic_hitting_tail};
use nsldp::{presets, SpectralField};

fn main() -> nsldp::Result<()> {
    let cfg = presets::default_flow(0.0, 7)?;
    let mut rng = cfg.rng_for(99);
    let starts: Vec<_> = (0..6)
        .map(|_| SpectralField::random(cfg.basis(), 3.0, &mut rng))
        .collect();
    let set = approximate_omega_set(&starts, 30.0, 10.0, 0.5, 0.05, &cfg)?;
    println!(
        "{} point(s), invariance defect {:.2e}",
        set.len(),
        set.invariance_defect(&cfg, 5.0)?
    );

    let eta = 0.13;
    let dir = SpectralField::random(cfg.basis(), 1.0, &mut rng);
    let v = set.points()[0].add_scaled(&dir, 3.0 / dir.norm());
    let l = entry_time(&v, &set, eta, &cfg, 50.0)?;
    println!("deterministic entry time {l:.3}");
    let table = stochastic_hitting_tail(&v, &set, eta, &[0.1, 0.05], &[l, 3.0 * l], 60, &cfg)?;
    table.write_csv(std::io::stdout())?;
    Ok(())
}
