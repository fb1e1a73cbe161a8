//! Minimum-action estimate of the quasipotential of a K = 1 linear system,
//! where the exact answer is Σ λ_k |u_k|² / b_k².

use nsldp::action::{quasipotential, OptimizerSettings, Stage};
use nsldp::{presets, SpectralField};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> nsldp::Result<()> {
    let cfg = presets::ou_flow(1, 0.0, 0.01, 0)?;
    let zero = vec![SpectralField::zeros(cfg.basis())];
    let u = SpectralField::random(cfg.basis(), 0.5, &mut ChaCha8Rng::seed_from_u64(5));
    let exact: f64 = (0..cfg.basis().len())
        .map(|k| cfg.basis().eigenvalues()[k] * u.amps()[k].norm_sqr() / cfg.noise().weights()[k].powi(2))
        .sum();
    let r0 = u.norm();
    let schedule: Vec<Stage> = [0.04, 0.02, 0.01, 0.005]
        .iter()
        .map(|f| Stage {
            eta: f * r0,
            rho: 1e3,
            horizon: 4.0,
        })
        .collect();
    let est = quasipotential(&u, &zero, &schedule, &OptimizerSettings::default(), &cfg)?;
    for s in &est.stages {
        println!("eta {:.4}  T {:.1}  value {:.6}", s.eta, s.horizon, s.value);
    }
    println!(
        "estimate {:.6}, exact {exact:.6}, settled {}",
        est.result.value, est.settled
    );
    Ok(())
}
