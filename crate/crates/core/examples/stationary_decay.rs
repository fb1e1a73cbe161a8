//! Sample the stationary measure of the K = 1 linear system over an ε sweep
//! and fit ε ln μ^ε(‖u‖ > η) against 1/ε.

use nsldp::attractor::AttractorSet;
use nsldp::measure::{attracting_decay, sample_sweep, SamplerSettings};
use nsldp::{presets, SpectralField};

fn main() -> nsldp::Result<()> {
    let cfg = presets::ou_flow(1, 0.0, 0.01, 11)?;
    let mut s = SamplerSettings::new(2000.0, 10);
    s.chains = 2;
    let ms = sample_sweep(&[0.1, 0.05, 0.02], &cfg, &s)?;
    let origin = AttractorSet::singleton(SpectralField::zeros(cfg.basis()), 0.01)?;
    let fit = attracting_decay(&origin, 0.3, &ms)?;
    fit.write_csv(std::io::stdout())?;
    if let Some(sl) = fit.slope {
        println!("slope {:.4} [{:.4}, {:.4}]", sl.value, sl.lo, sl.hi);
    }
    Ok(())
}
