//! Reconstruction of the stationary law of a finite chain from windowed
//! occupation averages, with a common and with a state-dependent stopping
//! time.

use nsldp::reconstruct::FiniteChain;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> nsldp::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let chain = FiniteChain::random(5, 0, &mut rng)?.with_tau(vec![2; 5])?;
    let mu = chain.stationary()?;
    let gamma = [1.0, 1.0, 0.0, 0.0, 0.0];
    let mass = mu[0] + mu[1];
    for delta in [1, 2, 5] {
        println!(
            "tau = 2, delta {delta}: lambda {:.12}  mu {mass:.12}",
            chain.lambda(&mu, delta, &gamma)?
        );
    }

    let two = FiniteChain::new(vec![vec![0.7, 0.3], vec![0.6, 0.4]], vec![0, 5])?;
    let mu = two.stationary()?;
    println!(
        "tau = (0, 5): lambda {:.6}  mu {:.6}",
        two.lambda(&mu, 1, &[1.0, 0.0])?,
        mu[0]
    );
    Ok(())
}
