use nsldp::attractor::{approximate_omega_set, AttractorSet};
use nsldp::measure::{sample_stationary, SamplerSettings};
use nsldp::reconstruct::MarkovModel;
use nsldp::reconstruct::{
    condition_a_gauge, lambda_functional, nse_lambda_estimator, r_delta, select_delta, semigroup, FiniteChain,
    LambdaSettings, NseModel,
};
use nsldp::{presets, SpectralField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `R_δψ(v)` by summing over every path of length `τ(v) + δ`.
fn enumerate_r_delta(p: &[Vec<f64>], tau: &[usize], v: usize, delta: usize, psi: &[f64]) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn walk(p: &[Vec<f64>], x: usize, left: usize, skip: usize, weight: f64, acc: f64, psi: &[f64], out: &mut f64) {
        if left == 0 {
            *out += weight * acc;
            return;
        }
        for (y, &q) in p[x].iter().enumerate() {
            if q > 0.0 {
                let add = if skip == 0 { psi[y] } else { 0.0 };
                walk(p, y, left - 1, skip.saturating_sub(1), weight * q, acc + add, psi, out);
            }
        }
    }
    let mut out = 0.0;
    walk(p, v, tau[v] + delta, tau[v], 1.0, 0.0, psi, &mut out);
    out / delta as f64
}

fn indicator(n: usize, set: &[usize]) -> Vec<f64> {
    (0..n).map(|i| if set.contains(&i) { 1.0 } else { 0.0 }).collect()
}

fn counterexample() -> FiniteChain {
    FiniteChain::new(vec![vec![0.7, 0.3], vec![0.6, 0.4]], vec![0, 5]).unwrap()
}

#[test]
fn exact_r_delta_matches_path_enumeration() {
    let rows = vec![vec![0.5, 0.25, 0.25], vec![0.1, 0.6, 0.3], vec![0.4, 0.4, 0.2]];
    let tau = vec![0, 2, 3];
    let c = FiniteChain::new(rows.clone(), tau.clone()).unwrap();
    let psi = [0.3, -1.0, 2.0];
    for v in 0..3 {
        for delta in 1..=3 {
            let a = c.r_delta(v, delta, &psi).unwrap();
            let b = enumerate_r_delta(&rows, &tau, v, delta, &psi);
            assert!((a - b).abs() < 1e-13, "v {v} delta {delta}: {a} vs {b}");
        }
    }
    let mu = c.stationary().unwrap();
    let lam = c.lambda(&mu, 2, &psi).unwrap();
    let brute: f64 = (0..3).map(|v| mu[v] * enumerate_r_delta(&rows, &tau, v, 2, &psi)).sum();
    assert!((lam - brute).abs() < 1e-13);
}

#[test]
fn constant_stopping_time_reconstructs_measure() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(3..=8);
        let t0 = rng.random_range(0..=4);
        let c = FiniteChain::random(n, 0, &mut rng)
            .unwrap()
            .with_tau(vec![t0; n])
            .unwrap();
        let mu = c.stationary().unwrap();
        let set: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
        let f = indicator(n, &set);
        let mass: f64 = set.iter().map(|&i| mu[i]).sum();
        for delta in [1, 3, 7] {
            worst = worst.max((c.lambda(&mu, delta, &f).unwrap() - mass).abs());
        }
        for row in c.shift_invariance_check(&mu, 2, &f, &[0, 1, 5, 20]).unwrap() {
            worst = worst.max(row.defect);
        }
    }
    assert!(worst < 1e-10, "{worst}");
}

#[test]
fn state_dependent_stopping_time_breaks_identity() {
    let c = counterexample();
    let mu = c.stationary().unwrap();
    let lam = c.lambda(&mu, 1, &[1.0, 0.0]).unwrap();
    // P⁵ has both rows at 2/3 + (1/3)(0.1)^5 and 2/3 − (2/3)(0.1)^5
    let row1 = 2.0 / 3.0 - (2.0 / 3.0) * 1e-5;
    let p0 = [0.7, 0.6];
    let exact = (2.0 / 3.0) * 0.7 + (1.0 / 3.0) * (row1 * p0[0] + (1.0 - row1) * p0[1]);
    assert!((lam - exact).abs() < 1e-14);
    assert!((lam - 2.0 / 3.0).abs() > 0.02);
    let shift = c.shift_invariance_check(&mu, 1, &[1.0, 0.0], &[0, 1]).unwrap();
    assert_eq!(shift[0].defect, 0.0);
    assert!(shift[1].defect > 1e-2);
}

#[test]
fn sandwich_on_finite_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = FiniteChain::random(6, 0, &mut rng)
        .unwrap()
        .with_tau(vec![2; 6])
        .unwrap();
    let mu = c.stationary().unwrap();
    let interior = [true, true, false, false, false, false];
    let closure = [true, true, true, false, false, false];
    let rep = c.sandwich_check(&mu, 3, &interior, &closure, 1e-12).unwrap();
    assert!(rep.pass, "{rep:?}");
    let all = c.sandwich_check(&mu, 3, &[true; 6], &[true; 6], 1e-12).unwrap();
    assert!((all.lambda_closure - 1.0).abs() < 1e-12);
    let none = c.sandwich_check(&mu, 3, &[false; 6], &[false; 6], 1e-12).unwrap();
    assert_eq!(none.lambda_interior, 0.0);
    assert!(c.sandwich_check(&mu, 3, &closure, &interior, 1e-12).is_err());
}

#[test]
fn mixing_follows_spectral_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let c = FiniteChain::random(5, 0, &mut rng).unwrap();
    let psi: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let rep = c.b0_mixing_check(&psi, &[1, 2, 4, 8, 16]).unwrap();
    assert!(rep.second_eigenvalue < 1.0);
    assert!(rep.pass, "{rep:?}");
    assert!(c.b0_mixing_check(&psi, &[4, 2]).is_err());
}

#[test]
fn monte_carlo_agrees_with_exact() {
    let c = FiniteChain::new(
        vec![vec![0.5, 0.25, 0.25], vec![0.1, 0.6, 0.3], vec![0.4, 0.4, 0.2]],
        vec![1, 0, 3],
    )
    .unwrap();
    let psi = [1.0, 0.0, 0.5];
    for v in 0..3 {
        let exact = c.r_delta(v, 4, &psi).unwrap();
        let est = r_delta(&c, &v, 4, |x: &usize| psi[*x], 20_000, 1).unwrap();
        assert!(
            est.lo - 1e-3 <= exact && exact <= est.hi + 1e-3,
            "v {v}: {exact} vs {est:?}"
        );
    }
    let exact = c.apply_power(&psi, 3)[2];
    let est = semigroup(&c, &2, 3, |x: &usize| psi[*x], 20_000, 2).unwrap();
    assert!((est.value - exact).abs() < 4.0 * est.se.max(1e-3));

    let mu = c.stationary().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let states: Vec<usize> = (0..20_000)
        .map(|_| {
            let u: f64 = rng.random();
            if u < mu[0] {
                0
            } else if u < mu[0] + mu[1] {
                1
            } else {
                2
            }
        })
        .collect();
    let exact = c.lambda(&mu, 2, &psi).unwrap();
    let est = lambda_functional(&c, &states, 2, |x: &usize| psi[*x], 9).unwrap();
    assert!((est.value - exact).abs() < 4.0 * est.se, "{exact} vs {est:?}");
}

#[test]
fn chain_text_format() {
    let text = "# two states\n2\n0.7 0.3\n0.6 0.4\n0 5\n";
    let c = FiniteChain::parse(text.as_bytes()).unwrap();
    assert_eq!(c, counterexample());
    assert_eq!(FiniteChain::parse(c.to_text().as_bytes()).unwrap(), c);
    assert!(FiniteChain::parse("2\n0.7 0.3\n0.6 0.5\n0 0\n".as_bytes()).is_err());
    assert!(FiniteChain::parse("2\n0.7 0.3\n".as_bytes()).is_err());
}

#[test]
fn periodic_chain_is_refused() {
    let c = FiniteChain::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]], vec![0, 0]).unwrap();
    assert!(c.is_irreducible() && !c.is_aperiodic());
    assert!(c.stationary().is_err());
}

#[test]
fn linear_flow_mixes_at_first_eigenvalue() {
    let cfg = presets::ou_flow(1, 0.1, 0.01, 0).unwrap();
    let set = AttractorSet::singleton(SpectralField::zeros(cfg.basis()), 0.01).unwrap();
    let model = NseModel::new(cfg.clone(), set, 0.3, 20.0).unwrap();
    let e = SpectralField::unit(cfg.basis(), [1, 0]).unwrap();
    let dir = e.to_real_vec();
    let psi = move |u: &SpectralField| {
        let x: f64 = u.to_real_vec().iter().zip(&dir).map(|(a, b)| a * b).sum();
        x
    };
    // P_tψ(v) = ⟨v, e⟩ e^{-λ₁t} for the linear flow, λ₁ = 1
    let v = e.scaled(2.0);
    let mut logs = Vec::new();
    for t in [50usize, 100, 150] {
        let est = semigroup(&model, &v, t, psi.clone(), 4000, 4).unwrap();
        let exact = 2.0 * (-(t as f64) * 0.01).exp();
        assert!(
            (est.value - exact).abs() < 4.0 * est.se,
            "t {t}: {} vs {exact}",
            est.value
        );
        logs.push(est.value.ln());
    }
    let rate = -(logs[2] - logs[0]) / 1.0;
    assert!(rate > 0.5 && rate < 2.0, "{rate}");
    let escaped = condition_a_gauge(
        &model,
        &[v.clone(), SpectralField::zeros(cfg.basis())],
        4.0,
        200,
        200,
        6,
    )
    .unwrap();
    assert!(escaped < 0.05);
}

#[test]
fn nse_lambda_small_noise() {
    let cfg = presets::default_flow(0.0, 7).unwrap();
    let mut rng = cfg.rng_for(99);
    let starts: Vec<SpectralField> = (0..3)
        .map(|_| SpectralField::random(cfg.basis(), 3.0, &mut rng))
        .collect();
    let set = approximate_omega_set(&starts, 30.0, 10.0, 0.5, 0.05, &cfg).unwrap();
    let mut s = SamplerSettings::new(60.0, 20);
    s.burn_in = Some(10.0);
    s.chains = 1;
    s.u0 = Some(set.points()[0].clone());
    let m = sample_stationary(0.002, &cfg, &s).unwrap();
    let settings = LambdaSettings {
        delta: Some(1.0),
        n_outer: 100,
        ..LambdaSettings::default()
    };
    let est = nse_lambda_estimator(&set, 0.3, &m, &settings, &cfg).unwrap();
    assert_eq!(est.lambda.value, 0.0);
    assert_eq!(est.mu.value, 0.0);
    assert!(est.ordering_holds && est.sandwich.pass);

    let probes: Vec<SpectralField> = m.samples().iter().take(5).cloned().collect();
    let sel = select_delta(&set, 0.3, &probes, 2.0, 50.0, &cfg).unwrap();
    assert!(sel.capped && (sel.delta - 2.0).abs() < 1e-9);

    // a state far outside every neighbourhood still has a finite stopping time
    let model = NseModel::new(cfg.clone(), set.clone(), 0.3, 50.0).unwrap();
    let far = SpectralField::random(cfg.basis(), 3.0, &mut rng);
    assert!(model.stopping_time(&far).unwrap() > 0);
    let short = NseModel::new(cfg, set, 0.3, 1e-3).unwrap();
    assert!(short.stopping_time(&far).is_err());
}
