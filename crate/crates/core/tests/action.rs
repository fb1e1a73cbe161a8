mod common;

use common::ou_quasipotential;
use nsldp::action::{
    action_of_trajectory, adjoint_gradient_error, horizon_doubling, min_exit_action, minimize_action, path_action,
    quasipotential, ActionProblem, ControlPath, ExitSettings, OptimizerSettings, Stage,
};
use nsldp::flow::{integrate_controlled, integrate_deterministic};
use nsldp::{presets, FlowConfig, SpectralField};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_path(cfg: &FlowConfig, n: usize, rng: &mut ChaCha8Rng) -> ControlPath {
    let values = (0..n).map(|_| SpectralField::random(cfg.basis(), 1.0, rng)).collect();
    ControlPath::new(cfg.dt(), values).unwrap()
}

#[test]
fn path_action_summation_order() {
    let cfg = presets::default_flow(0.0, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let phi = random_path(&cfg, 200, &mut rng);
    let w = cfg.noise().weights();
    let mut reversed = 0.0;
    for v in phi.values().iter().rev() {
        for k in (0..w.len()).rev() {
            reversed += v.amps()[k].norm_sqr() / (w[k] * w[k]);
        }
    }
    reversed *= 0.5 * phi.dt();
    let direct = path_action(&phi, cfg.noise());
    assert!((direct - reversed).abs() <= 1e-12 * direct);
}

#[test]
fn trajectory_action_round_trip_and_corruption() {
    let cfg = presets::default_flow(0.0, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u0 = SpectralField::random(cfg.basis(), 1.0, &mut rng);

    let free = integrate_deterministic(&u0, &cfg, 300).unwrap();
    assert!(action_of_trajectory(&free, &cfg).unwrap() < 1e-10);

    let phi = random_path(&cfg, 300, &mut rng);
    let mut traj = integrate_controlled(&u0, &cfg, phi.values()).unwrap();
    let j = path_action(&phi, cfg.noise());
    let i = action_of_trajectory(&traj, &cfg).unwrap();
    assert!((i - j).abs() <= 1e-8 * j, "{i} vs {j}");

    let bump = SpectralField::random(cfg.basis(), 0.05, &mut rng);
    traj.states[150] = traj.states[150].add_scaled(&bump, 1.0);
    let corrupted = action_of_trajectory(&traj, &cfg).unwrap();
    assert!(corrupted.is_finite() && corrupted > i);
}

#[test]
fn adjoint_gradient_on_small_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..10 {
        let base = presets::ou_flow(1, 0.0, 0.05, 0).unwrap();
        let h = SpectralField::random(base.basis(), 1.0, &mut rng);
        let mut cfg = base.with_forcing(h).unwrap();
        if trial % 2 == 0 {
            cfg = FlowConfig::new(cfg.dt(), cfg.forcing().clone(), cfg.noise().clone(), 0.0, 0).unwrap();
        }
        let u0 = SpectralField::random(cfg.basis(), 1.0, &mut rng);
        let target = SpectralField::random(cfg.basis(), 2.0, &mut rng);
        let phi = random_path(&cfg, 5, &mut rng);
        let err = adjoint_gradient_error(&cfg, &u0, &target, 0.2, 5.0, &phi).unwrap();
        assert!(err < 1e-4, "trial {trial}: {err}");
    }
}

#[test]
fn ou_quasipotential_oracle_and_scaling() {
    let cfg = presets::ou_flow(1, 0.0, 0.01, 0).unwrap();
    let zero = vec![SpectralField::zeros(cfg.basis())];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..3 {
        let u = SpectralField::random(cfg.basis(), 0.5, &mut rng);
        let exact = ou_quasipotential(&u, &cfg);
        let p = ActionProblem::new(zero.clone(), u.clone(), 1e-3 * u.norm(), 8.0);
        let r = minimize_action(&p, &cfg).unwrap();
        assert!(r.converged, "{}", r.message);
        assert!(r.terminal_gap <= p.eta);
        assert!((r.value - exact).abs() <= 0.05 * exact, "{} vs {exact}", r.value);

        let p2 = ActionProblem::new(zero.clone(), u.scaled(2.0), 2e-3 * u.norm(), 8.0);
        let r2 = minimize_action(&p2, &cfg).unwrap();
        assert!((r2.value / r.value - 4.0).abs() <= 0.08, "{}", r2.value / r.value);
    }
}

#[test]
fn quasipotential_continuation() {
    let cfg = presets::ou_flow(1, 0.0, 0.01, 0).unwrap();
    let zero = vec![SpectralField::zeros(cfg.basis())];
    let u = SpectralField::random(cfg.basis(), 0.5, &mut ChaCha8Rng::seed_from_u64(5));
    let exact = ou_quasipotential(&u, &cfg);
    let r0 = u.norm();
    let schedule = [
        Stage {
            eta: 0.04 * r0,
            rho: 1e3,
            horizon: 2.0,
        },
        Stage {
            eta: 0.04 * r0,
            rho: 1e3,
            horizon: 4.0,
        },
        Stage {
            eta: 0.02 * r0,
            rho: 1e3,
            horizon: 4.0,
        },
        Stage {
            eta: 0.01 * r0,
            rho: 1e3,
            horizon: 4.0,
        },
        Stage {
            eta: 0.005 * r0,
            rho: 1e3,
            horizon: 4.0,
        },
        Stage {
            eta: 0.0025 * r0,
            rho: 1e3,
            horizon: 4.0,
        },
    ];
    let settings = OptimizerSettings::default();
    let est = quasipotential(&u, &zero, &schedule, &settings, &cfg).unwrap();
    assert!(est.violations.is_empty(), "{:?}", est.violations);
    assert!(est.settled);
    let v = est.result.value;
    assert!((v - exact).abs() <= 0.05 * exact);
    let [.., a, b] = est.stages.as_slice() else {
        unreachable!()
    };
    assert!((a.value - b.value).abs() < 0.01 * b.value);

    let (vt, v2t, rel) = horizon_doubling(&est, &u, &schedule, &settings, &cfg).unwrap();
    assert!(rel < 0.02, "{vt} vs {v2t}");

    // on the attractor the trace is identically zero
    let est = quasipotential(&zero[0], &zero, &schedule, &settings, &cfg).unwrap();
    assert!(est.stages.iter().all(|s| s.value == 0.0));
}

#[test]
fn zero_set_on_default_flow() {
    let cfg = presets::default_flow(0.0, 0).unwrap();
    let u_star = presets::default_equilibrium(&cfg).unwrap();
    let near = u_star.add_scaled(&SpectralField::unit(cfg.basis(), [1, 1]).unwrap(), 0.01);
    let p = ActionProblem::new(vec![u_star], near, 0.02, 1.0);
    let r = minimize_action(&p, &cfg).unwrap();
    assert!(r.value.abs() <= 1e-6);
}

#[test]
fn nonlinear_steering_lands_in_ball() {
    // Steering away from the default equilibrium: the optimizer converges,
    // lands in the ball, and the action is reproduced by the trajectory.
    let cfg = presets::default_flow(0.0, 0).unwrap().with_dt(0.01).unwrap();
    let u_star = presets::default_equilibrium(&cfg).unwrap();
    let kick = SpectralField::unit(cfg.basis(), [1, 0]).unwrap();
    let target = u_star.add_scaled(&kick, 0.3);
    let mut p = ActionProblem::new(vec![u_star.clone()], target, 0.01, 2.0);
    p.settings.gradient_check = true;
    let r = minimize_action(&p, &cfg).unwrap();
    assert!(r.converged, "{}", r.message);
    assert!(r.terminal_gap <= 0.01);
    assert!(r.gradient_check.unwrap() < 1e-4);
    let traj = integrate_controlled(&u_star, &cfg, r.control.values()).unwrap();
    let i = action_of_trajectory(&traj, &cfg).unwrap();
    assert!((i - r.value).abs() <= 1e-8 * r.value);
}

#[test]
fn exit_action_oracle() {
    let cfg = presets::ou_flow(1, 0.0, 0.01, 0).unwrap();
    let zero = vec![SpectralField::zeros(cfg.basis())];
    let settings = OptimizerSettings::default();
    let exit = ExitSettings::default();
    // cheapest mode: λ = 1, b = 1, so min_k λ η² / b² = η²
    let eta = 0.2;
    let a = min_exit_action(1.0, eta, 6.0, &zero, &exit, &settings, &cfg).unwrap();
    assert!(!a.degenerate);
    assert!((a.value - eta * eta).abs() <= 0.1 * eta * eta, "{}", a.value);
    let a2 = min_exit_action(1.0, eta, 12.0, &zero, &exit, &settings, &cfg).unwrap();
    assert!((a2.value - a.value).abs() <= 0.1 * a.value);

    let mut prev = a.value;
    for eta in [0.1, 0.05, 0.025] {
        let v = min_exit_action(1.0, eta, 6.0, &zero, &exit, &settings, &cfg)
            .unwrap()
            .value;
        assert!(v < prev, "eta {eta}: {v} >= {prev}");
        prev = v;
    }
}

#[test]
fn result_persistence() {
    let cfg = presets::ou_flow(1, 0.0, 0.05, 0).unwrap();
    let zero = vec![SpectralField::zeros(cfg.basis())];
    let u = SpectralField::random(cfg.basis(), 0.5, &mut ChaCha8Rng::seed_from_u64(8));
    let r = minimize_action(&ActionProblem::new(zero, u, 0.01, 2.0), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = r.write(dir.path(), "qp").unwrap();
    assert_eq!(paths.len(), 3);
    let back = ControlPath::read_csv(std::fs::File::open(&paths[1]).unwrap(), cfg.basis()).unwrap();
    assert_eq!(back, r.control);
    let doc: toml::Value = toml::from_str(&std::fs::read_to_string(&paths[0]).unwrap()).unwrap();
    assert_eq!(doc["value"].as_float().unwrap(), r.value);
}
