use std::fs;
use std::path::{Path, PathBuf};

use nsldp::cli::{main_with_args, Config, RunManifest, EXIT_ASSERTION, EXIT_CONFIG, EXIT_OK, MANIFEST_NAME};
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("nsldp").chain(args.iter().copied()))
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn check_manifest(dir: &Path) -> RunManifest {
    let m = RunManifest::read(&dir.join(MANIFEST_NAME)).unwrap();
    let listed: Vec<String> = m.outputs.iter().map(|d| d.path.clone()).collect();
    let present: Vec<String> = files(dir)
        .iter()
        .filter(|p| p.file_name().unwrap() != MANIFEST_NAME || p.parent().unwrap() != dir)
        .map(|p| p.strip_prefix(dir).unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(listed, present);
    for d in &m.outputs {
        let data = fs::read(dir.join(&d.path)).unwrap();
        assert_eq!(hex::encode(Sha256::digest(&data)), d.sha256);
    }
    m
}

#[test]
fn every_subcommand_is_deterministic() {
    let cfg = configs().join("smoke.toml");
    let cfg = cfg.to_str().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    for cmd in [
        "simulate",
        "attractor",
        "quasipotential",
        "exit-action",
        "stationary",
        "decay",
        "reconstruct",
    ] {
        let a = tmp.path().join(format!("{cmd}_a"));
        let b = tmp.path().join(format!("{cmd}_b"));
        assert_eq!(
            run(&[cmd, "--config", cfg, "--out-dir", a.to_str().unwrap(), "--threads", "1"]),
            EXIT_OK,
            "{cmd}"
        );
        assert_eq!(
            run(&[cmd, "--config", cfg, "--out-dir", b.to_str().unwrap(), "--threads", "2"]),
            EXIT_OK,
            "{cmd}"
        );
        let ma = check_manifest(&a);
        let mb = check_manifest(&b);
        assert_eq!(ma.subcommand, cmd);
        assert_eq!(ma.config.seed, 1);
        assert_eq!(ma.inputs.len(), 1);
        let csv_a: Vec<_> = ma.outputs.iter().filter(|d| d.path.ends_with(".csv")).collect();
        let csv_b: Vec<_> = mb.outputs.iter().filter(|d| d.path.ends_with(".csv")).collect();
        assert!(!csv_a.is_empty(), "{cmd} wrote no CSV");
        assert_eq!(csv_a, csv_b, "{cmd}");
    }
}

#[test]
fn seed_changes_stochastic_output() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let base = ["simulate", "--set", "simulate.horizon=0.5", "--out-dir"];
    assert_eq!(
        run(&[&base[..], &[a.to_str().unwrap(), "--seed", "1"]].concat()),
        EXIT_OK
    );
    assert_eq!(
        run(&[&base[..], &[b.to_str().unwrap(), "--seed", "2"]].concat()),
        EXIT_OK
    );
    assert_ne!(
        fs::read(a.join("observables.csv")).unwrap(),
        fs::read(b.join("observables.csv")).unwrap()
    );
    assert_eq!(check_manifest(&b).seed, 2);
}

#[test]
fn decay_refuses_short_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let status = run(&[
        "decay",
        "--set",
        "measure.eps=[0.1]",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(status, EXIT_CONFIG);
    let m = check_manifest(&out);
    assert!(m.failures[0].contains("at least 3"));
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let out = out.to_str().unwrap();
    assert_eq!(
        run(&["simulate", "--set", "flow.bogus=1", "--out-dir", out]),
        EXIT_CONFIG
    );
    assert_eq!(
        run(&["simulate", "--config", "/no/such/file.toml", "--out-dir", out]),
        EXIT_CONFIG
    );
    assert_eq!(run(&["no-such-command"]), EXIT_CONFIG);
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[measure]\nstride = -3\n").unwrap();
    assert_eq!(
        run(&["stationary", "--config", bad.to_str().unwrap(), "--out-dir", out]),
        EXIT_CONFIG
    );
}

#[test]
fn failed_assertion_exits_with_four() {
    // no burn-in from rest: the first half of each chain is the transient
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("t");
    let status = run(&[
        "stationary",
        "--set",
        "measure.start=\"rest\"",
        "--set",
        "measure.burn_in=0.0",
        "--set",
        "measure.horizon=4.0",
        "--set",
        "measure.stride=10",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(status, EXIT_ASSERTION);
    assert!(check_manifest(&out).failures.iter().any(|f| f.contains("chain halves")));
}

#[test]
fn chain_file_is_an_input() {
    let tmp = tempfile::tempdir().unwrap();
    let chain = tmp.path().join("chain.txt");
    fs::write(&chain, "3\n0.5 0.25 0.25\n0.1 0.6 0.3\n0.4 0.4 0.2\n2 2 2\n").unwrap();
    let out = tmp.path().join("r");
    let status = run(&[
        "reconstruct",
        "--set",
        &format!("reconstruct.chain_file=\"{}\"", chain.display()),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(status, EXIT_OK);
    let m = check_manifest(&out);
    assert_eq!(m.inputs.len(), 1);
    assert_eq!(
        m.inputs[0].sha256,
        hex::encode(Sha256::digest(fs::read(&chain).unwrap()))
    );
}

#[test]
fn stored_attractor_is_reused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("smoke.toml");
    let cfg = cfg.to_str().unwrap();
    let first = tmp.path().join("att");
    assert_eq!(
        run(&[
            "attractor",
            "--config",
            cfg,
            "--set",
            "attractor.hitting=false",
            "--out-dir",
            first.to_str().unwrap()
        ]),
        EXIT_OK
    );
    let stored = first.join("attractor");
    let out = tmp.path().join("qp");
    let set = format!("attractor.input=\"{}\"", stored.display());
    assert_eq!(
        run(&[
            "quasipotential",
            "--config",
            cfg,
            "--set",
            &set,
            "--out-dir",
            out.to_str().unwrap()
        ]),
        EXIT_OK
    );
    assert_eq!(check_manifest(&out).inputs.len(), 3);
}

#[test]
fn selftest_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("s");
    assert_eq!(run(&["selftest", "--out-dir", out.to_str().unwrap()]), EXIT_OK);
    let text = fs::read_to_string(out.join("selftest.csv")).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn shipped_configs_parse() {
    let default = fs::read_to_string(configs().join("default.toml")).unwrap();
    assert_eq!(Config::from_toml(&default).unwrap(), Config::default());
    for e in fs::read_dir(configs()).unwrap() {
        let p = e.unwrap().path();
        let c = Config::from_toml(&fs::read_to_string(&p).unwrap()).unwrap();
        c.flow_config().unwrap();
    }
}

prop_compose! {
    fn arb_config()(
        seed in any::<u64>(),
        dt in 1e-5f64..1.0,
        eps in prop::collection::vec(1e-3f64..1.0, 0..5),
        cutoff in 1i64..6,
        chains in 1usize..9,
        nonlinear in any::<bool>(),
        delta in prop::option::of(0.01f64..10.0),
        modes in prop::collection::vec((1i32..4, -3i32..4), 0..3),
    ) -> Config {
        let mut c = Config { seed, ..Config::default() };
        c.flow.dt = dt;
        let mut eps = eps;
        eps.sort_by(|a, b| b.total_cmp(a));
        eps.dedup();
        c.measure.eps = eps;
        c.basis.cutoff = cutoff;
        c.basis.modes = modes.into_iter().map(|(a, b)| [a, b]).collect();
        c.measure.chains = chains;
        c.flow.nonlinear = nonlinear;
        c.reconstruct.lambda.delta = delta;
        c
    }
}

proptest! {
    #[test]
    fn config_round_trip(c in arb_config()) {
        let text = c.to_toml().unwrap();
        let back = Config::from_toml(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_toml().unwrap(), text);
    }
}
