use std::path::Path;
use std::process::Command;

use contmon_cli::config::{parse_config, to_json};
use contmon_cli::presets::{load_preset, PRESETS};
use contmon_cli::runner::{
    execute, read_manifest, run_to_dir, RunOptions, EXIT_CONFIG, EXIT_IO, EXIT_PHYSICALITY,
};
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_contmon"))
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn every_preset_parses_and_round_trips() {
    assert!(PRESETS.iter().any(|p| p.name == "opo_lqg"));
    for p in PRESETS {
        let config = load_preset(p.name, &[]).unwrap_or_else(|e| panic!("{}: {e}", p.name));
        let again = parse_config(&to_json(&config)).unwrap();
        assert_eq!(config, again, "{}", p.name);
        assert!(config.plan().is_ok(), "{}", p.name);
    }
}

#[test]
fn qubit_decay_jump_preset_follows_exponential() {
    let dir = tempfile::tempdir().unwrap();
    // enough trajectories that both the decayed and surviving counts stay
    // large over [0, 3], where the sample SE is a reliable error estimate
    let config = load_preset(
        "qubit_decay_jump",
        &["run.n_traj=4000".into(), "run.t_final=3.0".into()],
    )
    .unwrap();
    run_to_dir(&config, &RunOptions::default(), dir.path()).unwrap();
    let (header, rows) = read_csv(&dir.path().join("stats.csv"));
    assert_eq!(header[0], "t");
    let m = header.iter().position(|h| h == "proj_e.mean").unwrap();
    assert_eq!(header[m + 1], "proj_e.se");
    let mut worst: f64 = 0.0;
    for row in &rows {
        let d = (row[m] - (-row[0]).exp()).abs();
        assert!(
            d <= 3.0 * row[m + 1] + 1e-15,
            "t={} mean={} se={}",
            row[0],
            row[m],
            row[m + 1]
        );
        worst = worst.max(d);
    }
    assert!(worst > 0.0);
}

#[test]
fn markovian_feedback_preset_reaches_conditional_covariance() {
    let dir = tempfile::tempdir().unwrap();
    let config = load_preset(
        "opo_markovian_feedback",
        &["run.n_traj=20".into(), "run.t_final=2.0".into()],
    )
    .unwrap();
    let manifest = run_to_dir(&config, &RunOptions::default(), dir.path()).unwrap();
    assert!(manifest.outputs.contains_key("steady_state.json"));
    let ss: Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("steady_state.json")).unwrap())
            .unwrap();
    for key in ["sigma_c", "sigma_unc"] {
        let s = &ss[key];
        assert!((s[0][0].as_f64().unwrap() - 0.6).abs() < 1e-8, "{key}: {s}");
        assert!(
            (s[1][1].as_f64().unwrap() - 5.0 / 3.0).abs() < 1e-8,
            "{key}: {s}"
        );
    }
    assert!((ss["m"][0][0].as_f64().unwrap() - 0.2828427).abs() < 1e-6);
    let back = read_manifest(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(back, manifest);
}

#[test]
fn gaussian_moments_track_riccati_and_lyapunov() {
    let config = load_preset(
        "opo_unconditional",
        &["run.t_final=30".into(), "run.dt=0.01".into()],
    )
    .unwrap();
    let r = execute(&config, &RunOptions::default()).unwrap();
    let s00 = *r.series.get("sigma_0_0").unwrap().last().unwrap();
    let s11 = *r.series.get("sigma_1_1").unwrap().last().unwrap();
    assert!((s00 - 1.0 / 1.4).abs() < 1e-6, "{s00}");
    assert!((s11 - 1.0 / 0.6).abs() < 1e-4, "{s11}");
}

#[test]
fn seed_changes_stochastic_output() {
    let a = load_preset(
        "qubit_homodyne",
        &["run.n_traj=10".into(), "run.t_final=0.5".into()],
    )
    .unwrap();
    let b = load_preset(
        "qubit_homodyne",
        &[
            "run.n_traj=10".into(),
            "run.t_final=0.5".into(),
            "run.seed=2".into(),
        ],
    )
    .unwrap();
    let ra = execute(&a, &RunOptions::default()).unwrap().series.to_csv();
    let rb = execute(&b, &RunOptions::default()).unwrap().series.to_csv();
    let ra2 = execute(&a, &RunOptions { threads: Some(3) })
        .unwrap()
        .series
        .to_csv();
    assert_ne!(ra, rb);
    assert_eq!(ra, ra2);
}

#[test]
fn stored_trajectories_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let config = load_preset(
        "qubit_decay_jump",
        &[
            "run.n_traj=3".into(),
            "run.t_final=0.1".into(),
            "output.store_trajectories=true".into(),
        ],
    )
    .unwrap();
    let m = run_to_dir(&config, &RunOptions::default(), dir.path()).unwrap();
    assert!(m.outputs.contains_key("trajectories.csv"));
    assert!(m.outputs.contains_key("trajectory_states.json"));
    let (header, rows) = read_csv(&dir.path().join("trajectories.csv"));
    assert_eq!(&header[..2], ["trajectory", "t"]);
    assert_eq!(rows.len(), 3 * 11);
}

#[test]
fn binary_lists_presets_and_runs() {
    let out = bin().arg("list-presets").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), PRESETS.len());

    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args([
            "preset",
            "qubit_decay_me",
            "--override",
            "run.t_final=0.5",
            "--out",
        ])
        .arg(dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    let status = bin()
        .arg("rerun")
        .arg(dir.path())
        .arg("--out")
        .arg(dir.path().join("again"))
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(
        std::fs::read(dir.path().join("stats.csv")).unwrap(),
        std::fs::read(dir.path().join("again/stats.csv")).unwrap()
    );
}

#[test]
fn binary_seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args([
            "preset",
            "qubit_homodyne",
            "--override",
            "run.n_traj=4",
            "--override",
            "run.t_final=0.2",
            "--seed",
            "99",
            "--out",
        ])
        .arg(dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    let m = read_manifest(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(m.seed, 99);
    assert_eq!(m.config["run"]["seed"], 99);
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"schema": 1, "system": {"kind": "qubit"},
            "model": {"efficiency": 1.5, "channels": [{"op": "sigma_minus", "rate": 1}], "colour": 1},
            "unravelling": {"kind": "jump"},
            "run": {"dt": 0.01, "t_final": 1}}"#,
    )
    .unwrap();
    let out = bin().arg("validate").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("efficiency out of [0,1]"), "{err}");
    assert!(err.contains("model.colour"), "{err}");

    let out = bin()
        .arg("run")
        .arg(dir.path().join("missing.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_IO));

    // an Euler homodyne stepper at a very coarse step loses positivity
    let out = bin()
        .args([
            "preset",
            "qubit_homodyne",
            "--override",
            "unravelling.scheme=euler",
            "--override",
            "run.dt=0.25",
            "--override",
            "run.positivity=abort",
            "--override",
            "run.n_traj=50",
            "--out",
        ])
        .arg(dir.path().join("unphysical"))
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(EXIT_PHYSICALITY),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = bin().args(["preset", "no_such_preset"]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn rerun_detects_tampered_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = load_preset(
        "qubit_decay_jump",
        &["run.n_traj=5".into(), "run.t_final=0.2".into()],
    )
    .unwrap();
    run_to_dir(&config, &RunOptions::default(), dir.path()).unwrap();
    let path = dir.path().join("manifest.json");
    let mut m: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    m["outputs"]["stats.csv"] = Value::String("00".repeat(32));
    std::fs::write(&path, m.to_string()).unwrap();
    let out = bin()
        .arg("rerun")
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("again"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("stats.csv"));
}
