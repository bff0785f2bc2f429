use std::process::Command;

fn jadce() -> Command {
    Command::new(env!("CARGO_BIN_EXE_jadce"))
}

#[test]
fn preset_listing_and_round_trip() {
    let out = jadce().arg("preset").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("fig2") && text.contains("fig9"));

    let out = jadce().args(["preset", "fig7"]).output().unwrap();
    assert!(out.status.success());
    let spec = jadce::harness::ExperimentSpec::from_json(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(spec.name, "fig7");
}

#[test]
fn unknown_preset_fails() {
    let out = jadce().args(["sweep", "--preset", "nope"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn bounds_prints_a_table() {
    let out = jadce().args(["bounds", "--p", "2,3", "--k", "2"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 3, "{text}");
}

#[test]
fn sweep_from_config_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = jadce::harness::preset("fig2").unwrap();
    spec.system = jadce::channel_model::SystemConfig::new(4, 1, 8, 8, 8, 64, 32, 0.125, 1, 2);
    spec.sweep.values = vec![2.0];
    spec.solver.max_iter = 40;
    spec.baseline.max_iter = 40;
    let cfg = dir.path().join("spec.json");
    std::fs::write(&cfg, serde_json::to_string(&spec).unwrap()).unwrap();
    let out_dir = dir.path().join("out");
    let out = jadce()
        .args([
            "--threads",
            "1",
            "sweep",
            "--trials",
            "2",
            "--algo",
            "RG-MRAS,OMP",
            "--config",
        ])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let records = std::fs::read_to_string(out_dir.join("records.csv")).unwrap();
    assert_eq!(records.lines().count(), 1 + 2 * 2);
    assert!(out_dir.join("plot.json").exists());
}
