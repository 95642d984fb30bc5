use std::path::Path;
use std::process::{Command, Output};

fn shindo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shindo"))
        .args(args)
        .output()
        .expect("spawn shindo")
}

fn synth(dir: &Path) {
    let out = shindo(&["--seed", "9", "synth", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn synth_then_run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let cfg = data.join("shindo.toml");
    let out = shindo(&["-c", cfg.to_str().unwrap(), "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["evacuated"].as_u64().unwrap() > 0);
    for name in [
        "homes.csv",
        "evac.csv",
        "excluded.csv",
        "rates.csv",
        "fragility.json",
        "curve.csv",
        "pooled.csv",
        "timing.csv",
        "powerlaw.json",
        "distpdf.csv",
        "popgrid.csv",
        "summary.json",
        "config.toml",
        "manifest.json",
    ] {
        assert!(data.join("out").join(name).is_file(), "missing {name}");
    }
}

#[test]
fn missing_gps_names_the_ingest_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let cfg = data.join("shindo.toml");
    let out = shindo(&["-c", cfg.to_str().unwrap(), "--gps", "/nonexistent/gps.csv", "run"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ingest stage failed"));
    let report: serde_json::Value = serde_json::from_str(&read(&data.join("out/error.json"))).unwrap();
    assert_eq!(report["stage"], "ingest");
}

#[test]
fn bad_flag_value_is_a_config_error() {
    let out = shindo(&["--r-m", "-5", "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`r_m`"));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let again = tmp.path().join("again");
    synth(&again);
    assert_eq!(read(&data.join("gps.csv")), read(&again.join("gps.csv")));

    let cfg = data.join("shindo.toml");
    for o in ["run1", "run2"] {
        let dir = tmp.path().join(o);
        let out = shindo(&["-c", cfg.to_str().unwrap(), "-o", dir.to_str().unwrap(), "run"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in [
        "evac.csv",
        "rates.csv",
        "fragility.json",
        "curve.csv",
        "distpdf.csv",
        "popgrid.csv",
    ] {
        assert_eq!(
            read(&tmp.path().join("run1").join(name)),
            read(&tmp.path().join("run2").join(name)),
            "{name} differs"
        );
    }
}

#[test]
fn stepwise_commands_match_the_full_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let cfg = data.join("shindo.toml");
    let c = cfg.to_str().unwrap();
    let full = tmp.path().join("full");
    assert!(shindo(&["-c", c, "-o", full.to_str().unwrap(), "run"]).status.success());

    let step = tmp.path().join("step");
    let s = step.to_str().unwrap();
    for cmd in ["evac", "rates", "fit", "distfit"] {
        let out = shindo(&["-c", c, "-o", s, cmd]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for name in [
        "evac.csv",
        "rates.csv",
        "fragility.json",
        "curve.csv",
        "powerlaw.json",
        "distpdf.csv",
    ] {
        assert_eq!(read(&full.join(name)), read(&step.join(name)), "{name} differs");
    }

    std::fs::write(tmp.path().join("pop.csv"), "lgu_id,population\nL001,1000\nL002,2000\n").unwrap();
    let out = shindo(&[
        "-c",
        c,
        "-o",
        s,
        "predict",
        "--population",
        tmp.path().join("pop.csv").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pred = read(&step.join("predicted.csv"));
    assert_eq!(pred.lines().nth(1), Some("lgu_id,si,population,expected_evacuees"));
    assert_eq!(pred.lines().count(), 4);
}
