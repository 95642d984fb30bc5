use std::path::Path;

use shindo::config::PipelineConfig;
use shindo::pipeline::{read_json_artifact, run_pipeline, FragilityRecord, Stage};
use shindo::synth::{generate_scenario, Preset, ScenarioConfig};

fn scenario(dir: &Path) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::preset(Preset::Small, 11);
    cfg.lgus.truncate(10);
    generate_scenario(&cfg).unwrap().write_to_dir(dir).unwrap();
    cfg
}

fn config(dir: &Path, s: &ScenarioConfig) -> PipelineConfig {
    PipelineConfig {
        gps: dir.join("gps.csv"),
        lgu: dir.join("lgu.csv"),
        intensity: dir.join("intensity.csv"),
        output_dir: dir.join("out"),
        event_time: Some(s.event_time),
        ..PipelineConfig::default()
    }
}

#[test]
fn end_to_end_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path());
    let cfg = config(dir.path(), &s);
    let summary = run_pipeline(&cfg).unwrap();
    assert!(summary.homes > 0 && summary.evacuated > 0);

    let out = &cfg.output_dir;
    for name in [
        "homes.csv",
        "evac.csv",
        "excluded.csv",
        "rates.csv",
        "curve.csv",
        "pooled.csv",
        "timing.csv",
        "distpdf.csv",
        "popgrid.csv",
        "config.toml",
    ] {
        let text = std::fs::read_to_string(out.join(name)).unwrap();
        assert!(text.starts_with("# shindo "), "{name} lacks the provenance header");
        assert!(text.lines().next().unwrap().contains("config_sha256="));
    }

    let frag: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("fragility.json")).unwrap()).unwrap();
    for key in [
        "mu",
        "sigma",
        "a",
        "log_likelihood",
        "R",
        "MAPE",
        "n_obs",
        "r_m",
        "window_days",
        "config_sha256",
    ] {
        assert!(frag.get(key).is_some(), "fragility.json lacks {key}");
    }
    let rec: FragilityRecord = read_json_artifact(&out.join("fragility.json")).unwrap();
    assert_eq!(rec.r_m, 200.0);
    assert_eq!(rec.window_days, 7);

    let curve = std::fs::read_to_string(out.join("curve.csv")).unwrap();
    let rows: Vec<&str> = curve.lines().skip(2).collect();
    assert_eq!(rows.len(), 61);
    assert!(rows[0].starts_with("4,") && rows[60].starts_with("7,"));

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["inputs"]["gps"]["sha256"].as_str().unwrap().len(), 64);
    assert!(manifest["outputs"]["evac.csv"].is_string());
    assert_eq!(manifest["parameters"]["r_m"], 200.0);

    // The echoed config reloads to the same parameters.
    let echoed = PipelineConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!(echoed, cfg);
}

#[test]
fn missing_gps_fails_in_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path());
    let mut cfg = config(dir.path(), &s);
    cfg.gps = dir.path().join("nope.csv");
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.stage, Stage::Ingest);
    assert_ne!(err.exit_code(), 0);
    assert!(err.to_string().starts_with("ingest"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cfg.output_dir.join("error.json")).unwrap()).unwrap();
    assert_eq!(report["stage"], "ingest");
}

#[test]
fn event_outside_span_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path());
    let mut cfg = config(dir.path(), &s);
    cfg.event_time = Some(0);
    let err = run_pipeline(&cfg).unwrap_err();
    assert_eq!(err.stage, Stage::Config);
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("event_time"));
}
