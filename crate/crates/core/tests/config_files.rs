use std::path::Path;

use obsmpc::config::{ConfigError, RunConfig};
use serde_json::Value;

fn default_path() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/default.json"))
}

#[test]
fn shipped_config_is_the_default() {
    let cfg = RunConfig::load(default_path()).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn shipped_config_round_trips_field_by_field() {
    let text = std::fs::read_to_string(default_path()).unwrap();
    let original: Value = serde_json::from_str(&text).unwrap();
    let cfg = RunConfig::from_json(&text).unwrap();
    let again: Value = serde_json::from_str(&cfg.to_json()).unwrap();
    assert_eq!(original, again);
}

#[test]
fn missing_file_is_an_io_error() {
    let err = RunConfig::load(Path::new("/nonexistent/run.json")).unwrap_err();
    assert!(matches!(err, ConfigError::Io { .. }));
    assert!(err.to_string().contains("/nonexistent/run.json"));
}

#[test]
fn malformed_json_is_rejected() {
    assert!(matches!(RunConfig::from_json("{ not json"), Err(ConfigError::Parse(_))));
    assert!(matches!(
        RunConfig::from_json(r#"{"noise": {"nu": "big"}}"#),
        Err(ConfigError::Parse(_))
    ));
}

#[test]
fn scripted_warmup_parses() {
    let cfg = RunConfig::from_json(
        r#"{"simulation": {"warmup": {"kind": "scripted", "controls": [[1.0, 0.0], [0.0, 1.0]]}}}"#,
    )
    .unwrap();
    assert_eq!(
        cfg.loop_config().warmup,
        obsmpc::simulation::WarmupPolicy::Scripted {
            controls: vec![vec![1.0, 0.0], vec![0.0, 1.0]]
        }
    );
    let err = RunConfig::from_json(r#"{"simulation": {"warmup": {"kind": "scripted", "controls": [[1.0]]}}}"#)
        .unwrap_err();
    assert!(err.to_string().contains("simulation.warmup.controls"), "{err}");
}
