use std::path::Path;

use dsc_core::harness::{run_experiment, write_csv, ExperimentConfig};

const MINI: &str = r#"{
  "name": "mini",
  "horizon": 60,
  "trials": 4,
  "seed": 7,
  "system": { "kind": "random", "state_dim": 4, "obs_dim": 2, "control_dim": 1, "spectral_radius": 0.7 },
  "disturbance": { "kind": "gaussian", "std": 0.5, "bound": 5.0 },
  "controllers": [
    { "kind": "lqg" },
    { "kind": "grc", "memory": 4, "eta": { "system_scaled": 0.003 } },
    { "kind": "dsc", "h": 2, "h_tilde": 2, "m": 4, "m_tilde": 4, "eta": { "system_scaled": 0.003 } }
  ]
}"#;

/// Set `UPDATE_GOLDEN=1` to rewrite the pinned file after an intended change.
#[test]
fn mini_run_matches_pinned_csv() {
    let config = ExperimentConfig::from_json(MINI).unwrap();
    let output = run_experiment(&config, Some(1)).unwrap();
    assert!(output.failures.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mini.csv");
    write_csv(&output.aggregate, &path).unwrap();
    let produced = std::fs::read_to_string(&path).unwrap();

    let pinned = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_mini.csv");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&pinned, &produced).unwrap();
    }
    let expected = std::fs::read_to_string(&pinned).unwrap();
    assert_eq!(produced, expected);
}
