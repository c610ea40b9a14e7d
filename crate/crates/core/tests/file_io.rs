//! Round trips through files on disk.

use scorecraft::data::{synth_generate, SyntheticSpec};
use scorecraft::eval::kde;
use scorecraft::pipeline::{run_training, TrainOptions};
use scorecraft::{load_csv, preset, ConstraintConfig, Error, ScoringModel};
use tempfile::TempDir;

#[test]
fn dataset_csv_round_trip_is_exact() {
    let dir = TempDir::new().unwrap();
    let data = synth_generate(&SyntheticSpec {
        n: 50,
        seed: 9,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let path = dir.path().join("d.csv");
    data.write_csv(&path, "y").unwrap();
    let back = load_csv(&path, Some("y")).unwrap();
    assert_eq!(back.feature_names(), data.feature_names());
    assert_eq!(back.values(), data.values());
    assert_eq!(back.labels(), data.labels());
}

#[test]
fn model_and_config_files_round_trip() {
    let dir = TempDir::new().unwrap();
    let mut config = preset("synthetic").unwrap();
    config.train.epochs = 2;
    let config_path = dir.path().join("c.json");
    std::fs::write(&config_path, config.to_json().unwrap()).unwrap();
    let loaded = ConstraintConfig::load(&config_path).unwrap();
    assert_eq!(loaded, config);
    assert_eq!(loaded.digest(), config.digest());

    let data = synth_generate(&SyntheticSpec {
        n: 200,
        seed: 1,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let out = run_training(&data, &loaded, &TrainOptions::default()).unwrap();
    let model_path = dir.path().join("m.json");
    out.model.save(&model_path).unwrap();
    let model = ScoringModel::load(&model_path).unwrap();
    assert_eq!(model, out.model);
    assert_eq!(model.config_digest, config.digest());
}

#[test]
fn kde_csv_has_header_and_grid() {
    let dir = TempDir::new().unwrap();
    let scores: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
    let curve = kde(&scores, None, 64).unwrap();
    let path = dir.path().join("k.csv");
    curve.save_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("grid,density"));
    let rows: Vec<(f64, f64)> = lines
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 64);
    for (row, (g, d)) in rows.iter().zip(curve.grid.iter().zip(&curve.density)) {
        assert_eq!(row, &(*g, *d));
    }
}

#[test]
fn missing_files_are_io_errors() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.json");
    assert!(matches!(ConstraintConfig::load(&missing), Err(Error::Io { .. })));
    assert!(matches!(ScoringModel::load(&missing), Err(Error::Io { .. })));
    assert!(load_csv(&missing, None).is_err());
}
