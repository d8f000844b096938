//! End-to-end runs on a small synthetic dataset: persisted artifacts can be
//! regenerated byte for byte, and repeated runs hash identically.

use std::path::Path;

use ood_core::harness::{regenerate_report, run_experiment, ExperimentConfig};
use ood_core::metrics::write_scores_csv;

fn tiny_config(root: &Path, name: &str, detectors: &str) -> ExperimentConfig {
    let text = format!(
        r#"name = "{name}"
dataset = "synthetic:bars"
model = "mlp"
models_dir = "{models}"
target = "latent"
pairs = 5
seed = 3
output_dir = "{out}"
[training]
epochs = 1
batch_size = 32
learning_rate = 0.001
seed = 0
[attack]
epsilon = 10.0
norm = "l2"
iterations = 25
[detectors]
{detectors}
"#,
        models = root.join("models").display(),
        out = root.join(name).display(),
    );
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    cfg.validate().unwrap();
    cfg
}

const DETECTORS: &str = r#"max_softmax = true
oe = true
energy = true
mahalanobis = { magnitudes = [0.0, 0.001] }
odin = { temperatures = [1, 10], magnitudes = [0] }
"#;

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| {
            let p = e.unwrap().path();
            p.is_file().then(|| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        })
        .collect();
    files.sort();
    files
}

#[test]
fn regenerated_artifacts_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "first", DETECTORS);
    let run = run_experiment(&cfg).unwrap();
    let original = read_dir_sorted(&cfg.output_dir);
    assert!(original.iter().any(|(n, _)| n.ends_with(".svg")), "figures were written");

    // Only the config and the two raw CSVs are carried over.
    let copy = tmp.path().join("copy");
    std::fs::create_dir_all(&copy).unwrap();
    for f in ["config.toml", "scores.csv", "attacks.csv", "report.json"] {
        std::fs::copy(cfg.output_dir.join(f), copy.join(f)).unwrap();
    }
    let regenerated = regenerate_report(&copy).unwrap();
    assert_eq!(regenerated.report_hash, run.report.report_hash);
    for (name, bytes) in &original {
        if name.ends_with(".svg") || name.ends_with(".csv") || name == "table.txt" {
            let other = std::fs::read(copy.join(name)).unwrap_or_else(|_| panic!("{name} not regenerated"));
            assert!(&other == bytes, "{name} differs after regeneration");
        }
    }
}

#[test]
fn repeated_runs_produce_the_same_report_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run_experiment(&tiny_config(tmp.path(), "a", DETECTORS)).unwrap();
    // Same experiment, different output directory (which is not hashed).
    let mut cfg_b = tiny_config(tmp.path(), "a", DETECTORS);
    cfg_b.output_dir = tmp.path().join("b");
    let b = run_experiment(&cfg_b).unwrap();
    assert_eq!(a.report.report_hash, b.report.report_hash);
    assert_eq!(a.report.cells, b.report.cells);

    let mut cfg = tiny_config(tmp.path(), "a", DETECTORS);
    cfg.output_dir = tmp.path().join("c");
    cfg.attack.seed += 1;
    cfg.attack.restarts = 2;
    let c = run_experiment(&cfg).unwrap();
    assert_ne!(a.report.report_hash, c.report.report_hash, "different attacks hash differently");
}

#[test]
fn no_detectors_means_header_only_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "empty", "");
    assert!(cfg.detectors.is_empty());
    let run = run_experiment(&cfg).unwrap();
    assert!(run.report.cells.is_empty());
    let scores = std::fs::read_to_string(cfg.output_dir.join("scores.csv")).unwrap();
    assert_eq!(scores, "sample_id,detector_id,side,score\n");

    let mut direct = Vec::new();
    write_scores_csv(&mut direct, &[]).unwrap();
    assert_eq!(String::from_utf8(direct).unwrap(), scores);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let err = ExperimentConfig::from_toml("name = \"x\"\nmodel = \"cnn\"\nbogus = 1\n").unwrap_err();
    assert!(matches!(err, ood_core::Error::Config(_)), "{err:?}");
}
