use std::path::Path;
use std::process::{Command, Output};

fn ood(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ood"))
        .args(args)
        .env("OOD_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(o),
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn coverage_prob_prints_exact_fraction() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ood(&["coverage-prob", "--spots", "2", "--throws", "3"], tmp.path());
    assert_ok(&o);
    assert!(stdout(&o).contains("exact 3/4"), "{}", stdout(&o));

    let o = ood(&["coverage-prob", "--spots", "3", "--throws", "2"], tmp.path());
    assert_ok(&o);
    assert!(stdout(&o).contains("probability 0"), "{}", stdout(&o));
}

#[test]
fn coverage_prob_accepts_power_notation_for_huge_spaces() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ood(&["coverage-prob", "--spots", "2^4096", "--throws", "2^6272"], tmp.path());
    assert_ok(&o);
    let line = stdout(&o).lines().find(|l| l.starts_with("probability ")).unwrap().to_string();
    let p: f64 = line["probability ".len()..].parse().unwrap();
    assert!((0.0..=1.0).contains(&p));
}

#[test]
fn invalid_arguments_exit_with_config_status() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ood(&["coverage-prob", "--spots", "many", "--throws", "3"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = ood(&["coverage-prob", "--spots", "0", "--throws", "3"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = ood(&["no-such-command"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_config_exits_with_config_status() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "name = \"x\"\nmodel = \"transformer\"\n").unwrap();
    let o = ood(&["eval", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_attack_fit_and_score_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = ["--dataset", "synthetic:blobs"];

    let mut args = vec!["train", "--model", "cnn", "--epochs", "1", "--out", "models/cnn.ckpt"];
    args.extend(data);
    assert_ok(&ood(&args, root));
    let ckpt = root.join("models/cnn.ckpt");
    assert!(ckpt.exists(), "relative output resolved under the output root");
    let ckpt = ckpt.to_str().unwrap();

    let mut args = vec!["attack", "--checkpoint", ckpt, "--sample", "3", "--iterations", "40", "--out", "atk"];
    args.extend(data);
    let o = ood(&args, root);
    assert_ok(&o);
    assert!(stdout(&o).contains("slack"));
    let x_out = root.join("atk/sample3.out.otnsr");
    let x_in = root.join("atk/sample3.in.otnsr");
    assert!(x_out.exists() && x_in.exists() && root.join("atk/sample3.trace.csv").exists());

    for det in ["mahalanobis", "gram"] {
        let out = format!("{det}.stats");
        let mut args = vec!["fit-detector", "--checkpoint", ckpt, "--detector", det, "--held-out", "40", "--out", &out];
        args.extend(data);
        assert_ok(&ood(&args, root));
    }

    let inputs = [x_in.to_str().unwrap(), x_out.to_str().unwrap()];
    for (det, stats) in [
        ("max_softmax", None),
        ("odin", None),
        ("energy_grad_norm", Some("mahalanobis.stats")),
        ("mahalanobis", Some("mahalanobis.stats")),
        ("gram", Some("gram.stats")),
    ] {
        let stats_path = stats.map(|s| root.join(s).to_str().unwrap().to_string());
        let mut args = vec!["score", "--checkpoint", ckpt, "--detector", det];
        if let Some(s) = &stats_path {
            args.extend(["--stats", s.as_str()]);
        }
        args.extend(inputs);
        let o = ood(&args, root);
        assert_ok(&o);
        let text = stdout(&o);
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(rows.len(), 2, "{text}");
        for r in rows {
            let score: f64 = r.rsplit(',').next().unwrap().parse().unwrap();
            assert!(score.is_finite(), "{det}: {r}");
        }
    }

    let o = ood(&["score", "--checkpoint", ckpt, "--detector", "gram", inputs[0]], root);
    assert_eq!(o.status.code(), Some(2), "gram without fitted stats is a config error");
}

#[test]
fn eval_then_report_regenerates_the_same_table() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("exp.toml");
    std::fs::write(
        &cfg,
        r#"name = "tiny"
dataset = "synthetic:bars"
model = "mlp"
models_dir = "models"
target = "latent"
pairs = 4
output_dir = "run"
[training]
epochs = 1
batch_size = 32
learning_rate = 0.001
seed = 0
[attack]
epsilon = 10.0
norm = "l2"
iterations = 30
[detectors]
max_softmax = true
energy = true
mahalanobis = { magnitudes = [0.0] }
"#,
    )
    .unwrap();
    let o = ood(&["eval", "--config", cfg.to_str().unwrap()], root);
    assert_ok(&o);
    let run = root.join("run");
    for f in ["scores.csv", "attacks.csv", "auroc.csv", "report.json", "config.toml", "table.txt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let table = std::fs::read_to_string(run.join("table.txt")).unwrap();
    let o = ood(&["report", "--dir", "run"], root);
    assert_ok(&o);
    assert_eq!(stdout(&o), table);
    assert_eq!(std::fs::read_to_string(run.join("table.txt")).unwrap(), table);
}
