use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use couplformer::train::{read_metrics, METRICS_FILE};

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn data_dir() -> PathBuf {
    std::env::var_os("COUPLFORMER_DATA").map(PathBuf::from).unwrap_or_else(|| workspace().join("data/mnist"))
}

fn couplformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_couplformer"))
        .args(args)
        .current_dir(workspace())
        .env("COUPLFORMER_DATA", data_dir())
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path_arg(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

#[test]
fn verify_suite_passes() {
    let o = couplformer(&["verify", "--suite", "lemma1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS lemma1/"));
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let o = couplformer(&["verify", "--suite", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_writes_one_row_per_size_and_mechanism() {
    let dir = tempfile::tempdir().unwrap();
    let o = couplformer(&["bench", "--grid", "32,64", "--mechanism", "both", "--out", path_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], couplformer::bench::CSV_HEADER);
    assert!(lines[1].starts_with("standard,32,32,"));
    assert!(lines[4].starts_with("coupled,64,64,"));
    assert!(dir.path().join("config.txt").is_file());
}

#[test]
fn bench_rejects_bad_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = couplformer(&["bench", "--grid", "32,zero", "--out", path_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

const TINY_SYNTHETIC: &[&str] = &[
    "--set", "dataset=synthetic",
    "--set", "img_size=8x8",
    "--set", "stem=16:1:pool",
    "--set", "embed_dim=16",
    "--set", "depth=1",
    "--set", "heads=2",
    "--set", "num_classes=2",
    "--set", "subset_size=128",
    "--set", "val_size=64",
    "--set", "batch_size=16",
    "--set", "lr=0.005",
    "--set", "epochs=10",
];

#[test]
fn synthetic_two_class_task_is_learned() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--out", path_arg(dir.path())];
    args.extend_from_slice(TINY_SYNTHETIC);
    let o = couplformer(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let history = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(history.len(), 10);
    let best = history.iter().map(|m| m.train_acc).fold(0.0, f64::max);
    assert!(best >= 0.99, "best train accuracy {best}");
}

#[test]
fn identical_runs_write_identical_metrics() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut args = vec!["train", "--out", path_arg(dir.path()), "--seed", "7"];
        args.extend_from_slice(TINY_SYNTHETIC);
        args.extend_from_slice(&["--set", "epochs=2"]);
        let o = couplformer(&args);
        assert_eq!(o.status.code(), Some(0));
        std::fs::read(dir.path().join(METRICS_FILE)).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn train_then_eval_on_mnist() {
    let dir = tempfile::tempdir().unwrap();
    let o = couplformer(&["train", "--config", "configs/tiny_mnist.cfg", "--set", "epochs=2", "--out", path_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let initial: f64 = stdout(&o)
        .lines()
        .find_map(|l| l.strip_prefix("initial_loss="))
        .expect("initial loss printed")
        .parse()
        .unwrap();

    let history = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(history.len(), 2);
    assert!(history[0].train_loss < initial, "{} !< {initial}", history[0].train_loss);
    for name in ["config.txt", "checkpoint/manifest.txt", "checkpoint/params.cplt", "checkpoint/config.txt"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }

    let ckpt = dir.path().join("checkpoint");
    let o = couplformer(&["eval", "--checkpoint", path_arg(&ckpt)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let accuracy: f64 = out
        .split_whitespace()
        .find_map(|t| t.strip_prefix("accuracy="))
        .expect("accuracy printed")
        .parse()
        .unwrap();
    assert!(out.starts_with("samples=1000 "));
    assert!((accuracy - history[1].val_acc).abs() <= 1e-12, "{accuracy} vs {}", history[1].val_acc);

    let o = couplformer(&["eval", "--checkpoint", path_arg(&ckpt), "--set", "depth=3"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("incompatible checkpoint geometry"));
}

#[test]
fn eval_without_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = couplformer(&["eval", "--checkpoint", path_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}
