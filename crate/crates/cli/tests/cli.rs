//! Exit-code and output contracts of the command-line surface.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pdqat"))
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn tiny_config(dir: &Path, epochs: usize, extra: &str) -> PathBuf {
    let out = dir.join("out");
    let text = format!(
        r#"
[model]
input = [2]
classes = 2
layers = [
  {{ kind = "dense", out = 6, act = "clip" }},
  {{ kind = "dense", out = 2 }},
]

[quant]
bits = [2, 0]

[train]
epochs = {epochs}
batch_size = 16
seed = 9
early_stop = false

[data]
kind = "blobs"
n_per_class = 40
noise = 0.5

[output]
dir = "{}"
{extra}
"#,
        out.display()
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let out = binary()
        .arg("train")
        .arg("/nonexistent/config.toml")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("/nonexistent/config.toml"), "{stderr}");
}

#[test]
fn unknown_config_key_exits_2_before_any_computation() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_config(dir.path(), 1, "\n[oops]\nkey = 1\n");
    let out = binary().arg("train").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    // nothing written
    assert!(!dir.path().join("out").exists());
}

#[test]
fn zero_epochs_exits_0_with_header_only_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_config(dir.path(), 0, "");
    let out = binary().arg("train").arg(&path).output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let metrics = fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 1);
    assert!(lines[0].starts_with("epoch,train_loss"));
    assert!(dir.path().join("out/checkpoint.bin").exists());
}

#[test]
fn train_writes_metrics_rows_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_config(dir.path(), 3, "");
    let out = binary().arg("train").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let metrics = fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4); // header + 3 epochs
}

#[test]
fn baseline_checkpoint_is_rejected_by_rank() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_config(dir.path(), 2, "");
    let out = binary()
        .arg("train")
        .arg(&path)
        .arg("--baseline")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let ck = dir.path().join("out/checkpoint.bin");
    let out = binary().arg("rank").arg(&ck).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("dual"), "{stderr}");
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, b"XXXXX1 not a checkpoint").unwrap();
    let out = binary().arg("rank").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("format"),
        "named magic error"
    );
}

#[test]
fn rank_writes_one_row_per_interior_layer() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_config(dir.path(), 2, "");
    assert_eq!(
        binary()
            .arg("train")
            .arg(&path)
            .output()
            .unwrap()
            .status
            .code(),
        Some(0)
    );
    let ck = dir.path().join("out/checkpoint.bin");
    let out = binary().arg("rank").arg(&ck).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let rank = fs::read_to_string(dir.path().join("out/rank.csv")).unwrap();
    assert_eq!(rank.lines().count(), 2); // header + 1 interior layer
}

#[test]
fn mixed_eval_k0_writes_single_plain_eval_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_config(dir.path(), 2, "");
    assert_eq!(
        binary()
            .arg("train")
            .arg(&path)
            .output()
            .unwrap()
            .status
            .code(),
        Some(0)
    );
    let ck = dir.path().join("out/checkpoint.bin");
    let out = binary()
        .args(["mixed-eval"])
        .arg(&ck)
        .args(["--k", "0", "--mode", "top", "--split", "test"])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(dir.path().join("out/mixed_eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("0,top,"));
}

#[test]
fn mixed_eval_k_out_of_range_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_config(dir.path(), 2, "");
    assert_eq!(
        binary()
            .arg("train")
            .arg(&path)
            .output()
            .unwrap()
            .status
            .code(),
        Some(0)
    );
    let ck = dir.path().join("out/checkpoint.bin");
    let out = binary()
        .args(["mixed-eval"])
        .arg(&ck)
        .args(["--k", "9", "--mode", "top"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_rejects_duplicate_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_config(dir.path(), 1, "");
    let out = binary()
        .arg("sweep")
        .arg(&path)
        .args(["--param", "eps_out", "--values", "0.2,0.2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_single_value_writes_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_config(dir.path(), 2, "");
    let out = binary()
        .arg("sweep")
        .arg(&path)
        .args(["--param", "eps_out", "--values", "0.3"])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("value,test_acc,lambda_final"));
}

#[test]
fn sweep_parallel_jobs_match_sequential() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_config(dir.path(), 2, "");
    let run = |jobs: &str, out_name: &str| {
        let out_dir = dir.path().join(out_name);
        let out = binary()
            .arg("sweep")
            .arg(&path)
            .args([
                "--param",
                "eps_out",
                "--values",
                "0.1,0.4,0.9",
                "--jobs",
                jobs,
            ])
            .env("PDQAT_OUT_DIR", &out_dir)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
        fs::read_to_string(out_dir.join("sweep.csv")).unwrap()
    };
    assert_eq!(run("1", "seq"), run("3", "par"));
}

#[test]
fn probe_rejects_non_increasing_grid() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_config(dir.path(), 1, "");
    let out = binary()
        .arg("probe")
        .arg(&path)
        .args(["--grid", "0.5,0.1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_on_the_shipped_config() {
    let out = binary()
        .arg("gradcheck")
        .arg(config_path("gradcheck.toml"))
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
}

#[test]
fn gradcheck_passes_on_the_conv_config() {
    let out = binary()
        .arg("gradcheck")
        .arg(config_path("gradcheck_conv.toml"))
        .args(["--points", "5"])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
}

#[test]
fn numeric_divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_config(dir.path(), 5, "");
    let text = fs::read_to_string(&path)
        .unwrap()
        .replace("seed = 9", "seed = 9\nlr = 3e38");
    fs::write(&path, text).unwrap();
    let out = binary().arg("train").arg(&path).output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stderr).contains("numeric"));
}

#[test]
fn output_dir_env_override_redirects_everything() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_config(dir.path(), 2, "");
    let other = dir.path().join("redirected");
    let out = binary()
        .arg("train")
        .arg(&path)
        .env("PDQAT_OUT_DIR", &other)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(other.join("metrics.csv").exists());
    assert!(other.join("checkpoint.bin").exists());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn rank_by_trajectory_mean_is_available() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_config(dir.path(), 3, "");
    assert_eq!(binary().arg("train").arg(&path).output().unwrap().status.code(), Some(0));
    let ck = dir.path().join("out/checkpoint.bin");
    let out = binary().arg("rank").arg(&ck).args(["--stat", "mean"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let rank = fs::read_to_string(dir.path().join("out/rank.csv")).unwrap();
    assert!(rank.starts_with("layer,lambda,rank"));
}
