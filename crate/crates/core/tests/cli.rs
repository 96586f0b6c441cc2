use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[corpus]
val_fraction = 0.2

[corpus.synthetic]
n_styles = 2
examples_per_style = 30

[model]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
max_seq_len = 32

[pretrain]
epochs = 1

[pretrain.pretext]
n_styles = 4
examples_per_style = 15

[train]
epochs = 2
batch_size = 8

[train.lora]
rank = 2
"#;

fn chameleon(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chameleon"))
        .current_dir(dir)
        .env_remove("CHAMELEON_OUT_DIR")
        .args(args)
        .output()
        .unwrap()
}

fn small_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn defaults_print_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = chameleon(dir.path(), &["defaults"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("[train]") && text.contains("regime = \"chameleon\""));
    fs::write(dir.path().join("d.toml"), &text).unwrap();
    let again = chameleon(dir.path(), &["-c", "d.toml", "defaults"]);
    assert_eq!(stdout(&again), text);
}

#[test]
fn missing_corpus_exits_with_two_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = chameleon(dir.path(), &["cluster", "--corpus", "nowhere/corpus.txt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/corpus.txt"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[train]\nepoch = 3\n").unwrap();
    assert_eq!(chameleon(dir.path(), &["-c", "bad.toml", "train"]).status.code(), Some(2));
    assert_eq!(chameleon(dir.path(), &["train", "--regime", "lora"]).status.code(), Some(2));
    assert_eq!(chameleon(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn train_writes_metrics_checkpoints_and_manifest() {
    let dir = small_dir();
    let out = chameleon(dir.path(), &["-c", "small.toml", "--out", "run", "train", "--regime", "static_lora"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "epoch,regime,parameters,train_loss,val_loss,val_perplexity");
    assert!(lines[1].starts_with("1,static_lora,"));
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 2);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["train"]["regime"], "static_lora");
    assert_eq!(manifest["corpus_checksum"].as_str().unwrap().len(), 64);

    let eval = chameleon(
        dir.path(),
        &["-c", "small.toml", "eval", "--backbone", "run/backbone.bin", "--adapters", "run/adapters.bin"],
    );
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let got: serde_json::Value = serde_json::from_str(stdout(&eval).trim()).unwrap();
    let last_val: f64 = lines[2].split(',').nth(4).unwrap().parse().unwrap();
    // adapters are stored as f32
    assert!((got["val_loss"].as_f64().unwrap() - last_val).abs() < 1e-4);
    assert_eq!(got["regime"], "static_lora");
}

#[test]
fn output_dir_comes_from_the_environment() {
    let dir = small_dir();
    let out = Command::new(env!("CARGO_BIN_EXE_chameleon"))
        .current_dir(dir.path())
        .env("CHAMELEON_OUT_DIR", "from_env")
        .args(["-c", "small.toml", "--pretrain-epochs", "0", "pretrain"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from_env/backbone.bin").exists());
}

#[test]
fn cluster_reports_json() {
    let dir = small_dir();
    let out = chameleon(dir.path(), &["-c", "small.toml", "--batch-size", "24", "cluster"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(v["k"], 2);
    assert_eq!(v["sizes"].as_array().unwrap().len(), 2);
    assert!(v["purity"].as_f64().unwrap() > 0.9);
}

#[test]
fn jsonl_corpus_from_file() {
    let dir = small_dir();
    let mut lines = String::new();
    for i in 0..40 {
        let text = if i % 2 == 0 { "abcabcabcabc" } else { "xyzzyxyzzy" };
        lines.push_str(&serde_json::json!({ "instruction": format!("style {}", i % 2), "text": text }).to_string());
        lines.push('\n');
    }
    fs::write(dir.path().join("c.jsonl"), lines).unwrap();
    let out = chameleon(
        dir.path(),
        &["-c", "small.toml", "--corpus", "c.jsonl", "--format", "jsonl", "--out", "j", "train", "--regime", "chameleon"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(dir.path().join("j/metrics.csv")).unwrap().lines().count(), 3);
}

#[test]
fn malformed_jsonl_reports_the_line() {
    let dir = small_dir();
    fs::write(dir.path().join("c.jsonl"), "{\"text\": \"ok\"}\nnot json\n").unwrap();
    let out = chameleon(dir.path(), &["--corpus", "c.jsonl", "--format", "jsonl", "cluster"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("c.jsonl:2:"));
}
