use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fairgate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairgate"))
        .args(args)
        .env_remove("FAIRGATE_OUT")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, name: &str, model: &str, extra: &str, seeds: &str) -> PathBuf {
    let text = format!(
        r#"
[data]
source = "synthetic"
d = 4
class_separation = 2.0
group_shift = 1.0
train_size = 400
dev_size = 200
test_size = 200
train_skew = 0.8

[model]
kind = "{model}"
hidden = 6

[train]
epochs = 3
batch_size = 32
learning_rate = 0.01

[eval]
seeds = {seeds}

{extra}
"#
    );
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_writes_exact_cell_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.toml");
    fs::write(
        &cfg,
        r#"
[data]
source = "synthetic"
d = 2
class_separation = 2.0
group_shift = 1.0
train_size = 100000
dev_size = 8000
test_size = 8000
train_skew = 0.8

[model]
kind = "standard"
hidden = 4

[train]
epochs = 1
batch_size = 8
learning_rate = 0.1
"#,
    )
    .unwrap();
    let data = dir.path().join("data");
    let out = ok(&fairgate(&["gen", "--config", s(&cfg), "--out", s(&data), "--data-format", "binary"]));
    let summary: serde_json::Value = serde_json::from_str(&out).unwrap();
    let counts: Vec<u64> = summary[0]["cells"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["count"].as_u64().unwrap())
        .collect();
    assert_eq!(counts, vec![10_000, 40_000, 40_000, 10_000]);
    assert_eq!(summary[1]["size"], 8000);
    for f in ["train.bin", "dev.bin", "test.bin"] {
        assert!(data.join(f).is_file());
    }

    let csv = ok(&fairgate(&["gen", "--config", s(&cfg), "--out", s(&data), "--format", "csv"]));
    assert_eq!(csv.lines().next(), Some("split,y,g,count"));
    assert!(data.join("train.txt").is_file());
}

#[test]
fn invalid_config_exits_with_two_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "standard", "", "[0]");
    let text = fs::read_to_string(&cfg).unwrap().replace("train_skew = 0.8", "train_skew = 1.5");
    fs::write(&cfg, text).unwrap();
    let out = fairgate(&["gen", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.train_skew"));

    let cfg = write_config(dir.path(), "nolnlp.toml", "standard", "", "[0]");
    let out = fairgate(&["inlp", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("inlp"));
}

#[test]
fn reruns_rewrite_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "gate.toml", "gated", "[balance]\nmethod = \"rw\"", "[0]");
    let root = dir.path().join("runs");
    let first = ok(&fairgate(&["train", "--config", s(&cfg), "--out", s(&root)]));
    let summary: serde_json::Value = serde_json::from_str(&first).unwrap();
    let run_dir = PathBuf::from(summary[0]["run_dir"].as_str().unwrap());
    let files = ["checkpoint.bin", "history.jsonl", "report_dev.json", "report_test.json", "run.json", "config.toml", "weights.txt"];
    let before: Vec<Vec<u8>> = files.iter().map(|f| fs::read(run_dir.join(f)).unwrap()).collect();
    ok(&fairgate(&["train", "--config", s(&cfg), "--out", s(&root)]));
    for (f, old) in files.iter().zip(&before) {
        assert_eq!(&fs::read(run_dir.join(f)).unwrap(), old, "{f} changed");
    }

    let eval = ok(&fairgate(&["eval", "--config", s(&cfg), "--out", s(&root)]));
    let eval: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert_eq!(eval[0]["test"], summary[0]["test"]);
}

#[test]
fn sweep_over_a_trained_gate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "gate.toml", "gated", "[sweep]\nresolution = 5", "[0]");
    let root = dir.path().join("runs");
    ok(&fairgate(&["train", "--config", s(&cfg), "--out", s(&root)]));
    let out = ok(&fairgate(&["sweep", "--config", s(&cfg), "--out", s(&root), "--format", "csv"]));
    assert!(out.starts_with("seed,alpha,beta"));
    let run_dir = fs::read_dir(&root).unwrap().next().unwrap().unwrap().path();
    let csv = fs::read_to_string(run_dir.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("alpha,beta,accuracy,rms_gap"));
    assert_eq!(csv.lines().count(), 26);
    assert!(run_dir.join("sweep.json").is_file());
}

#[test]
fn sweep_without_a_gated_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("runs");
    let cfg = write_config(dir.path(), "gate.toml", "gated", "", "[0]");
    let out = fairgate(&["sweep", "--config", s(&cfg), "--out", s(&root)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fairgate train"));
}

#[test]
fn report_aggregates_and_lists_missing_runs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("runs");
    let std_cfg = write_config(dir.path(), "std.toml", "standard", "", "[0, 1]");
    let rw_cfg = write_config(dir.path(), "rw.toml", "standard", "[balance]\nmethod = \"rw\"", "[0, 1]");
    ok(&fairgate(&["train", "--config", s(&std_cfg), "--out", s(&root)]));
    ok(&fairgate(&["train", "--config", s(&rw_cfg), "--out", s(&root), "--seed", "0"]));

    let out = fairgate(&["report", s(&root)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("RW") && err.contains("seeds 1"), "{err}");

    ok(&fairgate(&["train", "--config", s(&rw_cfg), "--out", s(&root), "--seed", "1"]));
    let table: serde_json::Value = serde_json::from_str(&ok(&fairgate(&["report", s(&root)]))).unwrap();
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["label"], "Standard");
    assert_eq!(rows[0]["relative_time"], 1.0);

    let csv = Command::new(env!("CARGO_BIN_EXE_fairgate"))
        .args(["report", "--format", "csv"])
        .env("FAIRGATE_OUT", &root)
        .output()
        .unwrap();
    assert_eq!(ok(&csv).lines().count(), 3);
}

#[test]
fn inlp_command_enables_the_section() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("runs");
    let cfg = write_config(
        dir.path(),
        "inlp.toml",
        "standard",
        "[inlp]\nenabled = false\niterations = 2",
        "[0]",
    );
    let out = ok(&fairgate(&["inlp", "--config", s(&cfg), "--out", s(&root), "--format", "csv"]));
    assert!(out.lines().nth(1).unwrap().starts_with("INLP,0,"), "{out}");
}
