use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: [&str; 10] = [
    "--set", "d_dpcl=2", "--set", "d_diff=8", "--set", "epochs_stage1=2", "--set", "epochs_stage2=1", "--set", "diffusion_steps=5",
];

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpcl-diff")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(args: &[&str], code: i32) -> String {
    let out = bin(args);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    err
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(TINY).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a small three-file dataset and prepares it.
fn prepared(dir: &Path) -> PathBuf {
    let mut train = String::new();
    for t in 0..12 {
        train.push_str(&format!("a\tlikes\tb\t{t}\nc\tcalls\td\t{t}\nb\tlikes\t{}\t{t}\n", ["a", "c", "e"][t % 3]));
    }
    fs::write(dir.join("train.txt"), train).unwrap();
    fs::write(dir.join("valid.txt"), "a\tlikes\tb\t12\nb\tlikes\ta\t12\n").unwrap();
    fs::write(dir.join("test.txt"), "a\tlikes\tb\t13\nc\tcalls\td\t13\nb\tlikes\tc\t13\nd\tcalls\te\t13\n").unwrap();
    let data = dir.join("data");
    let (tr, va, te) = (dir.join("train.txt"), dir.join("valid.txt"), dir.join("test.txt"));
    ok(&["prepare", "--train", s(&tr), "--valid", s(&va), "--test", s(&te), "--out", s(&data)]);
    data
}

fn run_dir(out: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.into_iter().next().unwrap()
}

#[test]
fn prepare_writes_bundle_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(dir.path());
    let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["entities"], 5);
    assert_eq!(stats["relations"], 2);
    assert_eq!((stats["train"].as_u64(), stats["valid"].as_u64(), stats["test"].as_u64()), (Some(36), Some(2), Some(4)));
    assert_eq!(fs::read_to_string(data.join("relations.tsv")).unwrap(), "0\tcalls\n1\tlikes\n");

    let before = fs::read(data.join("quads.bin")).unwrap();
    prepared(dir.path());
    assert_eq!(fs::read(data.join("quads.bin")).unwrap(), before);
}

#[test]
fn train_eval_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(dir.path());
    let out = dir.path().join("runs");
    let printed = ok(&with_tiny(&["train", "--data", s(&data), "--out", s(&out), "--seed", "3"]));
    let run = run_dir(&out);
    assert_eq!(printed.trim(), s(&run));
    let name = run.file_name().unwrap().to_str().unwrap();
    assert!(name.starts_with("run-") && name.ends_with("-s3") && name.len() == "run-".len() + 12 + 3, "{name}");

    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "loss_total", "loss_ce", "loss_sup", "loss_diff", "val_mrr", "wall_seconds"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
    }
    let last = fs::read(run.join("last.ckpt")).unwrap();

    // same seed, same bytes
    ok(&with_tiny(&["train", "--data", s(&data), "--out", s(&out), "--seed", "3"]));
    assert_eq!(fs::read(run.join("last.ckpt")).unwrap(), last);

    let table = ok(&with_tiny(&["eval", "--data", s(&data), "--out", s(&out), "--seed", "3", "--strata", "new,periodic", "--components"]));
    assert!(table.contains("new-events") && table.contains("periodic"), "{table}");
    for label in ["DPCL-Diff", "GNDiff-only", "DPCL-only"] {
        assert!(table.contains(label), "{table}");
    }
    let rows: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("eval-test.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 3);
    assert_eq!(rows[0]["reports"].as_array().unwrap().len(), 3);

    let ckpt = run.join("last.ckpt");
    let csv = ok(&["export-embeddings", "--checkpoint", s(&ckpt), "--data", s(&data), "--entities", "a,d"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "entity,space,x1,x2");
    assert_eq!(lines.len(), 5);
    for line in &lines[1..] {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 4);
        if f[1] == "poincare" {
            let norm: f64 = f[2..].iter().map(|x| x.parse::<f64>().unwrap().powi(2)).sum::<f64>().sqrt();
            assert!(norm < 1.0);
        }
    }
    let err = fails_with(&["export-embeddings", "--checkpoint", s(&ckpt), "--data", s(&data), "--entities", "aa"], 2);
    assert!(err.contains("unknown entity `aa`") && err.contains("did you mean a"), "{err}");
}

#[test]
fn eval_without_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(dir.path());
    let out = dir.path().join("runs");
    let err = fails_with(&["eval", "--data", s(&data), "--out", s(&out)], 3);
    assert!(err.starts_with("error: data: no checkpoint"), "{err}");
}

#[test]
fn ablate_emits_seven_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(dir.path());
    let out = dir.path().join("runs");
    let table = ok(&with_tiny(&["ablate", "--data", s(&data), "--out", s(&out)]));
    assert_eq!(table.trim_end().lines().count(), 8, "{table}");
    let rows: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir(&out).join("ablate.json")).unwrap()).unwrap();
    let labels: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels.len(), 7);
    assert_eq!(&labels[..3], ["full", "no_gndiff", "no_dpcl"]);
}

#[test]
fn sweep_csv_has_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(dir.path());
    let out = dir.path().join("runs");
    for (param, n) in [("alpha", 9), ("lambda", 8)] {
        let csv = ok(&with_tiny(&["sweep", "--data", s(&data), "--out", s(&out), "--param", param]));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], format!("{param},mrr,hits1,hits3,hits10"));
        assert_eq!(lines.len(), n + 1);
        assert_eq!(fs::read_to_string(run_dir(&out).join(format!("sweep-{param}.csv"))).unwrap(), csv);
    }
}

#[test]
fn extract_new_keeps_first_occurrences() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(dir.path());
    let new = dir.path().join("new");
    ok(&["extract-new", "--data", s(&data), "--out", s(&new)]);
    let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(new.join("stats.json")).unwrap()).unwrap();
    // train has a-b, c-d, b-a, b-c, b-e; only d-e is new after that
    assert_eq!((stats["train"].as_u64(), stats["valid"].as_u64(), stats["test"].as_u64()), (Some(5), Some(0), Some(1)));
}

#[test]
fn exit_codes_and_one_line_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(dir.path());
    let out = dir.path().join("runs");
    fails_with(&["bogus"], 2);
    fails_with(&["sweep", "--data", s(&data), "--param", "tau"], 2);
    fails_with(&["train", "--data", s(&data), "--set", "no_such_key=1"], 2);
    fails_with(&["train", "--data", s(&data), "--set", "missing-equals"], 2);
    fails_with(&["train", "--data", s(&dir.path().join("nowhere"))], 3);
    let err = fails_with(&with_tiny(&["train", "--data", s(&data), "--out", s(&out), "--set", "lr=1e300"]), 4);
    assert!(err.starts_with("error: numeric:"), "{err}");
    assert!(bin(&["--help"]).status.success());
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = prepared(dir.path());
    let cfg = dir.path().join("tiny.conf");
    fs::write(&cfg, "# tiny run\nd_dpcl = 2\nd_diff = 8\nepochs_stage1 = 1\nepochs_stage2 = 0\nT = 5\n").unwrap();
    let out = dir.path().join("runs");
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--set", "alpha=0.5", "--out", s(&out)]);
    let text = fs::read_to_string(run_dir(&out).join("config.txt")).unwrap();
    assert!(text.contains("alpha = 0.5") && text.contains("d_dpcl = 2"), "{text}");
}
