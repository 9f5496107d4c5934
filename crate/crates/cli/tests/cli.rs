//! End-to-end command tests through the compiled binary: exit codes,
//! artifact layout and determinism.

use std::path::Path;
use std::process::{Command, Output};

fn modlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modlab"))
        .args(args)
        .output()
        .expect("binary should launch")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

/// Small enough for seconds-scale training, large enough to exercise every
/// loss term.
const TINY_CONFIG: &str = r#"{
  "model": { "d_model": 16, "n_layers": 1, "n_heads": 2 },
  "optimizer": { "learning_rate": 0.001 },
  "train_size": 16,
  "test_size": 6
}"#;

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, TINY_CONFIG).unwrap();
    path
}

#[test]
fn gen_data_writes_deterministic_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let run = modlab(&[
            "gen-data",
            "--task",
            "image-heavy",
            "--n",
            "10",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&run), 0, "{}", stderr_of(&run));
    }
    let file_a = std::fs::read(out_a.join("image-heavy.jsonl")).unwrap();
    let file_b = std::fs::read(out_b.join("image-heavy.jsonl")).unwrap();
    assert_eq!(file_a, file_b);
    assert_eq!(file_a.iter().filter(|&&b| b == b'\n').count(), 10);
    assert!(out_a.join("manifest.json").is_file());
}

#[test]
fn gen_data_all_covers_every_task() {
    let dir = tempfile::tempdir().unwrap();
    let run = modlab(&[
        "gen-data",
        "--task",
        "all",
        "--n",
        "5",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "{}", stderr_of(&run));
    for name in ["image-heavy.jsonl", "text-heavy.jsonl", "vqa.jsonl"] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }
}

#[test]
fn gen_data_rejects_bad_flags_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap().to_string();
    let run = modlab(&["gen-data", "--task", "vqa", "--n", "0", "--out", &out]);
    assert_eq!(code(&run), 2);
    let run = modlab(&["gen-data", "--task", "audio", "--n", "5", "--out", &out]);
    assert_eq!(code(&run), 2);
    assert!(stderr_of(&run).contains("image-heavy"));
    let run = modlab(&["gen-data", "--task", "vqa", "--n", "5", "--split", "dev", "--out", &out]);
    assert_eq!(code(&run), 2);
}

#[test]
fn train_writes_artifacts_and_repeats_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out_a = dir.path().join("run-a");
    let out_b = dir.path().join("run-b");
    for out in [&out_a, &out_b] {
        let run = modlab(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--method",
            "fft-js",
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&run), 0, "{}", stderr_of(&run));
        for name in ["model.bin", "metrics.jsonl", "config.json", "manifest.json"] {
            assert!(out.join(name).is_file(), "{name} missing");
        }
    }
    assert_eq!(
        std::fs::read(out_a.join("model.bin")).unwrap(),
        std::fs::read(out_b.join("model.bin")).unwrap()
    );
    assert_eq!(
        std::fs::read(out_a.join("metrics.jsonl")).unwrap(),
        std::fs::read(out_b.join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn train_rejects_unknown_methods_listing_the_grid() {
    let run = modlab(&["train", "--method", "sgd"]);
    assert_eq!(code(&run), 2);
    let err = stderr_of(&run);
    for name in ["vanilla", "fft-dvqa", "fft-daug", "fft-kl", "fft-js", "fft-rg", "fft-adv", "ours"]
    {
        assert!(err.contains(name), "{name} not listed in {err}");
    }
}

#[test]
fn train_missing_config_exits_1_with_the_path() {
    let run = modlab(&["train", "--config", "/nonexistent/lab.json"]);
    assert_eq!(code(&run), 1);
    assert!(stderr_of(&run).contains("/nonexistent/lab.json"));
}

#[test]
fn train_reads_pregenerated_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = modlab(&["gen-data", "--task", "all", "--n", "12", "--out", data.to_str().unwrap()]);
    assert_eq!(code(&run), 0, "{}", stderr_of(&run));
    let cfg_path = dir.path().join("config.json");
    let cfg = format!(
        r#"{{
  "model": {{ "d_model": 16, "n_layers": 1, "n_heads": 2 }},
  "optimizer": {{ "learning_rate": 0.001 }},
  "train_size": 12,
  "test_size": 6,
  "paths": {{ "out_dir": "{}", "data_dir": "{}" }}
}}"#,
        dir.path().join("run").display(),
        data.display()
    );
    std::fs::write(&cfg_path, cfg).unwrap();
    let run = modlab(&["train", "--config", cfg_path.to_str().unwrap(), "--method", "vanilla"]);
    assert_eq!(code(&run), 0, "{}", stderr_of(&run));
    assert!(dir.path().join("run/model.bin").is_file());
}

#[test]
fn diagnose_writes_reports_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let train_out = dir.path().join("run");
    let run = modlab(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--method",
        "ours",
        "--out-dir",
        train_out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "{}", stderr_of(&run));

    let checkpoint = train_out.join("model.bin");
    let diag_a = dir.path().join("diag-a");
    let diag_b = dir.path().join("diag-b");
    for out in [&diag_a, &diag_b] {
        let run = modlab(&[
            "diagnose",
            "--checkpoint",
            checkpoint.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--method",
            "ours",
            "--suite",
            "ood",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&run), 0, "{}", stderr_of(&run));
    }
    let json_a = std::fs::read(diag_a.join("report.json")).unwrap();
    assert_eq!(json_a, std::fs::read(diag_b.join("report.json")).unwrap());
    assert_eq!(
        std::fs::read(diag_a.join("report.csv")).unwrap(),
        std::fs::read(diag_b.join("report.csv")).unwrap()
    );

    let report: serde_json::Value = serde_json::from_slice(&json_a).unwrap();
    assert_eq!(report["method"], "Ours");
    assert_eq!(report["suite"], "ood");
    let cells = report["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 2);
    for cell in cells {
        let kind = cell["perturbation"].as_str().unwrap();
        assert!(kind.starts_with("Ood"), "unexpected cell {kind}");
    }
    let csv = std::fs::read_to_string(diag_a.join("report.csv")).unwrap();
    assert!(csv.starts_with("dataset,perturbation,n,accuracy,delta_cp\n"));
}

#[test]
fn diagnose_corrupt_checkpoint_exits_1_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.bin");
    std::fs::write(&bad, b"not a checkpoint at all").unwrap();
    let run = modlab(&[
        "diagnose",
        "--checkpoint",
        bad.to_str().unwrap(),
        "--out",
        dir.path().join("diag").to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 1);
    assert!(stderr_of(&run).contains("bad.bin"));

    let run = modlab(&[
        "diagnose",
        "--checkpoint",
        dir.path().join("missing.bin").to_str().unwrap(),
        "--out",
        dir.path().join("diag").to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 1);
    assert!(stderr_of(&run).contains("missing.bin"));
}

#[test]
fn diagnose_rejects_unknown_suite() {
    let run = modlab(&["diagnose", "--checkpoint", "x.bin", "--suite", "everything", "--out", "y"]);
    assert_eq!(code(&run), 2);
    assert!(stderr_of(&run).contains("in-distribution"));
}

fn tiny_ablate_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{
  "model": { "d_model": 16, "n_layers": 1, "n_heads": 2 },
  "optimizer": { "learning_rate": 0.001 },
  "train_size": 8,
  "test_size": 4
}"#,
    )
    .unwrap();
    path
}

#[test]
fn ablate_emits_the_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_ablate_config(dir.path());
    let out = dir.path().join("grid");
    let run = modlab(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "{}", stderr_of(&run));
    let methods =
        ["vanilla", "fft-dvqa", "fft-daug", "fft-kl", "fft-js", "fft-rg", "fft-adv", "ours"];
    for m in methods {
        assert!(out.join(m).join("model.bin").is_file(), "{m} checkpoint missing");
        assert!(out.join(m).join("report.json").is_file(), "{m} report missing");
    }
    let comparison = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert!(comparison.starts_with("method,dataset,perturbation,n,accuracy,delta_cp\n"));
    // 8 methods x (3 clean + 8 perturbed cells).
    assert_eq!(comparison.lines().count(), 1 + 8 * 11);
}

#[test]
fn ablate_parallel_children_match_the_grid_shape() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_ablate_config(dir.path());
    let out = dir.path().join("grid");
    let run = modlab(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
        "--parallel",
        "2",
    ]);
    assert_eq!(code(&run), 0, "{}", stderr_of(&run));
    for m in ["vanilla", "ours"] {
        assert!(out.join(m).join("model.bin").is_file());
        assert!(out.join(m).join("report.json").is_file());
    }
}

#[test]
fn report_merges_runs_without_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let mut report_dirs = Vec::new();
    for method in ["vanilla", "ours"] {
        let train_out = dir.path().join(format!("run-{method}"));
        let run = modlab(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--method",
            method,
            "--out-dir",
            train_out.to_str().unwrap(),
        ]);
        assert_eq!(code(&run), 0, "{}", stderr_of(&run));
        let diag_out = dir.path().join(format!("diag-{method}"));
        let run = modlab(&[
            "diagnose",
            "--checkpoint",
            train_out.join("model.bin").to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--method",
            method,
            "--suite",
            "ood",
            "--out",
            diag_out.to_str().unwrap(),
        ]);
        assert_eq!(code(&run), 0, "{}", stderr_of(&run));
        report_dirs.push(diag_out);
    }
    let merged = dir.path().join("comparison.csv");
    let run = modlab(&[
        "report",
        "--runs",
        report_dirs[0].to_str().unwrap(),
        report_dirs[1].join("report.json").to_str().unwrap(),
        "--out",
        merged.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0, "{}", stderr_of(&run));
    let csv = std::fs::read_to_string(&merged).unwrap();
    // 2 methods x (3 clean + 2 held-out cells), all rows distinct.
    assert_eq!(csv.lines().count(), 1 + 10);
    assert!(csv.lines().any(|l| l.starts_with("Vanilla,")));
    assert!(csv.lines().any(|l| l.starts_with("Ours,")));
}
