//! Command-line contract: exit codes, help text, run-directory artifacts.

use std::fs;
use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dformer"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dformer_cli_{name}"));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn unknown_flag_exits_2_with_usage() {
    let out = bin().args(["params", "--bogus-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.to_lowercase().contains("usage"), "stderr: {err}");
}

#[test]
fn config_errors_exit_1_with_one_line_diagnostic() {
    // eval without --checkpoint names the missing flag
    let out = bin()
        .args(["eval", "--data", "/nonexistent", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--checkpoint"), "stderr: {err}");
    assert_eq!(err.trim().lines().count(), 1, "diagnostic must be one line");

    // bad variant value is a clap parse error (exit 2)
    let out = bin().args(["params", "--variant", "XL"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_requires_f64() {
    let out = bin()
        .args(["gradcheck", "--precision", "f32"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("f64"));
}

#[test]
fn help_lists_stable_flags_with_defaults() {
    for (sub, flags) in [
        ("gen-data", vec!["--out", "--seed", "--n-samples", "--size", "--mode", "--classes"]),
        (
            "pretrain",
            vec!["--variant", "--seed", "--out", "--data", "--precision", "--q-fusion", "--lea-fusion", "--channel-ratio", "--gaa-pool-k", "--no-ham", "--init-std", "--lr", "--epochs", "--rgb-rgb"],
        ),
        (
            "finetune",
            vec!["--variant", "--checkpoint", "--msflip", "--saliency", "--freeze-encoder", "--steps", "--lr"],
        ),
        ("eval", vec!["--data", "--checkpoint", "--out", "--msflip"]),
        ("params", vec!["--variant", "--classes", "--no-decoder"]),
        ("ablate", vec!["--axis", "--out", "--seed"]),
        ("gradcheck", vec!["--precision", "--seed"]),
    ] {
        let out = bin().args([sub, "--help"]).output().unwrap();
        assert!(out.status.success());
        let text = String::from_utf8_lossy(&out.stdout);
        for flag in flags {
            assert!(text.contains(flag), "{sub} --help missing {flag}\n{text}");
        }
        assert!(
            text.contains("default"),
            "{sub} --help lists no defaults\n{text}"
        );
    }
}

#[test]
fn run_directories_contain_config_metrics_and_report() {
    let dir = tmp("artifacts");
    let data = dir.join("data");
    let st = bin()
        .args([
            "gen-data", "--out", data.to_str().unwrap(), "--seed", "3", "--n-samples", "8",
            "--size", "32", "--mode", "segment", "--classes", "3",
        ])
        .status()
        .unwrap();
    assert!(st.success());
    assert!(data.join("config.json").exists());
    assert!(data.join("manifest.txt").exists());

    let ft = dir.join("ft");
    let st = bin()
        .args([
            "finetune", "--data", data.to_str().unwrap(), "--out", ft.to_str().unwrap(),
            "--variant", "tiny-test", "--steps", "4", "--batch", "4", "--seed", "3",
        ])
        .status()
        .unwrap();
    assert!(st.success());
    for artifact in ["config.json", "metrics.csv", "report.txt", "model.ckpt"] {
        assert!(ft.join(artifact).exists(), "missing {artifact}");
    }

    // effective config echo is valid JSON and records the resolved values
    let echo: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ft.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["command"], "finetune");
    assert_eq!(echo["steps"], 4);

    let ev = dir.join("eval");
    let st = bin()
        .args([
            "eval", "--data", data.to_str().unwrap(), "--checkpoint",
            ft.join("model.ckpt").to_str().unwrap(), "--out", ev.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(st.success());
    let report = fs::read_to_string(ev.join("report.txt")).unwrap();
    assert!(report.starts_with("variant\tparams\tmiou_single\tmiou_msflip\tper_class"));
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn config_file_merges_under_cli_flags() {
    let dir = tmp("merge");
    fs::write(
        dir.join("run.json"),
        r#"{ "variant": "tiny-test", "gaa_pool_k": 5, "init_std": 0.03 }"#,
    )
    .unwrap();
    // CLI --gaa-pool-k wins over the file; file's init_std applies
    let out = bin()
        .args([
            "params", "--variant", "tiny-test", "--config",
            dir.join("run.json").to_str().unwrap(), "--gaa-pool-k", "3",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn saliency_finetune_reports_mae_and_max_f() {
    let dir = tmp("saliency");
    let data = dir.join("data");
    bin()
        .args([
            "gen-data", "--out", data.to_str().unwrap(), "--seed", "4", "--n-samples", "8",
            "--size", "32", "--mode", "segment", "--classes", "3",
        ])
        .status()
        .unwrap();
    let ft = dir.join("ft");
    let out = bin()
        .args([
            "finetune", "--data", data.to_str().unwrap(), "--out", ft.to_str().unwrap(),
            "--variant", "tiny-test", "--steps", "6", "--batch", "4", "--seed", "4",
            "--saliency",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let report = fs::read_to_string(ft.join("report.txt")).unwrap();
    assert!(report.contains("mae"), "report: {report}");
    assert!(report.contains("max_f"), "report: {report}");
    let _ = fs::remove_dir_all(&dir);
}
