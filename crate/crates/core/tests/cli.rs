//! End-to-end runs of the command-line binary on the tiny suite.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::*;
use unlearn_lab::bench::{load_checkpoint, read_rows_csv, write_rows_csv, Pipeline};

fn cli(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("tiny.json");
    if !config.exists() {
        std::fs::write(&config, serde_json::to_vec(&tiny_bench()).unwrap()).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_unlearn-lab"))
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn pretrain_calibrate_and_adapt_from_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(cli(d, &["gen-data"]));
    for name in ["forget", "keep", "heldout"] {
        assert!(d.join("data").join(name).is_dir(), "{name}");
    }

    ok(cli(d, &["pretrain"]));
    let base = d.join("base.mckp");
    let (_, prov) = load_checkpoint(&base).unwrap();
    assert_eq!(prov.stage, "pretrain");
    assert!(std::fs::read_to_string(d.join("train_log.csv"))
        .unwrap()
        .starts_with("step,loss"));

    let base_arg = base.to_str().unwrap();
    ok(cli(
        d,
        &[
            "calibrate",
            "--checkpoint",
            base_arg,
            "--forget",
            "forget",
            "--level",
            "default",
        ],
    ));
    let unlearned = d.join("unlearned_forget_default.mckp");
    let (_, prov) = load_checkpoint(&unlearned).unwrap();
    assert_eq!(prov.forget_dataset.as_deref(), Some("forget"));
    assert!(d.join("calibration_forget_default.csv").exists());

    let report = ok(cli(
        d,
        &[
            "knowledge-report",
            "--checkpoint",
            base_arg,
            "--unlearned",
            unlearned.to_str().unwrap(),
            "--forget",
            "forget",
        ],
    ));
    assert!(report.contains("heldout"));

    let fit = ok(cli(
        d,
        &[
            "fewshot",
            "--checkpoint",
            base_arg,
            "--dataset",
            "keep",
            "--method",
            "linear",
            "--shots",
            "2",
        ],
    ));
    assert!(fit.starts_with("linear 2-shot on keep"));

    ok(cli(
        d,
        &[
            "unlearn",
            "--checkpoint",
            base_arg,
            "--forget",
            "forget",
            "--alpha",
            "1",
            "--lambda",
            "1",
        ],
    ));
    assert!(d.join("unlearned_forget.mckp").exists());
}

#[test]
fn benchmark_report_matches_the_library_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(cli(d, &["benchmark"]));
    let written = std::fs::read(d.join("report.csv")).unwrap();
    let expected = Pipeline::prepare(tiny_bench())
        .unwrap()
        .run_benchmark()
        .unwrap();
    let mut buf = Vec::new();
    write_rows_csv(&expected.rows, &mut buf).unwrap();
    assert_eq!(written, buf);

    let again = tempfile::tempdir().unwrap();
    std::fs::copy(d.join("report.csv"), again.path().join("input.csv")).unwrap();
    let input = again.path().join("input.csv");
    let msg = ok(cli(
        again.path(),
        &["report", "--input", input.to_str().unwrap()],
    ));
    let rows = read_rows_csv(written.as_slice()).unwrap();
    assert_eq!(msg.trim(), format!("{} rows aggregated", rows.len()));
    assert_eq!(
        std::fs::read(again.path().join("aggregates.csv")).unwrap(),
        std::fs::read(d.join("aggregates.csv")).unwrap()
    );
}

#[test]
fn bad_invocations_fail_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(!cli(d, &["no-such-command"]).status.success());
    let missing = cli(
        d,
        &[
            "fewshot",
            "--checkpoint",
            "absent.mckp",
            "--dataset",
            "keep",
        ],
    );
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
    let bad_method = cli(
        d,
        &[
            "fewshot",
            "--checkpoint",
            "absent.mckp",
            "--dataset",
            "keep",
            "--method",
            "lora",
        ],
    );
    assert!(!bad_method.status.success());
}
