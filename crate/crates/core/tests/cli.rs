use std::path::Path;
use std::process::{Command, Output};

use metok::grid::load_grid;

fn metok(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metok"))
        .args(args)
        .env("METOK_THREADS", "1")
        .output()
        .expect("spawn metok")
}

fn ok(args: &[&str]) -> Output {
    let out = metok(args);
    assert!(
        out.status.success(),
        "metok {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    metok(args).status.code().expect("exit code")
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn synth(dir: &Path, samples: &str, hw: &str) {
    ok(&[
        "synth",
        "--out",
        &s(dir),
        "--samples",
        samples,
        "--hw",
        hw,
        "--seed",
        "7",
    ]);
}

const TINY: [&str; 8] = [
    "--dim",
    "8",
    "--group",
    "4",
    "--encoder-depth",
    "1",
    "--translator-depth",
    "1",
];

#[test]
fn synth_writes_samples_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "10", "32");
    for i in 0..10 {
        assert!(data.join(format!("sample_{i:05}.mtg")).exists());
    }
    assert!(data.join("dataset.json").exists());
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(data.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn synth_rejects_indivisible_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let out = metok(&[
        "synth",
        "--out",
        &s(&tmp.path().join("d")),
        "--samples",
        "2",
        "--hw",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("divisible"));
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["synth", "--samples", "3"]), 2);
    assert_eq!(
        code(&["gradcheck", "--out", &out, "--component", "nonsense"]),
        2
    );
    assert_eq!(
        code(&["synth", "--out", &out, "--levels-profile", "soggy"]),
        2
    );
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn missing_data_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [
        "train",
        "--out",
        &s(&tmp.path().join("o")),
        "--data",
        &s(&tmp.path().join("absent")),
    ];
    assert_eq!(code(&args), 1);
}

#[test]
fn train_eval_predict_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    synth(&data, "5", "16");
    let (run_s, data_s) = (s(&run), s(&data));
    let mut args = vec!["train", "--out", &run_s, "--data", &data_s, "--epochs", "1"];
    args.extend(["--batch-size", "2", "--seed", "3"]);
    args.extend(TINY);
    ok(&args);
    assert!(run.join("best.bin").exists() && run.join("last.json").exists());
    let log = std::fs::read_to_string(run.join("train_log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 1);

    let eval = tmp.path().join("eval");
    ok(&[
        "eval",
        "--out",
        &s(&eval),
        "--checkpoint",
        &s(&run.join("best")),
        "--data",
        &s(&data),
    ]);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["mean"]["iou"].as_array().unwrap().len(), 5);

    let pred = tmp.path().join("pred");
    ok(&[
        "predict",
        "--out",
        &s(&pred),
        "--checkpoint",
        &s(&run.join("best")),
        "--input",
        &s(&data.join("sample_00000.mtg")),
    ]);
    let grid = load_grid(pred.join("prediction.mtg")).unwrap();
    assert_eq!((grid.steps(), grid.height(), grid.width()), (6, 16, 16));
}

#[test]
fn ablate_rows_per_axis() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "4", "16");
    let data_s = s(&data);
    for (axis, values, rows) in [("ordering", "", 3), ("group-size", "2,4,8,16", 4)] {
        let out = tmp.path().join(axis);
        let out_s = s(&out);
        let mut args = vec!["ablate", "--out", &out_s, "--data", &data_s, "--axis", axis];
        if !values.is_empty() {
            args.extend(["--values", values]);
        }
        args.extend([
            "--epochs",
            "1",
            "--batch-size",
            "2",
            "--dim",
            "8",
            "--encoder-depth",
            "1",
        ]);
        args.extend(["--translator-depth", "1"]);
        ok(&args);
        let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
        assert_eq!(csv.lines().count(), rows + 1, "{axis}: {csv}");
    }
    let args = [
        "ablate",
        "--out",
        &s(tmp.path()),
        "--data",
        &s(&data),
        "--axis",
        "colour",
    ];
    assert_eq!(code(&args), 2);
}

#[test]
fn gradcheck_and_bench() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&[
        "gradcheck",
        "--out",
        &s(&tmp.path().join("gc")),
        "--component",
        "block",
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("block"));
    let bench = tmp.path().join("bench");
    ok(&[
        "bench",
        "--out",
        &s(&bench),
        "--sizes",
        "64,128",
        "--m",
        "16",
        "--d",
        "8",
        "--reps",
        "1",
    ]);
    let scaling = std::fs::read_to_string(bench.join("scaling.csv")).unwrap();
    assert_eq!(scaling.lines().count(), 3);
    assert!(bench.join("exponents.csv").exists());
}
