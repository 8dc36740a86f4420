//! End-to-end runs of the `untrack` binary on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &["--image_size", "32", "--template_size", "16"];

fn untrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_untrack"))
        .args(args)
        .env("UNTRACK_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let all: Vec<&str> = args.iter().chain(SMALL).copied().collect();
    let out = untrack(&all);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_train_eval_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = (dir.path().join("data"), dir.path().join("run"));
    ok(&[
        "gen-data",
        "--dataset",
        s(&data),
        "--sequences",
        "2",
        "--corner_sequences",
        "1",
        "--frames",
        "4",
    ]);
    assert!(data.join("manifest.txt").exists() && data.join("run.json").exists());

    let stdout = ok(&[
        "train",
        "--dataset",
        s(&data),
        "--output",
        s(&run),
        "--steps",
        "3",
        "--pretrain_steps",
        "2",
    ]);
    assert!(stdout.contains("trainable"), "{stdout}");
    assert!(run.join("checkpoint").is_dir());
    assert_eq!(
        std::fs::read_to_string(run.join("train_curve.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let ckpt = run.join("checkpoint");
    ok(&[
        "eval",
        "--dataset",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--output",
        s(&run),
    ]);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["aggregate"]["sequences"], 3);

    ok(&["report", "--output", s(&run)]);
    for f in ["success_curve.csv", "precision_recall.csv", "sequences.csv"] {
        assert!(run.join("report").join(f).exists(), "{f}");
    }
    let meta: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(run.join("report").join("run.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(meta["command"], "report");
}

#[test]
fn grad_check_passes_on_the_default_model() {
    let out = untrack(&["grad-check"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        out.status.success(),
        "{stdout}{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let err: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("max relative error "))
        .expect("summary line")
        .trim()
        .parse()
        .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let cases: [&[&str]; 4] = [
        &["train", "--output", s(dir.path())],
        &["train", "--dataset", s(&missing), "--output", s(dir.path())],
        &[
            "gen-data",
            "--dataset",
            s(dir.path()),
            "--percentile",
            "0.6",
        ],
        &["gen-data", "--dataset", s(dir.path()), "--no_such_key", "1"],
    ];
    for args in cases {
        let out = untrack(args);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(
            String::from_utf8_lossy(&out.stderr).starts_with("error"),
            "{args:?}"
        );
    }
}
