//! The installed binary, end to end on a tiny synthetic room set.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn uqcloud(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uqcloud"))
        .args(args)
        .env("UQCLOUD_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = uqcloud(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_rooms(dir: &Path) {
    let spec = dir.join("rooms.cfg");
    fs::write(
        &spec,
        "# two small rooms\npoints_per_class = 400\nscenes = 2\ntest_fraction = 0.5\n",
    )
    .unwrap();
    let data = dir.join("data");
    ok(&["synth", "--spec", s(&spec), "--out", s(&data), "--seed", "4"]);
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    assert_eq!(uqcloud(&[]).status.code(), Some(2));
    assert_eq!(
        uqcloud(&["train", "--model", "ensemble", "--data", "d", "--out", "o"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(uqcloud(&["--help"]).status.code(), Some(0));
    let missing = uqcloud(&[
        "export",
        "--stack",
        "/nonexistent/x.stack",
        "--point",
        "0",
        "--quantiles",
        "q.csv",
    ]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
}

#[test]
fn synth_train_evaluate_predict_export() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny_rooms(dir);
    let data = dir.join("data");
    assert_eq!(fs::read_dir(data.join("train")).unwrap().count(), 1);
    assert_eq!(fs::read_dir(data.join("test")).unwrap().count(), 1);

    let ckpt = dir.join("drop.ckpt");
    let log = ok(&[
        "train",
        "--model",
        "dropout",
        "--data",
        s(&data),
        "--epochs",
        "2",
        "--batch-size",
        "1",
        "--micro-batch",
        "1",
        "--block-size",
        "20",
        "--seed",
        "1",
        "--out",
        s(&ckpt),
    ]);
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,step,loss,lr");
    assert_eq!(lines.len(), 3, "{log}");

    let csv = dir.join("metrics.csv");
    let maps = dir.join("maps");
    let stacks = dir.join("stacks");
    ok(&[
        "evaluate",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data),
        "--k",
        "20",
        "--csv",
        s(&csv),
        "--maps",
        s(&maps),
        "--stacks",
        s(&stacks),
    ]);
    let metrics = fs::read_to_string(&csv).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 6, "{metrics}");
    assert!(metrics.lines().nth(1).unwrap().contains(",dropout,none,"));
    assert_eq!(fs::read_dir(&maps).unwrap().count(), 5);

    // Too few samples for the credible rule is a runtime error.
    let few = uqcloud(&[
        "evaluate",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data),
        "--k",
        "1",
        "--measure",
        "credible",
        "--csv",
        s(&csv),
    ]);
    assert_eq!(few.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&few.stderr).contains("K >= 20"));

    let scene = fs::read_dir(data.join("test")).unwrap().next().unwrap().unwrap().path();
    let pred = dir.join("pred.ply");
    ok(&[
        "predict",
        "--ckpt",
        s(&ckpt),
        "--k",
        "3",
        "--cloud",
        s(&scene),
        "--out",
        s(&pred),
    ]);
    let map = dir.join("u.ply");
    let points = dir.join("u.csv");
    let stack = dir.join("u.stack");
    let said = ok(&[
        "uncertainty",
        "--ckpt",
        s(&ckpt),
        "--k",
        "4",
        "--cloud",
        s(&scene),
        "--measure",
        "variance",
        "--out",
        s(&map),
        "--csv",
        s(&points),
        "--stack",
        s(&stack),
    ]);
    assert!(said.starts_with("variance: "), "{said}");
    let n_points = fs::read_to_string(&points).unwrap().lines().count() - 1;
    assert!(n_points > 0);
    let q = dir.join("q.csv");
    ok(&["export", "--stack", s(&stack), "--point", "0", "--quantiles", s(&q)]);
    assert_eq!(fs::read_to_string(&q).unwrap().lines().count(), 1 + 6);
    let beyond = n_points.to_string();
    assert_eq!(
        uqcloud(&["export", "--stack", s(&stack), "--point", &beyond, "--quantiles", s(&q)])
            .status
            .code(),
        Some(1)
    );
}
