use std::path::Path;
use std::process::{Command, Output};

fn harmonize(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_harmonize"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = harmonize(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = dir.path().join("run");
    let code = |args: &[&str]| harmonize(args).status.code();

    assert_eq!(
        code(&["train", "--corpus", s(&missing), "--out", s(&out)]),
        Some(2)
    );
    assert_eq!(
        code(&[
            "gen-data",
            "--n",
            "1",
            "--out",
            s(&out),
            "--set",
            "no_such_key=1"
        ]),
        Some(2)
    );
    assert_eq!(
        code(&[
            "gen-data",
            "--n",
            "1",
            "--out",
            s(&out),
            "--set",
            "elevation_deg=[2,4]"
        ]),
        Some(2)
    );
    assert_eq!(
        code(&["eval", "--ckpt", s(&missing), "--corpus", s(&missing)]),
        Some(2)
    );

    let corpus = dir.path().join("corpus");
    ok(&["gen-data", "--n", "1", "--out", s(&corpus)]);
    assert_eq!(
        code(&["eval", "--ckpt", s(&missing), "--corpus", s(&corpus)]),
        Some(1)
    );
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"steps\": 1, \"typo\": 2}").unwrap();
    assert_eq!(
        code(&[
            "train",
            "--corpus",
            s(&corpus),
            "--out",
            s(&out),
            "--config",
            s(&bad)
        ]),
        Some(2)
    );
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    ok(&["gen-data", "--n", "3", "--out", s(&corpus), "--seed", "40"]);
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    let common = ["--set", "batch_size=2", "--set", "weights.d_steps_per_g=2"];
    let train = |out: &Path, steps: &str, extra: &[&str]| {
        let mut args = vec![
            "train",
            "--corpus",
            s(&corpus),
            "--out",
            s(out),
            "--seed",
            "9",
        ];
        args.extend(common);
        args.extend(["--set", steps]);
        args.extend(extra);
        ok(&args);
    };
    train(&full, "steps=4", &[]);
    train(&split, "steps=2", &[]);
    train(&split, "steps=4", &["--resume"]);

    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(
        read(&full.join("losses.csv")),
        read(&split.join("losses.csv"))
    );
    assert_eq!(
        read(&full.join("checkpoint.bin")),
        read(&split.join("checkpoint.bin"))
    );
    let csv = String::from_utf8(read(&full.join("losses.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn oracle_eval_reports_perfect_scores() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    ok(&["gen-data", "--n", "3", "--out", s(&corpus), "--seed", "7"]);
    let out = harmonize(&["eval", "--oracle", "--corpus", s(&corpus)]);
    assert!(out.status.success());
    let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(m["identity_loss_mean"], 0.0);
    assert_eq!(m["mask_partition_violations"], 0);
    assert!(m["shadow_angle_median_deg"].as_f64().unwrap() < 1.0);
    assert_eq!(m["source"], "oracle");
}
