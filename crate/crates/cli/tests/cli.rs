use std::path::Path;
use std::process::{Command, Output};

fn ogflow(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ogflow"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = ogflow(
            &["--seed", "5", "--points", "64", "gen", "--scenes", "3", "--out", out],
            dir.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for i in 0..3 {
        let name = format!("scene_{i:05}.ogf");
        let a = std::fs::read(dir.path().join("a").join(&name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(&name)).unwrap();
        assert_eq!(a, b);
    }
    assert!(dir.path().join("a/config.json").exists());

    let o = ogflow(
        &["--seed", "6", "--points", "64", "gen", "--scenes", "1", "--out", "c"],
        dir.path(),
    );
    assert!(o.status.success());
    let c = std::fs::read(dir.path().join("c/scene_00000.ogf")).unwrap();
    let a = std::fs::read(dir.path().join("a/scene_00000.ogf")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn deterministic_gen_matches_parallel_gen() {
    let dir = tempfile::tempdir().unwrap();
    assert!(
        ogflow(&["--points", "64", "gen", "--scenes", "4", "--out", "p"], dir.path())
            .status
            .success()
    );
    assert!(ogflow(
        &[
            "--deterministic",
            "--points",
            "64",
            "gen",
            "--scenes",
            "4",
            "--out",
            "s"
        ],
        dir.path()
    )
    .status
    .success());
    for i in 0..4 {
        let name = format!("scene_{i:05}.ogf");
        assert_eq!(
            std::fs::read(dir.path().join("p").join(&name)).unwrap(),
            std::fs::read(dir.path().join("s").join(&name)).unwrap()
        );
    }
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    assert!(
        ogflow(&["--points", "64", "gen", "--scenes", "2", "--out", "d"], dir.path())
            .status
            .success()
    );
    let o = ogflow(
        &["eval", "--data", "d", "--predictions", "d", "--out", "rep"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("epe_full = 0.000000"), "{text}");
    assert!(text.contains("occ_accuracy = 1.000000"), "{text}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("rep/report.json")).unwrap()).unwrap();
    assert_eq!(json["sample_count"], 2);
}

#[test]
fn synthetic_gen_writes_labeled_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let o = ogflow(
        &[
            "--points",
            "128",
            "--removal-fraction",
            "0.05",
            "gen",
            "--scenes",
            "2",
            "--synthetic",
            "--out",
            "syn",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = ogflow(&["eval", "--data", "syn", "--predictions", "syn"], dir.path());
    assert!(o.status.success());
}

#[test]
fn train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(ogflow(&["--points", "64", "gen", "--scenes", "4", "--out", "d"], p)
        .status
        .success());
    let o = ogflow(
        &[
            "--points",
            "64",
            "--epochs",
            "1",
            "--batch-size",
            "2",
            "train",
            "--data",
            "d",
            "--heldout",
            "d",
            "--out",
            "run",
        ],
        p,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("epoch 1:"));
    for f in ["model.ogck", "trace.json", "config.json"] {
        assert!(p.join("run").join(f).exists(), "{f}");
    }

    let o = ogflow(
        &[
            "--points",
            "64",
            "--epochs",
            "2",
            "--batch-size",
            "2",
            "train",
            "--data",
            "d",
            "--resume",
            "run/model.ogck",
            "--out",
            "run2",
        ],
        p,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    std::fs::create_dir(p.join("pred")).unwrap();
    let o = ogflow(
        &[
            "infer",
            "--checkpoint",
            "run/model.ogck",
            "--pair",
            "d/scene_00000.ogf",
            "--out",
            "pred/scene_00000.ogf",
        ],
        p,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = ogflow(&["eval", "--data", "d", "--checkpoint", "run/model.ogck"], p);
    assert!(o.status.success());
    assert!(stdout(&o).contains("sample_count = 4"));
}

#[test]
fn resume_with_other_architecture_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(ogflow(&["--points", "64", "gen", "--scenes", "2", "--out", "d"], p)
        .status
        .success());
    assert!(ogflow(
        &["--points", "64", "--epochs", "1", "train", "--data", "d", "--out", "run"],
        p
    )
    .status
    .success());
    let o = ogflow(
        &[
            "--points",
            "64",
            "--levels",
            "3",
            "train",
            "--data",
            "d",
            "--resume",
            "run/model.ogck",
        ],
        p,
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(ogflow(&["--no-such-flag", "gen"], p).status.code(), Some(2));
    assert_eq!(ogflow(&["--k1", "0", "gen"], p).status.code(), Some(2));
    assert_eq!(
        ogflow(&["--cost-volume-mode", "sideways", "gen"], p).status.code(),
        Some(2)
    );
    assert_eq!(
        ogflow(&["eval", "--data", "missing", "--predictions", "missing"], p)
            .status
            .code(),
        Some(3)
    );
    assert_eq!(
        ogflow(&["infer", "--checkpoint", "nope.ogck", "--pair", "nope.ogf"], p)
            .status
            .code(),
        Some(3)
    );

    std::fs::write(p.join("bad.json"), "{\"unknown_key\": 1}").unwrap();
    assert_eq!(ogflow(&["--config", "bad.json", "gen"], p).status.code(), Some(2));

    std::fs::write(p.join("garbage.ogck"), b"not a checkpoint").unwrap();
    std::fs::write(p.join("garbage.ogf"), b"nope").unwrap();
    assert_eq!(
        ogflow(&["infer", "--checkpoint", "garbage.ogck", "--pair", "garbage.ogf"], p)
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn config_file_is_honoured_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("run.json"), r#"{"seed": 9, "scene": {"num_points": 80}}"#).unwrap();
    let o = ogflow(
        &[
            "--config", "run.json", "--seed", "10", "gen", "--scenes", "1", "--out", "d",
        ],
        p,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.join("d/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["seed"], 10);
    assert_eq!(cfg["scene"]["num_points"], 80);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ogflow(&["gradcheck"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
    assert!(text.contains("end_to_end"), "{text}");
}

#[test]
fn selfcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ogflow(&["selfcheck", "--trials", "10"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}
