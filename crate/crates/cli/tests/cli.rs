//! End-to-end runs of the `lftracy` binary.

use std::path::Path;
use std::process::{Command, Output};

fn lftracy(dir: &Path, args: &[&str]) -> Output {
    let data = format!("dataset_root=\"{}\"", dir.join("data").display());
    let out = format!("output_dir=\"{}\"", dir.join("out").display());
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lftracy"));
    cmd.args(args);
    if args.first().is_some_and(|a| !a.starts_with('-')) {
        cmd.args(["--set", &data, "--set", &out]);
    }
    cmd.output().expect("binary runs")
}

const TINY: [&str; 14] = [
    "--set", "image_size=32",
    "--set", "gen_data.num_scenes=2",
    "--set", "gen_data.num_slices=3",
    "--set", "encoder.stage_channels=[8,8,16,16]",
    "--set", "epochs=1",
    "--set", "holdout_percent=0",
    "--set", "lr=0.001",
];

fn run(dir: &Path, mode: &str, extra: &[&str]) -> Output {
    let mut args = vec![mode];
    args.extend(TINY);
    args.extend(extra);
    lftracy(dir, &args)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn full_flow_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    for (mode, extra) in [
        ("gen-data", &[][..]),
        ("augment", &["--histograms"][..]),
        ("train", &[][..]),
        ("eval", &[][..]),
        ("predict", &[][..]),
    ] {
        let o = run(dir.path(), mode, extra);
        assert_eq!(code(&o), 0, "{mode}: {}", stderr(&o));
    }
    let out = dir.path().join("out");
    for file in ["train_log.csv", "model.lft", "scores.csv", "aggregate.json", "augment_trace.json", "hist_report.json"] {
        assert!(out.join(file).is_file(), "{file}");
    }
    assert_eq!(std::fs::read_dir(out.join("masks")).unwrap().count(), 2);
    assert!(dir.path().join("data").join("scene_0000").join("af.ppm").is_file());
}

#[test]
fn eval_prints_aggregate_scores() {
    let dir = tempfile::tempdir().unwrap();
    for mode in ["gen-data", "train"] {
        assert_eq!(code(&run(dir.path(), mode, &[])), 0);
    }
    let o = run(dir.path(), "eval", &[]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("scenes 2 mae"), "{text}");
}

#[test]
fn gradcheck_prints_every_group() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), "gradcheck", &["--set", "gradcheck.max_entries=1", "--set", "gradcheck.distinct_slices=1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    for group in ["encoder", "ia.conv_q", "ia.conv_k", "ia.conv_v", "ia.sigma", "decoder", "head"] {
        assert!(text.lines().any(|l| l.starts_with(group) && l.contains("PASS")), "{group}: {text}");
    }
}

#[test]
fn presets_apply() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), "gen-data", &[])), 0);
    for preset in ["wo-ia", "wo-lf", "stack-2", "rr-4"] {
        let o = run(dir.path(), "train", &["--preset", preset]);
        assert_eq!(code(&o), 0, "{preset}: {}", stderr(&o));
    }
}

#[test]
fn config_file_is_read() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    std::fs::write(&path, r#"{"image_size": 32, "gen_data": {"num_scenes": 3, "num_slices": 1}}"#).unwrap();
    let config = path.to_str().unwrap();
    let o = lftracy(dir.path(), &["gen-data", "--config", config]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_dir(dir.path().join("data")).unwrap().count(), 3);

    std::fs::remove_dir_all(dir.path().join("data")).unwrap();
    let o = lftracy(dir.path(), &["gen-data", "--config", config, "--set", "gen_data.num_scenes=1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_dir(dir.path().join("data")).unwrap().count(), 1);
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for extra in [
        &["--preset", "stack-7"][..],
        &["--set", "no.such.key=1"][..],
        &["--set", "ia.fusion=DA"][..],
        &["--set", "batch_size=0"][..],
    ] {
        let o = run(dir.path(), "train", extra);
        assert_eq!(code(&o), 2, "{extra:?}: {}", stderr(&o));
        assert!(stderr(&o).starts_with("error: "), "{}", stderr(&o));
    }
    assert_eq!(code(&lftracy(dir.path(), &["no-such-mode"])), 2);
}

#[test]
fn empty_dataset_eval_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("data")).unwrap();
    assert_eq!(code(&run(dir.path(), "eval", &[])), 2);
}

#[test]
fn io_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let o = run(dir.path(), "train", &["--config", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("absent.json"), "{}", stderr(&o));
    assert_eq!(code(&run(dir.path(), "train", &[])), 3);
    std::fs::create_dir_all(dir.path().join("data")).unwrap();
    assert_eq!(code(&run(dir.path(), "gen-data", &[])), 0);
    assert_eq!(code(&run(dir.path(), "eval", &[])), 3);
}

#[test]
fn divergence_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), "gen-data", &[])), 0);
    let o = run(dir.path(), "train", &["--set", "lr=1e300", "--set", "epochs=3", "--set", "batch_size=1"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}
