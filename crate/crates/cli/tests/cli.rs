use std::path::Path;
use std::process::{Command, Output};

use i2v_core::synthetic::{write_empty_layout, MovingSquares};

fn i2v(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_i2v"))
        .args(args)
        .env_remove("I2V_DATASET_ROOT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn squares(root: &Path) {
    MovingSquares {
        size: 32,
        train_clips: 2,
        test_clips: 1,
        frames_per_clip: 5,
        ..MovingSquares::default()
    }
    .write(root)
    .unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn inspect_prints_counts() {
    let dir = tempfile::tempdir().unwrap();
    write_empty_layout(dir.path(), &[("traffic", 7, 4), ("monitoring/sub-1", 5, 3)]).unwrap();
    squares(dir.path());
    let out = i2v(&["inspect", "--dataset", s(dir.path())]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = stdout(&out);
    assert!(table.contains("squares"), "{table}");
    assert!(table.contains("monitoring/sub-1"), "{table}");
    assert!(table.contains("7"), "{table}");

    let out = i2v(&["inspect", "--dataset", s(dir.path()), "--toml"]);
    assert!(out.status.success());
    let parsed: toml::Value = toml::from_str(&stdout(&out)).expect("valid toml");
    assert!(parsed.as_table().is_some());
}

#[test]
fn train_translate_evaluate_round_trip() {
    let data = tempfile::tempdir().unwrap();
    squares(data.path());
    let run = tempfile::tempdir().unwrap();
    let out = i2v(&[
        "train",
        "--dataset",
        s(data.path()),
        "--output",
        s(run.path()),
        "--preset",
        "tiny",
        "--iterations",
        "3",
        "--set",
        "checkpoint_interval=2",
        "--no-exs",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("trained to iteration 3"), "{}", stdout(&out));
    let resolved = std::fs::read_to_string(run.path().join("config.toml")).unwrap();
    assert!(resolved.contains("checkpoint_interval = 2"), "{resolved}");
    assert!(resolved.contains("disable_exs = true"), "{resolved}");
    assert_eq!(std::fs::read_to_string(run.path().join("history.jsonl")).unwrap().lines().count(), 3);
    assert!(run.path().join("checkpoint_000002.safetensors").exists());
    let checkpoint = run.path().join("checkpoint_final.safetensors");
    assert!(checkpoint.exists());

    let input = data.path().join("squares/test/infrared");
    let translated = tempfile::tempdir().unwrap();
    let out = i2v(&[
        "translate",
        "--checkpoint",
        s(&checkpoint),
        "--input",
        s(&input),
        "--output",
        s(translated.path()),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("translated 5 frames in 1 clips"), "{}", stdout(&out));
    let first = image::open(translated.path().join("clip_00/frame_000000.png")).unwrap();
    assert_eq!((first.width(), first.height()), (32, 32));

    let report = translated.path().join("report.json");
    let reference = data.path().join("squares/test/visible");
    let out = i2v(&[
        "evaluate",
        "--translated",
        s(translated.path()),
        "--reference",
        s(&reference),
        "--extractor",
        "color-layout",
        "--output",
        s(&report),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let clip = &json["subsets"]["clip_00"];
    assert_eq!(clip["frames"], 5);
    for key in ["fid", "psnr", "ssim"] {
        assert!(clip[key].as_f64().unwrap().is_finite(), "{key}: {json}");
    }

    let more = tempfile::tempdir().unwrap();
    let out = i2v(&[
        "train",
        "--dataset",
        s(data.path()),
        "--output",
        s(more.path()),
        "--resume",
        s(&run.path().join("checkpoint_000002.safetensors")),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("trained to iteration 3"), "{}", stdout(&out));
}

#[test]
fn unknown_config_key_is_named() {
    let data = tempfile::tempdir().unwrap();
    squares(data.path());
    let run = tempfile::tempdir().unwrap();
    let out = i2v(&[
        "train",
        "--dataset",
        s(data.path()),
        "--output",
        s(run.path()),
        "--preset",
        "tiny",
        "--set",
        "weights.lambda9=1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("weights.lambda9"), "{}", stderr(&out));
    assert!(!run.path().join("history.jsonl").exists());
}

#[test]
fn missing_dataset_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = i2v(&["inspect", "--dataset", s(&dir.path().join("absent"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error:"), "{}", stderr(&out));
}
