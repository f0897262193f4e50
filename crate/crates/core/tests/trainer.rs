mod common;

use std::collections::HashMap;

use candle_core::{Tensor, Var};
use common::*;
use i2v_core::data::{load_manifest, Domain, Split};
use i2v_core::networks::GENERATOR_GROUP;
use i2v_core::params::ParamStore;
use i2v_core::synthetic::MovingSquares;
use i2v_core::trainer::{
    self, load_bundle, load_checkpoint, read_history, save_checkpoint, train_step, translate_clip, Adam, Direction,
    TrainOutput, TrainState,
};
use i2v_core::Error;

fn small_squares() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    MovingSquares {
        size: 16,
        train_clips: 2,
        test_clips: 1,
        frames_per_clip: 6,
        ..MovingSquares::default()
    }
    .write(dir.path())
    .unwrap();
    dir
}

#[test]
fn writes_periodic_and_final_checkpoints_and_history() {
    let data = small_squares();
    let manifest = load_manifest(data.path()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let output = TrainOutput { dir: out.path().to_path_buf() };
    let mut cfg = tiny_train_config(16, 0);
    cfg.total_iterations = 25;
    cfg.checkpoint_interval = 10;
    let (state, history) = trainer::train(&manifest, &cfg, Some(&output)).unwrap();
    assert_eq!(state.iteration, 25);
    assert_eq!(history.len(), 25);
    for it in [10, 20] {
        assert!(output.checkpoint_path(it).exists(), "missing checkpoint {it}");
    }
    assert!(!output.checkpoint_path(25).exists());
    assert!(output.final_checkpoint_path().exists());
    assert_eq!(read_history(&output.history_path()).unwrap(), history);
    let names: Vec<_> = history.iter().map(|r| r.iteration).collect();
    assert_eq!(names, (0..25).collect::<Vec<_>>());
}

#[test]
fn zero_iterations_returns_initial_state() {
    let data = small_squares();
    let manifest = load_manifest(data.path()).unwrap();
    let mut cfg = tiny_train_config(16, 0);
    cfg.total_iterations = 0;
    let (state, history) = trainer::train(&manifest, &cfg, None).unwrap();
    assert_eq!(state.iteration, 0);
    assert!(history.is_empty());
    let fresh = TrainState::new(&cfg).unwrap();
    assert_eq!(
        state.bundle.store.fingerprint(&[""]).unwrap(),
        fresh.bundle.store.fingerprint(&[""]).unwrap()
    );
}

#[test]
fn checkpoint_restores_everything() {
    let mut rng = rng(1);
    let cfg = tiny_train_config(16, 4);
    let mut state = TrainState::new(&cfg).unwrap();
    let (x, y) = (random_triplet(&mut rng, 16), random_triplet(&mut rng, 16));
    for _ in 0..3 {
        train_step(&mut state, &x, &y, &cfg).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.safetensors");
    save_checkpoint(&state, &cfg, &path).unwrap();
    let (mut loaded, loaded_cfg) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded_cfg, cfg);
    assert_eq!(loaded.iteration, 3);
    assert_eq!(loaded.running, state.running);
    assert_eq!(loaded.motion_locations, state.motion_locations);
    assert_eq!(loaded.gen_opt.steps(), 3);
    assert_eq!(
        loaded.bundle.store.fingerprint(&[""]).unwrap(),
        state.bundle.store.fingerprint(&[""]).unwrap()
    );
    assert_eq!(loaded.bundle.perceptual.fingerprint().unwrap(), state.bundle.perceptual.fingerprint().unwrap());
    let a = train_step(&mut state, &x, &y, &cfg).unwrap();
    let b = train_step(&mut loaded, &x, &y, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.safetensors");
    std::fs::write(&path, b"definitely not a checkpoint").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn schema_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("old.safetensors");
    let t = Tensor::zeros(2, candle_core::DType::F32, &CPU).unwrap();
    let meta = HashMap::from([("schema_version".to_string(), "0".to_string())]);
    safetensors::serialize_to_file([("x".to_string(), t)], Some(meta), &path).unwrap();
    match load_checkpoint(&path) {
        Err(Error::SchemaVersion { found: 0, expected }) => assert_eq!(expected, trainer::CHECKPOINT_SCHEMA_VERSION),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn non_finite_loss_names_term_and_iteration() {
    let mut rng = rng(2);
    let cfg = tiny_train_config(16, 5);
    let mut state = TrainState::new(&cfg).unwrap();
    let (x, y) = (random_triplet(&mut rng, 16), random_triplet(&mut rng, 16));
    train_step(&mut state, &x, &y, &cfg).unwrap();
    let head = state.bundle.store.get("g_y.head.bias").unwrap();
    head.set(&(head.as_tensor() * f64::NAN).unwrap()).unwrap();
    match train_step(&mut state, &x, &y, &cfg) {
        Err(Error::NonFinite { term, iteration }) => {
            assert_eq!(term, "adv");
            assert_eq!(iteration, Some(1));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn adam_moves_against_gradient_sign() {
    let mut store = ParamStore::new();
    store.insert("g_x.w".into(), Var::new(&[1.0f64, -2.0], &CPU).unwrap());
    let w = store.get("g_x.w").unwrap().clone();
    // d/dw of (3 w0 - w1)
    let loss = ((w.as_tensor().get(0).unwrap() * 3.0).unwrap() - w.as_tensor().get(1).unwrap()).unwrap();
    let grads = loss.backward().unwrap();
    let mut adam = Adam::new(GENERATOR_GROUP, 0.5, 0.999);
    adam.step(&store, &grads, 0.1).unwrap();
    let after = to_vec(w.as_tensor());
    // the first bias-corrected step has magnitude lr in every coordinate
    assert!((after[0] - 0.9).abs() < 1e-6, "{after:?}");
    assert!((after[1] + 1.9).abs() < 1e-6, "{after:?}");
}

#[test]
fn translation_matches_reloaded_bundle() {
    let data = small_squares();
    let manifest = load_manifest(data.path()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let output = TrainOutput { dir: out.path().to_path_buf() };
    let mut cfg = tiny_train_config(16, 6);
    cfg.total_iterations = 2;
    let (state, _) = trainer::train(&manifest, &cfg, Some(&output)).unwrap();
    let reloaded = load_bundle(&output.final_checkpoint_path()).unwrap();
    let clip = manifest.clips(Domain::X, Split::Test, None)[0];
    for direction in [Direction::XToY, Direction::YToX] {
        let a = translate_clip(&state.bundle, clip, direction).unwrap();
        let b = translate_clip(&reloaded, clip, direction).unwrap();
        assert_eq!(a.frames.len(), clip.len());
        assert_eq!(a.seconds_per_frame.len(), clip.len());
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.tensor().dims(), &[3, 16, 16]);
            assert_eq!(to_vec(fa.tensor()), to_vec(fb.tensor()));
            assert!(to_vec(fa.tensor()).iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn direction_parsing() {
    assert_eq!("x2y".parse::<Direction>().unwrap(), Direction::XToY);
    assert_eq!("y2x".parse::<Direction>().unwrap(), Direction::YToX);
    assert!("sideways".parse::<Direction>().is_err());
}

#[test]
fn unknown_subset_is_reported() {
    let data = small_squares();
    let manifest = load_manifest(data.path()).unwrap();
    let mut cfg = tiny_train_config(16, 0);
    cfg.total_iterations = 1;
    cfg.subset = Some("nowhere".into());
    assert!(trainer::train(&manifest, &cfg, None).is_err());
}
