mod common;

use std::sync::Mutex;

use tjepa_core::jepa::{embed_cells, ModelConfig, ModelState};
use tjepa_core::nn::Container;
use tjepa_core::train::{
    early_stop_epoch, load_checkpoint, lr_at, save_checkpoint, train, train_step, TrainConfig, TrainEnv, TrainLog,
};
use tjepa_core::Error;

fn small_cfg() -> ModelConfig {
    ModelConfig {
        d: 16,
        enc_layers: 1,
        enc_heads: 2,
        pred_layers: 1,
        pred_heads: 2,
        ffn_mult: 2,
        max_len: 40,
        ..Default::default()
    }
}

fn small_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 1e-3,
        batch_size: 8,
        seed: 4,
        ..Default::default()
    }
}

#[test]
fn learning_rate_schedule() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg), 1e-4);
    assert_eq!(lr_at(4, &cfg), 1e-4);
    assert_eq!(lr_at(5, &cfg), 5e-5);
    assert_eq!(lr_at(14, &cfg), 2.5e-5);
    assert_eq!(lr_at(19, &cfg), 1.25e-5);
}

#[test]
fn early_stop_counter() {
    assert_eq!(early_stop_epoch(&[3.0, 2.0, 2.5, 2.5, 2.5, 2.5, 2.5], 5), Some(6));
    assert_eq!(early_stop_epoch(&[3.0, 2.0, 2.5, 2.5, 2.5, 2.5], 5), None);
    assert_eq!(early_stop_epoch(&[1.0, 1.0 - 5e-7, 0.5], 1), Some(1));
    assert_eq!(early_stop_epoch(&[1.0, 0.9, 0.8], 1), None);
}

#[test]
fn config_validation() {
    assert!(TrainConfig { early_stop_patience: 0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { lr: f64::NAN, ..Default::default() }.validate().is_err());
    assert!(TrainConfig::default().validate().is_ok());
}

#[test]
fn training_is_reproducible_and_thread_independent() {
    let w = common::world(8, 8, 16, 24, (6, 20), 1, false);
    let env = TrainEnv::new(&w.table, &w.graph, "g");
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let out = train(&w.cells, ModelState::new(small_cfg(), 3).unwrap(), &env, &small_train(2)).unwrap();
            out.best.to_container("g", 0).to_bytes()
        })
    };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_eq!(a, run(3));
}

#[test]
fn target_encoder_moves_only_by_ema() {
    let w = common::world(8, 8, 16, 8, (6, 20), 2, false);
    let env = TrainEnv::new(&w.table, &w.graph, "g");
    let mut state = ModelState::new(small_cfg(), 5).unwrap();
    // Start the target away from the context encoder so the EMA is visible.
    for t in state.target.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 0.25);
    }
    let before = state.target.clone();
    let batch: Vec<&[_]> = w.cells.iter().map(|c| c.cells.as_slice()).collect();
    train_step(&mut state, &batch, &env, 1e-3, 0, 0).unwrap();
    let m = state.cfg.ema_momentum as f32;
    for &(t, c) in &state.layout.ema_pairs {
        let ctx = &state.trainable().tensors()[c];
        for ((now, old), theta) in state.target.tensors()[t].data().iter().zip(before.tensors()[t].data()).zip(ctx.data()) {
            assert!((now - (m * old + (1.0 - m) * theta)).abs() < 1e-6);
        }
    }
    // The optimizer holds moments for the trainable set only.
    assert_eq!(state.store.params.len(), state.trainable().len());
    assert!(state.target.names().iter().all(|n| state.trainable().index_of(n).is_none()));
}

#[test]
fn early_stop_and_log() {
    let w = common::world(8, 8, 16, 6, (6, 12), 3, false);
    let env = TrainEnv::new(&w.table, &w.graph, "g");
    let seen = Mutex::new(Vec::new());
    let cb = |r: &tjepa_core::train::EpochRecord| seen.lock().unwrap().push(r.epoch);
    let env = TrainEnv { on_epoch: Some(&cb), ..env };
    // With a vanishing learning rate only sampling noise moves the loss,
    // so the run stops exactly `patience` epochs after its best one.
    let cfg = TrainConfig {
        epochs: 50,
        lr: 1e-30,
        early_stop_patience: 3,
        ..small_train(50)
    };
    let out = train(&w.cells, ModelState::new(small_cfg(), 1).unwrap(), &env, &cfg).unwrap();
    assert!(out.stopped_early);
    let n = out.log.records.len();
    assert_eq!(out.best_epoch, Some(n - 4));
    assert_eq!(*seen.lock().unwrap(), (0..n).collect::<Vec<_>>());
    assert_eq!(early_stop_epoch(&out.log.losses(), 3), Some(n - 1));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    out.log.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("epoch,loss,lr,fallbacks\n"));
    let mut expected = out.log.clone();
    expected.records.iter_mut().for_each(|r| r.seconds = 0.0);
    assert_eq!(TrainLog::read_csv(&path).unwrap(), expected);
}

#[test]
fn rejects_bad_datasets() {
    let w = common::world(8, 8, 16, 4, (6, 12), 3, false);
    let env = TrainEnv::new(&w.table, &w.graph, "g");
    let state = ModelState::new(small_cfg(), 1).unwrap();
    assert!(train(&[], state.clone(), &env, &small_train(1)).is_err());
    let mut short = w.cells.clone();
    short[1].cells.truncate(3);
    assert!(matches!(train(&short, state.clone(), &env, &small_train(1)), Err(Error::InvalidArgument(_))));
    let monitor = TrainConfig {
        monitor_validation: true,
        ..small_train(1)
    };
    assert!(matches!(train(&w.cells, state, &env, &monitor), Err(Error::Config(_))));
}

#[test]
fn validation_monitoring_runs() {
    let w = common::world(8, 8, 16, 12, (6, 12), 8, false);
    let (tr, va) = w.cells.split_at(8);
    let env = TrainEnv {
        validation: Some(va),
        ..TrainEnv::new(&w.table, &w.graph, "g")
    };
    let cfg = TrainConfig {
        monitor_validation: true,
        ..small_train(2)
    };
    let out = train(tr, ModelState::new(small_cfg(), 1).unwrap(), &env, &cfg).unwrap();
    assert_eq!(out.log.records.len(), 2);
    assert!(out.best_epoch.is_some());
}

#[test]
fn nan_aborts_with_diagnostic_checkpoint() {
    let w = common::world(8, 8, 16, 4, (6, 12), 3, false);
    let dir = tempfile::tempdir().unwrap();
    let diag = dir.path().join("diag.ckpt");
    let env = TrainEnv {
        diagnostic_path: Some(&diag),
        ..TrainEnv::new(&w.table, &w.graph, "g")
    };
    let mut state = ModelState::new(small_cfg(), 1).unwrap();
    let idx = state.trainable().index_of("pred.out.w").unwrap();
    state.store.params.tensors_mut()[idx].data_mut()[0] = f32::NAN;
    match train(&w.cells, state, &env, &small_train(1)) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("diag.ckpt"), "{msg}"),
        other => panic!("expected a numerical abort, got {other:?}"),
    }
    assert!(load_checkpoint(&diag, Some("g"), None).is_ok());
}

#[test]
fn checkpoint_round_trip_warm_start_and_refusals() {
    let w = common::world(8, 8, 16, 8, (6, 12), 6, false);
    let env = TrainEnv::new(&w.table, &w.graph, "grid-1");
    let out = train(&w.cells, ModelState::new(small_cfg(), 2).unwrap(), &env, &small_train(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &out.best, "grid-1").unwrap();
    let back = load_checkpoint(&path, Some("grid-1"), Some(&small_cfg())).unwrap();
    for c in &w.cells {
        assert_eq!(
            embed_cells(&c.cells, &w.table, &w.graph, &out.best).unwrap(),
            embed_cells(&c.cells, &w.table, &w.graph, &back).unwrap()
        );
    }
    assert_eq!(Container::load(&path).unwrap().step, out.best.store.step_count());

    // Warm start with no epochs hands back the loaded model unchanged.
    let again = train(&w.cells, back.clone(), &env, &small_train(0)).unwrap();
    assert_eq!(again.best_epoch, None);
    assert_eq!(
        embed_cells(&w.cells[0].cells, &w.table, &w.graph, &again.best).unwrap(),
        embed_cells(&w.cells[0].cells, &w.table, &w.graph, &out.best).unwrap()
    );

    assert!(matches!(load_checkpoint(&path, Some("grid-2"), None), Err(Error::Incompatible(_))));
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path, None, None), Err(Error::Corrupt(_))));
}
