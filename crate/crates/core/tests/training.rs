mod common;

use mpfn::checkpoint::{self, Metadata};
use mpfn::data::Split;
use mpfn::features::WORD_TABLE;
use mpfn::mode::Mode;
use mpfn::model::{Example, Model};
use mpfn::tensor::Gradients;
use mpfn::training::{adam_step, evaluate, train, OptimizerState, TrainConfig};

fn batch_loss(model: &Model, batch: &[Example]) -> f64 {
    batch
        .iter()
        .map(|ex| model.gradients(ex, &mut Mode::Eval).unwrap().0)
        .sum::<f64>()
        / batch.len() as f64
}

#[test]
fn one_adam_step_lowers_batch_loss() {
    let prep = common::synthetic([8, 2, 0], 16, 3);
    let batch = prep.split(Split::Train);
    let cfg = TrainConfig {
        lr: 1e-4,
        ..TrainConfig::default()
    };
    let mut failures = 0;
    for restart in 0..10 {
        let mut model = Model::<f64>::new(
            common::small_config(),
            prep.vocabs.clone(),
            &prep.word_table,
            restart,
        )
        .unwrap();
        let before = batch_loss(&model, batch);
        let mut grads = Gradients::new();
        for ex in batch {
            model
                .accumulate_gradients(ex, &mut Mode::Eval, &mut grads)
                .unwrap();
        }
        grads
            .values_mut()
            .flatten()
            .for_each(|g| *g /= batch.len() as f64);
        adam_step(
            &mut model.params,
            &grads,
            &mut OptimizerState::default(),
            &cfg,
        )
        .unwrap();
        if batch_loss(&model, batch) >= before {
            failures += 1;
        }
    }
    assert!(failures <= 1, "{failures} of 10 restarts did not descend");
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        threads: Some(1),
        ..TrainConfig::default()
    }
}

#[test]
fn word_table_stays_frozen() {
    let prep = common::synthetic([32, 8, 0], 16, 4);
    let model = Model::<f64>::new(
        common::small_config(),
        prep.vocabs.clone(),
        &prep.word_table,
        1,
    )
    .unwrap();
    let before = model.params.get(WORD_TABLE).unwrap().clone();
    assert!(!before.requires_grad());
    let out = train(
        model,
        prep.split(Split::Train),
        prep.split(Split::Dev),
        &quick_cfg(3),
    )
    .unwrap();
    let after = out.best.params.get(WORD_TABLE).unwrap();
    assert_eq!(before.data(), after.data());
    // the other parameters did move
    assert!(out
        .best
        .params
        .iter()
        .any(|(name, t)| name != WORD_TABLE && t.requires_grad()));
}

#[test]
fn zero_patience_stops_after_first_epoch() {
    let prep = common::synthetic([16, 4, 0], 16, 5);
    let model = Model::<f64>::new(
        common::small_config(),
        prep.vocabs.clone(),
        &prep.word_table,
        1,
    )
    .unwrap();
    let cfg = TrainConfig {
        patience: 0,
        ..quick_cfg(30)
    };
    let out = train(
        model,
        prep.split(Split::Train),
        prep.split(Split::Dev),
        &cfg,
    )
    .unwrap();
    assert_eq!(out.trace.epochs.len(), 1);
    assert_eq!(out.best_epoch, 1);
}

#[test]
fn same_seed_same_trace_for_any_thread_count() {
    let prep = common::synthetic([40, 8, 0], 16, 6);
    let run = |threads: usize| {
        let model = Model::<f64>::new(
            common::small_config(),
            prep.vocabs.clone(),
            &prep.word_table,
            7,
        )
        .unwrap();
        let cfg = TrainConfig {
            threads: Some(threads),
            seed: 7,
            ..quick_cfg(3)
        };
        train(
            model,
            prep.split(Split::Train),
            prep.split(Split::Dev),
            &cfg,
        )
        .unwrap()
    };
    let a = run(1);
    let b = run(1);
    let c = run(3);
    assert!(a.trace.same_metrics(&b.trace));
    assert!(a.trace.same_metrics(&c.trace));
    assert_eq!(a.best.params, c.best.params);

    let model = Model::<f64>::new(
        common::small_config(),
        prep.vocabs.clone(),
        &prep.word_table,
        8,
    )
    .unwrap();
    let other = train(
        model,
        prep.split(Split::Train),
        prep.split(Split::Dev),
        &quick_cfg(3),
    )
    .unwrap();
    assert!(!a.trace.same_metrics(&other.trace));
}

#[test]
fn checkpoint_round_trip_reproduces_accuracy() {
    let prep = common::synthetic([32, 16, 0], 16, 9);
    let model = Model::<f64>::new(
        common::small_config(),
        prep.vocabs.clone(),
        &prep.word_table,
        2,
    )
    .unwrap();
    let out = train(
        model,
        prep.split(Split::Train),
        prep.split(Split::Dev),
        &quick_cfg(2),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut meta = Metadata::new();
    meta.insert("seed".into(), 2.into());
    checkpoint::save(&out.best, &meta, &path).unwrap();
    let (loaded, meta_back) = checkpoint::load::<f64>(&path).unwrap();
    assert_eq!(meta_back, meta);
    let dev = prep.split(Split::Dev);
    assert_eq!(evaluate(&loaded, dev).unwrap(), out.best_dev_acc);
    assert_eq!(
        evaluate(&loaded, dev).unwrap(),
        evaluate(&out.best, dev).unwrap()
    );
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(checkpoint::to_bytes(&loaded, &meta).unwrap(), bytes);
}

#[test]
fn untrained_models_guess() {
    let prep = common::synthetic([0, 500, 0], 16, 10);
    let dev = prep.split(Split::Dev);
    for seed in 0..3 {
        let model = Model::<f64>::new(
            common::small_config(),
            prep.vocabs.clone(),
            &prep.word_table,
            seed,
        )
        .unwrap();
        let acc = evaluate(&model, dev).unwrap();
        assert!((acc - 0.5).abs() <= 0.1, "seed {seed}: {acc}");
    }
}

#[test]
fn unlabelled_training_data_is_rejected() {
    let prep = common::synthetic([4, 2, 0], 16, 11);
    let mut train_set = prep.split(Split::Train).to_vec();
    train_set[1].label = None;
    let model = Model::<f64>::new(
        common::small_config(),
        prep.vocabs.clone(),
        &prep.word_table,
        1,
    )
    .unwrap();
    let err = train(model, &train_set, prep.split(Split::Dev), &quick_cfg(1)).unwrap_err();
    assert_eq!(err.class(), mpfn::ErrorClass::Usage);
}
