use safety_net::checkpoint::load_checkpoint;
use safety_net::experiment::{train_to_dir, Experiment, ExperimentConfig};
use safety_net::training::epochs_to_reach;

fn toy(epochs: usize) -> Experiment {
    let mut cfg = ExperimentConfig::preset("toy_1d").unwrap();
    cfg.training.epochs = epochs;
    cfg.training.checkpoint_every = 25;
    Experiment::new(cfg).unwrap()
}

#[test]
fn toy_problem_loss_drops_below_a_tenth() {
    let exp = toy(500);
    let out = exp.train(None, None, 0, |_| Ok(())).unwrap();
    let first = out.history.first().unwrap();
    let last = out.history.last().unwrap();
    assert_eq!(first.epoch, 1);
    assert_eq!(last.epoch, 500);
    assert!(
        last.report.total < 0.1 * first.report.total,
        "epoch 1 {} vs epoch 500 {}",
        first.report.total,
        last.report.total
    );
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let exp = toy(0);
    let init = exp.fresh_model().unwrap();
    let out = exp.train(Some(init.clone()), None, 0, |_| Ok(())).unwrap();
    assert_eq!(out.model, init);
    assert!(out.history.is_empty());
}

#[test]
fn split_run_matches_uninterrupted_run_bit_for_bit() {
    let tmp = tempfile::tempdir().unwrap();
    let whole = train_to_dir(
        &toy(100),
        None,
        None,
        0,
        &tmp.path().join("whole"),
        |_, _| {},
    )
    .unwrap();

    let first = train_to_dir(&toy(50), None, None, 0, &tmp.path().join("a"), |_, _| {}).unwrap();
    let ck = load_checkpoint(&first.final_checkpoint, None).unwrap();
    assert_eq!(ck.meta.epoch, 50);
    let second = train_to_dir(
        &toy(50),
        Some(ck.model),
        ck.optimizer,
        ck.meta.epoch,
        &tmp.path().join("b"),
        |_, _| {},
    )
    .unwrap();

    assert_eq!(second.outcome.last_epoch, 100);
    assert_eq!(second.outcome.model.params(), whole.outcome.model.params());
    let tail: Vec<_> = whole
        .outcome
        .history
        .iter()
        .filter(|r| r.epoch > 50)
        .collect();
    assert_eq!(tail.len(), second.outcome.history.len());
    for (a, b) in tail.iter().zip(&second.outcome.history) {
        assert_eq!(**a, *b);
    }
    // The periodic checkpoint at epoch 50 of the long run equals the short run's end.
    let mid = load_checkpoint(&tmp.path().join("whole/epoch_000050.ckpt"), None).unwrap();
    assert_eq!(
        mid.model,
        load_checkpoint(&first.final_checkpoint, None)
            .unwrap()
            .model
    );
}

#[test]
fn loss_history_is_reproducible_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = |dir: &str, seed: u64| {
        let mut cfg = toy(30).config;
        cfg.seed = seed;
        let exp = Experiment::new(cfg).unwrap();
        let art = train_to_dir(&exp, None, None, 0, &tmp.path().join(dir), |_, _| {}).unwrap();
        std::fs::read_to_string(art.loss_csv).unwrap()
    };
    let a = csv("a", 7);
    assert_eq!(a.lines().count(), 31);
    assert_eq!(a, csv("b", 7));
    assert_ne!(a, csv("c", 8));
}

#[test]
fn warm_start_from_a_trained_model_begins_lower() {
    let exp = toy(200);
    let trained = exp.train(None, None, 0, |_| Ok(())).unwrap();
    let cold = toy(1).train(None, None, 0, |_| Ok(())).unwrap();
    let warm = toy(1)
        .train(Some(trained.model), None, 0, |_| Ok(()))
        .unwrap();
    let target = cold.history[0].report.total;
    assert_eq!(epochs_to_reach(&warm.history, target), Some(1));
    assert!(warm.history[0].report.total < target);
}
