use ssmfuse::data::generate_synthetic;
use ssmfuse::network::{FusionNet, FusionNetConfig};
use ssmfuse::train::{lr_at, Trainer, TrainConfig, DUMP_DIR};
use ssmfuse::Error;

fn config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 2, lr0: 1e-3, halve_every: 2, seed: 5, ..TrainConfig::default() }
}

fn trainer(epochs: usize) -> Trainer<f32> {
    let (net, store) = FusionNet::build::<f32>(FusionNetConfig::new(4, 4, 2)).unwrap();
    Trainer::new(net, store, config(epochs)).unwrap()
}

#[test]
fn resume_reproduces_uninterrupted_history() {
    let ds = generate_synthetic(3, 5, 16, 16, 4).unwrap().cast::<f32>();
    let (train, held) = ds.split_tail(1).unwrap();

    let mut full = trainer(4);
    full.run(&train.samples, &held.samples, None, |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = trainer(2);
    first.run(&train.samples, &held.samples, Some(dir.path()), |_| {}).unwrap();
    let mut resumed = Trainer::<f32>::resume(dir.path()).unwrap();
    assert_eq!(resumed.epoch, 2);
    resumed.config.epochs = 4;
    resumed.run(&train.samples, &held.samples, None, |_| {}).unwrap();

    let joined: Vec<_> = first.history.iter().chain(&resumed.history).cloned().collect();
    assert_eq!(joined, full.history);
    for id in full.store.ids() {
        assert_eq!(full.store.value(id), resumed.store.value(id), "{}", full.store.name(id));
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let ds = generate_synthetic(8, 4, 16, 16, 4).unwrap().cast::<f32>();
    let (mut a, mut b) = (trainer(2), trainer(2));
    a.run(&ds.samples, &[], None, |_| {}).unwrap();
    b.run(&ds.samples, &[], None, |_| {}).unwrap();
    assert_eq!(a.history, b.history);
    assert!(a.history.iter().all(|r| r.loss.is_finite() && r.held_out.is_none()));
}

#[test]
fn logged_learning_rate_follows_schedule() {
    let ds = generate_synthetic(1, 2, 16, 16, 4).unwrap().cast::<f32>();
    let mut t = trainer(5);
    t.run(&ds.samples, &[], None, |_| {}).unwrap();
    for r in &t.history {
        assert_eq!(r.lr, lr_at(1e-3, 2, r.epoch - 1));
    }
    assert_eq!(t.history[4].lr, 2.5e-4);
}

#[test]
fn non_finite_batch_is_dumped() {
    let mut ds = generate_synthetic(4, 2, 16, 16, 4).unwrap().cast::<f32>();
    ds.samples[1].lr.data_mut()[0] = f32::NAN;
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(1);
    let err = t.run(&ds.samples, &[], Some(dir.path()), |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let dumped: Vec<_> = std::fs::read_dir(dir.path().join(DUMP_DIR)).unwrap().collect();
    assert!(!dumped.is_empty());
}
