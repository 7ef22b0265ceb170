use lfa_core::checkpoint;
use lfa_core::model::ArchitectureConfig;
use lfa_core::trainer::{self, read_metrics, NoHook, TrainConfig, Trainer, METRICS_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(n: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    (0..n * 64).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        seed: 9,
        deterministic: true,
        checkpoint_every: 5,
        ..Default::default()
    }
}

#[test]
fn resumed_run_continues_the_metrics_sequence() {
    let arch = ArchitectureConfig::toy();
    let x = images(10);
    let whole_dir = tempfile::tempdir().unwrap();
    let mut whole = Trainer::<f32>::new(&arch, config(10)).unwrap();
    trainer::train(&mut whole, &x, 10, Some(whole_dir.path()), &mut NoHook, |_| {}).unwrap();

    // Stop after five epochs, reload from disk, then finish.
    let part_dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::<f32>::new(&arch, config(5)).unwrap();
    trainer::train(&mut first, &x, 10, Some(part_dir.path()), &mut NoHook, |_| {}).unwrap();
    let mut ck = checkpoint::load::<f32>(&part_dir.path().join(trainer::FINAL_CHECKPOINT)).unwrap();
    assert_eq!(ck.epoch, 5);
    ck.config.epochs = 10;
    let mut second = Trainer::from_checkpoint(ck).unwrap();
    trainer::train(&mut second, &x, 10, Some(part_dir.path()), &mut NoHook, |_| {}).unwrap();

    let a = read_metrics(&whole_dir.path().join(METRICS_FILE)).unwrap();
    let b = read_metrics(&part_dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(a.len(), 10);
    assert_eq!(a, b);
    // The periodic checkpoint of the full run matches the interrupted one.
    let mid = std::fs::read(trainer::checkpoint_path(whole_dir.path(), 5)).unwrap();
    let mut stopped = Trainer::<f32>::new(&arch, config(5)).unwrap();
    trainer::train(&mut stopped, &x, 10, None, &mut NoHook, |_| {}).unwrap();
    let mut c = stopped.checkpoint();
    c.config.epochs = 10;
    assert_eq!(checkpoint::to_bytes(&c), mid);
    assert_eq!(
        std::fs::read(whole_dir.path().join(trainer::FINAL_CHECKPOINT)).unwrap(),
        std::fs::read(part_dir.path().join(trainer::FINAL_CHECKPOINT)).unwrap()
    );
}
