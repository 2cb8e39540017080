//! Determinism and resume guarantees of the generator training loop:
//! retraining from scratch and stopping-then-resuming must produce
//! bit-identical parameters, and the step log must stay parseable.

use crowdveil_core::data::{dataset_fingerprint, generate_dataset, Split};
use crowdveil_core::losses::LossWeights;
use crowdveil_core::surrogate::{train_surrogate, Paradigm, SurrogateTrainConfig};
use crowdveil_core::training::{
    load_generator, load_surrogate, save_surrogate, train_generator, TrainConfig, TrainRecord,
    LATEST_CHECKPOINT, TRAIN_LOG,
};

fn tiny_fixture() -> (crowdveil_core::data::Dataset, crowdveil_core::surrogate::SurrogateModel) {
    let ds = generate_dataset(6, 4, 12, 32, 32, 2.0, Split::Train, 300).unwrap();
    let cfg = SurrogateTrainConfig { epochs: 3, lr: 3e-3, batch_size: 3, seed: 2, kernel_sigma: 2.0 };
    let (surr, _) = train_surrogate(&ds, Paradigm::DensityMap, &cfg).unwrap();
    (ds, surr)
}

fn tiny_train_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 1e-3,
        batch_size: 3,
        seed: 17,
        epsilon: 8.0 / 255.0,
        sign: Default::default(),
        weights: LossWeights::default(),
        eval_tau: 0.5,
    }
}

#[test]
fn straight_run_and_resumed_run_are_bit_identical() {
    let (ds, surr) = tiny_fixture();

    // One uninterrupted 4-epoch run.
    let dir_a = tempfile::tempdir().unwrap();
    let out_a =
        train_generator(&ds, &surr, &tiny_train_config(4), dir_a.path(), false, None).unwrap();

    // Same 4-epoch horizon, interrupted after two epochs, then resumed. The
    // lr/τ schedules depend on (epoch, total epochs), so the horizon must be
    // shared between both legs for the trajectories to match.
    let dir_b = tempfile::tempdir().unwrap();
    let interrupted =
        train_generator(&ds, &surr, &tiny_train_config(4), dir_b.path(), false, Some(2)).unwrap();
    assert_eq!(interrupted.epochs_completed, 2);
    let out_b =
        train_generator(&ds, &surr, &tiny_train_config(4), dir_b.path(), true, None).unwrap();

    assert_eq!(
        out_a.generator.checksum(),
        out_b.generator.checksum(),
        "resumed parameters diverged from the straight run"
    );
    // The checkpoint files match byte for byte, and so do the step logs.
    let bytes_a = std::fs::read(dir_a.path().join(LATEST_CHECKPOINT)).unwrap();
    let bytes_b = std::fs::read(dir_b.path().join(LATEST_CHECKPOINT)).unwrap();
    assert_eq!(bytes_a, bytes_b);
    let log_a = std::fs::read_to_string(dir_a.path().join(TRAIN_LOG)).unwrap();
    let log_b = std::fs::read_to_string(dir_b.path().join(TRAIN_LOG)).unwrap();
    assert_eq!(log_a, log_b, "resumed run must append to the same step log");
}

#[test]
fn rerun_from_scratch_is_bit_identical() {
    let (ds, surr) = tiny_fixture();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let a = train_generator(&ds, &surr, &tiny_train_config(3), dir_a.path(), false, None).unwrap();
    let b = train_generator(&ds, &surr, &tiny_train_config(3), dir_b.path(), false, None).unwrap();
    assert_eq!(a.generator.checksum(), b.generator.checksum());
    let log_a = std::fs::read_to_string(dir_a.path().join(TRAIN_LOG)).unwrap();
    let log_b = std::fs::read_to_string(dir_b.path().join(TRAIN_LOG)).unwrap();
    assert_eq!(log_a, log_b, "step logs diverged between identical runs");
}

#[test]
fn log_lines_parse_and_carry_schedules() {
    let (ds, surr) = tiny_fixture();
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train_config(3);
    train_generator(&ds, &surr, &cfg, dir.path(), false, None).unwrap();
    let log = std::fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
    let records: Vec<TrainRecord> = log
        .lines()
        .map(|l| serde_json::from_str(l).expect("log line parses"))
        .collect();
    // 6 scenes / batch 3 = 2 steps per epoch × 3 epochs.
    assert_eq!(records.len(), 6);
    assert!(records.iter().all(|r| r.loss_total.is_finite()));
    // τ anneals from τ_max downward; lr follows the cosine (monotone down).
    assert_eq!(records[0].tau, 0.5);
    assert!(records[4].tau < records[0].tau);
    assert!(records[4].lr < records[0].lr);
    // Branch counters cover the whole batch each step.
    for r in &records {
        let total =
            r.branch_dense + r.branch_sparse + r.branch_empty + r.branch_peak + r.branch_hmap;
        assert_eq!(total, 3, "branch counts must sum to the batch size");
    }
}

#[test]
fn checkpoints_reload_and_reject_mismatches() {
    let (ds, surr) = tiny_fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = train_generator(&ds, &surr, &tiny_train_config(2), dir.path(), false, None).unwrap();

    let g = load_generator(&out.latest_path).unwrap();
    assert_eq!(g.checksum(), out.generator.checksum());
    let gb = load_generator(&out.best_path).unwrap();
    assert_eq!(gb.epsilon, 8.0 / 255.0);

    // Surrogate checkpoints round-trip through their own save/load pair.
    let spath = dir.path().join("surrogate.ckpt");
    save_surrogate(&spath, &surr, &dataset_fingerprint(&ds), serde_json::json!({})).unwrap();
    let s2 = load_surrogate(&spath).unwrap();
    assert_eq!(s2.checksum(), surr.checksum());
    assert_eq!(s2.paradigm, Paradigm::DensityMap);

    // Loading a surrogate checkpoint as a generator is a data error.
    let err = load_generator(&spath).unwrap_err();
    assert!(matches!(err.category(), crowdveil_core::ErrorCategory::Data));

    // Resuming against a different surrogate is refused.
    let cfg2 = SurrogateTrainConfig { epochs: 1, lr: 1e-3, batch_size: 3, seed: 99, kernel_sigma: 2.0 };
    let (other_surr, _) = train_surrogate(&ds, Paradigm::DensityMap, &cfg2).unwrap();
    let err =
        train_generator(&ds, &other_surr, &tiny_train_config(4), dir.path(), true, None).unwrap_err();
    assert!(matches!(err.category(), crowdveil_core::ErrorCategory::Data));
}

#[test]
fn resume_with_completed_horizon_is_a_no_op() {
    let (ds, surr) = tiny_fixture();
    let dir = tempfile::tempdir().unwrap();
    let first = train_generator(&ds, &surr, &tiny_train_config(2), dir.path(), false, None).unwrap();
    let again = train_generator(&ds, &surr, &tiny_train_config(2), dir.path(), true, None).unwrap();
    assert_eq!(first.generator.checksum(), again.generator.checksum());
    assert_eq!(again.epochs_completed, 2);
}
