//! Shared fixtures for the benchmarks.

use discluster::data::{gen_two_moons_shift, Batcher, SourceBatch, TargetBatch, TwoMoonsShift};
use discluster::model::Architecture;
use discluster::{DomainTask, ScheduleConfig, TrainConfig, TrainState};

/// Two-moons task at the desk size used by the acceptance runs.
pub fn moons_task() -> DomainTask {
    let (s, t) = gen_two_moons_shift(&TwoMoonsShift::default()).expect("valid generator parameters");
    DomainTask::new(s, t)
}

/// Desk architecture with a one- or two-layer classifier.
pub fn config(hidden: Option<usize>, epochs: usize) -> TrainConfig {
    TrainConfig {
        arch: Architecture {
            input_dim: 2,
            extractor_dims: vec![32, 32],
            classifier_hidden: hidden,
            num_classes: 2,
        },
        schedule: ScheduleConfig {
            epochs,
            ..Default::default()
        },
        loss: Default::default(),
        seed: 0,
    }
}

/// A state whose centroid banks are all initialised, plus one batch pair.
pub fn warm_state(cfg: &TrainConfig, task: &DomainTask) -> (TrainState, SourceBatch, TargetBatch) {
    let warm = discluster::trainer::train(
        &TrainConfig {
            schedule: ScheduleConfig {
                epochs: 2,
                ..cfg.schedule.clone()
            },
            ..cfg.clone()
        },
        task,
    )
    .expect("warm-up training");
    let mut batcher = Batcher::new(&task.source, task.target.train_view(), cfg.schedule.batch_size, cfg.seed)
        .expect("batcher");
    let (src, tgt) = batcher.next_epoch().remove(0);
    (warm, src, tgt)
}
