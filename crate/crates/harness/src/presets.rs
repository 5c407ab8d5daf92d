//! Desk-scale teacher/student analogs and default run configs.

use std::path::PathBuf;

use unixkd_core::{LayerSpec, ModelSpec};

use crate::config::{LossWeights, LrSchedule, Method, TeacherTraining, TrainConfig};

/// Two conv blocks and a hidden dense layer; about 191k FLOPs per 8×8 image.
pub fn desk_teacher(channels: usize, height: usize, width: usize, classes: usize, seed: u64) -> ModelSpec {
    ModelSpec {
        input_shape: vec![channels, height, width],
        layers: vec![
            LayerSpec::Conv3x3 { out_channels: 8 },
            LayerSpec::Relu,
            LayerSpec::Conv3x3 { out_channels: 16 },
            LayerSpec::Relu,
            LayerSpec::Avgpool2x2,
            LayerSpec::Flatten,
            LayerSpec::Dense { out_features: 64 },
            LayerSpec::Relu,
            LayerSpec::Dense { out_features: classes },
        ],
        num_classes: classes,
        seed,
    }
}

/// One narrow conv block; about 9.3k FLOPs per 8×8 image.
pub fn desk_student(channels: usize, height: usize, width: usize, classes: usize, seed: u64) -> ModelSpec {
    ModelSpec {
        input_shape: vec![channels, height, width],
        layers: vec![
            LayerSpec::Conv3x3 { out_channels: 4 },
            LayerSpec::Relu,
            LayerSpec::Avgpool2x2,
            LayerSpec::Flatten,
            LayerSpec::Dense { out_features: 32 },
            LayerSpec::Relu,
            LayerSpec::Dense { out_features: classes },
        ],
        num_classes: classes,
        seed,
    }
}

/// Label-free distillation on the bundled 8×8, 10-class data: `N = 64`,
/// `k = 48`, `α = 1`, `w = 10`, `τ = 4`, 30 epochs. The student is
/// initialized from `seed` as well.
pub fn desk_config(dataset: impl Into<PathBuf>, method: Method, seed: u64) -> TrainConfig {
    TrainConfig {
        dataset: dataset.into(),
        teacher_spec: desk_teacher(1, 8, 8, 10, 0),
        student_spec: desk_student(1, 8, 8, 10, seed),
        teacher_params: None,
        teacher_cache: None,
        teacher_training: TeacherTraining::default(),
        method,
        criterion: None,
        n: 64,
        k: 48,
        alpha: 1.0,
        w: 10.0,
        b: None,
        per_sample_lambda: false,
        loss_weights: LossWeights::default(),
        temperature: 4.0,
        tau_squared: true,
        epochs: 30,
        lr_schedule: LrSchedule {
            initial: 0.05,
            decay_epochs: vec![18, 24],
            decay_factor: 10.0,
        },
        momentum: 0.9,
        weight_decay: 5e-4,
        seed,
        backward_multiplier: 1.0,
        record_features: false,
        scoring_temperature: 1.0,
    }
}
