//! Data ingestion, multi-view augmentation and the training loop.

mod config;
mod data;
mod objective;
mod train;
mod views;

pub use config::{Ablation, DatasetKind, DatasetSource, Split, TrainConfig};
pub use data::{load_dataset, load_image, mix, parse_cifar_batch, save_image, synthetic_shape, Dataset, CIFAR_RECORD, SYNTHETIC_CLASSES};
pub use objective::{build_objective, match_tokens, teacher_targets, Objective, StepInputs, TeacherTargets};
pub use train::{
    batch_indices, batch_views, checkpoint_config, checkpoint_path, deterministic, learning_rate, run_training,
    steps_per_epoch, total_steps, train_step, AdamW, TrainReport, TrainState, METRICS_FILE,
};
pub use views::{make_views, photometric, random_resized_box, visible_count, LocalCrop, MaskedView, ViewBatch};
