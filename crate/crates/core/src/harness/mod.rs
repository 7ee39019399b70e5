//! Training, evaluation and inference drivers plus their configuration.

mod config;
mod evaluate;
mod experiments;
mod selftest;
mod train;

pub use config::{ModelPreset, TrainConfig, SEED_ENV};
pub use evaluate::{
    evaluate, evaluate_source, intermediates_path, load_model, panel_row, remove, remove_watermark, write_artifacts,
    EvalOptions, EvalOutcome, Removal, BUCKETS_FILE, PANELS, REPORT_FILE, SAMPLES_FILE,
};
pub use experiments::{
    ablation_ordering, experiment_config, tiny_overfit, AblationOptions, AblationResult, OverfitOptions, OverfitReport,
};
pub use selftest::{
    compositing_identity, dependency_set, determinism, gradient_suite, loss_oracle, metric_oracle, partition_example,
    receptive_field_probes, run_check, run_selftest, smoke_config, synthetic_samples, CheckOutcome, SelftestOptions,
    COMPOSITE_TOLERANCE, GRADIENT_TOLERANCE, LOSS_RELATIVE_TOLERANCE, METRIC_TOLERANCE, SSIM_TOLERANCE,
};
pub use train::{
    build, epoch_order, source_fingerprint, train, train_with, AdamSettings, Batch, EpochRecord, Phase, RunRecord,
    SampleSource, SplitSource, StepRecord, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT, NAN_DUMP, RUN_RECORD, STEP_LOG,
};
