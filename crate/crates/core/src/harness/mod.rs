//! Experiment configuration, checkpoints, the end-to-end protocol and
//! report emission.

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod report;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader};
pub use config::{
    DataConfig, ExperimentConfig, ModelSpec, RougeConfig, RunSpec, TrainRunConfig, CONFIG_VERSION, PROTOCOL_BATCH_SIZE,
    PROTOCOL_EPOCHS, PROTOCOL_LEARNING_RATE, PROTOCOL_RKLD_EPOCHS, PROTOCOL_RKLD_WARM_START, PROTOCOL_TEACHER_EPOCHS,
    PROTOCOL_TEACHER_LEARNING_RATE,
};
pub use experiment::{
    checkpoint_path, effective_regime, load_data, run_experiment, teacher_id, ExperimentData, ExperimentOptions,
    ExperimentOutcome,
};
pub use report::{emit_report, parse_csv, render_report, sort_rows, ReportFormat, ResultRow, RowMetrics, CSV_HEADER};
