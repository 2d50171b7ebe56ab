//! Experiment orchestration: configuration, data, sweeps and plots.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod plot;

pub use config::{
    output_root, toy_train_config, ActivationPosition, EvaluationConfig, ExperimentConfig, ExperimentKind, SweepConfig,
    SweepValue, OUTPUT_ROOT_ENV,
};
pub use dataset::{ingest_dataset, DataSource, DatasetSpec, Splits};
pub use experiment::{run_experiment, CellReport, ExperimentResult, Manifest};
pub use plot::{emit_plots, PlotSummary};
