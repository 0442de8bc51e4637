//! Config-driven runs: data → pretraining → imputation → variants → reports.

mod config;
mod runner;
mod variant;

pub use config::{
    CalendarConfig, DataMode, DatasetConfig, EvalConfig, ExperimentConfig, ModelConfig, OutputConfig, Profile,
};
pub use runner::{
    ablation_config, evaluate_variant, fit_causal, load_events, prepare_data, pretrain, run_ablation, run_experiment,
    run_experiment_partial, run_seed, train_variant, write_outputs, CausalArtifacts, DrSummary, EpochLoss, ExperimentOutcome, PreparedData, SeedDiagnostics,
    SeedOutcome, TrainedVariant,
};
pub use variant::{Plan, Variant};
