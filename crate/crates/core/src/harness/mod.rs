//! Experiment orchestration: configuration, the attack-and-score protocol,
//! and report emission.

mod config;
mod experiment;
mod report;

pub use config::{
    AttackTarget, DetectorSet, EnsembleConfig, ExperimentConfig, GramConfig, MahalanobisConfig, OdinGrid,
    ReconstructionConfig,
};
pub use experiment::{
    attack_sets, load_dataset, load_named_dataset, prepare_models, run_experiment, AttackSetRun, AttackSetSpec, ExperimentRun, Models,
};
pub use report::{
    assemble_report, config_hash, emit_report, format_auroc, persist_report, read_pairs_csv, regenerate_report,
    svg_histogram, text_table, write_pairs_csv, AurocCell, ExperimentReport, PairRow, ReportFormat,
};
