//! Configuration, experiment orchestration, persistence and metric export.

mod config;
mod report;
mod run;
mod train;

pub use config::{
    apply_text, parse_config, parse_override, RunConfig, TrainMode, KEYS, OUTPUT_ROOT_ENV,
};
pub use report::{
    build_report, export_occupancy, group_curves, parse_metrics, run_report, Dominance,
    MethodSummary, PairSummary, Report,
};
pub use run::{
    default_run_id, gen_data, load_run_config, rollout_one, run_rollout, run_train, MetricRow,
    TrainArtifacts, BANK_FILE, CHECKPOINT_FILE, CONFIG_FILE, LOSSES_FILE, METRICS_HEADER,
};
pub use train::{initial_params, train, TrainOutcome};
