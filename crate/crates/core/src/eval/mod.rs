//! Window labelling, detection metrics, the forecast-error baseline and the
//! experiment grid runner.

mod experiment;
pub mod metrics;

pub use experiment::{
    baseline_rmse, baseline_rmse_scores, desk_grid, prepare_detector, run_experiment, score_traces,
    CellReport, CellScores, CellSpec, DetectorSpec, ExperimentConfig, ExperimentReport,
    ModelSource, PreparedDetector, Profile, Progress, RocRow, DESK_SEED, REPORT_COLUMNS,
};
pub use metrics::{
    auroc, f1, f1_per_class, label_windows, metrics_at, roc_points, tnr_at_tpr95, Confusion,
    F1Report, LabeledScore, MetricsReport, RocPoint,
};
