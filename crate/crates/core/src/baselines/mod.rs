//! Comparison statistics calibrated through the same toy harness as NPLM.

pub mod frechet;
pub mod mahalanobis;
pub mod mmd;
pub mod scan;
pub mod supervised;

pub use frechet::{frechet_distance, frechet_statistic};
pub use mahalanobis::{mahalanobis_statistic, ClassMoments};
pub use mmd::nystrom_mmd;
pub use supervised::{
    binned_delta_chi2, binned_fit, build_templates, train_score_classifier, BinnedFit, ScoreClassifier,
    ScoreConfig, ScoreTemplates,
};
pub use scan::{
    baseline_toy_scan, scan_entries, write_scan_csv, write_summary_csv, BaselineKind, BaselineStatistic, ScanEntry,
};
