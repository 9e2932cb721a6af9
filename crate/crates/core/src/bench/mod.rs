//! Benchmark loading, scoring and statistics.

mod analysis;
mod evaluate;
mod question;
mod stats;

pub use analysis::{
    bin_by_prior, phrasing_consistency, rolling_accuracy, sort_by_prior, Consistency,
    ConsistencyCounts, PriorBin, PriorOutcome, PriorScheme,
};
pub use evaluate::{
    build_report, evaluate_method, evaluate_results, EvalOptions, EvalReport, EvalResult,
    GroupAccuracy, Method, ReportHeader,
};
pub use question::{load_questions, save_questions, ConflictQuestion, Dimension, Tier};
pub use stats::{bootstrap_ci, match_answer, wilson_interval, z_for_confidence, Interval};
