//! AUC, Logloss and relative-improvement metrics, and run reports.

mod metrics;
mod report;

pub use metrics::{auc, logloss, mean_std, rela_impr};
pub use report::{build_report, Report, ReportRow, RunResult};
