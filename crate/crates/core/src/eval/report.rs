use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{mean_std, rela_impr};
use crate::error::{Error, Result};

/// Test metrics of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub model: String,
    pub seed: u64,
    pub split_hash: String,
    pub auc: f64,
    pub logloss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub auc_mean: f64,
    /// Sample standard deviation over seeds.
    pub auc_std: f64,
    pub logloss_mean: f64,
    /// Relative AUC improvement (percent) over each base model.
    pub rela_impr: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub split_hash: String,
    pub bases: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn row(&self, model: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    /// Aligned plain-text table.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let width = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
        let _ = write!(out, "{:<width$}  {:>17}  {:>8}", "model", "AUC (mean±std)", "Logloss");
        for b in &self.bases {
            let _ = write!(out, "  {:>12}", format!("RI vs {b}"));
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{:<width$}  {:>17}  {:>8.4}",
                r.model,
                format!("{:.4}±{:.4}", r.auc_mean, r.auc_std),
                r.logloss_mean
            );
            for b in &self.bases {
                let _ = write!(out, "  {:>11.2}%", r.rela_impr[b]);
            }
            out.push('\n');
        }
        let _ = writeln!(out, "split {}", self.split_hash);
        out
    }
}

/// Groups runs by model (first-appearance order) and compares each mean
/// AUC against the mean AUC of every base model.
pub fn build_report(runs: &[RunResult], bases: &[&str]) -> Result<Report> {
    let Some(first) = runs.first() else {
        return Err(Error::Invalid("no runs to report".into()));
    };
    if let Some(r) = runs.iter().find(|r| r.split_hash != first.split_hash) {
        return Err(Error::Data(format!(
            "run of {} (seed {}) was evaluated on split {} but {} used {}",
            r.model, r.seed, r.split_hash, first.model, first.split_hash
        )));
    }
    let mut order: Vec<&str> = Vec::new();
    for r in runs {
        if !order.contains(&r.model.as_str()) {
            order.push(&r.model);
        }
    }
    let mut rows: Vec<ReportRow> = order
        .iter()
        .map(|&m| {
            let mine: Vec<&RunResult> = runs.iter().filter(|r| r.model == m).collect();
            let aucs: Vec<f64> = mine.iter().map(|r| r.auc).collect();
            let losses: Vec<f64> = mine.iter().map(|r| r.logloss).collect();
            let (auc_mean, auc_std) = mean_std(&aucs);
            ReportRow {
                model: m.to_string(),
                runs: mine.len(),
                seeds: mine.iter().map(|r| r.seed).collect(),
                auc_mean,
                auc_std,
                logloss_mean: mean_std(&losses).0,
                rela_impr: BTreeMap::new(),
            }
        })
        .collect();
    for &b in bases {
        let base = rows
            .iter()
            .find(|r| r.model == b)
            .ok_or_else(|| Error::Invalid(format!("base model {b} has no runs")))?
            .auc_mean;
        for r in &mut rows {
            let v = rela_impr(r.auc_mean, base)?;
            r.rela_impr.insert(b.to_string(), v);
        }
    }
    Ok(Report {
        split_hash: first.split_hash.clone(),
        bases: bases.iter().map(|s| s.to_string()).collect(),
        rows,
    })
}
