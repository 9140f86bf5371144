use crate::error::{Error, Result};
use crate::tensor::bce;

/// Rank-based AUC with midranks for tied scores.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("score {s} is not a number")));
    }
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    let negatives = labels.len() - positives;
    if positives == 0 {
        return Err(Error::Invalid("auc needs at least one positive label".into()));
    }
    if negatives == 0 {
        return Err(Error::Invalid("auc needs at least one negative label".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let midrank = (i + j + 2) as f64 / 2.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1.0).count();
        rank_sum += midrank * pos_in_group as f64;
        i = j + 1;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Mean clamped binary cross-entropy.
pub fn logloss(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "logloss needs matching nonempty inputs, got {} scores and {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(scores.iter().zip(labels).map(|(&p, &y)| bce(p, y)).sum::<f64>() / scores.len() as f64)
}

/// Relative AUC improvement over a base model, in percent.
pub fn rela_impr(measured_auc: f64, base_auc: f64) -> Result<f64> {
    if base_auc == 0.5 {
        return Err(Error::Invalid(
            "base AUC of 0.5 leaves the relative improvement undefined".into(),
        ));
    }
    Ok(((measured_auc - 0.5) / (base_auc - 0.5) - 1.0) * 100.0)
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    (mean, (ss / (n - 1) as f64).sqrt())
}
