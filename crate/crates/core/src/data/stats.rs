use serde::Serialize;

use super::types::{Action, VoucherSession, Zone};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActionStats {
    pub action: Action,
    /// Mean pre-collection sequence length.
    pub before: f64,
    /// Mean post-collection sequence length.
    pub after: f64,
    /// `after / before - 1` in percent; `None` when `before` is zero.
    pub diff_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    pub sessions: usize,
    pub rows: Vec<ActionStats>,
}

impl DatasetStats {
    pub fn row(&self, action: Action) -> &ActionStats {
        self.rows
            .iter()
            .find(|r| r.action == action)
            .expect("every action has a row")
    }
}

pub fn dataset_stats(sessions: &[VoucherSession]) -> Result<DatasetStats> {
    if sessions.is_empty() {
        return Err(Error::Data("no sessions to summarize".into()));
    }
    let n = sessions.len() as f64;
    let mean = |zone: Zone| sessions.iter().map(|s| s.zone(zone).len()).sum::<usize>() as f64 / n;
    let row = |action: Action, pre: Zone, post: Zone| {
        let before = mean(pre);
        let after = mean(post);
        ActionStats {
            action,
            before,
            after,
            diff_pct: (before > 0.0).then(|| (after / before - 1.0) * 100.0),
        }
    };
    Ok(DatasetStats {
        sessions: sessions.len(),
        rows: vec![
            row(Action::Atc, Zone::AtcPre, Zone::AtcPost),
            row(Action::Ord, Zone::OrdPre, Zone::OrdPost),
        ],
    })
}
