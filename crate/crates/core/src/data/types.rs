use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Opaque identifier as read from the logs.
pub type Id = Arc<str>;

/// Behavior channel. Clicks are deliberately not representable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Atc,
    Ord,
}

impl Action {
    pub const ALL: [Action; 2] = [Action::Atc, Action::Ord];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Atc => "atc",
            Action::Ord => "ord",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "atc" => Ok(Action::Atc),
            "ord" => Ok(Action::Ord),
            other => Err(format!("unsupported action {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub user_id: Id,
    pub item_id: Id,
    pub action: Action,
    pub timestamp: i64,
    pub category_id: Id,
    pub brand_id: Id,
    pub shop_id: Id,
    pub price_level: i64,
}

impl Event {
    /// Deterministic chronological order: `(timestamp, item_id)`.
    pub fn chrono_key(&self) -> (i64, &str) {
        (self.timestamp, &self.item_id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoucherInfo {
    pub voucher_id: Id,
    pub activity_id: Id,
    pub min_spend: f64,
    pub discount_amount: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserProfile {
    pub user_id: Id,
    pub age_level: Id,
    pub gender: Id,
    pub purchase_level: Id,
    pub order_count: f64,
    pub order_amount: f64,
}

/// The four item sub-groups of a UVG, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Zone {
    AtcPre,
    OrdPre,
    AtcPost,
    OrdPost,
}

impl Zone {
    pub const ALL: [Zone; 4] = [Zone::AtcPre, Zone::OrdPre, Zone::AtcPost, Zone::OrdPost];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn action(self) -> Action {
        match self {
            Zone::AtcPre | Zone::AtcPost => Action::Atc,
            Zone::OrdPre | Zone::OrdPost => Action::Ord,
        }
    }

    pub fn is_post(self) -> bool {
        matches!(self, Zone::AtcPost | Zone::OrdPost)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Zone::AtcPre => "atc_pre",
            Zone::OrdPre => "ord_pre",
            Zone::AtcPost => "atc_post",
            Zone::OrdPost => "ord_post",
        }
    }
}

/// One user-voucher interaction with the behavior around it.
#[derive(Clone, Debug, PartialEq)]
pub struct VoucherSession {
    pub user_id: Id,
    pub voucher: VoucherInfo,
    pub collect_ts: i64,
    pub end_ts: i64,
    pub pre_atc: Vec<Event>,
    pub pre_ord: Vec<Event>,
    pub post_atc: Vec<Event>,
    pub post_ord: Vec<Event>,
    pub label: u8,
}

impl VoucherSession {
    pub fn key(&self) -> String {
        session_key(&self.user_id, &self.voucher.voucher_id, self.collect_ts)
    }

    pub fn zone(&self, zone: Zone) -> &[Event] {
        match zone {
            Zone::AtcPre => &self.pre_atc,
            Zone::OrdPre => &self.pre_ord,
            Zone::AtcPost => &self.post_atc,
            Zone::OrdPost => &self.post_ord,
        }
    }

    pub fn is_redeemed(&self) -> bool {
        self.label == 1
    }
}

/// `user|voucher|collect_ts`, the identifier used across output files.
pub fn session_key(user: &str, voucher: &str, collect_ts: i64) -> String {
    format!("{user}|{voucher}|{collect_ts}")
}
