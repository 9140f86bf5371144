use super::types::{Action, Event, VoucherInfo, VoucherSession};
use crate::config::KvConfig;
use crate::error::{Error, Result};

/// Per-phase caps and the optional look-back window for pre-collection behavior.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SessionConfig {
    pub atc_cap: usize,
    pub ord_cap: usize,
    /// Seconds before collection that still count as pre-collection; `None` is unbounded.
    pub pre_window: Option<i64>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            atc_cap: 45,
            ord_cap: 20,
            pre_window: None,
        }
    }
}

impl SessionConfig {
    pub const KEYS: [&'static str; 3] = ["atc_cap", "ord_cap", "pre_window"];

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = SessionConfig::default();
        let window: i64 = kv.get_or("pre_window", 0)?;
        Ok(SessionConfig {
            atc_cap: kv.get_or("atc_cap", d.atc_cap)?,
            ord_cap: kv.get_or("ord_cap", d.ord_cap)?,
            pre_window: (window > 0).then_some(window),
        })
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("atc_cap", self.atc_cap);
        kv.set("ord_cap", self.ord_cap);
        kv.set("pre_window", self.pre_window.unwrap_or(0));
    }

    fn cap(&self, action: Action) -> usize {
        match action {
            Action::Atc => self.atc_cap,
            Action::Ord => self.ord_cap,
        }
    }
}

/// Assembles a session from one user's events.
///
/// Pre-collection lists keep the events nearest before `collect_ts`;
/// post-collection lists keep events in `[collect_ts, end_ts]`, nearest
/// first on overflow. All lists are chronological.
pub fn build_session(
    user_id: &str,
    voucher: &VoucherInfo,
    collect_ts: i64,
    end_ts: i64,
    label: u8,
    events: &[Event],
    cfg: &SessionConfig,
) -> Result<VoucherSession> {
    if end_ts < collect_ts {
        return Err(Error::Data(format!("end_ts {end_ts} before collect_ts {collect_ts}")));
    }
    if let Some(e) = events.iter().find(|e| &*e.user_id != user_id) {
        return Err(Error::Data(format!(
            "event of user {} passed for user {user_id}",
            e.user_id
        )));
    }
    let sorted_owned;
    let events = if events.windows(2).all(|w| w[0].chrono_key() <= w[1].chrono_key()) {
        events
    } else {
        let mut v = events.to_vec();
        v.sort_by(|a, b| a.chrono_key().cmp(&b.chrono_key()));
        sorted_owned = v;
        &sorted_owned
    };
    Ok(build_session_sorted(
        user_id, voucher, collect_ts, end_ts, label, events, cfg,
    ))
}

/// Same as [`build_session`] for events already sorted by `(timestamp, item_id)`.
pub(crate) fn build_session_sorted(
    user_id: &str,
    voucher: &VoucherInfo,
    collect_ts: i64,
    end_ts: i64,
    label: u8,
    events: &[Event],
    cfg: &SessionConfig,
) -> VoucherSession {
    let split = events.partition_point(|e| e.timestamp < collect_ts);
    let start = match cfg.pre_window {
        Some(w) => events[..split].partition_point(|e| e.timestamp < collect_ts - w),
        None => 0,
    };
    let end = split + events[split..].partition_point(|e| e.timestamp <= end_ts);
    let pre = &events[start..split];
    let post = &events[split..end];

    let nearest_before = |action: Action| {
        let mut v: Vec<Event> = pre
            .iter()
            .rev()
            .filter(|e| e.action == action)
            .take(cfg.cap(action))
            .cloned()
            .collect();
        v.reverse();
        v
    };
    let nearest_after = |action: Action| -> Vec<Event> {
        post.iter()
            .filter(|e| e.action == action)
            .take(cfg.cap(action))
            .cloned()
            .collect()
    };

    VoucherSession {
        user_id: events.first().map_or_else(|| user_id.into(), |e| e.user_id.clone()),
        voucher: voucher.clone(),
        collect_ts,
        end_ts,
        pre_atc: nearest_before(Action::Atc),
        pre_ord: nearest_before(Action::Ord),
        post_atc: nearest_after(Action::Atc),
        post_ord: nearest_after(Action::Ord),
        label,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn ev(item: &str, action: Action, ts: i64) -> Event {
        Event {
            user_id: "u".into(),
            item_id: item.into(),
            action,
            timestamp: ts,
            category_id: "c".into(),
            brand_id: "b".into(),
            shop_id: "s".into(),
            price_level: 1,
        }
    }

    fn voucher() -> VoucherInfo {
        VoucherInfo {
            voucher_id: "v".into(),
            activity_id: "a".into(),
            min_spend: 50.0,
            discount_amount: 5.0,
        }
    }

    fn ids(events: &[Event]) -> Vec<&str> {
        events.iter().map(|e| &*e.item_id).collect()
    }

    #[test]
    fn no_events_gives_empty_lists() {
        let s = build_session("u", &voucher(), 100, 200, 0, &[], &SessionConfig::default()).unwrap();
        assert!(s.pre_atc.is_empty() && s.pre_ord.is_empty() && s.post_atc.is_empty() && s.post_ord.is_empty());
        assert_eq!(&*s.user_id, "u");
    }

    #[test]
    fn end_before_collect_is_an_error() {
        assert!(build_session("u", &voucher(), 100, 99, 0, &[], &SessionConfig::default()).is_err());
    }

    #[test]
    fn pre_cap_keeps_latest() {
        let events: Vec<Event> = (0..50).map(|i| ev(&format!("i{i:02}"), Action::Atc, 10 + i)).collect();
        let s = build_session("u", &voucher(), 1000, 2000, 0, &events, &SessionConfig::default()).unwrap();
        assert_eq!(s.pre_atc.len(), 45);
        assert_eq!(&*s.pre_atc[0].item_id, "i05");
        assert_eq!(&*s.pre_atc[44].item_id, "i49");
    }

    #[test]
    fn post_cap_keeps_nearest_after() {
        let events: Vec<Event> = (0..25)
            .map(|i| ev(&format!("o{i:02}"), Action::Ord, 1000 + i))
            .collect();
        let s = build_session("u", &voucher(), 1000, 2000, 1, &events, &SessionConfig::default()).unwrap();
        assert_eq!(s.post_ord.len(), 20);
        assert_eq!(&*s.post_ord[19].item_id, "o19");
    }

    #[test]
    fn six_events_straddling_collection() {
        // collect at 100, end at 150
        let events = vec![
            ev("a", Action::Atc, 90),
            ev("b", Action::Ord, 95),
            ev("c", Action::Atc, 100), // at collection: post
            ev("d", Action::Atc, 120),
            ev("e", Action::Ord, 150), // at end: post
            ev("f", Action::Ord, 151), // after end: dropped
        ];
        let s = build_session("u", &voucher(), 100, 150, 1, &events, &SessionConfig::default()).unwrap();
        assert_eq!(ids(&s.pre_atc), ["a"]);
        assert_eq!(ids(&s.pre_ord), ["b"]);
        assert_eq!(ids(&s.post_atc), ["c", "d"]);
        assert_eq!(ids(&s.post_ord), ["e"]);
    }

    #[test]
    fn ties_and_unsorted_input() {
        let events = vec![
            ev("z", Action::Atc, 50),
            ev("a", Action::Atc, 50),
            ev("m", Action::Atc, 40),
        ];
        let s = build_session("u", &voucher(), 100, 100, 0, &events, &SessionConfig::default()).unwrap();
        assert_eq!(ids(&s.pre_atc), ["m", "a", "z"]);
    }

    #[test]
    fn pre_window_limits_lookback() {
        let events = vec![ev("old", Action::Atc, 10), ev("new", Action::Atc, 95)];
        let cfg = SessionConfig {
            pre_window: Some(20),
            ..SessionConfig::default()
        };
        let s = build_session("u", &voucher(), 100, 100, 0, &events, &cfg).unwrap();
        assert_eq!(ids(&s.pre_atc), ["new"]);
    }

    #[test]
    fn foreign_events_are_rejected() {
        let mut e = ev("a", Action::Atc, 5);
        e.user_id = "other".into();
        assert!(build_session("u", &voucher(), 100, 100, 0, &[e], &SessionConfig::default()).is_err());
    }
}
