//! Encoded, split dataset ready for the models: vocabularies, normalized
//! dense features, one historical and one target graph per session, and
//! one training sample per session.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ingest::{ingest_dir, RawData, Reject};
use super::session::{build_session_sorted, SessionConfig};
use super::types::{Action, Event, Id, VoucherInfo, VoucherSession, Zone};
use super::uvg::{build_uvg, EdgeDir, UvgMode};
use crate::config::KvConfig;
use crate::error::{Error, Result};

/// Name of the optional dataset settings file inside a data directory.
pub const DATA_CONFIG_FILE: &str = "data.cfg";

/// Id vocabulary. Index 0 is reserved for out-of-vocabulary ids.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    ids: Vec<Id>,
    index: HashMap<Id, usize>,
}

impl Vocab {
    pub const OOV: usize = 0;

    /// Sorted, deduplicated vocabulary.
    pub fn build<'a>(ids: impl IntoIterator<Item = &'a Id>) -> Self {
        let set: BTreeSet<&Id> = ids.into_iter().collect();
        Self::from_ordered(set.into_iter().cloned().collect())
    }

    fn from_ordered(ids: Vec<Id>) -> Self {
        let index = ids.iter().enumerate().map(|(i, id)| (id.clone(), i + 1)).collect();
        Vocab { ids, index }
    }

    pub fn get(&self, id: &str) -> usize {
        self.index.get(id).copied().unwrap_or(Self::OOV)
    }

    /// Table size including the OOV row.
    pub fn len(&self) -> usize {
        self.ids.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Id of a row, `None` for the OOV row.
    pub fn id(&self, index: usize) -> Option<&Id> {
        index.checked_sub(1).and_then(|i| self.ids.get(i))
    }
}

impl From<Vec<String>> for Vocab {
    fn from(ids: Vec<String>) -> Self {
        Self::from_ordered(ids.into_iter().map(Id::from).collect())
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.ids.iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocabs {
    pub item: Vocab,
    pub category: Vocab,
    pub brand: Vocab,
    pub shop: Vocab,
    pub voucher: Vocab,
    pub activity: Vocab,
    pub age: Vocab,
    pub gender: Vocab,
    pub purchase: Vocab,
}

impl Vocabs {
    pub fn build(raw: &RawData) -> Self {
        let ev = &raw.events;
        Vocabs {
            item: Vocab::build(ev.iter().map(|e| &e.item_id)),
            category: Vocab::build(ev.iter().map(|e| &e.category_id)),
            brand: Vocab::build(ev.iter().map(|e| &e.brand_id)),
            shop: Vocab::build(ev.iter().map(|e| &e.shop_id)),
            voucher: Vocab::build(raw.vouchers.iter().map(|v| &v.voucher_id)),
            activity: Vocab::build(raw.vouchers.iter().map(|v| &v.activity_id)),
            age: Vocab::build(raw.profiles.iter().map(|p| &p.age_level)),
            gender: Vocab::build(raw.profiles.iter().map(|p| &p.gender)),
            purchase: Vocab::build(raw.profiles.iter().map(|p| &p.purchase_level)),
        }
    }
}

/// Mean and standard deviation used for z-normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZNorm {
    pub mean: f64,
    pub std: f64,
}

impl ZNorm {
    /// Population statistics; a constant column gets `std = 1`.
    pub fn fit(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count();
        if n == 0 {
            return ZNorm { mean: 0.0, std: 1.0 };
        }
        let mean = values.clone().sum::<f64>() / n as f64;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        ZNorm {
            mean,
            std: if std > 1e-12 { std } else { 1.0 },
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norms {
    pub order_count: ZNorm,
    pub order_amount: ZNorm,
    pub min_spend: ZNorm,
    pub discount: ZNorm,
}

/// Dataset settings. `Default` gives the standard configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetConfig {
    pub session: SessionConfig,
    /// Items per zone linked with the voucher node.
    pub z: usize,
    /// Maximum history length.
    pub r: usize,
    pub edge_dir: EdgeDir,
    /// Percentage of users assigned to the test split.
    pub test_pct: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            session: SessionConfig::default(),
            z: 6,
            r: 6,
            edge_dir: EdgeDir::default(),
            test_pct: 20,
        }
    }
}

impl DatasetConfig {
    pub const KEYS: [&'static str; 7] = ["atc_cap", "ord_cap", "pre_window", "z", "r", "edge_dir", "test_pct"];

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = DatasetConfig::default();
        let cfg = DatasetConfig {
            session: SessionConfig::from_kv(kv)?,
            z: kv.get_or("z", d.z)?,
            r: kv.get_or("r", d.r)?,
            edge_dir: kv.get_or("edge_dir", d.edge_dir)?,
            test_pct: kv.get_or("test_pct", d.test_pct)?,
        };
        if cfg.z == 0 || cfg.r == 0 {
            return Err(Error::Config("z and r must be at least 1".into()));
        }
        if cfg.test_pct == 0 || cfg.test_pct >= 100 {
            return Err(Error::Config(format!("test_pct {} outside 1..=99", cfg.test_pct)));
        }
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        self.session.write_kv(kv);
        kv.set("z", self.z);
        kv.set("r", self.r);
        kv.set("edge_dir", self.edge_dir);
        kv.set("test_pct", self.test_pct);
    }

    /// Reads `data.cfg` from a data directory when present.
    pub fn for_dir(dir: &Path) -> Result<Self> {
        let path = dir.join(DATA_CONFIG_FILE);
        if !path.exists() {
            return Ok(DatasetConfig::default());
        }
        let kv = KvConfig::load(&path)?;
        kv.reject_unknown(&Self::KEYS)?;
        Self::from_kv(&kv)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeFeat {
    pub item: usize,
    pub category: usize,
    pub brand: usize,
    pub shop: usize,
    pub zone: Zone,
    pub timestamp: i64,
}

impl NodeFeat {
    pub fn action(&self) -> Action {
        self.zone.action()
    }
}

/// Index-encoded graph. The voucher node is node 0, `nodes[i]` is node
/// `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedUvg {
    pub nodes: Vec<NodeFeat>,
    pub edges: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoucherFeat {
    pub voucher: usize,
    pub activity: usize,
    /// Normalized `[min_spend, discount_amount]`.
    pub dense: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProfileFeat {
    pub age: usize,
    pub gender: usize,
    pub purchase: usize,
    /// Normalized `[order_count, order_amount]`.
    pub dense: [f64; 2],
}

/// One prediction target. Indices refer to [`Dataset::sessions`].
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub session: usize,
    pub user: usize,
    /// Earlier redeemed sessions of the same user, most recent last.
    pub history: Vec<usize>,
    pub label: f64,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub vocabs: Vocabs,
    pub norms: Norms,
    pub users: Vec<Id>,
    pub profiles: Vec<ProfileFeat>,
    /// Sorted by `(user, collect_ts, voucher_id)`.
    pub sessions: Vec<VoucherSession>,
    pub keys: Vec<String>,
    pub vouchers: Vec<VoucherFeat>,
    pub hist_uvgs: Vec<EncodedUvg>,
    pub target_uvgs: Vec<EncodedUvg>,
    /// `samples[i]` predicts `sessions[i]`.
    pub samples: Vec<Sample>,
    pub is_test: Vec<bool>,
    pub rejects: Vec<Reject>,
}

impl Dataset {
    pub fn load(dir: &Path, config: DatasetConfig, vocabs: Option<Vocabs>) -> Result<Self> {
        let raw = ingest_dir(dir)?;
        Self::build(raw, config, vocabs)
    }

    /// Builds sessions, graphs and samples. `vocabs` (e.g. from a
    /// checkpoint) fixes the id encoding; otherwise it is derived from `raw`.
    pub fn build(raw: RawData, config: DatasetConfig, vocabs: Option<Vocabs>) -> Result<Self> {
        let vocabs = vocabs.unwrap_or_else(|| Vocabs::build(&raw));
        let RawData {
            mut events,
            vouchers,
            sessions: rows,
            profiles,
            mut rejects,
        } = raw;

        let norms = Norms {
            order_count: ZNorm::fit(profiles.iter().map(|p| p.order_count)),
            order_amount: ZNorm::fit(profiles.iter().map(|p| p.order_amount)),
            min_spend: ZNorm::fit(vouchers.iter().map(|v| v.min_spend)),
            discount: ZNorm::fit(vouchers.iter().map(|v| v.discount_amount)),
        };

        let mut voucher_info: HashMap<Id, VoucherInfo> = HashMap::new();
        for v in vouchers {
            voucher_info.insert(v.voucher_id.clone(), v);
        }

        events.sort_by(|a, b| (&a.user_id, a.chrono_key()).cmp(&(&b.user_id, b.chrono_key())));
        let mut user_events: HashMap<Id, (usize, usize)> = HashMap::new();
        let mut start = 0;
        while start < events.len() {
            let user = events[start].user_id.clone();
            let end = start + events[start..].partition_point(|e| e.user_id == user);
            user_events.insert(user, (start, end));
            start = end;
        }

        let mut rows = rows;
        rows.sort_by(|a, b| (&a.user_id, a.collect_ts, &a.voucher_id).cmp(&(&b.user_id, b.collect_ts, &b.voucher_id)));
        let mut sessions = Vec::with_capacity(rows.len());
        let mut keys = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let key = super::types::session_key(&row.user_id, &row.voucher_id, row.collect_ts);
            if i > 0 && keys.last() == Some(&key) {
                rejects.push(Reject {
                    file: super::ingest::SESSIONS_FILE.into(),
                    line: 0,
                    reason: format!("duplicate session {key}"),
                });
                continue;
            }
            let Some(voucher) = voucher_info.get(&row.voucher_id) else {
                rejects.push(Reject {
                    file: super::ingest::SESSIONS_FILE.into(),
                    line: 0,
                    reason: format!("session {key} refers to unknown voucher_id"),
                });
                continue;
            };
            let evs: &[Event] = match user_events.get(&row.user_id) {
                Some(&(a, b)) => &events[a..b],
                None => &[],
            };
            let mut s = build_session_sorted(
                &row.user_id,
                voucher,
                row.collect_ts,
                row.end_ts,
                row.label,
                evs,
                &config.session,
            );
            s.user_id = row.user_id.clone();
            sessions.push(s);
            keys.push(key);
        }
        drop(events);

        let mut users: Vec<Id> = Vec::new();
        let mut session_user = Vec::with_capacity(sessions.len());
        for s in &sessions {
            if users.last() != Some(&s.user_id) {
                users.push(s.user_id.clone());
            }
            session_user.push(users.len() - 1);
        }

        let profile_map: HashMap<&str, &super::types::UserProfile> =
            profiles.iter().map(|p| (&*p.user_id, p)).collect();
        let profiles: Vec<ProfileFeat> = users
            .iter()
            .map(|u| match profile_map.get(&**u) {
                Some(p) => ProfileFeat {
                    age: vocabs.age.get(&p.age_level),
                    gender: vocabs.gender.get(&p.gender),
                    purchase: vocabs.purchase.get(&p.purchase_level),
                    dense: [
                        norms.order_count.apply(p.order_count),
                        norms.order_amount.apply(p.order_amount),
                    ],
                },
                None => ProfileFeat {
                    age: Vocab::OOV,
                    gender: Vocab::OOV,
                    purchase: Vocab::OOV,
                    dense: [0.0, 0.0],
                },
            })
            .collect();

        let voucher_feats = sessions
            .iter()
            .map(|s| VoucherFeat {
                voucher: vocabs.voucher.get(&s.voucher.voucher_id),
                activity: vocabs.activity.get(&s.voucher.activity_id),
                dense: [
                    norms.min_spend.apply(s.voucher.min_spend),
                    norms.discount.apply(s.voucher.discount_amount),
                ],
            })
            .collect();

        let encode = |s: &VoucherSession, mode| encode_uvg(s, mode, &config, &vocabs);
        let hist_uvgs = sessions.iter().map(|s| encode(s, UvgMode::Historical)).collect();
        let target_uvgs = sessions.iter().map(|s| encode(s, UvgMode::Target)).collect();

        let mut samples = Vec::with_capacity(sessions.len());
        let mut lo = 0;
        for (i, s) in sessions.iter().enumerate() {
            let user = session_user[i];
            while session_user[lo] != user {
                lo += 1;
            }
            let mut history: Vec<usize> = (lo..i)
                .filter(|&j| sessions[j].is_redeemed() && sessions[j].end_ts < s.collect_ts)
                .collect();
            if history.len() > config.r {
                history.drain(..history.len() - config.r);
            }
            samples.push(Sample {
                session: i,
                user,
                history,
                label: f64::from(s.label),
            });
        }

        let is_test = sessions
            .iter()
            .map(|s| user_bucket(&s.user_id) < config.test_pct)
            .collect();

        Ok(Dataset {
            config,
            vocabs,
            norms,
            users,
            profiles,
            sessions,
            keys,
            vouchers: voucher_feats,
            hist_uvgs,
            target_uvgs,
            samples,
            is_test,
            rejects,
        })
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_test[i]).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_test[i]).collect()
    }

    /// SHA-256 over the sorted test session keys; equal hashes mean equal
    /// test splits.
    pub fn split_hash(&self) -> String {
        let mut keys: Vec<&str> = self.test_indices().into_iter().map(|i| self.keys[i].as_str()).collect();
        keys.sort_unstable();
        let mut h = Sha256::new();
        for k in keys {
            h.update(k.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Stable 0..100 bucket of a user id.
pub fn user_bucket(user: &str) -> u64 {
    let digest = Sha256::digest(user.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(b) % 100
}

fn encode_uvg(s: &VoucherSession, mode: UvgMode, config: &DatasetConfig, vocabs: &Vocabs) -> EncodedUvg {
    let g = build_uvg(s, mode, config.z, config.edge_dir);
    EncodedUvg {
        nodes: g
            .items
            .iter()
            .map(|n| NodeFeat {
                item: vocabs.item.get(&n.event.item_id),
                category: vocabs.category.get(&n.event.category_id),
                brand: vocabs.brand.get(&n.event.brand_id),
                shop: vocabs.shop.get(&n.event.shop_id),
                zone: n.zone,
                timestamp: n.event.timestamp,
            })
            .collect(),
        edges: g.edges.iter().map(|e| (e.src, e.dst)).collect(),
    }
}
