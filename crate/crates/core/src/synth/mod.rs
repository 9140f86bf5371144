//! Planted-signal data generator.
//!
//! Every user has latent traits (budget, redemption propensity, preferred
//! activity, bargain hunting) and every session a latent shopping intent.
//! The redemption logit is a weighted sum of signals, each visible to a
//! different family of models:
//!
//! * `w_fit`, `w_discount`: profile and voucher features (all models);
//!   the budget fit is nonlinear, so LR cannot fully use it.
//! * `w_history`: propensity and activity preference, visible only through
//!   the user's earlier redeemed vouchers.
//! * `w_affinity`: intent, visible only as "hot" items in the target
//!   session's pre-collection add-to-cart list.
//! * `w_multi`: bargain hunting, visible only in the post-collection
//!   add-to-cart lists of earlier redeemed sessions.
//!
//! Hot and bargain items also show up as decoys under the other action type
//! (`decoy_prob`), so only models that keep action types apart can read
//! the two signals cleanly.
//!
//! Post-collection behavior follows the observed label: redeemed sessions
//! get `post_boost` times more events, drawn partly from a "basket"
//! category.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::data::ingest::{
    RawData, SessionRow, EVENTS_FILE, EVENT_COLUMNS, PROFILES_FILE, PROFILE_COLUMNS, SESSIONS_FILE, SESSION_COLUMNS,
    VOUCHERS_FILE, VOUCHER_COLUMNS,
};
use crate::data::{session_key, Action, DatasetConfig, Event, Id, SessionConfig, UserProfile, VoucherInfo};
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::rng_for;
use crate::tensor::sigmoid;

pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const MANIFEST_FILE: &str = "gen_manifest.json";

/// Category reserved for items bought with a redeemed voucher.
const BASKET_CATEGORY: usize = 0;
/// Category of items bargain hunters add to cart after collecting.
const BARGAIN_CATEGORY: usize = 1;
/// Category signalling shopping intent before collection.
const HOT_CATEGORY: usize = 2;
const RESERVED_CATEGORIES: usize = 3;

const MIN_SPEND_BUCKETS: [f64; 5] = [30.0, 50.0, 80.0, 120.0, 200.0];
const DISCOUNT_FRACTIONS: [f64; 5] = [0.05, 0.1, 0.15, 0.2, 0.3];
const PURCHASE_THRESHOLDS: [f64; 3] = [60.0, 90.0, 135.0];
const START_TS: i64 = 1_600_000_000;
const LOGIT_OFFSET_BOUND: f64 = 15.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub users: usize,
    pub sessions_per_user: usize,
    pub items: usize,
    pub categories: usize,
    pub brands: usize,
    pub shops: usize,
    pub vouchers: usize,
    pub activities: usize,
    /// Mean pre-collection add-to-cart and order counts per session.
    pub atc_rate: f64,
    pub ord_rate: f64,
    /// Relative extra post-collection volume of redeemed sessions.
    pub post_boost: f64,
    /// Share of a redeemed session's post-collection items from the basket category.
    pub basket_prob: f64,
    /// Share of a bargain hunter's post-collection add-to-cart items from the bargain category.
    pub bargain_prob: f64,
    /// Share of hot items in the pre-collection add-to-cart list of an intent session.
    pub hot_prob: f64,
    /// Share of hot items among every session's pre-collection orders and of
    /// bargain items among every post-collection order, independent of any trait.
    pub decoy_prob: f64,
    pub w_affinity: f64,
    pub w_fit: f64,
    pub w_discount: f64,
    pub w_history: f64,
    pub w_multi: f64,
    /// Probability of flipping a label, in `[0, 0.5)`.
    pub noise: f64,
    /// Target share of positive labels.
    pub base_rate: f64,
    /// Seconds between consecutive sessions of a user.
    pub session_gap: i64,
    /// Seconds of pre-collection behavior per session.
    pub pre_window: i64,
    /// Seconds until an unredeemed voucher expires.
    pub post_window: i64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 7,
            users: 5000,
            sessions_per_user: 10,
            items: 3000,
            categories: 12,
            brands: 60,
            shops: 120,
            vouchers: 40,
            activities: 5,
            atc_rate: 4.0,
            ord_rate: 1.5,
            post_boost: 0.3,
            basket_prob: 0.2,
            bargain_prob: 0.5,
            hot_prob: 0.5,
            decoy_prob: 0.5,
            w_affinity: 1.0,
            w_fit: 1.0,
            w_discount: 0.5,
            w_history: 1.0,
            w_multi: 1.0,
            noise: 0.05,
            base_rate: 0.2,
            session_gap: 10 * 86_400,
            pre_window: 2 * 86_400,
            post_window: 3 * 86_400,
        }
    }
}

macro_rules! gen_fields {
    ($m:ident) => {
        $m!(
            seed,
            users,
            sessions_per_user,
            items,
            categories,
            brands,
            shops,
            vouchers,
            activities,
            atc_rate,
            ord_rate,
            post_boost,
            basket_prob,
            bargain_prob,
            hot_prob,
            decoy_prob,
            w_affinity,
            w_fit,
            w_discount,
            w_history,
            w_multi,
            noise,
            base_rate,
            session_gap,
            pre_window,
            post_window
        )
    };
}

impl GenConfig {
    pub fn keys() -> Vec<&'static str> {
        macro_rules! names {
            ($($f:ident),*) => { vec![$(stringify!($f)),*] };
        }
        gen_fields!(names)
    }

    /// Reads a config; absent keys keep their defaults, unknown keys fail.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        kv.reject_unknown(&Self::keys())?;
        let d = GenConfig::default();
        macro_rules! read {
            ($($f:ident),*) => { GenConfig { $($f: kv.get_or(stringify!($f), d.$f)?),* } };
        }
        let cfg = gen_fields!(read);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        macro_rules! write {
            ($($f:ident),*) => { $(kv.set(stringify!($f), &self.$f);)* };
        }
        gen_fields!(write);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..0.5).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 0.5)", self.noise));
        }
        if !(self.base_rate > 0.0 && self.base_rate < 1.0) {
            return bad(format!("base_rate {} outside (0, 1)", self.base_rate));
        }
        let weights = [
            self.w_affinity,
            self.w_fit,
            self.w_discount,
            self.w_history,
            self.w_multi,
            self.atc_rate,
            self.ord_rate,
            self.post_boost,
        ];
        if weights.iter().any(|w| !w.is_finite()) {
            return bad("weights and rates must be finite".into());
        }
        if self.atc_rate < 0.0 || self.ord_rate < 0.0 || self.post_boost < 0.0 {
            return bad("rates and post_boost must be nonnegative".into());
        }
        for (name, p) in [
            ("basket_prob", self.basket_prob),
            ("bargain_prob", self.bargain_prob),
            ("hot_prob", self.hot_prob),
            ("decoy_prob", self.decoy_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if self.users == 0 || self.sessions_per_user == 0 || self.vouchers == 0 || self.activities == 0 {
            return bad("users, sessions_per_user, vouchers and activities must be positive".into());
        }
        if self.categories <= RESERVED_CATEGORIES || self.items < self.categories {
            return bad(format!(
                "need more than {RESERVED_CATEGORIES} categories and at least one item per category"
            ));
        }
        if self.brands == 0 || self.shops == 0 {
            return bad("brands and shops must be positive".into());
        }
        if self.pre_window <= 0 || self.post_window <= 0 || self.session_gap <= self.pre_window + self.post_window {
            return bad("session_gap must exceed pre_window + post_window, both positive".into());
        }
        Ok(())
    }

    /// Dataset settings matching the generated timeline: pre-collection
    /// lists only look back over the session's own window.
    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            session: SessionConfig {
                pre_window: Some(self.pre_window),
                ..SessionConfig::default()
            },
            ..DatasetConfig::default()
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenManifest {
    pub config: BTreeMap<String, String>,
    /// Logit offset found to hit `base_rate`.
    pub logit_offset: f64,
    pub sessions: usize,
    pub events: usize,
    pub label_rate: f64,
    /// AUC of the true probabilities against the sampled labels.
    pub bayes_auc: f64,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub raw: RawData,
    /// `(session_key, true_prob)` in session order.
    pub truth: Vec<(String, f64)>,
    pub manifest: GenManifest,
}

struct UserLatent {
    budget: f64,
    propensity: f64,
    activity: usize,
    bargain: bool,
    favorites: [usize; 2],
}

struct SessionLatent {
    voucher: usize,
    intent: bool,
    logit: f64,
}

struct Catalogue {
    items_by_category: Vec<Vec<usize>>,
    category: Vec<usize>,
    brand: Vec<usize>,
    shop: Vec<usize>,
    price: Vec<i64>,
    vouchers: Vec<VoucherInfo>,
    voucher_activity: Vec<usize>,
}

/// Rounds to cents.
fn cents(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn poisson<R: rand::Rng>(rng: &mut R, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).expect("positive rate").sample(rng) as usize
}

fn budget_fit(budget: f64, min_spend: f64) -> f64 {
    let r = (budget / min_spend).ln();
    2.0 * (-(r * r) / (2.0 * 0.35 * 0.35)).exp() - 1.0
}

impl Catalogue {
    fn new(cfg: &GenConfig) -> Self {
        let mut rng = rng_for(cfg.seed, 0);
        let category: Vec<usize> = (0..cfg.items).map(|i| i % cfg.categories).collect();
        let mut items_by_category = vec![Vec::new(); cfg.categories];
        for (i, &c) in category.iter().enumerate() {
            items_by_category[c].push(i);
        }
        let brand = (0..cfg.items).map(|_| rng.random_range(0..cfg.brands)).collect();
        let shop = (0..cfg.items).map(|_| rng.random_range(0..cfg.shops)).collect();
        let price = (0..cfg.items).map(|_| rng.random_range(0..5)).collect();
        let mut vouchers = Vec::with_capacity(cfg.vouchers);
        let mut voucher_activity = Vec::with_capacity(cfg.vouchers);
        for j in 0..cfg.vouchers {
            let activity = j % cfg.activities;
            let min_spend = MIN_SPEND_BUCKETS[(j / cfg.activities + j) % MIN_SPEND_BUCKETS.len()];
            let frac = DISCOUNT_FRACTIONS[rng.random_range(0..DISCOUNT_FRACTIONS.len())];
            vouchers.push(VoucherInfo {
                voucher_id: format!("v{j}").into(),
                activity_id: format!("act{activity}").into(),
                min_spend,
                discount_amount: cents(min_spend * frac).max(0.01),
            });
            voucher_activity.push(activity);
        }
        Catalogue {
            items_by_category,
            category,
            brand,
            shop,
            price,
            vouchers,
            voucher_activity,
        }
    }

    /// Item from a category, skewed towards its first items.
    fn pick<R: rand::Rng>(&self, rng: &mut R, category: usize) -> usize {
        let pool = &self.items_by_category[category];
        let u: f64 = rng.random();
        pool[((u * u) * pool.len() as f64) as usize % pool.len()]
    }

    fn regular<R: rand::Rng>(&self, rng: &mut R, user: &UserLatent) -> usize {
        let c = if rng.random::<f64>() < 0.7 {
            user.favorites[rng.random_range(0..2)]
        } else {
            rng.random_range(RESERVED_CATEGORIES..self.items_by_category.len())
        };
        self.pick(rng, c)
    }
}

/// Generates a dataset. Deterministic in `cfg` (each user draws from its
/// own RNG streams).
pub fn generate(cfg: &GenConfig) -> Result<Generated> {
    cfg.validate()?;
    let cat = Catalogue::new(cfg);
    let regular_categories = cfg.categories - RESERVED_CATEGORIES;

    let mut users = Vec::with_capacity(cfg.users);
    let mut latents: Vec<Vec<SessionLatent>> = Vec::with_capacity(cfg.users);
    let budget_dist = Normal::new(90f64.ln(), 0.6).expect("valid");
    let std_normal = Normal::new(0.0, 1.0).expect("valid");
    for u in 0..cfg.users {
        let mut rng = rng_for(cfg.seed, 2 * u as u64 + 1);
        let fav0 = RESERVED_CATEGORIES + rng.random_range(0..regular_categories);
        let fav1 = RESERVED_CATEGORIES + rng.random_range(0..regular_categories);
        let user = UserLatent {
            budget: budget_dist.sample(&mut rng).exp(),
            propensity: std_normal.sample(&mut rng),
            activity: rng.random_range(0..cfg.activities),
            bargain: rng.random::<bool>(),
            favorites: [fav0, fav1],
        };
        let sessions = (0..cfg.sessions_per_user)
            .map(|_| {
                let voucher = rng.random_range(0..cfg.vouchers);
                let intent = rng.random::<bool>();
                let v = &cat.vouchers[voucher];
                let matches = cat.voucher_activity[voucher] == user.activity;
                let history = user.propensity + 1.5 * (f64::from(u8::from(matches)) - 1.0 / cfg.activities as f64);
                let discount = (v.discount_amount / v.min_spend - 0.16) / 0.08;
                let logit = cfg.w_affinity * (if intent { 1.0 } else { -1.0 })
                    + cfg.w_fit * budget_fit(user.budget, v.min_spend)
                    + cfg.w_discount * discount
                    + cfg.w_history * history
                    + cfg.w_multi * (if user.bargain { 1.0 } else { -1.0 });
                SessionLatent { voucher, intent, logit }
            })
            .collect();
        users.push(user);
        latents.push(sessions);
    }

    let all: Vec<f64> = latents.iter().flatten().map(|s| s.logit).collect();
    let clean_rate = (cfg.base_rate - cfg.noise) / (1.0 - 2.0 * cfg.noise);
    let mean_prob = |b: f64| all.iter().map(|z| sigmoid(b + z)).sum::<f64>() / all.len() as f64;
    let (lo_rate, hi_rate) = (mean_prob(-LOGIT_OFFSET_BOUND), mean_prob(LOGIT_OFFSET_BOUND));
    if !(clean_rate > lo_rate && clean_rate < hi_rate) {
        let observed = |m: f64| cfg.noise + (1.0 - 2.0 * cfg.noise) * m;
        return Err(Error::Config(format!(
            "base_rate {} is unreachable; achievable range with these weights and noise is ({:.4}, {:.4})",
            cfg.base_rate,
            observed(lo_rate),
            observed(hi_rate)
        )));
    }
    let (mut lo, mut hi) = (-LOGIT_OFFSET_BOUND, LOGIT_OFFSET_BOUND);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean_prob(mid) < clean_rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let offset = 0.5 * (lo + hi);

    let mut raw = RawData {
        vouchers: cat.vouchers.clone(),
        ..RawData::default()
    };
    let mut truth = Vec::with_capacity(all.len());
    let mut labels = Vec::with_capacity(all.len());
    let text = |s: String| -> Id { s.into() };
    let item_ids: Vec<Id> = (0..cfg.items).map(|i| text(format!("i{i}"))).collect();
    let cat_ids: Vec<Id> = (0..cfg.categories).map(|c| text(format!("c{c}"))).collect();
    let brand_ids: Vec<Id> = (0..cfg.brands).map(|b| text(format!("b{b}"))).collect();
    let shop_ids: Vec<Id> = (0..cfg.shops).map(|s| text(format!("s{s}"))).collect();
    let noise_dist = Normal::new(0.0, 0.2).expect("valid");

    for (u, (user, sessions)) in users.iter().zip(&latents).enumerate() {
        let mut rng = rng_for(cfg.seed, 2 * u as u64 + 2);
        let user_id = text(format!("u{u:05}"));
        let order_count = 5 + poisson(&mut rng, 5.0);
        let purchase = PURCHASE_THRESHOLDS.iter().filter(|&&t| user.budget >= t).count();
        raw.profiles.push(UserProfile {
            user_id: user_id.clone(),
            age_level: text(format!("a{}", rng.random_range(0..6))),
            gender: text(format!("g{}", rng.random_range(0..2))),
            purchase_level: text(format!("p{purchase}")),
            order_count: order_count as f64,
            order_amount: cents(user.budget * order_count as f64 * f64::exp(noise_dist.sample(&mut rng))),
        });

        let mut user_events = Vec::new();
        for (k, s) in sessions.iter().enumerate() {
            let collect = START_TS + k as i64 * cfg.session_gap + rng.random_range(0..3600);
            let p = cfg.noise + (1.0 - 2.0 * cfg.noise) * sigmoid(offset + s.logit);
            let label = u8::from(rng.random::<f64>() < p);
            let mut push = |item: usize, action: Action, ts: i64| {
                user_events.push(Event {
                    user_id: user_id.clone(),
                    item_id: item_ids[item].clone(),
                    action,
                    timestamp: ts,
                    category_id: cat_ids[cat.category[item]].clone(),
                    brand_id: brand_ids[cat.brand[item]].clone(),
                    shop_id: shop_ids[cat.shop[item]].clone(),
                    price_level: cat.price[item],
                });
            };

            for _ in 0..poisson(&mut rng, cfg.atc_rate) {
                let item = if s.intent && rng.random::<f64>() < cfg.hot_prob {
                    cat.pick(&mut rng, HOT_CATEGORY)
                } else {
                    cat.regular(&mut rng, user)
                };
                let ts = collect - rng.random_range(1..=cfg.pre_window);
                push(item, Action::Atc, ts);
            }
            for _ in 0..poisson(&mut rng, cfg.ord_rate) {
                let item = if rng.random::<f64>() < cfg.decoy_prob {
                    cat.pick(&mut rng, HOT_CATEGORY)
                } else {
                    cat.regular(&mut rng, user)
                };
                let ts = collect - rng.random_range(1..=cfg.pre_window);
                push(item, Action::Ord, ts);
            }

            let scale = 1.0 + cfg.post_boost * f64::from(label);
            let mut last_post = collect;
            for action in Action::ALL {
                let rate = match action {
                    Action::Atc => cfg.atc_rate,
                    Action::Ord => cfg.ord_rate,
                };
                for _ in 0..poisson(&mut rng, rate * scale) {
                    let item = if label == 1 && rng.random::<f64>() < cfg.basket_prob {
                        cat.pick(&mut rng, BASKET_CATEGORY)
                    } else if (action == Action::Atc && user.bargain && rng.random::<f64>() < cfg.bargain_prob)
                        || (action == Action::Ord && rng.random::<f64>() < cfg.decoy_prob)
                    {
                        cat.pick(&mut rng, BARGAIN_CATEGORY)
                    } else {
                        cat.regular(&mut rng, user)
                    };
                    let ts = collect + rng.random_range(0..cfg.post_window);
                    last_post = last_post.max(ts);
                    push(item, action, ts);
                }
            }
            let end = if label == 1 {
                last_post
            } else {
                collect + cfg.post_window
            };

            let v = &cat.vouchers[s.voucher];
            truth.push((session_key(&user_id, &v.voucher_id, collect), p));
            labels.push(f64::from(label));
            raw.sessions.push(SessionRow {
                user_id: user_id.clone(),
                voucher_id: v.voucher_id.clone(),
                collect_ts: collect,
                end_ts: end,
                label,
            });
        }
        user_events.sort_by(|a, b| a.chrono_key().cmp(&b.chrono_key()));
        raw.events.extend(user_events);
    }

    let probs: Vec<f64> = truth.iter().map(|t| t.1).collect();
    let manifest = GenManifest {
        config: cfg
            .to_kv()
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
        logit_offset: offset,
        sessions: raw.sessions.len(),
        events: raw.events.len(),
        label_rate: labels.iter().sum::<f64>() / labels.len() as f64,
        bayes_auc: bayes_auc(&probs, &labels).unwrap_or(f64::NAN),
    };
    Ok(Generated { raw, truth, manifest })
}

/// AUC of the true probabilities: the ceiling for any model.
pub fn bayes_auc(true_probs: &[f64], labels: &[f64]) -> Result<f64> {
    auc(true_probs, labels)
}

impl Generated {
    /// Writes the four input tables, `ground_truth.csv`, `gen_manifest.json`
    /// and a `data.cfg` with matching dataset settings.
    pub fn write(&self, dir: &Path, dataset: &DatasetConfig) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut w = csv::Writer::from_path(dir.join(EVENTS_FILE))?;
        w.write_record(EVENT_COLUMNS)?;
        for e in &self.raw.events {
            w.write_record([
                &*e.user_id,
                &*e.item_id,
                e.action.as_str(),
                &e.timestamp.to_string(),
                &*e.category_id,
                &*e.brand_id,
                &*e.shop_id,
                &e.price_level.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(dir.join(EVENTS_FILE), e))?;

        let mut w = csv::Writer::from_path(dir.join(VOUCHERS_FILE))?;
        w.write_record(VOUCHER_COLUMNS)?;
        for v in &self.raw.vouchers {
            w.write_record([
                &*v.voucher_id,
                &*v.activity_id,
                &v.min_spend.to_string(),
                &v.discount_amount.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(dir.join(VOUCHERS_FILE), e))?;

        let mut w = csv::Writer::from_path(dir.join(SESSIONS_FILE))?;
        w.write_record(SESSION_COLUMNS)?;
        for s in &self.raw.sessions {
            w.write_record([
                &*s.user_id,
                &*s.voucher_id,
                &s.collect_ts.to_string(),
                &s.end_ts.to_string(),
                &s.label.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(dir.join(SESSIONS_FILE), e))?;

        let mut w = csv::Writer::from_path(dir.join(PROFILES_FILE))?;
        w.write_record(PROFILE_COLUMNS)?;
        for p in &self.raw.profiles {
            w.write_record([
                &*p.user_id,
                &*p.age_level,
                &*p.gender,
                &*p.purchase_level,
                &p.order_count.to_string(),
                &p.order_amount.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(dir.join(PROFILES_FILE), e))?;

        let mut w = csv::Writer::from_path(dir.join(GROUND_TRUTH_FILE))?;
        w.write_record(["session_key", "true_prob"])?;
        for (k, p) in &self.truth {
            w.write_record([k.as_str(), &p.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(dir.join(GROUND_TRUTH_FILE), e))?;

        let json = serde_json::to_string_pretty(&self.manifest)?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;

        let mut kv = KvConfig::new();
        dataset.write_kv(&mut kv);
        kv.save(dir.join(crate::data::dataset::DATA_CONFIG_FILE))
    }
}

/// Reads `ground_truth.csv` into a key → probability map.
pub fn read_ground_truth(dir: &Path) -> Result<BTreeMap<String, f64>> {
    let path = dir.join(GROUND_TRUTH_FILE);
    let mut r = csv::Reader::from_path(&path)?;
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let p: f64 = rec
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("{}: bad true_prob row {rec:?}", path.display())))?;
        out.insert(rec.get(0).unwrap_or_default().to_string(), p);
    }
    Ok(out)
}
