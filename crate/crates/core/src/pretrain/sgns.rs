//! Skip-gram with negative sampling over per-user chronological item
//! sequences, one corpus per action. An item is represented by the mean
//! of its id vector and its category, brand and shop vectors; the side
//! tables are shared between the two actions.

use rand::Rng as _;

use super::checkpoint::Checkpoint;
use crate::config::KvConfig;
use crate::data::{Action, Event, Vocabs};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tensor};
use crate::{rng_for, Rng};

/// Names of the side-information tables, in lookup order.
pub const SIDE_FIELDS: [&str; 3] = ["category", "brand", "shop"];

pub fn item_table_name(action: Action) -> String {
    format!("item_emb/{}", action.as_str())
}

pub fn side_table_name(field: &str) -> String {
    format!("side_emb/{field}")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgnsConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    /// Initial learning rate, decayed linearly to 1e-4 of itself.
    pub lr: f64,
    pub seed: u64,
}

impl Default for SgnsConfig {
    fn default() -> Self {
        SgnsConfig {
            dim: 16,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            seed: 1,
        }
    }
}

impl SgnsConfig {
    pub const KEYS: [&'static str; 6] = ["dim", "window", "negatives", "epochs", "lr", "seed"];

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = SgnsConfig::default();
        let dim: i64 = kv.get_or("dim", d.dim as i64)?;
        if dim <= 0 {
            return Err(Error::Config(format!("embedding dim {dim} must be positive")));
        }
        Ok(SgnsConfig {
            dim: dim as usize,
            window: kv.get_or("window", d.window)?,
            negatives: kv.get_or("negatives", d.negatives)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            lr: kv.get_or("lr", d.lr)?,
            seed: kv.get_or("seed", d.seed)?,
        })
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("dim", self.dim);
        kv.set("window", self.window);
        kv.set("negatives", self.negatives);
        kv.set("epochs", self.epochs);
        kv.set("lr", self.lr);
        kv.set("seed", self.seed);
    }
}

/// Input-side tables produced by pre-training.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemEmbeddings {
    pub dim: usize,
    /// `[atc, ord]`, each `[items, dim]`.
    pub items: [Tensor; 2],
    /// Category, brand and shop tables.
    pub side: [Tensor; 3],
}

impl ItemEmbeddings {
    /// Mean of the id vector and the three side vectors.
    pub fn vector(&self, action: Action, item: usize, side: [usize; 3]) -> Vec<f64> {
        let d = self.dim;
        let mut out = self.items[action.index()].row_slice(item).to_vec();
        for (t, &s) in self.side.iter().zip(&side) {
            for (o, v) in out.iter_mut().zip(t.row_slice(s)) {
                *o += v;
            }
        }
        for o in &mut out[..d] {
            *o *= 0.25;
        }
        out
    }

    pub fn write_to(&self, ck: &mut Checkpoint) {
        for a in Action::ALL {
            ck.insert(item_table_name(a), self.items[a.index()].clone());
        }
        for (f, t) in SIDE_FIELDS.iter().zip(&self.side) {
            ck.insert(side_table_name(f), t.clone());
        }
    }

    pub fn read_from(ck: &Checkpoint) -> Result<Self> {
        let items = [
            ck.get(&item_table_name(Action::Atc))?.clone(),
            ck.get(&item_table_name(Action::Ord))?.clone(),
        ];
        let side = [
            ck.get(&side_table_name(SIDE_FIELDS[0]))?.clone(),
            ck.get(&side_table_name(SIDE_FIELDS[1]))?.clone(),
            ck.get(&side_table_name(SIDE_FIELDS[2]))?.clone(),
        ];
        let dim = items[0].cols();
        if items.iter().chain(&side).any(|t| t.cols() != dim) {
            return Err(Error::shape("item_embeddings", "tables disagree on the embedding dim"));
        }
        Ok(ItemEmbeddings { dim, items, side })
    }
}

#[derive(Clone, Copy)]
struct Token {
    item: usize,
    side: [usize; 3],
}

/// Cumulative unigram^0.75 distribution for negative draws.
struct NegativeTable {
    items: Vec<usize>,
    cumulative: Vec<f64>,
}

impl NegativeTable {
    fn new(counts: &[usize]) -> Self {
        let mut items = Vec::new();
        let mut cumulative = Vec::new();
        let mut total = 0.0;
        for (i, &c) in counts.iter().enumerate() {
            if c > 0 {
                total += (c as f64).powf(0.75);
                items.push(i);
                cumulative.push(total);
            }
        }
        NegativeTable { items, cumulative }
    }

    fn draw(&self, rng: &mut Rng) -> usize {
        let total = *self.cumulative.last().expect("nonempty corpus");
        let u = rng.random::<f64>() * total;
        let k = self.cumulative.partition_point(|&c| c <= u).min(self.items.len() - 1);
        self.items[k]
    }
}

/// Trains the item and side tables on `events`.
pub fn train_item_embeddings(events: &[Event], vocabs: &Vocabs, cfg: &SgnsConfig) -> Result<ItemEmbeddings> {
    if cfg.dim == 0 {
        return Err(Error::Config("embedding dim must be positive".into()));
    }
    if events.is_empty() {
        return Err(Error::Data("no events to train item embeddings on".into()));
    }
    let d = cfg.dim;
    let mut rng = rng_for(cfg.seed, 0x5347_4e53);
    let init = |rng: &mut Rng, rows: usize| {
        let data = (0..rows * d).map(|_| (rng.random::<f64>() - 0.5) / d as f64).collect();
        Tensor::matrix(rows, d, data).expect("sized")
    };
    let mut items = [init(&mut rng, vocabs.item.len()), init(&mut rng, vocabs.item.len())];
    let mut side = [
        init(&mut rng, vocabs.category.len()),
        init(&mut rng, vocabs.brand.len()),
        init(&mut rng, vocabs.shop.len()),
    ];

    let mut sorted: Vec<&Event> = events.iter().collect();
    sorted.sort_by(|a, b| (&a.user_id, a.chrono_key()).cmp(&(&b.user_id, b.chrono_key())));

    for action in Action::ALL {
        let mut corpus: Vec<Vec<Token>> = Vec::new();
        let mut counts = vec![0usize; vocabs.item.len()];
        let mut current: Option<&str> = None;
        for e in sorted.iter().filter(|e| e.action == action) {
            if current != Some(&*e.user_id) {
                corpus.push(Vec::new());
                current = Some(&e.user_id);
            }
            let t = Token {
                item: vocabs.item.get(&e.item_id),
                side: [
                    vocabs.category.get(&e.category_id),
                    vocabs.brand.get(&e.brand_id),
                    vocabs.shop.get(&e.shop_id),
                ],
            };
            counts[t.item] += 1;
            corpus.last_mut().expect("pushed").push(t);
        }
        if corpus.is_empty() {
            continue;
        }
        let negatives = NegativeTable::new(&counts);
        let mut out = vec![0.0; vocabs.item.len() * d];
        let tokens: usize = corpus.iter().map(Vec::len).sum();
        let total_steps = (tokens * cfg.epochs).max(1) as f64;
        let mut step = 0usize;
        let mut h = vec![0.0; d];
        let mut grad_h = vec![0.0; d];
        let table = &mut items[action.index()];
        for _ in 0..cfg.epochs {
            for seq in &corpus {
                for (i, center) in seq.iter().enumerate() {
                    let lr = cfg.lr * (1.0 - step as f64 / total_steps).max(1e-4);
                    step += 1;
                    let lo = i.saturating_sub(cfg.window);
                    let hi = (i + cfg.window + 1).min(seq.len());
                    for (j, ctx) in seq.iter().enumerate().take(hi).skip(lo) {
                        if j == i {
                            continue;
                        }
                        h.copy_from_slice(table.row_slice(center.item));
                        for (t, &s) in side.iter().zip(&center.side) {
                            for (hv, v) in h.iter_mut().zip(t.row_slice(s)) {
                                *hv += v;
                            }
                        }
                        for hv in &mut h {
                            *hv *= 0.25;
                        }
                        grad_h.iter_mut().for_each(|g| *g = 0.0);
                        for k in 0..=cfg.negatives {
                            let (target, label) = if k == 0 {
                                (ctx.item, 1.0)
                            } else {
                                let n = negatives.draw(&mut rng);
                                if n == ctx.item {
                                    continue;
                                }
                                (n, 0.0)
                            };
                            let o = &mut out[target * d..(target + 1) * d];
                            let dot: f64 = h.iter().zip(o.iter()).map(|(a, b)| a * b).sum();
                            let g = (label - sigmoid(dot)) * lr;
                            for ((gh, ov), hv) in grad_h.iter_mut().zip(o.iter_mut()).zip(&h) {
                                *gh += g * *ov;
                                *ov += g * hv;
                            }
                        }
                        // h is the mean of four vectors
                        for (v, g) in table.data_mut()[center.item * d..(center.item + 1) * d]
                            .iter_mut()
                            .zip(&grad_h)
                        {
                            *v += 0.25 * g;
                        }
                        for (t, &s) in side.iter_mut().zip(&center.side) {
                            for (v, g) in t.data_mut()[s * d..(s + 1) * d].iter_mut().zip(&grad_h) {
                                *v += 0.25 * g;
                            }
                        }
                    }
                }
            }
        }
    }

    if items.iter().chain(&side).any(|t| !t.all_finite()) {
        return Err(Error::Numeric("item embedding training diverged".into()));
    }
    Ok(ItemEmbeddings { dim: d, items, side })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ingest::RawData;

    fn ev(user: &str, item: &str, ts: i64) -> Event {
        Event {
            user_id: user.into(),
            item_id: item.into(),
            action: Action::Atc,
            timestamp: ts,
            category_id: format!("c_{item}").into(),
            brand_id: format!("b_{item}").into(),
            shop_id: format!("s_{item}").into(),
            price_level: 0,
        }
    }

    fn vocabs(events: &[Event]) -> Vocabs {
        Vocabs::build(&RawData {
            events: events.to_vec(),
            ..RawData::default()
        })
    }

    #[test]
    fn single_item_corpus() {
        let events = vec![ev("u", "a", 1)];
        let emb = train_item_embeddings(&events, &vocabs(&events), &SgnsConfig::default()).unwrap();
        let v = vocabs(&events);
        let x = emb.vector(Action::Atc, v.item.get("a"), [1, 1, 1]);
        assert!(x.iter().all(|f| f.is_finite()));
        assert!(x.iter().map(|f| f * f).sum::<f64>() > 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        let events = vec![ev("u", "a", 1)];
        let cfg = SgnsConfig {
            dim: 0,
            ..SgnsConfig::default()
        };
        assert!(train_item_embeddings(&events, &vocabs(&events), &cfg).is_err());
        assert!(train_item_embeddings(&[], &Vocabs::default(), &SgnsConfig::default()).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let events: Vec<Event> = (0..30)
            .map(|i| ev(&format!("u{}", i % 3), &format!("i{}", i % 7), i))
            .collect();
        let v = vocabs(&events);
        let a = train_item_embeddings(&events, &v, &SgnsConfig::default()).unwrap();
        let b = train_item_embeddings(&events, &v, &SgnsConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
