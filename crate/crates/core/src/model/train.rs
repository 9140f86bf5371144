//! Mini-batch training shared by every model.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{auc, logloss};
use crate::tensor::{Adam, AdamConfig, Graph, ParamKind, ParamStore, Var};
use crate::{rng_for, Rng};

/// Outputs of one forward pass over a batch.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Predicted probabilities, `[N, 1]`.
    pub pred: Var,
    /// `pred` before the sigmoid; the loss is computed from it.
    pub logit: Var,
    /// Extra loss term added to the mean BCE.
    pub aux_loss: Option<Var>,
    /// Scores of the history graphs, one per (sample, history) pair.
    pub hist_scores: Option<Var>,
}

pub trait Network {
    /// Checkpoint section and model family name.
    fn family(&self) -> &'static str;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// `batch` holds sample indices of `ds`.
    fn forward(&self, g: &mut Graph, ds: &Dataset, batch: &[usize], training: bool, rng: &mut Rng) -> Result<Forward>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 512,
            lr: 0.003,
            l2: 0.1,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 5] = ["epochs", "batch_size", "lr", "l2", "seed"];

    /// Defaults for a model family. The four-weight logistic regression
    /// needs a much larger step to converge in the same number of epochs.
    pub fn defaults_for(family: &str) -> Self {
        match family {
            "lr" => TrainConfig {
                lr: 0.05,
                ..TrainConfig::default()
            },
            _ => TrainConfig::default(),
        }
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        Self::from_kv_with(kv, TrainConfig::default())
    }

    /// Like [`TrainConfig::from_kv`] with `d` supplying absent keys.
    pub fn from_kv_with(kv: &KvConfig, d: TrainConfig) -> Result<Self> {
        let cfg = TrainConfig {
            epochs: kv.get_or("epochs", d.epochs)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            lr: kv.get_or("lr", d.lr)?,
            l2: kv.get_or("l2", d.l2)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(cfg.lr >= 0.0 && cfg.l2 >= 0.0) {
            return Err(Error::Config("lr and l2 must be nonnegative".into()));
        }
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.lr);
        kv.set("l2", self.l2);
        kv.set("seed", self.seed);
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    /// `None` when the split holds a single class.
    pub auc: Option<f64>,
    pub logloss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hist_score: Option<f64>,
}

/// Groups whole users into batches of at least `batch_size` samples
/// (except the last). Users are shuffled when `rng` is given.
pub fn user_batches(ds: &Dataset, indices: &[usize], batch_size: usize, rng: Option<&mut Rng>) -> Vec<Vec<usize>> {
    let mut by_user: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        by_user.entry(ds.samples[i].user).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = by_user.into_values().collect();
    if let Some(rng) = rng {
        groups.shuffle(rng);
    }
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    for grp in groups {
        cur.extend(grp);
        if cur.len() >= batch_size {
            batches.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

/// Predicted probabilities for `indices`, in the same order.
pub fn predict(net: &dyn Network, ds: &Dataset, indices: &[usize]) -> Result<Vec<f64>> {
    let mut out = vec![f64::NAN; ds.len()];
    let mut rng = rng_for(0, 0);
    for batch in user_batches(ds, indices, 1024, None) {
        let mut g = Graph::new();
        let f = net.forward(&mut g, ds, &batch, false, &mut rng)?;
        for (&i, &p) in batch.iter().zip(g.value(f.pred).data()) {
            out[i] = p;
        }
    }
    let scores: Vec<f64> = indices.iter().map(|&i| out[i]).collect();
    if scores.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numeric("non-finite prediction".into()));
    }
    Ok(scores)
}

fn split_metrics(ds: &Dataset, indices: &[usize], scores: &[f64]) -> Result<(Option<f64>, f64)> {
    let labels: Vec<f64> = indices.iter().map(|&i| ds.samples[i].label).collect();
    let a = auc(scores, &labels).ok();
    Ok((a, logloss(scores, &labels)?))
}

/// `coef / n_train * Σ ||W||²` over the trainable weight matrices the
/// graph has read.
pub fn l2_term(g: &mut Graph, store: &ParamStore, coef: f64, n_train: usize) -> Result<Option<Var>> {
    if coef == 0.0 {
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for id in g.param_ids() {
        if store.kind(id) != ParamKind::Weight || !store.is_trainable(id) {
            continue;
        }
        let v = g.param(store, id);
        let sq = g.sum_squares(v)?;
        total = Some(match total {
            Some(t) => g.add(t, sq)?,
            None => sq,
        });
    }
    match total {
        Some(t) => Ok(Some(g.scale(t, coef / n_train as f64)?)),
        None => Ok(None),
    }
}

/// Full objective of a batch: mean BCE, auxiliary term and L2.
pub fn batch_loss(
    g: &mut Graph,
    net: &dyn Network,
    ds: &Dataset,
    batch: &[usize],
    f: &Forward,
    l2: f64,
    n_train: usize,
) -> Result<Var> {
    let labels: Vec<f64> = batch.iter().map(|&i| ds.samples[i].label).collect();
    let mut loss = g.bce_logits_mean(f.logit, &labels)?;
    if let Some(aux) = f.aux_loss {
        loss = g.add(loss, aux)?;
    }
    if let Some(reg) = l2_term(g, net.store(), l2, n_train)? {
        loss = g.add(loss, reg)?;
    }
    Ok(loss)
}

/// Trains on the training split with Adam; logs a `train` and a `test`
/// line per epoch. The model after the last epoch is kept.
pub fn train(net: &mut dyn Network, ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    let train_idx = ds.train_indices();
    let test_idx = ds.test_indices();
    if train_idx.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let mut order_rng = rng_for(cfg.seed, 2);
    let mut dropout_rng = rng_for(cfg.seed, 3);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let batches = user_batches(ds, &train_idx, cfg.batch_size, Some(&mut order_rng));
        let mut total = 0.0;
        let mut seen = Vec::with_capacity(train_idx.len());
        let mut seen_scores = Vec::with_capacity(train_idx.len());
        let mut hist_sum = 0.0;
        let mut hist_n = 0usize;
        for batch in &batches {
            let mut g = Graph::new();
            let f = net.forward(&mut g, ds, batch, true, &mut dropout_rng)?;
            let loss = batch_loss(&mut g, net, ds, batch, &f, cfg.l2, train_idx.len())?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("training loss {value} in epoch {epoch}")));
            }
            total += value * batch.len() as f64;
            seen.extend_from_slice(batch);
            seen_scores.extend_from_slice(g.value(f.pred).data());
            if let Some(h) = f.hist_scores {
                hist_sum += g.value(h).data().iter().sum::<f64>();
                hist_n += g.value(h).len();
            }
            let grads = g.backward(loss)?;
            adam.step(net.store_mut(), &grads)?;
        }
        let (train_auc, train_ll) = split_metrics(ds, &seen, &seen_scores)?;
        let entry = EpochLog {
            epoch,
            split: "train".into(),
            loss: total / seen.len() as f64,
            auc: train_auc,
            logloss: train_ll,
            hist_score: (hist_n > 0).then(|| hist_sum / hist_n as f64),
        };
        log::info!(
            "{} epoch {epoch}: train loss {:.5} auc {}",
            net.family(),
            entry.loss,
            entry.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"))
        );
        log.push(entry);
        if !test_idx.is_empty() {
            let scores = predict(net, ds, &test_idx)?;
            let (a, ll) = split_metrics(ds, &test_idx, &scores)?;
            log.push(EpochLog {
                epoch,
                split: "test".into(),
                loss: ll,
                auc: a,
                logloss: ll,
                hist_score: None,
            });
        }
    }
    Ok(log)
}
