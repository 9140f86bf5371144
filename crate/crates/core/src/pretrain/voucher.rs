//! Voucher pre-training: the graph encoder learns to predict redemption
//! from historical-mode graphs through the UVG score alone.

use rand::seq::SliceRandom;

use super::checkpoint::Checkpoint;
use super::sgns::ItemEmbeddings;
use crate::config::KvConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::encoder::{EncoderConfig, UvgEncoder, UvgInput, TARGET_VOUCHER_TABLE};
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore};
use crate::{rng_for, Rng};

pub const CHECKPOINT_KIND: &str = "vouchers";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoucherPretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for VoucherPretrainConfig {
    fn default() -> Self {
        VoucherPretrainConfig {
            epochs: 5,
            batch_size: 256,
            lr: 0.001,
            seed: 1,
        }
    }
}

impl VoucherPretrainConfig {
    pub const KEYS: [&'static str; 4] = ["epochs", "batch_size", "lr", "seed"];

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = VoucherPretrainConfig::default();
        let cfg = VoucherPretrainConfig {
            epochs: kv.get_or("epochs", d.epochs)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            lr: kv.get_or("lr", d.lr)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.lr);
        kv.set("seed", self.seed);
    }
}

/// Trained encoder plus the per-epoch mean training loss.
#[derive(Clone, Debug)]
pub struct VoucherPretrain {
    pub store: ParamStore,
    pub encoder: UvgEncoder,
    /// Loss of the untrained encoder over the training sessions.
    pub initial_loss: f64,
    pub epoch_loss: Vec<f64>,
}

impl VoucherPretrain {
    pub fn checkpoint(&self, ds: &Dataset) -> Checkpoint {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        ck.insert_store(&self.store, "");
        ck.vocabs = Some(ds.vocabs.clone());
        let mut kv = KvConfig::new();
        self.encoder.config.write_kv(&mut kv);
        for (k, v) in kv.iter() {
            ck.set_config(k, v);
        }
        ck
    }
}

/// Reads the encoder settings stored by [`VoucherPretrain::checkpoint`].
pub fn encoder_config_of(ck: &Checkpoint) -> Result<EncoderConfig> {
    let mut kv = KvConfig::new();
    for (k, v) in &ck.config {
        if EncoderConfig::KEYS.contains(&k.as_str()) {
            kv.set(k, v);
        }
    }
    EncoderConfig::from_kv(&kv)
}

/// Installs pre-trained item tables into an encoder's store.
pub fn install_items(store: &mut ParamStore, encoder: &UvgEncoder, items: &ItemEmbeddings) -> Result<()> {
    for (id, t) in encoder.items.iter().zip(&items.items) {
        store.assign(*id, t.clone())?;
    }
    for (id, t) in encoder.side.iter().zip(&items.side) {
        store.assign(*id, t.clone())?;
    }
    Ok(())
}

fn hist_inputs<'a>(ds: &'a Dataset, sessions: &[usize]) -> Vec<UvgInput<'a>> {
    sessions
        .iter()
        .map(|&i| UvgInput {
            uvg: &ds.hist_uvgs[i],
            voucher: ds.vouchers[i],
            target: false,
        })
        .collect()
}

/// Historical-mode encoding of `sessions`: score and `e_b` per session.
pub fn encode_sessions(
    encoder: &UvgEncoder,
    store: &ParamStore,
    ds: &Dataset,
    sessions: &[usize],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut scores = Vec::with_capacity(sessions.len());
    let mut e_b = Vec::with_capacity(sessions.len());
    for chunk in sessions.chunks(1024) {
        let mut g = Graph::new();
        let out = encoder.forward(&mut g, store, &hist_inputs(ds, chunk))?;
        scores.extend_from_slice(g.value(out.s).data());
        let eb = g.value(out.e_b);
        e_b.extend((0..eb.rows()).map(|r| eb.row_slice(r).to_vec()));
    }
    Ok((scores, e_b))
}

fn mean_loss(encoder: &UvgEncoder, store: &ParamStore, ds: &Dataset, sessions: &[usize]) -> Result<f64> {
    let (scores, _) = encode_sessions(encoder, store, ds, sessions)?;
    let total: f64 = scores
        .iter()
        .zip(sessions)
        .map(|(&s, &i)| crate::tensor::bce(s, ds.samples[i].label))
        .sum();
    Ok(total / sessions.len() as f64)
}

/// Trains the encoder on the historical graphs of the training split with
/// BCE between label and UVG score. Item tables stay frozen and the
/// target voucher table is never touched.
pub fn pretrain_vouchers(
    ds: &Dataset,
    items: Option<&ItemEmbeddings>,
    encoder_config: EncoderConfig,
    cfg: &VoucherPretrainConfig,
) -> Result<VoucherPretrain> {
    let sessions = ds.train_indices();
    if sessions.is_empty() {
        return Err(Error::Data("no training sessions for voucher pre-training".into()));
    }
    let positives = sessions.iter().filter(|&&i| ds.samples[i].label > 0.5).count();
    if positives == 0 || positives == sessions.len() {
        log::warn!("voucher pre-training data has a single class; separation is untestable");
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }

    let mut rng: Rng = rng_for(cfg.seed, 0x766f_7563);
    let mut store = ParamStore::new();
    let encoder = UvgEncoder::new(&mut store, &ds.vocabs, encoder_config, &mut rng)?;
    if let Some(items) = items {
        install_items(&mut store, &encoder, items)?;
    }
    for &id in encoder.items.iter().chain(&encoder.side) {
        store.set_trainable(id, false);
    }
    store.set_trainable(store.id(TARGET_VOUCHER_TABLE).expect("registered"), false);

    let initial_loss = mean_loss(&encoder, &store, ds, &sessions)?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut order = sessions.clone();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let out = encoder.forward(&mut g, &store, &hist_inputs(ds, chunk))?;
            let labels: Vec<f64> = chunk.iter().map(|&i| ds.samples[i].label).collect();
            let loss = g.bce_logits_mean(out.logit, &labels)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "voucher pre-training loss {value} in epoch {epoch}"
                )));
            }
            total += value * chunk.len() as f64;
            let grads = g.backward(loss)?;
            adam.step(&mut store, &grads)?;
        }
        let mean = total / order.len() as f64;
        log::info!("voucher pre-training epoch {epoch}: loss {mean:.5}");
        epoch_loss.push(mean);
    }
    store.set_trainable_prefix("", true);
    Ok(VoucherPretrain {
        store,
        encoder,
        initial_loss,
        epoch_loss,
    })
}
