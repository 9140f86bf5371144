//! The full network: graph encoder over target and history graphs,
//! target attention over the history, pooled history scores and the
//! prediction head.

use std::collections::HashMap;
use std::rc::Rc;

use super::attention::{AttOuter, AttentionPairs, AttentionUnit};
use super::encoder::{embedding, EncoderConfig, UvgEncoder, UvgInput, TARGET_VOUCHER_TABLE};
use super::train::{Forward, Network};
use crate::config::{list, KvConfig};
use crate::data::{Dataset, Vocabs};
use crate::error::{Error, Result};
use crate::pretrain::Checkpoint;
use crate::tensor::{Graph, Mlp, ParamId, ParamStore, Tensor};
use crate::Rng;

pub const FAMILY: &str = "dmbgn";

/// Where the encoder's parameters come from and which of them train.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Init {
    /// Everything random and trainable.
    Scratch,
    /// Mean of frozen pre-trained item vectors replaces the graph network.
    Avgpool,
    /// Pre-trained encoder loaded and frozen.
    Pretrained,
    /// Pre-trained encoder loaded, everything trainable.
    #[default]
    Finetune,
}

impl std::str::FromStr for Init {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "scratch" => Ok(Init::Scratch),
            "avgpool" => Ok(Init::Avgpool),
            "pretrained" => Ok(Init::Pretrained),
            "finetune" => Ok(Init::Finetune),
            other => Err(format!("unknown init {other:?}")),
        }
    }
}

impl std::fmt::Display for Init {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Init::Scratch => "scratch",
            Init::Avgpool => "avgpool",
            Init::Pretrained => "pretrained",
            Init::Finetune => "finetune",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DmbgnConfig {
    pub encoder: EncoderConfig,
    pub alpha: f64,
    pub att_hidden: usize,
    pub att_outer: AttOuter,
    pub att_softmax: bool,
    pub head_hidden: Vec<usize>,
    pub dropout: f64,
    pub profile_dim: usize,
    pub init: Init,
    pub load_gnn: bool,
    pub load_mlp: bool,
}

impl Default for DmbgnConfig {
    fn default() -> Self {
        DmbgnConfig {
            encoder: EncoderConfig::default(),
            alpha: 1.0,
            att_hidden: 64,
            att_outer: AttOuter::Elementwise,
            att_softmax: false,
            head_hidden: vec![128, 64],
            dropout: 0.5,
            profile_dim: 16,
            init: Init::Finetune,
            load_gnn: true,
            load_mlp: true,
        }
    }
}

impl DmbgnConfig {
    pub const KEYS: [&'static str; 10] = [
        "alpha",
        "att_hidden",
        "att_outer",
        "att_softmax",
        "head_hidden",
        "dropout",
        "profile_dim",
        "init",
        "load_gnn",
        "load_mlp",
    ];

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = DmbgnConfig::default();
        let mut cfg = DmbgnConfig {
            encoder: EncoderConfig::from_kv(kv)?,
            alpha: kv.get_or("alpha", d.alpha)?,
            att_hidden: kv.get_or("att_hidden", d.att_hidden)?,
            att_outer: kv.get_or("att_outer", d.att_outer)?,
            att_softmax: kv.get_or("att_softmax", d.att_softmax)?,
            head_hidden: kv.get_list_or("head_hidden", d.head_hidden)?,
            dropout: kv.get_or("dropout", d.dropout)?,
            profile_dim: kv.get_or("profile_dim", d.profile_dim)?,
            init: kv.get_or("init", d.init)?,
            load_gnn: kv.get_or("load_gnn", d.load_gnn)?,
            load_mlp: kv.get_or("load_mlp", d.load_mlp)?,
        };
        if cfg.alpha.is_nan() || cfg.alpha < 0.0 {
            return Err(Error::Config(format!("alpha {} must be >= 0", cfg.alpha)));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", cfg.dropout)));
        }
        if cfg.init == Init::Avgpool {
            cfg.encoder.avgpool = true;
        }
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        self.encoder.write_kv(kv);
        kv.set("alpha", self.alpha);
        kv.set("att_hidden", self.att_hidden);
        kv.set("att_outer", self.att_outer);
        kv.set("att_softmax", self.att_softmax);
        kv.set("head_hidden", list(&self.head_hidden));
        kv.set("dropout", self.dropout);
        kv.set("profile_dim", self.profile_dim);
        kv.set("init", self.init);
        kv.set("load_gnn", self.load_gnn);
        kv.set("load_mlp", self.load_mlp);
    }
}

#[derive(Clone, Debug)]
pub struct Dmbgn {
    pub config: DmbgnConfig,
    pub r: usize,
    pub store: ParamStore,
    pub encoder: UvgEncoder,
    pub attention: AttentionUnit,
    /// Age, gender and purchase-level tables.
    pub profile: [ParamId; 3],
    pub head: Mlp,
}

/// Width of the dense block: two profile and two voucher scalars.
const DENSE: usize = 4;
/// Pooled history scores: mean, max and normalized length.
const POOLED: usize = 3;

impl Dmbgn {
    /// Fresh random parameters. `r` is the history length cap.
    pub fn new(vocabs: &Vocabs, mut config: DmbgnConfig, r: usize, rng: &mut Rng) -> Result<Self> {
        if r == 0 {
            return Err(Error::Config("history cap R must be >= 1".into()));
        }
        if config.init == Init::Avgpool {
            config.encoder.avgpool = true;
        }
        let mut store = ParamStore::new();
        let encoder = UvgEncoder::new(&mut store, vocabs, config.encoder.clone(), rng)?;
        let e = encoder.embedding_dim();
        let attention = AttentionUnit::new(
            &mut store,
            "attention",
            e,
            config.att_hidden,
            config.att_outer,
            config.att_softmax,
            rng,
        );
        let p = config.profile_dim;
        let profile = [
            embedding(&mut store, "profile_emb/age", vocabs.age.len(), p, rng),
            embedding(&mut store, "profile_emb/gender", vocabs.gender.len(), p, rng),
            embedding(&mut store, "profile_emb/purchase", vocabs.purchase.len(), p, rng),
        ];
        let mut dims = vec![3 * p + DENSE + 2 * e + POOLED];
        dims.extend(&config.head_hidden);
        dims.push(1);
        let head = Mlp::new(&mut store, "head", &dims, rng);
        Ok(Dmbgn {
            config,
            r,
            store,
            encoder,
            attention,
            profile,
            head,
        })
    }

    /// Applies the configured init mode from a pre-training checkpoint.
    /// The target voucher table is never loaded.
    pub fn init_from(&mut self, ck: Option<&Checkpoint>) -> Result<Vec<String>> {
        let init = self.config.init;
        if init == Init::Scratch {
            return Ok(Vec::new());
        }
        let ck = ck.ok_or_else(|| Error::Config(format!("init {init} needs a pre-training checkpoint")))?;
        let has_vouchers = ck.tensors.contains_key(super::encoder::VOUCHER_TABLE);
        if !has_vouchers && init != Init::Avgpool {
            return Err(Error::Config(format!(
                "init {init} needs a voucher pre-training checkpoint, got kind {:?}",
                ck.kind
            )));
        }
        let (load_gnn, load_mlp) = (self.config.load_gnn, self.config.load_mlp);
        let wanted = |name: &str| -> bool {
            if name == TARGET_VOUCHER_TABLE {
                return false;
            }
            if UvgEncoder::is_item_param(name) {
                return true;
            }
            if UvgEncoder::is_voucher_param(name) {
                return has_vouchers;
            }
            if init == Init::Avgpool {
                return false;
            }
            (UvgEncoder::is_gnn_param(name) && load_gnn) || (UvgEncoder::is_mlp_param(name) && load_mlp)
        };
        let loaded = ck.load_into(&mut self.store, "", wanted)?;
        for name in &loaded {
            let freeze = match init {
                Init::Avgpool | Init::Finetune => UvgEncoder::is_item_param(name),
                Init::Pretrained => UvgEncoder::is_item_param(name) || UvgEncoder::is_gnn_param(name),
                Init::Scratch => false,
            };
            if freeze {
                let id = self.store.id(name).expect("loaded from store");
                self.store.set_trainable(id, false);
            }
        }
        Ok(loaded)
    }
}

impl Network for Dmbgn {
    fn family(&self) -> &'static str {
        FAMILY
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, g: &mut Graph, ds: &Dataset, batch: &[usize], training: bool, rng: &mut Rng) -> Result<Forward> {
        let n = batch.len();
        let store = &self.store;
        let mut inputs: Vec<UvgInput> = batch
            .iter()
            .map(|&i| {
                let s = ds.samples[i].session;
                UvgInput {
                    uvg: &ds.target_uvgs[s],
                    voucher: ds.vouchers[s],
                    target: true,
                }
            })
            .collect();

        let with_hist = batch.iter().filter(|&&i| !ds.samples[i].history.is_empty()).count();
        let mut slot: HashMap<usize, usize> = HashMap::new();
        let (mut p_hist, mut p_sample, mut aux_w) = (Vec::new(), Vec::new(), Vec::new());
        let mut len_feat = Vec::with_capacity(n);
        for (k, &i) in batch.iter().enumerate() {
            let hist = &ds.samples[i].history;
            if hist.len() > self.r {
                return Err(Error::Invalid(format!(
                    "history of {} exceeds R = {}",
                    hist.len(),
                    self.r
                )));
            }
            len_feat.push(hist.len() as f64 / self.r as f64);
            for &j in hist {
                let row = *slot.entry(j).or_insert_with(|| {
                    inputs.push(UvgInput {
                        uvg: &ds.hist_uvgs[j],
                        voucher: ds.vouchers[j],
                        target: false,
                    });
                    inputs.len() - 1
                });
                p_hist.push(row);
                p_sample.push(k);
                aux_w.push(1.0 / (with_hist * hist.len()) as f64);
            }
        }

        let out = self.encoder.forward(g, store, &inputs)?;
        let p_sample: Rc<[usize]> = p_sample.into();
        let p_hist: Rc<[usize]> = p_hist.into();
        let pairs = AttentionPairs {
            history: p_hist.clone(),
            target: p_sample.clone(),
            sample: p_sample.clone(),
            samples: n,
        };
        let (h_t, _) = self.attention.forward(g, store, out.e, out.e, &pairs)?;
        let e_t = g.gather_rows(out.e, (0..n).collect())?;

        let (s_pairs, s_mean, s_max) = if p_hist.is_empty() {
            let z = g.constant(Tensor::zeros(&[n, 1]));
            (None, z, z)
        } else {
            let s = g.gather_rows(out.s, p_hist.clone())?;
            let z = g.gather_rows(out.logit, p_hist.clone())?;
            let mean = g.segment_mean(s, p_sample.clone(), n)?;
            let max = g.segment_max(s, p_sample.clone(), n)?;
            (Some((s, z)), mean, max)
        };
        let len_feat = g.constant(Tensor::column(len_feat));

        let mut parts = Vec::with_capacity(10);
        for (t, &table) in self.profile.iter().enumerate() {
            let idx: Rc<[usize]> = batch
                .iter()
                .map(|&i| {
                    let p = &ds.profiles[ds.samples[i].user];
                    [p.age, p.gender, p.purchase][t]
                })
                .collect();
            let tv = g.param(store, table);
            parts.push(g.gather_rows(tv, idx)?);
        }
        let dense: Vec<f64> = batch
            .iter()
            .flat_map(|&i| {
                let s = &ds.samples[i];
                let p = ds.profiles[s.user].dense;
                let v = ds.vouchers[s.session].dense;
                [p[0], p[1], v[0], v[1]]
            })
            .collect();
        parts.push(g.constant(Tensor::matrix(n, DENSE, dense)?));
        parts.extend([e_t, h_t, s_mean, s_max, len_feat]);
        let x = g.concat_cols(&parts)?;
        let logit = self.head.forward(g, store, x, self.config.dropout, training, rng)?;
        let pred = g.sigmoid(logit)?;

        let aux_loss = match s_pairs {
            Some((_, z)) if self.config.alpha > 0.0 => {
                let ones: Rc<[f64]> = vec![1.0; aux_w.len()].into();
                let l = g.bce_logits(z, ones, aux_w.into())?;
                Some(g.scale(l, self.config.alpha)?)
            }
            _ => None,
        };
        Ok(Forward {
            pred,
            logit,
            aux_loss,
            hist_scores: s_pairs.map(|(s, _)| s),
        })
    }
}
