//! LR, DNN and DIN-style baselines on the same samples as the main model.

use std::rc::Rc;

use crate::config::{list, KvConfig};
use crate::data::{Dataset, Vocabs};
use crate::error::{Error, Result};
use crate::model::attention::{AttOuter, AttentionPairs, AttentionUnit};
use crate::model::encoder::embedding;
use crate::model::train::{Forward, Network};
use crate::tensor::{Graph, Linear, Mlp, ParamId, ParamStore, Tensor, Var};
use crate::Rng;

/// Sample index to a row of one sparse table.
type Lookup<'a> = Box<dyn Fn(usize) -> usize + 'a>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    Lr,
    Dnn,
    Din,
}

impl BaselineKind {
    pub fn family(self) -> &'static str {
        match self {
            BaselineKind::Lr => "lr",
            BaselineKind::Dnn => "dnn",
            BaselineKind::Din => "din",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lr" => Ok(BaselineKind::Lr),
            "dnn" => Ok(BaselineKind::Dnn),
            "din" => Ok(BaselineKind::Din),
            other => Err(format!("unknown baseline {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub emb_dim: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub att_hidden: usize,
    pub att_outer: AttOuter,
    pub att_softmax: bool,
    /// Drop every history list (DIN only); the attention path then sees nothing.
    pub mask_history: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            emb_dim: 16,
            hidden: vec![128, 64],
            dropout: 0.5,
            att_hidden: 64,
            att_outer: AttOuter::Elementwise,
            att_softmax: false,
            mask_history: false,
        }
    }
}

impl BaselineConfig {
    pub const KEYS: [&'static str; 7] = [
        "emb_dim",
        "hidden",
        "dropout",
        "att_hidden",
        "att_outer",
        "att_softmax",
        "mask_history",
    ];

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = BaselineConfig::default();
        let cfg = BaselineConfig {
            emb_dim: kv.get_or("emb_dim", d.emb_dim)?,
            hidden: kv.get_list_or("hidden", d.hidden)?,
            dropout: kv.get_or("dropout", d.dropout)?,
            att_hidden: kv.get_or("att_hidden", d.att_hidden)?,
            att_outer: kv.get_or("att_outer", d.att_outer)?,
            att_softmax: kv.get_or("att_softmax", d.att_softmax)?,
            mask_history: kv.get_or("mask_history", d.mask_history)?,
        };
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", cfg.dropout)));
        }
        if cfg.emb_dim == 0 {
            return Err(Error::Config("emb_dim must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("emb_dim", self.emb_dim);
        kv.set("hidden", list(&self.hidden));
        kv.set("dropout", self.dropout);
        kv.set("att_hidden", self.att_hidden);
        kv.set("att_outer", self.att_outer);
        kv.set("att_softmax", self.att_softmax);
        kv.set("mask_history", self.mask_history);
    }
}

/// Profile (order count, amount) and voucher (min spend, discount) scalars.
pub const DENSE: usize = 4;

#[derive(Clone, Debug)]
struct SparseTables {
    activity: ParamId,
    voucher: ParamId,
    age: ParamId,
    gender: ParamId,
    purchase: ParamId,
}

#[derive(Clone, Debug)]
struct DinParts {
    proj: Linear,
    attention: AttentionUnit,
}

#[derive(Clone, Debug)]
enum Body {
    Lr(Linear),
    Deep {
        tables: SparseTables,
        din: Option<DinParts>,
        head: Mlp,
    },
}

#[derive(Clone, Debug)]
pub struct Baseline {
    pub kind: BaselineKind,
    pub config: BaselineConfig,
    pub store: ParamStore,
    body: Body,
}

impl Baseline {
    pub fn new(kind: BaselineKind, vocabs: &Vocabs, config: BaselineConfig, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let d = config.emb_dim;
        let body = match kind {
            BaselineKind::Lr => Body::Lr(Linear::new(&mut store, "linear", DENSE, 1, rng)),
            BaselineKind::Dnn | BaselineKind::Din => {
                let tables = SparseTables {
                    activity: embedding(&mut store, "emb/activity", vocabs.activity.len(), d, rng),
                    voucher: embedding(&mut store, "emb/voucher", vocabs.voucher.len(), d, rng),
                    age: embedding(&mut store, "emb/age", vocabs.age.len(), d, rng),
                    gender: embedding(&mut store, "emb/gender", vocabs.gender.len(), d, rng),
                    purchase: embedding(&mut store, "emb/purchase", vocabs.purchase.len(), d, rng),
                };
                let din = (kind == BaselineKind::Din).then(|| DinParts {
                    proj: Linear::new(&mut store, "voucher_proj", 2 * d + 2, d, rng),
                    attention: AttentionUnit::new(
                        &mut store,
                        "attention",
                        d,
                        config.att_hidden,
                        config.att_outer,
                        config.att_softmax,
                        rng,
                    ),
                });
                let width = DENSE + 5 * d + if din.is_some() { 2 * d } else { 0 };
                let mut dims = vec![width];
                dims.extend(&config.hidden);
                dims.push(1);
                let head = Mlp::new(&mut store, "head", &dims, rng);
                Body::Deep { tables, din, head }
            }
        };
        Baseline {
            kind,
            config,
            store,
            body,
        }
    }

    /// Voucher encoder: `Linear(voucher_emb ‖ activity_emb ‖ dense)` per session.
    fn encode_vouchers(
        &self,
        g: &mut Graph,
        ds: &Dataset,
        tables: &SparseTables,
        proj: &Linear,
        sessions: &[usize],
    ) -> Result<Var> {
        let vid: Rc<[usize]> = sessions.iter().map(|&s| ds.vouchers[s].voucher).collect();
        let act: Rc<[usize]> = sessions.iter().map(|&s| ds.vouchers[s].activity).collect();
        let dense: Vec<f64> = sessions.iter().flat_map(|&s| ds.vouchers[s].dense).collect();
        let vt = g.param(&self.store, tables.voucher);
        let v = g.gather_rows(vt, vid)?;
        let at = g.param(&self.store, tables.activity);
        let a = g.gather_rows(at, act)?;
        let dense = g.constant(Tensor::matrix(sessions.len(), 2, dense)?);
        let x = g.concat_cols(&[v, a, dense])?;
        proj.forward(g, &self.store, x)
    }
}

fn dense_block(g: &mut Graph, ds: &Dataset, batch: &[usize]) -> Result<Var> {
    let data: Vec<f64> = batch
        .iter()
        .flat_map(|&i| {
            let s = &ds.samples[i];
            let p = ds.profiles[s.user].dense;
            let v = ds.vouchers[s.session].dense;
            [p[0], p[1], v[0], v[1]]
        })
        .collect();
    Ok(g.constant(Tensor::matrix(batch.len(), DENSE, data)?))
}

impl Network for Baseline {
    fn family(&self) -> &'static str {
        self.kind.family()
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, g: &mut Graph, ds: &Dataset, batch: &[usize], training: bool, rng: &mut Rng) -> Result<Forward> {
        let n = batch.len();
        let dense = dense_block(g, ds, batch)?;
        let logit = match &self.body {
            Body::Lr(linear) => linear.forward(g, &self.store, dense)?,
            Body::Deep { tables, din, head } => {
                let mut parts = vec![dense];
                let lookups: [(ParamId, Lookup); 5] = [
                    (
                        tables.activity,
                        Box::new(|i| ds.vouchers[ds.samples[i].session].activity),
                    ),
                    (tables.voucher, Box::new(|i| ds.vouchers[ds.samples[i].session].voucher)),
                    (tables.age, Box::new(|i| ds.profiles[ds.samples[i].user].age)),
                    (tables.gender, Box::new(|i| ds.profiles[ds.samples[i].user].gender)),
                    (tables.purchase, Box::new(|i| ds.profiles[ds.samples[i].user].purchase)),
                ];
                for (table, key) in &lookups {
                    let idx: Rc<[usize]> = batch.iter().map(|&i| key(i)).collect();
                    let t = g.param(&self.store, *table);
                    parts.push(g.gather_rows(t, idx)?);
                }
                if let Some(DinParts { proj, attention }) = din {
                    let targets: Vec<usize> = batch.iter().map(|&i| ds.samples[i].session).collect();
                    let e_t = self.encode_vouchers(g, ds, tables, proj, &targets)?;
                    let mut hist_sessions = Vec::new();
                    let mut pair_sample = Vec::new();
                    if !self.config.mask_history {
                        for (k, &i) in batch.iter().enumerate() {
                            for &j in &ds.samples[i].history {
                                hist_sessions.push(j);
                                pair_sample.push(k);
                            }
                        }
                    }
                    let h = if hist_sessions.is_empty() {
                        g.constant(Tensor::zeros(&[n, self.config.emb_dim]))
                    } else {
                        let e_r = self.encode_vouchers(g, ds, tables, proj, &hist_sessions)?;
                        let sample: Rc<[usize]> = pair_sample.into();
                        let pairs = AttentionPairs {
                            history: (0..hist_sessions.len()).collect(),
                            target: sample.clone(),
                            sample,
                            samples: n,
                        };
                        attention.forward(g, &self.store, e_r, e_t, &pairs)?.0
                    };
                    parts.push(e_t);
                    parts.push(h);
                }
                let x = g.concat_cols(&parts)?;
                head.forward(g, &self.store, x, self.config.dropout, training, rng)?
            }
        };
        let pred = g.sigmoid(logit)?;
        Ok(Forward {
            pred,
            logit,
            aux_loss: None,
            hist_scores: None,
        })
    }
}
