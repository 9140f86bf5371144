//! End-to-end orchestration: building models by name, training runs with
//! frozen run directories, prediction and embedding export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{Baseline, BaselineConfig, BaselineKind};
use crate::config::KvConfig;
use crate::data::{ingest_dir, Dataset, DatasetConfig, Vocabs};
use crate::error::{Error, Result};
use crate::eval::{auc, logloss, RunResult};
use crate::model::dmbgn::{Dmbgn, DmbgnConfig, Init};
use crate::model::encoder::EncoderConfig;
use crate::model::train::{predict, train, EpochLog, Network, TrainConfig};
use crate::pretrain::sgns::{train_item_embeddings, ItemEmbeddings, SgnsConfig};
use crate::pretrain::voucher::{encoder_config_of, pretrain_vouchers, VoucherPretrainConfig};
use crate::pretrain::Checkpoint;
use crate::rng_for;

pub const CONFIG_FILE: &str = "config.cfg";
pub const LOG_FILE: &str = "log.jsonl";
pub const MODEL_FILE: &str = "model.ckpt";
pub const SCORES_FILE: &str = "test_scores.csv";
pub const METRICS_FILE: &str = "metrics.json";

/// Model names accepted by `train`.
pub const MODELS: [&str; 7] = [
    "dmbgn",
    "dmbgn-avgpool",
    "dmbgn-pretrained",
    "dmbgn-scratch",
    "lr",
    "dnn",
    "din",
];

/// Keys of a run configuration besides the model, training and encoder keys.
pub const RUN_KEYS: [&str; 3] = ["model", "data", "ckpt"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelName {
    Dmbgn(Init),
    Baseline(BaselineKind),
}

impl std::str::FromStr for ModelName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "dmbgn" => ModelName::Dmbgn(Init::Finetune),
            "dmbgn-avgpool" => ModelName::Dmbgn(Init::Avgpool),
            "dmbgn-pretrained" => ModelName::Dmbgn(Init::Pretrained),
            "dmbgn-scratch" => ModelName::Dmbgn(Init::Scratch),
            other => ModelName::Baseline(
                other
                    .parse()
                    .map_err(|_| Error::Config(format!("unknown model {other:?}; expected one of {MODELS:?}")))?,
            ),
        })
    }
}

impl ModelName {
    pub fn family(self) -> &'static str {
        match self {
            ModelName::Dmbgn(_) => crate::model::dmbgn::FAMILY,
            ModelName::Baseline(kind) => kind.family(),
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        matches!(self, ModelName::Dmbgn(init) if init != Init::Scratch)
    }
}

/// Every key a run configuration may hold.
pub fn run_keys() -> Vec<&'static str> {
    let mut keys: Vec<&'static str> = RUN_KEYS.to_vec();
    keys.extend(TrainConfig::KEYS);
    keys.extend(EncoderConfig::KEYS);
    keys.extend(DmbgnConfig::KEYS);
    keys.extend(BaselineConfig::KEYS);
    keys.sort_unstable();
    keys.dedup();
    keys
}

/// Builds a freshly initialized network; DMBGN variants are initialized
/// from `ck` per their init mode. `kv` carries model keys; the model seed
/// is `TrainConfig::seed`.
pub fn build_network(
    name: ModelName,
    kv: &KvConfig,
    ds: &Dataset,
    ck: Option<&Checkpoint>,
) -> Result<Box<dyn Network>> {
    let train_cfg = TrainConfig::from_kv(kv)?;
    let mut rng = rng_for(train_cfg.seed, 1);
    match name {
        ModelName::Dmbgn(init) => {
            let mut cfg = DmbgnConfig::from_kv(&with_checkpoint_encoder(kv, ck)?)?;
            cfg.init = init;
            let mut net = Dmbgn::new(&ds.vocabs, cfg, ds.config.r, &mut rng)?;
            net.init_from(ck)?;
            Ok(Box::new(net))
        }
        ModelName::Baseline(kind) => {
            let cfg = BaselineConfig::from_kv(kv)?;
            Ok(Box::new(Baseline::new(kind, &ds.vocabs, cfg, &mut rng)))
        }
    }
}

/// Encoder shape keys come from the pre-training checkpoint unless set.
fn with_checkpoint_encoder(kv: &KvConfig, ck: Option<&Checkpoint>) -> Result<KvConfig> {
    let mut out = KvConfig::new();
    if let Some(ck) = ck.filter(|c| c.config.contains_key("dim")) {
        let enc = encoder_config_of(ck)?;
        let mut ek = KvConfig::new();
        enc.write_kv(&mut ek);
        for key in ["dim", "gnn_layers", "topk_ratio", "behavior_hidden"] {
            out.set(key, ek.raw(key).expect("written"));
        }
    }
    out.merge(kv);
    Ok(out)
}

/// Outcome of one training run.
#[derive(Clone, Debug)]
pub struct Fit {
    pub log: Vec<EpochLog>,
    pub test_indices: Vec<usize>,
    pub test_scores: Vec<f64>,
    pub result: RunResult,
}

/// Trains `net` and scores the test split.
pub fn fit(net: &mut dyn Network, model: &str, ds: &Dataset, cfg: &TrainConfig) -> Result<Fit> {
    let log = train(net, ds, cfg)?;
    let test_indices = ds.test_indices();
    let test_scores = predict(net, ds, &test_indices)?;
    let labels: Vec<f64> = test_indices.iter().map(|&i| ds.samples[i].label).collect();
    let result = RunResult {
        model: model.to_string(),
        seed: cfg.seed,
        split_hash: ds.split_hash(),
        auc: auc(&test_scores, &labels)?,
        logloss: logloss(&test_scores, &labels)?,
    };
    Ok(Fit {
        log,
        test_indices,
        test_scores,
        result,
    })
}

/// Loads a data directory, reusing a checkpoint's vocabularies when given.
pub fn load_dataset(data: &Path, ck: Option<&Checkpoint>) -> Result<Dataset> {
    let cfg = DatasetConfig::for_dir(data)?;
    let vocabs = ck.and_then(|c| c.vocabs.clone());
    Dataset::load(data, cfg, vocabs)
}

/// Trains item embeddings on every event of a data directory.
pub fn pretrain_items(data: &Path, kv: &KvConfig) -> Result<Checkpoint> {
    kv.reject_unknown(&SgnsConfig::KEYS)?;
    let cfg = SgnsConfig::from_kv(kv)?;
    let raw = ingest_dir(data)?;
    let vocabs = Vocabs::build(&raw);
    let emb = train_item_embeddings(&raw.events, &vocabs, &cfg)?;
    let mut ck = Checkpoint::new("items");
    emb.write_to(&mut ck);
    ck.vocabs = Some(vocabs);
    let mut ckv = KvConfig::new();
    cfg.write_kv(&mut ckv);
    for (k, v) in ckv.iter() {
        ck.set_config(k, v);
    }
    Ok(ck)
}

/// Voucher pre-training on a data directory given an item checkpoint.
pub fn pretrain_vouchers_dir(data: &Path, items: &Checkpoint, kv: &KvConfig) -> Result<Checkpoint> {
    let mut known: Vec<&str> = VoucherPretrainConfig::KEYS.to_vec();
    known.extend(EncoderConfig::KEYS);
    kv.reject_unknown(&known)?;
    let ds = load_dataset(data, Some(items))?;
    let emb = ItemEmbeddings::read_from(items)?;
    let mut enc = EncoderConfig::from_kv(kv)?;
    if !kv.contains("dim") {
        enc.dim = emb.dim;
    }
    let out = pretrain_vouchers(&ds, Some(&emb), enc, &VoucherPretrainConfig::from_kv(kv)?)?;
    Ok(out.checkpoint(&ds))
}

/// Saves a trained network with its run configuration.
pub fn model_checkpoint(net: &dyn Network, model: &str, vocabs: &Vocabs, kv: &KvConfig) -> Checkpoint {
    let mut ck = Checkpoint::new(model);
    ck.insert_store(net.store(), &format!("{}/", net.family()));
    ck.vocabs = Some(vocabs.clone());
    for (k, v) in kv.iter() {
        ck.set_config(k, v);
    }
    ck
}

/// Rebuilds a trained network from its checkpoint.
pub fn load_model(ck: &Checkpoint, ds: &Dataset) -> Result<Box<dyn Network>> {
    let mut kv = KvConfig::new();
    for (k, v) in &ck.config {
        kv.set(k, v);
    }
    let name: ModelName = ck
        .kind
        .parse()
        .map_err(|_| Error::Data(format!("checkpoint holds {:?}, not a trained model", ck.kind)))?;
    // parameters come from the checkpoint; build with scratch init
    let mut net: Box<dyn Network> = match name {
        ModelName::Dmbgn(init) => {
            let mut cfg = DmbgnConfig::from_kv(&kv)?;
            cfg.init = Init::Scratch;
            cfg.encoder.avgpool = init == Init::Avgpool;
            Box::new(Dmbgn::new(&ds.vocabs, cfg, ds.config.r, &mut rng_for(0, 1))?)
        }
        ModelName::Baseline(kind) => Box::new(Baseline::new(
            kind,
            &ds.vocabs,
            BaselineConfig::from_kv(&kv)?,
            &mut rng_for(0, 1),
        )),
    };
    let prefix = format!("{}/", net.family());
    ck.load_into(net.store_mut(), &prefix, |_| true)?;
    Ok(net)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    #[serde(flatten)]
    pub result: RunResult,
    pub epochs: usize,
}

/// Trains one model as described by `kv` (which must name `model` and
/// `data`, and `ckpt` for pre-trained variants) and writes the run
/// directory: frozen config, log, checkpoint, test scores and metrics.
pub fn run_training(kv: &KvConfig, out: &Path) -> Result<RunResult> {
    kv.reject_unknown(&run_keys())?;
    let model: String = kv
        .raw("model")
        .ok_or_else(|| Error::Config("run config needs `model`".into()))?
        .to_string();
    let name: ModelName = model.parse()?;
    let data = PathBuf::from(
        kv.raw("data")
            .ok_or_else(|| Error::Config("run config needs `data`".into()))?,
    );
    let ck = match kv.raw("ckpt") {
        Some(p) if !p.is_empty() => Some(Checkpoint::load(Path::new(p))?),
        _ => None,
    };
    if name.needs_checkpoint() && ck.is_none() {
        return Err(Error::Config(format!("model {model} needs --ckpt")));
    }
    let ds = load_dataset(&data, ck.as_ref())?;

    let mut frozen = effective_config(name, kv, ck.as_ref())?;
    frozen.set("model", &model);
    log::info!("effective config:\n{}", frozen.render());
    let train_cfg = TrainConfig::from_kv(&frozen)?;
    let mut net = build_network(name, &frozen, &ds, ck.as_ref())?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    frozen.save(out.join(CONFIG_FILE))?;
    let fit = fit(net.as_mut(), &model, &ds, &train_cfg)?;

    let mut log = String::new();
    for entry in &fit.log {
        log.push_str(&serde_json::to_string(entry)?);
        log.push('\n');
    }
    write(&out.join(LOG_FILE), &log)?;
    model_checkpoint(net.as_ref(), &model, &ds.vocabs, &frozen).save(&out.join(MODEL_FILE))?;
    write_scores(&out.join(SCORES_FILE), &ds, &fit.test_indices, &fit.test_scores)?;
    let metrics = RunMetrics {
        result: fit.result.clone(),
        epochs: train_cfg.epochs,
    };
    write(&out.join(METRICS_FILE), &serde_json::to_string_pretty(&metrics)?)?;
    Ok(fit.result)
}

/// Re-runs training from a run directory's frozen config.
pub fn rerun(run_dir: &Path, out: &Path) -> Result<RunResult> {
    let kv = KvConfig::load(run_dir.join(CONFIG_FILE))?;
    run_training(&kv, out)
}

/// Every default made explicit, so the run directory alone determines the run.
fn effective_config(name: ModelName, kv: &KvConfig, ck: Option<&Checkpoint>) -> Result<KvConfig> {
    let mut out = KvConfig::new();
    TrainConfig::from_kv_with(kv, TrainConfig::defaults_for(name.family()))?.write_kv(&mut out);
    match name {
        ModelName::Dmbgn(init) => {
            let mut cfg = DmbgnConfig::from_kv(&with_checkpoint_encoder(kv, ck)?)?;
            cfg.init = init;
            if init == Init::Avgpool {
                cfg.encoder.avgpool = true;
            }
            cfg.write_kv(&mut out);
        }
        ModelName::Baseline(_) => BaselineConfig::from_kv(kv)?.write_kv(&mut out),
    }
    for key in ["data", "ckpt"] {
        if let Some(v) = kv.raw(key) {
            out.set(key, v);
        }
    }
    Ok(out)
}

pub fn read_metrics(run_dir: &Path) -> Result<RunResult> {
    let path = run_dir.join(METRICS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: RunMetrics = serde_json::from_str(&text)?;
    Ok(m.result)
}

/// `session_key,label,score,hist_len`.
pub fn write_scores(path: &Path, ds: &Dataset, indices: &[usize], scores: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["session_key", "label", "score", "hist_len"])?;
    for (&i, &p) in indices.iter().zip(scores) {
        let s = &ds.samples[i];
        w.write_record([
            ds.keys[i].clone(),
            format!("{}", s.label),
            format!("{p:?}"),
            s.history.len().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Scores every sample of a data directory with a trained model:
/// `session_key,score`.
pub fn predict_dir(model: &Checkpoint, data: &Path, out: &Path) -> Result<usize> {
    let ds = load_dataset(data, Some(model))?;
    let net = load_model(model, &ds)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let scores = predict(net.as_ref(), &ds, &all)?;
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["session_key", "score"])?;
    for (i, p) in scores.iter().enumerate() {
        w.write_record([ds.keys[i].clone(), format!("{p:?}")])?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(all.len())
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Tables `export-emb` can write.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportTable {
    Item,
    Voucher,
    UvgB,
}

impl std::str::FromStr for ExportTable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "item" => Ok(ExportTable::Item),
            "voucher" => Ok(ExportTable::Voucher),
            "uvg_b" => Ok(ExportTable::UvgB),
            other => Err(Error::Config(format!(
                "unknown table {other:?}; expected item, voucher or uvg_b"
            ))),
        }
    }
}

fn tsv_row(out: &mut String, id: &str, v: &[f64]) {
    out.push_str(id);
    for x in v {
        let _ = write!(out, "\t{x:?}");
    }
    out.push('\n');
}

/// TSV `id<TAB>v1<TAB>...` rows. Item rows are keyed `action:item_id`;
/// `uvg_b` needs the data directory and emits one row per session with
/// its historical-mode behavior embedding.
pub fn export_embeddings(ck: &Checkpoint, table: ExportTable, data: Option<&Path>) -> Result<String> {
    let vocabs = ck
        .vocabs
        .as_ref()
        .ok_or_else(|| Error::Data("checkpoint carries no vocabularies".into()))?;
    // model checkpoints store tensors under a family prefix
    let prefix = if ck.tensors.contains_key("voucher_emb") || ck.tensors.contains_key("item_emb/atc") {
        String::new()
    } else {
        format!("{}/", ck.kind.parse::<ModelName>().map(family_of).unwrap_or("dmbgn"))
    };
    let mut out = String::new();
    match table {
        ExportTable::Item => {
            for action in crate::data::Action::ALL {
                let t = ck.get(&format!("{prefix}{}", crate::pretrain::sgns::item_table_name(action)))?;
                for r in 0..t.rows() {
                    let id = vocabs.item.id(r).map_or("<oov>".to_string(), |s| s.to_string());
                    tsv_row(&mut out, &format!("{}:{id}", action.as_str()), t.row_slice(r));
                }
            }
        }
        ExportTable::Voucher => {
            let t = ck.get(&format!("{prefix}voucher_emb"))?;
            for r in 0..t.rows() {
                let id = vocabs.voucher.id(r).map_or("<oov>".to_string(), |s| s.to_string());
                tsv_row(&mut out, &id, t.row_slice(r));
            }
        }
        ExportTable::UvgB => {
            let data = data.ok_or_else(|| Error::Config("uvg_b export needs --data".into()))?;
            let ds = load_dataset(data, Some(ck))?;
            let (encoder, store) = encoder_from_checkpoint(ck, &ds, &prefix)?;
            let all: Vec<usize> = (0..ds.len()).collect();
            let (_, e_b) = crate::pretrain::encode_sessions(&encoder, &store, &ds, &all)?;
            for (i, v) in e_b.iter().enumerate() {
                tsv_row(&mut out, &ds.keys[i], v);
            }
        }
    }
    Ok(out)
}

fn family_of(name: ModelName) -> &'static str {
    match name {
        ModelName::Dmbgn(_) => crate::model::dmbgn::FAMILY,
        ModelName::Baseline(k) => k.family(),
    }
}

fn encoder_from_checkpoint(
    ck: &Checkpoint,
    ds: &Dataset,
    prefix: &str,
) -> Result<(crate::model::UvgEncoder, crate::tensor::ParamStore)> {
    let mut kv = KvConfig::new();
    for (k, v) in &ck.config {
        if EncoderConfig::KEYS.contains(&k.as_str()) {
            kv.set(k, v);
        }
    }
    let cfg = EncoderConfig::from_kv(&kv)?;
    let mut store = crate::tensor::ParamStore::new();
    let encoder = crate::model::UvgEncoder::new(&mut store, &ds.vocabs, cfg, &mut rng_for(0, 1))?;
    ck.load_into(&mut store, prefix, |_| true)?;
    Ok((encoder, store))
}
