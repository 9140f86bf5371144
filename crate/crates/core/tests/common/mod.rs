//! Fixtures and independent oracles shared by the integration tests and
//! the acceptance run.
#![allow(dead_code)]

pub mod invariants;

use std::collections::HashMap;
use std::rc::Rc;

use ::dmbgn::config::KvConfig;
use ::dmbgn::data::{Dataset, DatasetConfig, Vocabs};
use ::dmbgn::model::train::batch_loss;
use ::dmbgn::model::{Dmbgn, DmbgnConfig, EncoderConfig, Init, Network, TrainConfig};
use ::dmbgn::pipeline::{build_network, fit, Fit, ModelName};
use ::dmbgn::pretrain::{
    pretrain_vouchers, train_item_embeddings, Checkpoint, ItemEmbeddings, SgnsConfig, VoucherPretrain,
    VoucherPretrainConfig,
};
use ::dmbgn::synth::{generate, GenConfig, Generated};
use ::dmbgn::tensor::{sigmoid, Graph};
use ::dmbgn::{rng_for, Rng};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub fn gen_config(pairs: &[(&str, &str)]) -> GenConfig {
    let mut kv = KvConfig::new();
    for (k, v) in pairs {
        kv.set(k, v);
    }
    GenConfig::from_kv(&kv).expect("valid generator settings")
}

pub fn kv(pairs: &[(&str, &str)]) -> KvConfig {
    let mut kv = KvConfig::new();
    for (k, v) in pairs {
        kv.set(k, v);
    }
    kv
}

/// Generated data plus the dataset built from it.
pub struct World {
    pub config: GenConfig,
    pub generated: Generated,
    pub ds: Dataset,
    truth: HashMap<String, f64>,
}

impl World {
    pub fn new(config: GenConfig) -> Self {
        let generated = generate(&config).expect("generator runs");
        let ds = Dataset::build(generated.raw.clone(), config.dataset_config(), None).expect("dataset builds");
        let truth = generated.truth.iter().cloned().collect();
        World {
            config,
            generated,
            ds,
            truth,
        }
    }

    pub fn with_dataset_config(config: GenConfig, dc: DatasetConfig) -> Self {
        let generated = generate(&config).expect("generator runs");
        let ds = Dataset::build(generated.raw.clone(), dc, None).expect("dataset builds");
        let truth = generated.truth.iter().cloned().collect();
        World {
            config,
            generated,
            ds,
            truth,
        }
    }

    /// AUC of the generator's true probabilities on the test split.
    pub fn test_bayes_auc(&self) -> f64 {
        let idx = self.ds.test_indices();
        let p: Vec<f64> = idx.iter().map(|&i| self.truth[&self.ds.keys[i]]).collect();
        let y: Vec<f64> = idx.iter().map(|&i| self.ds.samples[i].label).collect();
        ::dmbgn::eval::auc(&p, &y).expect("both classes")
    }
}

/// Item embeddings and a voucher pre-training run, bundled as a checkpoint
/// the way the command-line pipeline produces it.
pub struct Pretrained {
    pub items: ItemEmbeddings,
    pub vouchers: VoucherPretrain,
    pub ck: Checkpoint,
}

pub fn pretrain(world: &World, zones: &str) -> Pretrained {
    let items = train_item_embeddings(
        &world.generated.raw.events,
        &Vocabs::build(&world.generated.raw),
        &SgnsConfig::default(),
    )
    .expect("item embeddings train");
    pretrain_with(world, items, zones)
}

pub fn pretrain_with(world: &World, items: ItemEmbeddings, zones: &str) -> Pretrained {
    let enc = EncoderConfig::from_kv(&kv(&[("zones", zones)])).expect("encoder config");
    let vouchers = pretrain_vouchers(&world.ds, Some(&items), enc, &VoucherPretrainConfig::default())
        .expect("voucher pre-training");
    let ck = vouchers.checkpoint(&world.ds);
    Pretrained { items, vouchers, ck }
}

/// Trains `model` with its family defaults, `overrides` and `seed`.
pub fn train_model(model: &str, world: &World, ck: Option<&Checkpoint>, overrides: &[(&str, &str)], seed: u64) -> Fit {
    let name: ModelName = model.parse().expect("known model");
    let mut settings = kv(overrides);
    settings.set("seed", seed);
    let cfg = TrainConfig::from_kv_with(&settings, TrainConfig::defaults_for(name.family())).expect("train config");
    let mut net = build_network(name, &settings, &world.ds, ck).expect("network builds");
    fit(net.as_mut(), model, &world.ds, &cfg).expect("training runs")
}

/// Mean train-split history score per epoch.
pub fn hist_scores(fit: &Fit) -> Vec<f64> {
    fit.log
        .iter()
        .filter(|e| e.split == "train")
        .filter_map(|e| e.hist_score)
        .collect()
}

/// AUC by direct pair counting: ties count one half.
pub fn auc_pairs(scores: &[f64], labels: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &yi) in labels.iter().enumerate() {
        if yi < 0.5 {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj > 0.5 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// One graph convolution evaluated node by node:
/// `σ(x_i W1 + Σ_{j → i} x_j W2)`.
pub fn naive_gnn(x: &[Vec<f64>], edges: &[(usize, usize)], w1: &[Vec<f64>], w2: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let out_dim = w1[0].len();
    (0..x.len())
        .map(|i| {
            (0..out_dim)
                .map(|c| {
                    let mut z = 0.0;
                    for (k, xk) in x[i].iter().enumerate() {
                        z += xk * w1[k][c];
                    }
                    for &(src, dst) in edges {
                        if dst == i {
                            for (k, xk) in x[src].iter().enumerate() {
                                z += xk * w2[k][c];
                            }
                        }
                    }
                    sigmoid(z)
                })
                .collect()
        })
        .collect()
}

pub fn normal_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

/// Logistic-regression probe trained by full-batch gradient descent on
/// standardized features; returns its accuracy on `test`.
pub fn probe_accuracy(train: &[(Vec<f64>, f64)], test: &[(Vec<f64>, f64)]) -> f64 {
    let d = train[0].0.len();
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d).map(|k| train.iter().map(|r| r.0[k]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|k| {
            let v = train.iter().map(|r| (r.0[k] - mean[k]).powi(2)).sum::<f64>() / n;
            v.sqrt().max(1e-9)
        })
        .collect();
    let z = |x: &[f64]| -> Vec<f64> { x.iter().enumerate().map(|(k, v)| (v - mean[k]) / std[k]).collect() };
    let xs: Vec<Vec<f64>> = train.iter().map(|r| z(&r.0)).collect();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..500 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, (_, y)) in xs.iter().zip(train) {
            let p = sigmoid(b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>());
            let e = p - y;
            for k in 0..d {
                gw[k] += e * x[k];
            }
            gb += e;
        }
        for k in 0..d {
            w[k] -= 0.5 * gw[k] / n;
        }
        b -= 0.5 * gb / n;
    }
    let correct = test
        .iter()
        .filter(|(x, y)| {
            let s = b + z(x).iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            (s > 0.0) == (*y > 0.5)
        })
        .count();
    correct as f64 / test.len() as f64
}

/// Equal numbers of positive and negative rows, taken in order.
pub fn balanced(rows: Vec<(Vec<f64>, f64)>) -> Vec<(Vec<f64>, f64)> {
    let pos: Vec<_> = rows.iter().filter(|r| r.1 > 0.5).cloned().collect();
    let neg: Vec<_> = rows.iter().filter(|r| r.1 < 0.5).cloned().collect();
    let k = pos.len().min(neg.len());
    pos.into_iter().take(k).chain(neg.into_iter().take(k)).collect()
}

/// A tiny dataset whose graphs have at most four nodes.
pub fn micro_world(seed: u64) -> World {
    let cfg = gen_config(&[
        ("seed", &seed.to_string()),
        ("users", "12"),
        ("sessions_per_user", "5"),
        ("items", "24"),
        ("categories", "5"),
        ("brands", "3"),
        ("shops", "4"),
        ("vouchers", "6"),
        ("activities", "2"),
        ("atc_rate", "0.8"),
        ("ord_rate", "0.5"),
        ("base_rate", "0.5"),
    ]);
    let mut dc = cfg.dataset_config();
    dc.session.atc_cap = 1;
    dc.session.ord_cap = 1;
    dc.z = 2;
    World::with_dataset_config(cfg, dc)
}

pub fn micro_model(world: &World, seed: u64) -> Dmbgn {
    let cfg = DmbgnConfig {
        encoder: EncoderConfig {
            dim: 4,
            behavior_hidden: vec![6],
            ..EncoderConfig::default()
        },
        att_hidden: 5,
        head_hidden: vec![6, 3],
        dropout: 0.0,
        profile_dim: 3,
        init: Init::Scratch,
        ..DmbgnConfig::default()
    };
    let mut rng = rng_for(seed, 11);
    let mut net = Dmbgn::new(&world.ds.vocabs, cfg, world.ds.config.r, &mut rng).expect("micro model");
    // Spread embedding values so that products are not all near zero.
    let ids: Vec<_> = net.store.ids().collect();
    for id in ids {
        for v in net.store.get_mut(id).data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    net
}

/// Samples whose target graph and history graphs all have at most four
/// nodes, and which include some histories.
pub fn micro_batch(world: &World) -> Vec<usize> {
    let ds = &world.ds;
    let small = |i: usize| {
        ds.target_uvgs[i].nodes.len() < 4 && ds.samples[i].history.iter().all(|&h| ds.hist_uvgs[h].nodes.len() < 4)
    };
    let batch: Vec<usize> = (0..ds.len()).filter(|&i| small(i)).take(12).collect();
    batch
}

fn micro_loss(net: &Dmbgn, world: &World, batch: &[usize]) -> (Graph, ::dmbgn::tensor::Var) {
    let mut g = Graph::new();
    let mut rng = rng_for(0, 0);
    let f = net.forward(&mut g, &world.ds, batch, false, &mut rng).expect("forward");
    let loss = batch_loss(&mut g, net, &world.ds, batch, &f, 0.1, 50).expect("loss");
    (g, loss)
}

/// Norm-wise relative error between the analytic gradient of the full
/// loss (BCE, auxiliary history term, L2) and central differences, over
/// every coordinate with a nonzero analytic or numeric gradient plus a
/// sample of the rest. Also returns the number of histories in the batch.
pub fn fd_relative_error(seed: u64) -> (f64, usize) {
    let world = micro_world(seed);
    let mut net = micro_model(&world, seed);
    let batch = micro_batch(&world);
    let hist: usize = batch.iter().map(|&i| world.ds.samples[i].history.len()).sum();
    let (g, loss) = micro_loss(&net, &world, &batch);
    let grads = g.backward(loss).expect("backward");
    let eps = 1e-6;
    let mut diff2 = 0.0;
    let mut norm_a = 0.0;
    let mut norm_n = 0.0;
    let ids: Vec<_> = net.store.ids().filter(|&id| net.store.is_trainable(id)).collect();
    for id in ids {
        let analytic: Vec<f64> = match grads.param(id) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; net.store.get(id).len()],
        };
        for (k, &a) in analytic.iter().enumerate() {
            if a == 0.0 && k % 7 != 0 {
                continue;
            }
            let orig = net.store.get(id).data()[k];
            net.store.get_mut(id).data_mut()[k] = orig + eps;
            let (gp, lp) = micro_loss(&net, &world, &batch);
            net.store.get_mut(id).data_mut()[k] = orig - eps;
            let (gm, lm) = micro_loss(&net, &world, &batch);
            net.store.get_mut(id).data_mut()[k] = orig;
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * eps);
            diff2 += (a - numeric).powi(2);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
    }
    let denom = norm_a.sqrt() + norm_n.sqrt();
    (diff2.sqrt() / denom.max(1e-300), hist)
}

/// Random permutation helper.
pub fn shuffled<T: Clone>(items: &[T], rng: &mut Rng) -> Vec<T> {
    use rand::seq::SliceRandom;
    let mut v = items.to_vec();
    v.shuffle(rng);
    v
}

pub fn rc<T: Clone>(v: &[T]) -> Rc<[T]> {
    v.into()
}
