mod common;

use std::sync::OnceLock;

use ::dmbgn::data::{Action, Event, RawData, Vocabs};
use ::dmbgn::model::EncoderConfig;
use ::dmbgn::pretrain::sgns::cosine;
use ::dmbgn::pretrain::{
    encode_sessions, pretrain_vouchers, train_item_embeddings, Checkpoint, SgnsConfig, VoucherPretrainConfig,
};
use ::dmbgn::rng_for;
use common::{gen_config, pretrain, World};
use rand::Rng as _;
use sha2::{Digest, Sha256};

fn separable() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| {
        World::new(gen_config(&[
            ("users", "1500"),
            ("sessions_per_user", "8"),
            ("seed", "31"),
            ("noise", "0"),
            ("base_rate", "0.5"),
        ]))
    })
}

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

/// A and B always appear next to each other; C only in sequences that
/// never touch either.
fn co_occurrence_corpus(seed: u64) -> Vec<Event> {
    let mut rng = rng_for(seed, 50);
    let mut events = Vec::new();
    for u in 0..40 {
        let user = format!("u{u}");
        let mut ts = 0;
        for _ in 0..12 {
            ts += 1;
            let item = if u % 2 == 0 {
                match rng.random_range(0..4) {
                    0 => {
                        events.push(ev(&user, "A", ts));
                        ts += 1;
                        "B".to_string()
                    }
                    _ => format!("x{}", rng.random_range(0..20)),
                }
            } else {
                match rng.random_range(0..4) {
                    0 => "C".to_string(),
                    _ => format!("y{}", rng.random_range(0..20)),
                }
            };
            events.push(ev(&user, &item, ts));
        }
    }
    events
}

#[test]
fn co_occurring_items_end_up_closer() {
    let mut wins = 0;
    for seed in 1..=20 {
        let events = co_occurrence_corpus(seed);
        let vocabs = Vocabs::build(&RawData {
            events: events.clone(),
            ..RawData::default()
        });
        let cfg = SgnsConfig {
            seed,
            ..SgnsConfig::default()
        };
        let emb = train_item_embeddings(&events, &vocabs, &cfg).unwrap();
        let vec = |id: &str| {
            let side = [
                vocabs.category.get(&format!("c_{id}")),
                vocabs.brand.get(&format!("b_{id}")),
                vocabs.shop.get(&format!("s_{id}")),
            ];
            emb.vector(Action::Atc, vocabs.item.get(id), side)
        };
        let (a, b, c) = (vec("A"), vec("B"), vec("C"));
        if cosine(&a, &b) > cosine(&a, &c) {
            wins += 1;
        }
    }
    assert!(wins >= 19, "ordering held in {wins}/20 seeds");
}

#[test]
fn untrained_loss_is_near_ln2() {
    let world = separable();
    let losses: Vec<f64> = (1..=10)
        .map(|seed| {
            let cfg = VoucherPretrainConfig {
                epochs: 0,
                seed,
                ..VoucherPretrainConfig::default()
            };
            pretrain_vouchers(&world.ds, None, EncoderConfig::default(), &cfg)
                .unwrap()
                .initial_loss
        })
        .collect();
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    assert!((mean - std::f64::consts::LN_2).abs() < 0.1, "{losses:?}");
}

fn table_hash(store: &::dmbgn::tensor::ParamStore, name: &str) -> Vec<u8> {
    let mut h = Sha256::new();
    for v in store.get(store.id(name).unwrap()).data() {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().to_vec()
}

#[test]
fn pretraining_learns_and_leaves_target_table_alone() {
    let world = separable();
    let pre = pretrain(world, "all");
    let loss = &pre.vouchers.epoch_loss;
    assert_eq!(loss.len(), 5);
    assert!(loss[0] < pre.vouchers.initial_loss);
    assert!(loss[..3].windows(2).all(|w| w[1] < w[0]), "{loss:?}");

    let untouched = pretrain_vouchers(
        &world.ds,
        Some(&pre.items),
        EncoderConfig::default(),
        &VoucherPretrainConfig {
            epochs: 0,
            ..VoucherPretrainConfig::default()
        },
    )
    .unwrap();
    assert_eq!(
        table_hash(&pre.vouchers.store, "target_voucher_emb"),
        table_hash(&untouched.store, "target_voucher_emb")
    );
    assert_ne!(
        table_hash(&pre.vouchers.store, "voucher_emb"),
        table_hash(&untouched.store, "voucher_emb")
    );
    for table in ["item_emb/atc", "item_emb/ord", "side_emb/category"] {
        assert_eq!(
            table_hash(&pre.vouchers.store, table),
            table_hash(&untouched.store, table),
            "{table}"
        );
    }

    let train = world.ds.train_indices();
    let (scores, _) = encode_sessions(&pre.vouchers.encoder, &pre.vouchers.store, &world.ds, &train).unwrap();
    let mean_of = |label: f64| {
        let s: Vec<f64> = scores
            .iter()
            .zip(&train)
            .filter(|(_, &i)| world.ds.samples[i].label == label)
            .map(|(&s, _)| s)
            .collect();
        s.iter().sum::<f64>() / s.len() as f64
    };
    assert!(
        mean_of(1.0) - mean_of(0.0) > 0.2,
        "{} vs {}",
        mean_of(1.0),
        mean_of(0.0)
    );

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vouchers.ckpt");
    pre.ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.tensors.len(), pre.ck.tensors.len());
    for (name, t) in &pre.ck.tensors {
        let bits = |t: &::dmbgn::tensor::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t), bits(&back.tensors[name]), "{name}");
        assert_eq!(t.shape(), back.tensors[name].shape());
    }
}
