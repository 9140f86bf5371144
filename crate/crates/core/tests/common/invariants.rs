//! Property checks over graph construction, ingestion, metrics and the
//! model's order invariances. Each returns the first violation found.

use ::dmbgn::data::{build_uvg, check_uvg, ingest_dir, Dataset, EncodedUvg, UvgMode, Zone};
use ::dmbgn::eval::{auc, logloss};
use ::dmbgn::model::{AttOuter, AttentionPairs, AttentionUnit, Network};
use ::dmbgn::tensor::{sigmoid, Graph, ParamStore, Tensor};
use ::dmbgn::{rng_for, Rng};
use rand::Rng as _;

use super::{auc_pairs, micro_model, rc, shuffled, World};

pub type Check = fn(&World, u64) -> Result<(), String>;

/// Every check, by name.
pub const ALL: [(&str, Check); 11] = [
    ("session timing and caps", session_invariants),
    ("uvg structure", uvg_invariants),
    ("uvg purity", uvg_purity),
    ("history lists", history_invariants),
    ("ingestion round trip", ingestion_round_trip),
    ("auc vs pair counting", auc_oracle),
    ("auc under monotone transforms", auc_monotone),
    ("logloss toward label", logloss_toward_label),
    ("attention history order", attention_history_order),
    ("zone storage order", zone_storage_order),
    ("post-collection volume", post_volume),
];

pub fn session_invariants(world: &World, _seed: u64) -> Result<(), String> {
    let cfg = world.ds.config.session;
    for s in &world.ds.sessions {
        let key = s.key();
        for e in s.pre_atc.iter().chain(&s.pre_ord) {
            if e.timestamp >= s.collect_ts {
                return Err(format!(
                    "{key}: pre event at {} not before collection {}",
                    e.timestamp, s.collect_ts
                ));
            }
        }
        for e in s.post_atc.iter().chain(&s.post_ord) {
            if e.timestamp < s.collect_ts || e.timestamp > s.end_ts {
                return Err(format!(
                    "{key}: post event at {} outside [{}, {}]",
                    e.timestamp, s.collect_ts, s.end_ts
                ));
            }
        }
        for zone in Zone::ALL {
            let events = s.zone(zone);
            if events.windows(2).any(|w| w[0].chrono_key() > w[1].chrono_key()) {
                return Err(format!("{key}: zone {} not chronological", zone.as_str()));
            }
            let cap = match zone.action() {
                ::dmbgn::data::Action::Atc => cfg.atc_cap,
                ::dmbgn::data::Action::Ord => cfg.ord_cap,
            };
            if events.len() > cap {
                return Err(format!("{key}: zone {} holds {} > {cap}", zone.as_str(), events.len()));
            }
        }
    }
    Ok(())
}

pub fn uvg_invariants(world: &World, _seed: u64) -> Result<(), String> {
    let dc = world.ds.config;
    for s in &world.ds.sessions {
        for mode in [UvgMode::Historical, UvgMode::Target] {
            let uvg = build_uvg(s, mode, dc.z, dc.edge_dir);
            check_uvg(&uvg, dc.z, dc.edge_dir).map_err(|e| format!("{} ({mode:?}): {e}", s.key()))?;
            if mode == UvgMode::Target && uvg.items.iter().any(|n| n.zone.is_post()) {
                return Err(format!("{}: target graph holds post-collection items", s.key()));
            }
        }
    }
    Ok(())
}

pub fn uvg_purity(world: &World, _seed: u64) -> Result<(), String> {
    let dc = world.ds.config;
    for s in world.ds.sessions.iter().take(2000) {
        let a = build_uvg(s, UvgMode::Historical, dc.z, dc.edge_dir);
        let b = build_uvg(s, UvgMode::Historical, dc.z, dc.edge_dir);
        if a != b {
            return Err(format!("{}: two builds differ", s.key()));
        }
    }
    Ok(())
}

pub fn history_invariants(world: &World, _seed: u64) -> Result<(), String> {
    let ds = &world.ds;
    for (i, sample) in ds.samples.iter().enumerate() {
        if sample.history.len() > ds.config.r {
            return Err(format!("{}: history of {}", ds.keys[i], sample.history.len()));
        }
        let target = &ds.sessions[sample.session];
        for &h in &sample.history {
            let past = &ds.sessions[h];
            if past.label != 1 {
                return Err(format!("{}: history {} is not redeemed", ds.keys[i], ds.keys[h]));
            }
            if past.end_ts >= target.collect_ts || past.user_id != target.user_id {
                return Err(format!("{}: history {} does not precede it", ds.keys[i], ds.keys[h]));
            }
        }
        if sample
            .history
            .windows(2)
            .any(|w| ds.sessions[w[0]].collect_ts > ds.sessions[w[1]].collect_ts)
        {
            return Err(format!("{}: history not oldest first", ds.keys[i]));
        }
    }
    Ok(())
}

pub fn ingestion_round_trip(world: &World, _seed: u64) -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    world
        .generated
        .write(dir.path(), &world.ds.config)
        .map_err(|e| e.to_string())?;
    let raw = ingest_dir(dir.path()).map_err(|e| e.to_string())?;
    if !raw.rejects.is_empty() {
        return Err(format!("{} rejects, first {:?}", raw.rejects.len(), raw.rejects[0]));
    }
    let orig = &world.generated.raw;
    if raw.events != orig.events
        || raw.sessions != orig.sessions
        || raw.vouchers != orig.vouchers
        || raw.profiles != orig.profiles
    {
        return Err("re-ingested data differs from the generated data".into());
    }
    let ds = Dataset::build(raw, world.ds.config, None).map_err(|e| e.to_string())?;
    if ds.keys != world.ds.keys || ds.split_hash() != world.ds.split_hash() {
        return Err("dataset from files differs from the in-memory one".into());
    }
    Ok(())
}

fn random_instance(rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    loop {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..=30);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let rate: f64 = rng.random_range(0.05..0.95);
        let labels: Vec<f64> = (0..n)
            .map(|_| f64::from(u8::from(rng.random::<f64>() < rate)))
            .collect();
        if labels.iter().any(|&y| y > 0.5) && labels.iter().any(|&y| y < 0.5) {
            return (scores, labels);
        }
    }
}

pub fn auc_oracle(_world: &World, seed: u64) -> Result<(), String> {
    let mut rng = rng_for(seed, 21);
    for k in 0..1000 {
        let (s, y) = random_instance(&mut rng);
        let fast = auc(&s, &y).map_err(|e| e.to_string())?;
        let slow = auc_pairs(&s, &y);
        if fast != slow {
            return Err(format!("instance {k}: fast {fast} vs pairs {slow}"));
        }
    }
    Ok(())
}

pub fn auc_monotone(_world: &World, seed: u64) -> Result<(), String> {
    let mut rng = rng_for(seed, 22);
    for k in 0..300 {
        let (s, y) = random_instance(&mut rng);
        let s: Vec<f64> = s.iter().map(|v| 4.0 * v - 2.0).collect();
        let base = auc(&s, &y).map_err(|e| e.to_string())?;
        let cube: Vec<f64> = s.iter().map(|v| v * v * v).collect();
        let sig: Vec<f64> = s.iter().map(|&v| sigmoid(v)).collect();
        for (name, t) in [("cube", cube), ("sigmoid", sig)] {
            let a = auc(&t, &y).map_err(|e| e.to_string())?;
            if a != base {
                return Err(format!("instance {k}: {name} changes AUC {base} -> {a}"));
            }
        }
    }
    Ok(())
}

pub fn logloss_toward_label(_world: &World, seed: u64) -> Result<(), String> {
    let mut rng = rng_for(seed, 23);
    for k in 0..300 {
        let n = rng.random_range(1..50);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let y: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random::<bool>()))).collect();
        let before = logloss(&p, &y).map_err(|e| e.to_string())?;
        let j = rng.random_range(0..n);
        let mut q = p.clone();
        q[j] += (y[j] - p[j]) * rng.random_range(0.05..0.9);
        let after = logloss(&q, &y).map_err(|e| e.to_string())?;
        if after >= before {
            return Err(format!(
                "instance {k}: moving p[{j}] toward its label gave {before} -> {after}"
            ));
        }
    }
    Ok(())
}

pub fn attention_history_order(_world: &World, seed: u64) -> Result<(), String> {
    let mut rng = rng_for(seed, 24);
    for outer in [AttOuter::Elementwise, AttOuter::Full] {
        for softmax in [false, true] {
            let d = 6;
            let mut store = ParamStore::new();
            let unit = AttentionUnit::new(&mut store, "att", d, 8, outer, softmax, &mut rng);
            let samples = 3;
            let pairs: Vec<usize> = (0..9).map(|k| k % samples).collect();
            let hist = super::normal_matrix(&mut rng, pairs.len(), d);
            let targets = super::normal_matrix(&mut rng, samples, d);
            let order: Vec<usize> = shuffled(&(0..pairs.len()).collect::<Vec<_>>(), &mut rng);
            let run = |perm: &[usize]| -> Result<Vec<f64>, String> {
                let mut g = Graph::new();
                let rows: Vec<f64> = perm.iter().flat_map(|&k| hist[k].clone()).collect();
                let h = g.constant(Tensor::matrix(perm.len(), d, rows).map_err(|e| e.to_string())?);
                let t = g.constant(Tensor::matrix(samples, d, targets.concat()).map_err(|e| e.to_string())?);
                let sample: Vec<usize> = perm.iter().map(|&k| pairs[k]).collect();
                let ap = AttentionPairs {
                    history: (0..perm.len()).collect(),
                    target: rc(&sample),
                    sample: rc(&sample),
                    samples,
                };
                let (out, _) = unit.forward(&mut g, &store, h, t, &ap).map_err(|e| e.to_string())?;
                Ok(g.value(out).data().to_vec())
            };
            let a = run(&(0..pairs.len()).collect::<Vec<_>>())?;
            let b = run(&order)?;
            let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            if worst >= 1e-9 {
                return Err(format!(
                    "{outer:?} softmax={softmax}: permuting history moved h by {worst:e}"
                ));
            }
        }
    }
    Ok(())
}

/// Reorders the item nodes of a graph, remapping its edges.
fn permute_nodes(uvg: &EncodedUvg, rng: &mut Rng) -> EncodedUvg {
    let n = uvg.nodes.len();
    let order = shuffled(&(0..n).collect::<Vec<_>>(), rng);
    let mut new_of = vec![0; n + 1];
    for (new, &old) in order.iter().enumerate() {
        new_of[old + 1] = new + 1;
    }
    EncodedUvg {
        nodes: order.iter().map(|&old| uvg.nodes[old]).collect(),
        edges: shuffled(
            &uvg.edges
                .iter()
                .map(|&(s, d)| (new_of[s], new_of[d]))
                .collect::<Vec<_>>(),
            rng,
        ),
    }
}

pub fn zone_storage_order(_world: &World, seed: u64) -> Result<(), String> {
    let world = super::micro_world(seed);
    let mut rng = rng_for(seed, 25);
    let net = micro_model(&world, seed);
    let mut permuted = world.ds.clone();
    permuted.hist_uvgs = permuted.hist_uvgs.iter().map(|u| permute_nodes(u, &mut rng)).collect();
    permuted.target_uvgs = permuted
        .target_uvgs
        .iter()
        .map(|u| permute_nodes(u, &mut rng))
        .collect();
    let batch: Vec<usize> = (0..world.ds.len()).collect();
    let run = |ds: &Dataset| -> Result<Vec<f64>, String> {
        let mut g = Graph::new();
        let f = net
            .forward(&mut g, ds, &batch, false, &mut rng_for(0, 0))
            .map_err(|e| e.to_string())?;
        Ok(g.value(f.pred).data().to_vec())
    };
    let a = run(&world.ds)?;
    let b = run(&permuted)?;
    if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
        return Err("reordering node storage changed a prediction".into());
    }
    Ok(())
}

pub fn post_volume(world: &World, _seed: u64) -> Result<(), String> {
    if world.config.post_boost <= 0.0 {
        return Ok(());
    }
    let stats = ::dmbgn::data::dataset_stats(&world.ds.sessions).map_err(|e| e.to_string())?;
    for row in &stats.rows {
        match row.diff_pct {
            Some(d) if d > 0.0 => {}
            other => {
                return Err(format!(
                    "{}: after/before difference {other:?} with post_boost > 0",
                    row.action
                ))
            }
        }
    }
    Ok(())
}
