//! Graph encoder shared by voucher pre-training and the main network:
//! initial node features, graph convolution, top-K pooling, zone pooling,
//! the behavior MLP and the UVG score.

use std::rc::Rc;

use rand::Rng as _;

use crate::config::{list, KvConfig};
use crate::data::{Action, EncodedUvg, NodeFeat, Vocabs, VoucherFeat, Zone};
use crate::error::{Error, Result};
use crate::pretrain::sgns::{item_table_name, side_table_name, SIDE_FIELDS};
use crate::tensor::{glorot_uniform, Graph, Linear, Mlp, ParamId, ParamKind, ParamStore, Tensor, Var};
use crate::Rng;

pub const VOUCHER_TABLE: &str = "voucher_emb";
pub const TARGET_VOUCHER_TABLE: &str = "target_voucher_emb";
pub const ACTIVITY_TABLE: &str = "activity_emb";
pub const VOUCHER_PROJ: &str = "voucher_proj";
pub const GNN_PREFIX: &str = "gnn/";
pub const BEHAVIOR_MLP: &str = "behavior_mlp";

/// Half-width of the uniform initialization of embedding tables.
pub const EMB_INIT: f64 = 0.1;

/// Which zones of historical graphs the encoder reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Zones {
    #[default]
    All,
    PreOnly,
}

impl std::str::FromStr for Zones {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Zones::All),
            "pre_only" => Ok(Zones::PreOnly),
            other => Err(format!("unknown zones {other:?}")),
        }
    }
}

impl std::fmt::Display for Zones {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Zones::All => "all",
            Zones::PreOnly => "pre_only",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub gnn_layers: usize,
    pub topk_ratio: f64,
    pub behavior_hidden: Vec<usize>,
    pub zones: Zones,
    /// Replace convolution and zone pooling by the mean of the initial
    /// item features; the voucher embedding is then the voucher's initial
    /// feature.
    pub avgpool: bool,
}

impl EncoderConfig {
    pub const KEYS: [&'static str; 6] = ["dim", "gnn_layers", "topk_ratio", "behavior_hidden", "zones", "avgpool"];

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = EncoderConfig::default();
        Ok(EncoderConfig {
            dim: kv.get_or("dim", d.dim)?,
            gnn_layers: kv.get_or("gnn_layers", d.gnn_layers)?,
            topk_ratio: kv.get_or("topk_ratio", d.topk_ratio)?,
            behavior_hidden: kv.get_list_or("behavior_hidden", d.behavior_hidden)?,
            zones: kv.get_or("zones", d.zones)?,
            avgpool: kv.get_or("avgpool", d.avgpool)?,
        })
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("dim", self.dim);
        kv.set("gnn_layers", self.gnn_layers);
        kv.set("topk_ratio", self.topk_ratio);
        kv.set("behavior_hidden", list(&self.behavior_hidden));
        kv.set("zones", self.zones);
        kv.set("avgpool", self.avgpool);
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 16,
            gnn_layers: 1,
            topk_ratio: 0.9,
            behavior_hidden: vec![128, 64],
            zones: Zones::All,
            avgpool: false,
        }
    }
}

/// Parameter handles of the encoder.
#[derive(Clone, Debug)]
pub struct UvgEncoder {
    pub config: EncoderConfig,
    pub items: [ParamId; 2],
    pub side: [ParamId; 3],
    pub voucher: ParamId,
    pub target_voucher: ParamId,
    pub activity: ParamId,
    pub voucher_proj: Linear,
    pub w1: Vec<ParamId>,
    pub w2: Vec<ParamId>,
    pub topk: ParamId,
    pub behavior: Mlp,
}

/// One graph to encode.
#[derive(Clone, Copy, Debug)]
pub struct UvgInput<'a> {
    pub uvg: &'a EncodedUvg,
    pub voucher: VoucherFeat,
    /// Target graphs read the scratch voucher table.
    pub target: bool,
}

/// Encoder outputs, one row per input graph.
#[derive(Clone, Copy, Debug)]
pub struct UvgOutput {
    pub e_b: Var,
    pub e_o: Var,
    /// `e_b ‖ e_o`.
    pub e: Var,
    /// `σ(e_b · e_o)`, `[U, 1]`.
    pub s: Var,
    /// `e_b · e_o`, the score before the sigmoid.
    pub logit: Var,
}

pub fn embedding(store: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut Rng) -> ParamId {
    let data = (0..rows * dim).map(|_| rng.random_range(-EMB_INIT..EMB_INIT)).collect();
    store.add(
        name,
        ParamKind::Embedding,
        Tensor::matrix(rows, dim, data).expect("sized"),
    )
}

impl UvgEncoder {
    pub fn new(store: &mut ParamStore, vocabs: &Vocabs, config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        let d = config.dim;
        if d == 0 || config.gnn_layers == 0 {
            return Err(Error::Config("encoder dim and gnn_layers must be positive".into()));
        }
        if !(config.topk_ratio > 0.0 && config.topk_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "topk_ratio {} outside (0, 1]",
                config.topk_ratio
            )));
        }
        let items = [
            embedding(store, &item_table_name(Action::Atc), vocabs.item.len(), d, rng),
            embedding(store, &item_table_name(Action::Ord), vocabs.item.len(), d, rng),
        ];
        let side_rows = [vocabs.category.len(), vocabs.brand.len(), vocabs.shop.len()];
        let side = [0, 1, 2].map(|i| embedding(store, &side_table_name(SIDE_FIELDS[i]), side_rows[i], d, rng));
        let voucher = embedding(store, VOUCHER_TABLE, vocabs.voucher.len(), d, rng);
        let target_voucher = embedding(store, TARGET_VOUCHER_TABLE, vocabs.voucher.len(), d, rng);
        let activity = embedding(store, ACTIVITY_TABLE, vocabs.activity.len(), d, rng);
        let voucher_proj = Linear::new(store, VOUCHER_PROJ, 2 * d + 2, d, rng);
        let mut w1 = Vec::new();
        let mut w2 = Vec::new();
        for l in 0..config.gnn_layers {
            w1.push(store.add(
                format!("{GNN_PREFIX}W1_l{l}"),
                ParamKind::Weight,
                glorot_uniform(rng, d, d),
            ));
            w2.push(store.add(
                format!("{GNN_PREFIX}W2_l{l}"),
                ParamKind::Weight,
                glorot_uniform(rng, d, d),
            ));
        }
        let topk = store.add(
            format!("{GNN_PREFIX}topk_p"),
            ParamKind::Other,
            glorot_uniform(rng, d, 1),
        );
        let mut dims = vec![8 * d];
        dims.extend(&config.behavior_hidden);
        dims.push(d);
        let behavior = Mlp::new(store, BEHAVIOR_MLP, &dims, rng);
        Ok(UvgEncoder {
            config,
            items,
            side,
            voucher,
            target_voucher,
            activity,
            voucher_proj,
            w1,
            w2,
            topk,
            behavior,
        })
    }

    /// Output width of `e`.
    pub fn embedding_dim(&self) -> usize {
        2 * self.config.dim
    }

    /// Initial voucher-node features, `[U, d]`.
    pub fn voucher_features(&self, g: &mut Graph, store: &ParamStore, vouchers: &[(VoucherFeat, bool)]) -> Result<Var> {
        let rows = store.get(self.voucher).rows();
        let hist = g.param(store, self.voucher);
        let target = g.param(store, self.target_voucher);
        let tables = g.concat_rows(&[hist, target])?;
        let vid: Rc<[usize]> = vouchers
            .iter()
            .map(|(v, t)| v.voucher + usize::from(*t) * rows)
            .collect();
        let act: Rc<[usize]> = vouchers.iter().map(|(v, _)| v.activity).collect();
        let dense: Vec<f64> = vouchers.iter().flat_map(|(v, _)| v.dense).collect();
        let vid = g.gather_rows(tables, vid)?;
        let act_table = g.param(store, self.activity);
        let act = g.gather_rows(act_table, act)?;
        let dense = g.constant(Tensor::matrix(vouchers.len(), 2, dense)?);
        let x = g.concat_cols(&[vid, act, dense])?;
        self.voucher_proj.forward(g, store, x)
    }

    /// Initial item-node features: mean of id and side vectors, `[M, d]`.
    pub fn item_features(&self, g: &mut Graph, store: &ParamStore, nodes: &[NodeFeat]) -> Result<Var> {
        let rows = store.get(self.items[0]).rows();
        let atc = g.param(store, self.items[0]);
        let ord = g.param(store, self.items[1]);
        let tables = g.concat_rows(&[atc, ord])?;
        let idx: Rc<[usize]> = nodes.iter().map(|n| n.item + n.action().index() * rows).collect();
        let mut x = g.gather_rows(tables, idx)?;
        for (k, &table) in self.side.iter().enumerate() {
            let idx: Rc<[usize]> = nodes.iter().map(|n| [n.category, n.brand, n.shop][k]).collect();
            let t = g.param(store, table);
            let s = g.gather_rows(t, idx)?;
            x = g.add(x, s)?;
        }
        g.scale(x, 0.25)
    }

    /// Encodes a batch of graphs into one disjoint union: voucher nodes
    /// occupy rows `0..U`, item nodes follow.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, inputs: &[UvgInput]) -> Result<UvgOutput> {
        let d = self.config.dim;
        let u = inputs.len();
        let union = Union::build(inputs, self.config.zones);
        let vf: Vec<(VoucherFeat, bool)> = inputs.iter().map(|i| (i.voucher, i.target)).collect();
        let x_v = self.voucher_features(g, store, &vf)?;

        if union.nodes.is_empty() {
            let e_b = if self.config.avgpool {
                g.constant(Tensor::zeros(&[u, d]))
            } else {
                let zeros = g.constant(Tensor::zeros(&[u, 8 * d]));
                self.behavior
                    .forward(g, store, zeros, 0.0, false, &mut crate::rng_for(0, 0))?
            };
            let e_o = if self.config.avgpool {
                x_v
            } else {
                let mut h = x_v;
                for l in 0..self.config.gnn_layers {
                    let w1 = g.param(store, self.w1[l]);
                    let w2 = g.param(store, self.w2[l]);
                    h = gnn_layer(g, h, Rc::from([]), Rc::from([]), w1, w2)?;
                }
                h
            };
            return finish(g, e_b, e_o);
        }

        let x_i = self.item_features(g, store, &union.nodes)?;
        if self.config.avgpool {
            let e_b = g.segment_mean(x_i, union.node_graph.clone(), u)?;
            return finish(g, e_b, x_v);
        }

        let mut h = g.concat_rows(&[x_v, x_i])?;
        for l in 0..self.config.gnn_layers {
            let w1 = g.param(store, self.w1[l]);
            let w2 = g.param(store, self.w2[l]);
            h = gnn_layer(g, h, union.src.clone(), union.dst.clone(), w1, w2)?;
        }
        let voucher_rows: Rc<[usize]> = (0..u).collect();
        let e_o = g.gather_rows(h, voucher_rows)?;
        let item_rows: Rc<[usize]> = (u..u + union.nodes.len()).collect();
        let h_items = g.gather_rows(h, item_rows)?;

        let p = g.param(store, self.topk);
        let p = g.normalize(p)?;
        let y = g.matmul(h_items, p)?;
        let kept = topk_select(g.value(y).data(), &union.graph_ranges, self.config.topk_ratio);
        let pooled = if kept.is_empty() {
            g.constant(Tensor::zeros(&[u, 8 * d]))
        } else {
            let segments: Rc<[usize]> = kept
                .iter()
                .map(|&k| union.node_graph[k] * 4 + union.nodes[k].zone.index())
                .collect();
            let kept: Rc<[usize]> = kept.into();
            let hk = g.gather_rows(h_items, kept.clone())?;
            let yk = g.gather_rows(y, kept)?;
            let gate = g.tanh(yk)?;
            let gated = g.mul_col(hk, gate)?;
            let mean = g.segment_mean(gated, segments.clone(), 4 * u)?;
            let max = g.segment_max(gated, segments, 4 * u)?;
            let both = g.concat_cols(&[mean, max])?;
            g.reshape(both, &[u, 8 * d])?
        };
        let e_b = self
            .behavior
            .forward(g, store, pooled, 0.0, false, &mut crate::rng_for(0, 0))?;
        finish(g, e_b, e_o)
    }

    /// Every parameter name loaded from a voucher pre-training checkpoint,
    /// grouped for the `load_gnn` / `load_mlp` switches.
    pub fn is_gnn_param(name: &str) -> bool {
        name.starts_with(GNN_PREFIX)
    }

    pub fn is_mlp_param(name: &str) -> bool {
        name.starts_with(BEHAVIOR_MLP)
    }

    pub fn is_item_param(name: &str) -> bool {
        name.starts_with("item_emb/") || name.starts_with("side_emb/")
    }

    pub fn is_voucher_param(name: &str) -> bool {
        name == VOUCHER_TABLE || name == ACTIVITY_TABLE || name.starts_with(VOUCHER_PROJ)
    }
}

fn finish(g: &mut Graph, e_b: Var, e_o: Var) -> Result<UvgOutput> {
    let dot = g.row_dot(e_b, e_o)?;
    let s = g.sigmoid(dot)?;
    let e = g.concat_cols(&[e_b, e_o])?;
    Ok(UvgOutput {
        e_b,
        e_o,
        e,
        s,
        logit: dot,
    })
}

/// `σ(X W1 + A X W2)` where `A` sums each node's in-neighbors (`src → dst`).
pub fn gnn_layer(g: &mut Graph, x: Var, src: Rc<[usize]>, dst: Rc<[usize]>, w1: Var, w2: Var) -> Result<Var> {
    let n = g.value(x).rows();
    let own = g.matmul(x, w1)?;
    let z = if src.is_empty() {
        own
    } else {
        let neigh = g.gather_rows(x, src)?;
        let agg = g.scatter_add_rows(neigh, dst, n)?;
        let msg = g.matmul(agg, w2)?;
        g.add(own, msg)?
    };
    g.sigmoid(z)
}

/// Per-graph top-K: keeps the `ceil(ratio * n)` highest-scoring nodes of
/// each `start..end` range, ties to the lower index. Returned in ascending
/// node order.
pub fn topk_select(scores: &[f64], ranges: &[(usize, usize)], ratio: f64) -> Vec<usize> {
    let mut kept = Vec::new();
    for &(start, end) in ranges {
        let n = end - start;
        if n == 0 {
            continue;
        }
        let k = ((ratio * n as f64).ceil() as usize).clamp(1, n);
        let mut order: Vec<usize> = (start..end).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let mut chosen = order[..k].to_vec();
        chosen.sort_unstable();
        kept.extend(chosen);
    }
    kept
}

/// Disjoint union of a batch of graphs, with item nodes in canonical order.
struct Union {
    nodes: Vec<NodeFeat>,
    /// Graph of each item node.
    node_graph: Rc<[usize]>,
    /// Item-node range of each graph.
    graph_ranges: Vec<(usize, usize)>,
    /// Edge endpoints in union row numbering (voucher rows first).
    src: Rc<[usize]>,
    dst: Rc<[usize]>,
}

impl Union {
    fn build(inputs: &[UvgInput], zones: Zones) -> Self {
        let u = inputs.len();
        let mut nodes = Vec::new();
        let mut node_graph = Vec::new();
        let mut graph_ranges = Vec::with_capacity(u);
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for (gi, input) in inputs.iter().enumerate() {
            let uvg = input.uvg;
            let keep_zone = |z: Zone| zones == Zones::All || !z.is_post();
            let mut order: Vec<usize> = (0..uvg.nodes.len()).filter(|&i| keep_zone(uvg.nodes[i].zone)).collect();
            order.sort_by(|&a, &b| canonical_key(&uvg.nodes[a]).cmp(&canonical_key(&uvg.nodes[b])));
            let start = nodes.len();
            // position in union rows, by original 1-based node index
            let mut row = vec![usize::MAX; uvg.nodes.len() + 1];
            row[0] = gi;
            for (k, &i) in order.iter().enumerate() {
                row[i + 1] = u + start + k;
                nodes.push(uvg.nodes[i]);
                node_graph.push(gi);
            }
            graph_ranges.push((start, nodes.len()));
            let mut local: Vec<(usize, usize)> = uvg
                .edges
                .iter()
                .filter_map(|&(s, t)| {
                    let (rs, rt) = (*row.get(s)?, *row.get(t)?);
                    (rs != usize::MAX && rt != usize::MAX).then_some((rt, rs))
                })
                .collect();
            local.sort_unstable();
            edges.extend(local);
        }
        Union {
            nodes,
            node_graph: node_graph.into(),
            graph_ranges,
            src: edges.iter().map(|e| e.1).collect(),
            dst: edges.iter().map(|e| e.0).collect(),
        }
    }
}

fn canonical_key(n: &NodeFeat) -> (usize, i64, usize, usize, usize, usize) {
    (n.zone.index(), n.timestamp, n.item, n.category, n.brand, n.shop)
}
