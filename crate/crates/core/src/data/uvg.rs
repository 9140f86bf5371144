//! User-behavior voucher graphs: a voucher node at the center and up to
//! four zones of item nodes around it.

use std::fmt;
use std::str::FromStr;

use super::types::{Event, VoucherInfo, VoucherSession, Zone};

/// Index of the voucher node; item nodes follow from 1.
pub const VOUCHER_NODE: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UvgMode {
    /// All four zones.
    Historical,
    /// Pre-collection zones only.
    Target,
}

impl UvgMode {
    pub fn zones(self) -> &'static [Zone] {
        match self {
            UvgMode::Historical => &Zone::ALL,
            UvgMode::Target => &Zone::ALL[..2],
        }
    }
}

/// Orientation of the edges between items and the voucher node. Chain
/// edges always run from the earlier to the later event.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum EdgeDir {
    #[default]
    ItemToVoucher,
    VoucherToItem,
}

impl FromStr for EdgeDir {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "item_to_voucher" => Ok(EdgeDir::ItemToVoucher),
            "voucher_to_item" => Ok(EdgeDir::VoucherToItem),
            other => Err(format!("unknown edge_dir {other:?}")),
        }
    }
}

impl fmt::Display for EdgeDir {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeDir::ItemToVoucher => "item_to_voucher",
            EdgeDir::VoucherToItem => "voucher_to_item",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    Chain,
    ToVoucher,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemNode {
    pub event: Event,
    pub zone: Zone,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Uvg {
    pub voucher: VoucherInfo,
    pub collect_ts: i64,
    pub mode: UvgMode,
    /// Grouped by zone in canonical order, chronological within a zone.
    /// Node `i + 1` of the graph is `items[i]`.
    pub items: Vec<ItemNode>,
    pub edges: Vec<Edge>,
}

impl Uvg {
    pub fn node_count(&self) -> usize {
        self.items.len() + 1
    }

    pub fn in_degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|e| e.dst == node).count()
    }

    pub fn out_degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|e| e.src == node).count()
    }

    /// Graph node indices of one zone's items.
    pub fn zone_nodes(&self, zone: Zone) -> impl Iterator<Item = usize> + '_ {
        self.items
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.zone == zone)
            .map(|(i, _)| i + 1)
    }
}

/// Builds the satellite graph of `session`.
///
/// Each zone is a chronological chain. The `z` items of a zone closest in
/// time to collection are linked with the voucher node; ties on distance go
/// to the chronologically earlier node.
pub fn build_uvg(session: &VoucherSession, mode: UvgMode, z: usize, dir: EdgeDir) -> Uvg {
    let mut items = Vec::new();
    let mut edges = Vec::new();
    for &zone in mode.zones() {
        let first = items.len() + 1;
        let events = session.zone(zone);
        items.extend(events.iter().map(|e| ItemNode { event: e.clone(), zone }));
        for k in 1..events.len() {
            edges.push(Edge {
                src: first + k - 1,
                dst: first + k,
                kind: EdgeKind::Chain,
            });
        }
        let mut by_distance: Vec<usize> = (0..events.len()).collect();
        by_distance.sort_by_key(|&k| ((events[k].timestamp - session.collect_ts).abs(), k));
        let mut linked: Vec<usize> = by_distance.into_iter().take(z).collect();
        linked.sort_unstable();
        for k in linked {
            let node = first + k;
            let (src, dst) = match dir {
                EdgeDir::ItemToVoucher => (node, VOUCHER_NODE),
                EdgeDir::VoucherToItem => (VOUCHER_NODE, node),
            };
            edges.push(Edge {
                src,
                dst,
                kind: EdgeKind::ToVoucher,
            });
        }
    }
    Uvg {
        voucher: session.voucher.clone(),
        collect_ts: session.collect_ts,
        mode,
        items,
        edges,
    }
}

/// Checks the structural invariants of a graph built with `z` and `dir`,
/// returning a description of the first violation.
pub fn check_uvg(uvg: &Uvg, z: usize, dir: EdgeDir) -> Result<(), String> {
    let n = uvg.node_count();
    for e in &uvg.edges {
        if e.src >= n || e.dst >= n || e.src == e.dst {
            return Err(format!("edge {e:?} out of range for {n} nodes"));
        }
    }
    for node in &uvg.items {
        if !uvg.mode.zones().contains(&node.zone) {
            return Err(format!(
                "zone {} not allowed in {:?} mode",
                node.zone.as_str(),
                uvg.mode
            ));
        }
        let ts = node.event.timestamp;
        let ok = if node.zone.is_post() {
            ts >= uvg.collect_ts
        } else {
            ts < uvg.collect_ts
        };
        if !ok {
            return Err(format!(
                "{} item at {ts} on the wrong side of {}",
                node.zone.as_str(),
                uvg.collect_ts
            ));
        }
    }
    let hub_degree = match dir {
        EdgeDir::ItemToVoucher => uvg.in_degree(VOUCHER_NODE),
        EdgeDir::VoucherToItem => uvg.out_degree(VOUCHER_NODE),
    };
    if hub_degree > 4 * z {
        return Err(format!("voucher node has {hub_degree} links, more than 4Z = {}", 4 * z));
    }
    for node in 1..n {
        let out = uvg.out_degree(node);
        if out > 2 {
            return Err(format!("item node {node} has out-degree {out}"));
        }
    }
    for &zone in uvg.mode.zones() {
        let nodes: Vec<usize> = uvg.zone_nodes(zone).collect();
        if nodes.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(format!("zone {} is not contiguous", zone.as_str()));
        }
        if nodes
            .windows(2)
            .any(|w| uvg.items[w[0] - 1].event.chrono_key() > uvg.items[w[1] - 1].event.chrono_key())
        {
            return Err(format!("zone {} is not chronological", zone.as_str()));
        }
        let chain: Vec<&Edge> = uvg
            .edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Chain && nodes.contains(&e.src))
            .collect();
        if chain.len() != nodes.len().saturating_sub(1)
            || chain.iter().any(|e| e.dst != e.src + 1 || !nodes.contains(&e.dst))
        {
            return Err(format!(
                "zone {} chain is not a single chronological path",
                zone.as_str()
            ));
        }
        let links = uvg
            .edges
            .iter()
            .filter(|e| e.kind == EdgeKind::ToVoucher && (nodes.contains(&e.src) || nodes.contains(&e.dst)))
            .count();
        if links != nodes.len().min(z) {
            return Err(format!(
                "zone {} has {links} voucher links, expected {}",
                zone.as_str(),
                nodes.len().min(z)
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::types::Action;

    fn ev(item: &str, action: Action, ts: i64) -> Event {
        Event {
            user_id: "u".into(),
            item_id: item.into(),
            action,
            timestamp: ts,
            category_id: "c".into(),
            brand_id: "b".into(),
            shop_id: "s".into(),
            price_level: 1,
        }
    }

    fn session(pre_atc: Vec<Event>, post_ord: Vec<Event>) -> VoucherSession {
        VoucherSession {
            user_id: "u".into(),
            voucher: VoucherInfo {
                voucher_id: "v".into(),
                activity_id: "a".into(),
                min_spend: 10.0,
                discount_amount: 1.0,
            },
            collect_ts: 100,
            end_ts: 200,
            pre_atc,
            pre_ord: vec![],
            post_atc: vec![],
            post_ord,
            label: 1,
        }
    }

    #[test]
    fn empty_session_is_lone_voucher() {
        let g = build_uvg(&session(vec![], vec![]), UvgMode::Historical, 6, EdgeDir::default());
        assert_eq!(g.node_count(), 1);
        assert!(g.edges.is_empty());
        check_uvg(&g, 6, EdgeDir::default()).unwrap();
    }

    #[test]
    fn single_item_zone() {
        let g = build_uvg(
            &session(vec![ev("a", Action::Atc, 50)], vec![]),
            UvgMode::Historical,
            6,
            EdgeDir::default(),
        );
        assert_eq!(
            g.edges,
            vec![Edge {
                src: 1,
                dst: 0,
                kind: EdgeKind::ToVoucher
            }]
        );
    }

    #[test]
    fn eight_items_with_z6() {
        let items: Vec<Event> = (0..8).map(|i| ev(&format!("i{i}"), Action::Atc, 10 + 10 * i)).collect();
        let g = build_uvg(&session(items, vec![]), UvgMode::Target, 6, EdgeDir::default());
        let chain: Vec<(usize, usize)> = g
            .edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Chain)
            .map(|e| (e.src, e.dst))
            .collect();
        assert_eq!(chain, [(1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7), (7, 8)]);
        // timestamps 10..80, collection at 100: the six latest are nodes 3..=8
        let hub: Vec<usize> = g
            .edges
            .iter()
            .filter(|e| e.kind == EdgeKind::ToVoucher)
            .map(|e| e.src)
            .collect();
        assert_eq!(hub, [3, 4, 5, 6, 7, 8]);
        check_uvg(&g, 6, EdgeDir::default()).unwrap();
    }

    #[test]
    fn post_zone_links_earliest() {
        let post: Vec<Event> = (0..4).map(|i| ev(&format!("o{i}"), Action::Ord, 100 + i)).collect();
        let g = build_uvg(&session(vec![], post), UvgMode::Historical, 2, EdgeDir::VoucherToItem);
        let hub: Vec<(usize, usize)> = g
            .edges
            .iter()
            .filter(|e| e.kind == EdgeKind::ToVoucher)
            .map(|e| (e.src, e.dst))
            .collect();
        assert_eq!(hub, [(0, 1), (0, 2)]);
        check_uvg(&g, 2, EdgeDir::VoucherToItem).unwrap();
    }

    #[test]
    fn target_mode_drops_post_zones() {
        let s = session(vec![ev("a", Action::Atc, 50)], vec![ev("o", Action::Ord, 150)]);
        let t = build_uvg(&s, UvgMode::Target, 6, EdgeDir::default());
        assert_eq!(t.items.len(), 1);
        let h = build_uvg(&s, UvgMode::Historical, 6, EdgeDir::default());
        assert_eq!(h.items.len(), 2);
        assert_eq!(h.items[1].zone, Zone::OrdPost);
    }

    #[test]
    fn checker_catches_broken_chain() {
        let items: Vec<Event> = (0..3).map(|i| ev(&format!("i{i}"), Action::Atc, 10 + i)).collect();
        let mut g = build_uvg(&session(items, vec![]), UvgMode::Target, 6, EdgeDir::default());
        g.edges.retain(|e| !(e.kind == EdgeKind::Chain && e.src == 1));
        g.edges.push(Edge {
            src: 1,
            dst: 3,
            kind: EdgeKind::Chain,
        });
        assert!(check_uvg(&g, 6, EdgeDir::default()).is_err());
    }
}
