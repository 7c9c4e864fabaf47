//! Per-block bipartite graph plus derived user-user and item-item
//! similarity graphs, with the samplers used during training.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::data::InteractionRecord;

/// Append-only mapping from raw ids to dense indices. Once assigned, a
/// dense id never changes meaning.
#[derive(Debug, Clone, Default)]
pub struct IdMap {
    map: HashMap<u64, u32>,
    raw: Vec<u64>,
}

impl IdMap {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn get(&self, raw: u64) -> Option<u32> {
        self.map.get(&raw).copied()
    }

    pub fn raw_of(&self, dense: u32) -> u64 {
        self.raw[dense as usize]
    }

    pub fn get_or_insert(&mut self, raw: u64) -> u32 {
        if let Some(&d) = self.map.get(&raw) {
            return d;
        }
        let d = self.raw.len() as u32;
        self.map.insert(raw, d);
        self.raw.push(raw);
        d
    }
}

/// One block's graphs. Node ids are cumulative across blocks: the id maps
/// carry forward, new nodes get fresh ids appended after old ones, and the
/// adjacency covers the current block's interactions only.
#[derive(Debug, Clone)]
pub struct GraphBundle {
    pub users: IdMap,
    pub items: IdMap,
    /// Within-block neighbor lists, sorted, deduplicated.
    pub user_items: Vec<Vec<u32>>,
    pub item_users: Vec<Vec<u32>>,
    /// Top-k similar users/items by Jaccard over within-block neighbor sets.
    pub uu: Vec<Vec<u32>>,
    pub ii: Vec<Vec<u32>>,
    /// Deduplicated edge list for sampling.
    pub edges: Vec<(u32, u32)>,
}

impl GraphBundle {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }
}

/// Builds the block's graphs. Repeated (user, item) pairs collapse to a
/// single edge. Similarity lists keep the top `k_sim` neighbors with
/// strictly positive Jaccard similarity, no self-loops.
pub fn build_graphs(
    block: &[InteractionRecord],
    carry_forward: Option<&GraphBundle>,
    k_sim: usize,
) -> GraphBundle {
    assert!(!block.is_empty(), "cannot build graphs from an empty block");
    let (mut users, mut items) = match carry_forward {
        Some(prev) => (prev.users.clone(), prev.items.clone()),
        None => (IdMap::default(), IdMap::default()),
    };

    let mut edge_set: HashSet<(u32, u32)> = HashSet::new();
    let mut edges = Vec::new();
    for r in block {
        let u = users.get_or_insert(r.user_id);
        let i = items.get_or_insert(r.item_id);
        if edge_set.insert((u, i)) {
            edges.push((u, i));
        }
    }

    let mut user_items = vec![Vec::new(); users.len()];
    let mut item_users = vec![Vec::new(); items.len()];
    for &(u, i) in &edges {
        user_items[u as usize].push(i);
        item_users[i as usize].push(u);
    }
    for l in user_items.iter_mut().chain(item_users.iter_mut()) {
        l.sort_unstable();
    }

    let uu = similarity_lists(&user_items, &item_users, k_sim);
    let ii = similarity_lists(&item_users, &user_items, k_sim);

    GraphBundle {
        users,
        items,
        user_items,
        item_users,
        uu,
        ii,
        edges,
    }
}

/// Ranks, for every left node, the other left nodes by Jaccard similarity
/// of their right-neighbor sets. Co-neighbors are found through the
/// reverse adjacency, so disconnected pairs are never compared.
fn similarity_lists(fwd: &[Vec<u32>], rev: &[Vec<u32>], k_sim: usize) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new(); fwd.len()];
    if k_sim == 0 {
        return out;
    }
    for (a, nbrs) in fwd.iter().enumerate() {
        if nbrs.is_empty() {
            continue;
        }
        let mut inter: HashMap<u32, usize> = HashMap::new();
        for &r in nbrs {
            for &b in &rev[r as usize] {
                if b as usize != a {
                    *inter.entry(b).or_default() += 1;
                }
            }
        }
        let mut scored: Vec<(f64, u32)> = inter
            .into_iter()
            .map(|(b, c)| {
                let union = nbrs.len() + fwd[b as usize].len() - c;
                (c as f64 / union as f64, b)
            })
            .filter(|(s, _)| *s > 0.0)
            .collect();
        scored.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
        out[a] = scored.into_iter().take(k_sim).map(|(_, b)| b).collect();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BprSample {
    pub user: u32,
    pub pos: u32,
    pub neg: u32,
}

const NEG_RESAMPLE_BOUND: usize = 100;

/// Uniform positive sampling over edges with one uniform negative per
/// positive. A user interacting with every item is skipped (with a warning)
/// after the resample bound.
pub fn sample_bpr_batch(graph: &GraphBundle, batch_size: usize, rng_seed: u64) -> Vec<BprSample> {
    assert!(graph.n_edges() > 0, "graph has no interactions");
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let n_items = graph.n_items() as u32;
    let mut batch = Vec::with_capacity(batch_size);
    while batch.len() < batch_size {
        let (user, pos) = graph.edges[rng.random_range(0..graph.n_edges())];
        let seen = &graph.user_items[user as usize];
        if seen.len() >= n_items as usize {
            log::warn!("user {user} interacts with every item; skipping");
            continue;
        }
        let mut found = None;
        for _ in 0..NEG_RESAMPLE_BOUND {
            let cand = rng.random_range(0..n_items);
            if seen.binary_search(&cand).is_err() {
                found = Some(cand);
                break;
            }
        }
        match found {
            Some(neg) => batch.push(BprSample { user, pos, neg }),
            None => log::warn!("negative sampling exhausted for user {user}; skipping"),
        }
    }
    batch
}

/// Which adjacency a contrastive candidate set is drawn against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    UserItem,
    ItemUser,
    UserUser,
    ItemItem,
}

/// Positives (the node's neighbors) plus `n_neg` uniform non-neighbors,
/// deduplicated. If fewer than `n_neg` non-neighbors exist, all of them
/// are returned.
pub fn sample_contrastive_candidates(
    graph: &GraphBundle,
    rel: Relation,
    node: u32,
    n_neg: usize,
    rng_seed: u64,
) -> Vec<u32> {
    let (neighbors, pool, exclude_self) = match rel {
        Relation::UserItem => (&graph.user_items[node as usize], graph.n_items(), false),
        Relation::ItemUser => (&graph.item_users[node as usize], graph.n_users(), false),
        Relation::UserUser => (&graph.uu[node as usize], graph.n_users(), true),
        Relation::ItemItem => (&graph.ii[node as usize], graph.n_items(), true),
    };
    let mut member: HashSet<u32> = neighbors.iter().copied().collect();
    if exclude_self {
        member.insert(node);
    }
    let mut out: Vec<u32> = neighbors.clone();
    let available = pool - member.len();
    if available <= n_neg {
        for cand in 0..pool as u32 {
            if !member.contains(&cand) {
                out.push(cand);
            }
        }
        return out;
    }
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let mut picked = 0;
    while picked < n_neg {
        let cand = rng.random_range(0..pool as u32);
        if member.insert(cand) {
            out.push(cand);
            picked += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(u: u64, i: u64, ts: i64) -> InteractionRecord {
        InteractionRecord {
            user_id: u,
            item_id: i,
            timestamp: ts,
            category_id: None,
        }
    }

    #[test]
    fn bipartite_symmetry_and_dedup() {
        let block = vec![rec(1, 10, 0), rec(1, 10, 1), rec(1, 11, 2), rec(2, 10, 3)];
        let g = build_graphs(&block, None, 10);
        assert_eq!(g.n_edges(), 3);
        let total_user_deg: usize = g.user_items.iter().map(Vec::len).sum();
        let total_item_deg: usize = g.item_users.iter().map(Vec::len).sum();
        assert_eq!(total_user_deg, 3);
        assert_eq!(total_item_deg, 3);
        for (u, items) in g.user_items.iter().enumerate() {
            for &i in items {
                assert!(g.item_users[i as usize].contains(&(u as u32)));
            }
        }
    }

    #[test]
    fn identical_item_sets_are_mutual_top_neighbors() {
        let block = vec![rec(1, 10, 0), rec(1, 11, 1), rec(2, 10, 2), rec(2, 11, 3)];
        let g = build_graphs(&block, None, 10);
        assert_eq!(g.uu[0], vec![1]);
        assert_eq!(g.uu[1], vec![0]);
    }

    #[test]
    fn disjoint_item_sets_leave_uu_empty() {
        let block = vec![rec(1, 10, 0), rec(2, 11, 1), rec(3, 12, 2)];
        let g = build_graphs(&block, None, 10);
        assert!(g.uu.iter().all(Vec::is_empty));
    }

    #[test]
    fn jaccard_one_third_and_isolated_user() {
        // A={1,2}, B={2,3}, C={9}: Jaccard(A,B) = 1/3, C has no uu neighbors.
        let block = vec![
            rec(0, 1, 0),
            rec(0, 2, 1),
            rec(1, 2, 2),
            rec(1, 3, 3),
            rec(2, 9, 4),
        ];
        let g = build_graphs(&block, None, 10);
        assert_eq!(g.uu[0], vec![1]);
        assert_eq!(g.uu[1], vec![0]);
        assert!(g.uu[2].is_empty());
    }

    #[test]
    fn ids_are_stable_across_blocks() {
        let b1 = vec![rec(5, 100, 0), rec(6, 101, 1)];
        let g1 = build_graphs(&b1, None, 10);
        let b2 = vec![rec(6, 102, 2), rec(7, 100, 3)];
        let g2 = build_graphs(&b2, Some(&g1), 10);
        assert_eq!(g1.users.get(5), g2.users.get(5));
        assert_eq!(g1.users.get(6), g2.users.get(6));
        assert_eq!(g1.items.get(100), g2.items.get(100));
        assert_eq!(g2.users.get(7), Some(2));
        assert_eq!(g2.n_users(), 3);
        assert_eq!(g2.n_items(), 3);
        // User 5 has no interactions in block 2.
        assert!(g2.user_items[0].is_empty());
    }

    #[test]
    fn forced_negative_with_single_option() {
        let block = vec![rec(0, 0, 0), rec(1, 0, 1), rec(1, 1, 2)];
        let g = build_graphs(&block, None, 10);
        for s in sample_bpr_batch(&g, 64, 7) {
            if s.user == 0 {
                assert_eq!(s.pos, 0);
                assert_eq!(s.neg, 1);
            }
        }
    }

    #[test]
    fn bpr_sampling_is_deterministic() {
        let block: Vec<_> = (0..20).map(|k| rec(k % 4, k % 6, k as i64)).collect();
        let g = build_graphs(&block, None, 10);
        assert_eq!(sample_bpr_batch(&g, 32, 42), sample_bpr_batch(&g, 32, 42));
        assert_ne!(sample_bpr_batch(&g, 32, 42), sample_bpr_batch(&g, 32, 43));
    }

    #[test]
    fn positive_sampling_is_close_to_uniform() {
        // 2 users x 4 items, all 8 edges present; chi-squared style 3-sigma
        // check on per-edge counts over 10k draws.
        let mut block = Vec::new();
        for u in 0..2 {
            for i in 0..4 {
                block.push(rec(u, i + 10, (u * 4 + i) as i64));
            }
        }
        // Add extra items so negatives exist.
        block.push(rec(0, 99, 100));
        block.push(rec(1, 98, 101));
        let g = build_graphs(&block, None, 10);
        let n = 10_000;
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for s in sample_bpr_batch(&g, n, 1234) {
            *counts.entry((s.user, s.pos)).or_default() += 1;
        }
        let p = 1.0 / g.n_edges() as f64;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &(u, i) in &g.edges {
            let c = counts.get(&(u, i)).copied().unwrap_or(0) as f64;
            assert!(
                (c - mean).abs() < 3.0 * sigma,
                "edge ({u},{i}) count {c} outside 3 sigma of {mean}"
            );
        }
    }

    #[test]
    fn candidates_all_neighbors_when_saturated() {
        let block = vec![rec(0, 0, 0), rec(0, 1, 1), rec(0, 2, 2)];
        let g = build_graphs(&block, None, 10);
        let d = sample_contrastive_candidates(&g, Relation::UserItem, 0, 5, 1);
        assert_eq!(d, vec![0, 1, 2]);
    }

    #[test]
    fn candidates_zero_negatives_returns_neighbors() {
        let block = vec![rec(0, 0, 0), rec(0, 1, 1), rec(1, 2, 2)];
        let g = build_graphs(&block, None, 10);
        let d = sample_contrastive_candidates(&g, Relation::UserItem, 0, 0, 1);
        assert_eq!(d, vec![0, 1]);
    }

    #[test]
    fn candidate_count_and_positives_present() {
        // Node with 2 neighbors out of 10 items, n_neg=3 -> |D| = 5.
        let mut block = vec![rec(0, 0, 0), rec(0, 1, 1)];
        for i in 2..10 {
            block.push(rec(1, i, i as i64));
        }
        let g = build_graphs(&block, None, 10);
        for seed in 0..20 {
            let d = sample_contrastive_candidates(&g, Relation::UserItem, 0, 3, seed);
            assert_eq!(d.len(), 5);
            assert!(d.contains(&0) && d.contains(&1));
            let uniq: HashSet<u32> = d.iter().copied().collect();
            assert_eq!(uniq.len(), 5);
        }
    }
}
