//! The three distillation strategies and the composite objective.
//!
//! User-side terms carry the per-user imitation weights; item-side terms
//! mirror the user mechanism unweighted. Teacher embeddings enter tapes as
//! constants only, so no gradient can reach the previous block's model.

use std::collections::HashMap;

use crate::cluster;
use crate::graph::{sample_contrastive_candidates, Relation};
use crate::model::{ForwardNodes, ModelState, TeacherSnapshot};
use crate::seeds;
use crate::tape::{softmax, NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    GraphSail,
    Sgct,
    Lwckd,
    None,
}

impl Strategy {
    pub fn parse(s: &str) -> Option<Strategy> {
        match s.to_ascii_lowercase().as_str() {
            "graphsail" => Some(Strategy::GraphSail),
            "sgct" => Some(Strategy::Sgct),
            "lwckd" => Some(Strategy::Lwckd),
            "none" => Some(Strategy::None),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::GraphSail => "graphsail",
            Strategy::Sgct => "sgct",
            Strategy::Lwckd => "lwckd",
            Strategy::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NoWg,
    NoCluster,
    NoTrans,
    Hard,
    NoPiw,
}

impl Ablation {
    pub fn parse(s: &str) -> Option<Ablation> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Some(Ablation::Full),
            "no_wg" => Some(Ablation::NoWg),
            "no_cluster" => Some(Ablation::NoCluster),
            "no_trans" => Some(Ablation::NoTrans),
            "hard" => Some(Ablation::Hard),
            "no_piw" => Some(Ablation::NoPiw),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoWg => "no_wg",
            Ablation::NoCluster => "no_cluster",
            Ablation::NoTrans => "no_trans",
            Ablation::Hard => "hard",
            Ablation::NoPiw => "no_piw",
        }
    }

    pub fn all() -> [Ablation; 6] {
        [
            Ablation::Full,
            Ablation::NoWg,
            Ablation::NoCluster,
            Ablation::NoTrans,
            Ablation::Hard,
            Ablation::NoPiw,
        ]
    }

    /// Whether the soft-clustering KL term participates in the objective.
    pub fn uses_soft_clustering(&self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoWg | Ablation::NoTrans)
    }

    /// Whether the weight path is computed at all.
    pub fn uses_weights(&self) -> bool {
        !matches!(self, Ablation::NoPiw)
    }
}

/// Strategy selector plus all loss knobs.
#[derive(Debug, Clone)]
pub struct DistillSpec {
    pub strategy: Strategy,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub clusters: usize,
    pub nu: f64,
    pub n_neg: usize,
    pub wg_hidden: usize,
    pub n_anchors: usize,
    pub neighbor_cap: usize,
    pub ablation: Ablation,
    /// Diagnostic: pin the raw generator output to a constant, which
    /// normalizes every weight to exactly one with no gradient path.
    pub freeze_wg: Option<f64>,
}

impl DistillSpec {
    pub fn new(strategy: Strategy) -> Self {
        DistillSpec {
            strategy,
            lambda1: 1.0,
            lambda2: 1.0,
            tau: 0.1,
            clusters: 10,
            nu: 1.0,
            n_neg: 10,
            wg_hidden: 16,
            n_anchors: 10,
            neighbor_cap: 20,
            ablation: Ablation::Full,
            freeze_wg: None,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.tau <= 0.0 {
            return Err(crate::Error::Config("tau must be positive".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(crate::Error::Config("lambda coefficients must be nonnegative".into()));
        }
        if self.clusters < 2 {
            return Err(crate::Error::Config("cluster count must be at least 2".into()));
        }
        Ok(())
    }

    /// Weight-generator input size for the configured state-vector variant.
    pub fn state_dim(&self) -> usize {
        if self.ablation == Ablation::NoCluster {
            self.neighbor_cap
        } else {
            self.clusters
        }
    }
}

/// Global anchor embeddings: K-means centroids of the teacher's final-layer
/// embeddings, one set per node side.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub user: Vec<f64>,
    pub item: Vec<f64>,
    pub count: usize,
    pub d: usize,
}

pub fn build_anchors(teacher: &TeacherSnapshot, n_anchors: usize, d: usize, seed: u64) -> AnchorSet {
    let user_rows = &teacher.emb.user[teacher.emb.user.len() - 1];
    let item_rows = &teacher.emb.item[teacher.emb.item.len() - 1];
    let count = n_anchors.min(user_rows.len()).min(item_rows.len()).max(1);
    AnchorSet {
        user: cluster::kmeans(user_rows, count, d, seeds::derive(seed, &[seeds::TAG_ANCHORS, 0])),
        item: cluster::kmeans(item_rows, count, d, seeds::derive(seed, &[seeds::TAG_ANCHORS, 1])),
        count,
        d,
    }
}

/// Per-epoch contrastive candidate sets over the teacher graph: the node's
/// previous-block neighbors plus sampled negatives.
#[derive(Debug, Clone, Default)]
pub struct CandidateSets {
    pub ui: HashMap<u32, Vec<u32>>,
    pub iu: HashMap<u32, Vec<u32>>,
    pub uu: HashMap<u32, Vec<u32>>,
    pub ii: HashMap<u32, Vec<u32>>,
}

pub fn sample_epoch_candidates(
    teacher: &TeacherSnapshot,
    strategy: Strategy,
    n_neg: usize,
    seed: u64,
) -> CandidateSets {
    let mut sets = CandidateSets::default();
    if !matches!(strategy, Strategy::Sgct | Strategy::Lwckd) {
        return sets;
    }
    let g = &teacher.graph;
    for u in 0..g.n_users() as u32 {
        if !g.user_items[u as usize].is_empty() {
            let s = seeds::derive(seed, &[seeds::TAG_CANDIDATES, 0, u as u64]);
            sets.ui
                .insert(u, sample_contrastive_candidates(g, Relation::UserItem, u, n_neg, s));
        }
    }
    for i in 0..g.n_items() as u32 {
        if !g.item_users[i as usize].is_empty() {
            let s = seeds::derive(seed, &[seeds::TAG_CANDIDATES, 1, i as u64]);
            sets.iu
                .insert(i, sample_contrastive_candidates(g, Relation::ItemUser, i, n_neg, s));
        }
    }
    if strategy == Strategy::Lwckd {
        for u in 0..g.n_users() as u32 {
            if !g.uu[u as usize].is_empty() {
                let s = seeds::derive(seed, &[seeds::TAG_CANDIDATES, 2, u as u64]);
                sets.uu
                    .insert(u, sample_contrastive_candidates(g, Relation::UserUser, u, n_neg, s));
            }
        }
        for i in 0..g.n_items() as u32 {
            if !g.ii[i as usize].is_empty() {
                let s = seeds::derive(seed, &[seeds::TAG_CANDIDATES, 3, i as u64]);
                sets.ii
                    .insert(i, sample_contrastive_candidates(g, Relation::ItemItem, i, n_neg, s));
            }
        }
    }
    sets
}

/// Everything a strategy loss needs for one training step.
pub struct DistillInputs<'a> {
    pub state: &'a ModelState,
    pub teacher: &'a TeacherSnapshot,
    pub fwd: &'a ForwardNodes,
    /// Normalized imitation weight node per warm batch user.
    pub weights: &'a HashMap<u32, NodeId>,
    /// Distinct warm users of the batch, ascending.
    pub batch_users: &'a [u32],
    /// Distinct warm items of the batch, ascending.
    pub batch_items: &'a [u32],
    pub candidates: &'a CandidateSets,
    pub anchors: Option<&'a AnchorSet>,
    pub spec: &'a DistillSpec,
}

/// Builds the selected strategy's user-side and item-side loss nodes.
/// Returns `None` for the fine-tune strategy or when no node qualifies.
pub fn distill_loss_nodes(tape: &mut Tape, inp: &DistillInputs) -> Option<(NodeId, NodeId)> {
    match inp.spec.strategy {
        Strategy::None => None,
        Strategy::GraphSail => graphsail_loss_nodes(tape, inp),
        Strategy::Sgct => sgct_loss_nodes(tape, inp),
        Strategy::Lwckd => lwckd_loss_nodes(tape, inp),
    }
}

/// Exact objective combination: `bpr + lambda1 * kl + lambda2 * (du + di)`.
/// Absent components are skipped structurally, so a pure fine-tune total is
/// bitwise the BPR node.
pub fn compose_total_loss(
    tape: &mut Tape,
    bpr: NodeId,
    kl_cluster: Option<NodeId>,
    distill_user: Option<NodeId>,
    distill_item: Option<NodeId>,
    spec: &DistillSpec,
) -> NodeId {
    let mut terms = vec![(bpr, 1.0)];
    if let Some(kl) = kl_cluster {
        terms.push((kl, spec.lambda1));
    }
    if let Some(du) = distill_user {
        terms.push((du, spec.lambda2));
    }
    if let Some(di) = distill_item {
        terms.push((di, spec.lambda2));
    }
    if terms.len() == 1 {
        return bpr;
    }
    tape.weighted_sum(terms)
}

/// Caches constant nodes for teacher embeddings so each (layer, side, node)
/// is materialized on the tape at most once.
struct TeacherCache<'a> {
    teacher: &'a TeacherSnapshot,
    nodes: HashMap<(usize, u8, u32), NodeId>,
}

impl<'a> TeacherCache<'a> {
    fn new(teacher: &'a TeacherSnapshot) -> Self {
        TeacherCache {
            teacher,
            nodes: HashMap::new(),
        }
    }

    fn user(&mut self, tape: &mut Tape, layer: usize, u: u32) -> NodeId {
        *self
            .nodes
            .entry((layer, 0, u))
            .or_insert_with(|| tape.constant(&self.teacher.emb.user[layer][u as usize]))
    }

    fn item(&mut self, tape: &mut Tape, layer: usize, i: u32) -> NodeId {
        *self
            .nodes
            .entry((layer, 1, i))
            .or_insert_with(|| tape.constant(&self.teacher.emb.item[layer][i as usize]))
    }
}

/// `KL(p_teacher || softmax(student_scores))` with the teacher side fixed:
/// `sum p ln p - p . scores + logsumexp(scores)`.
fn kl_to_student_node(tape: &mut Tape, teacher_logits: &[f64], student_scores: Vec<NodeId>) -> NodeId {
    let p = softmax(teacher_logits);
    let p_log_p: f64 = p.iter().map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 }).sum();
    let scores = tape.stack(student_scores);
    let p_node = tape.constant(&p);
    let cross = tape.dot(p_node, scores);
    let lse = tape.log_sum_exp(scores);
    let c = tape.scalar_const(p_log_p);
    tape.weighted_sum(vec![(c, 1.0), (cross, -1.0), (lse, 1.0)])
}

/// Mean over positives of `-log softmax(score_pos)` against the candidate
/// set, i.e. `logsumexp(scores / tau) - mean_pos(score_pos / tau)`.
/// `None` when there are no positives.
fn contrastive_term_node(
    tape: &mut Tape,
    anchor: NodeId,
    positives: &[u32],
    candidates: &[u32],
    mut target_vec: impl FnMut(&mut Tape, u32) -> NodeId,
    tau: f64,
) -> Option<NodeId> {
    if positives.is_empty() {
        return None;
    }
    let mut score_of = HashMap::new();
    let mut scores = Vec::with_capacity(candidates.len());
    for &c in candidates {
        let t = target_vec(tape, c);
        let dot = tape.dot(anchor, t);
        let scaled = tape.scale(dot, 1.0 / tau);
        score_of.insert(c, scaled);
        scores.push(scaled);
    }
    let stacked = tape.stack(scores);
    let lse = tape.log_sum_exp(stacked);
    let inv_n = 1.0 / positives.len() as f64;
    let mut terms = vec![(lse, 1.0)];
    for p in positives {
        terms.push((score_of[p], -inv_n));
    }
    Some(tape.weighted_sum(terms))
}

fn mean_node(tape: &mut Tape, terms: Vec<NodeId>) -> Option<NodeId> {
    if terms.is_empty() {
        return None;
    }
    let inv = 1.0 / terms.len() as f64;
    Some(tape.weighted_sum(terms.into_iter().map(|t| (t, inv)).collect()))
}

/// Self + local-neighborhood + global-anchor distillation, user terms
/// weighted, item terms unweighted.
fn graphsail_loss_nodes(tape: &mut Tape, inp: &DistillInputs) -> Option<(NodeId, NodeId)> {
    let anchors = inp.anchors.expect("anchor set required for this strategy");
    let d = inp.state.dims.d;
    let last = inp.fwd.user.len() - 1;
    let mut cache = TeacherCache::new(inp.teacher);

    let mut user_terms = Vec::new();
    for &u in inp.batch_users {
        let h_now = inp.fwd.final_user(u as usize);
        let h_prev = cache.user(tape, last, u);
        let mut parts = Vec::with_capacity(3);

        let diff = tape.sub(h_now, h_prev);
        let sq = tape.dot(diff, diff);
        parts.push((tape.scale(sq, 1.0 / d as f64), 1.0));

        let nbrs = &inp.teacher.graph.user_items[u as usize];
        if !nbrs.is_empty() {
            let t_logits: Vec<f64> = nbrs
                .iter()
                .map(|&i| dot_slice(inp.teacher.emb.final_user(u as usize), inp.teacher.emb.final_item(i as usize)))
                .collect();
            let s_scores: Vec<NodeId> = nbrs
                .iter()
                .map(|&i| {
                    let hi = inp.fwd.final_item(i as usize);
                    tape.dot(h_now, hi)
                })
                .collect();
            parts.push((kl_to_student_node(tape, &t_logits, s_scores), 1.0));
        }

        let t_logits: Vec<f64> = (0..anchors.count)
            .map(|a| dot_slice(inp.teacher.emb.final_user(u as usize), &anchors.user[a * d..(a + 1) * d]))
            .collect();
        let s_scores: Vec<NodeId> = (0..anchors.count)
            .map(|a| {
                let an = tape.constant(&anchors.user[a * d..(a + 1) * d]);
                tape.dot(h_now, an)
            })
            .collect();
        parts.push((kl_to_student_node(tape, &t_logits, s_scores), 1.0));

        let combined = tape.weighted_sum(parts);
        user_terms.push(tape.mul_scalar(combined, inp.weights[&u]));
    }

    let mut item_terms = Vec::new();
    for &i in inp.batch_items {
        let h_now = inp.fwd.final_item(i as usize);
        let h_prev = cache.item(tape, last, i);
        let mut parts = Vec::with_capacity(3);

        let diff = tape.sub(h_now, h_prev);
        let sq = tape.dot(diff, diff);
        parts.push((tape.scale(sq, 1.0 / d as f64), 1.0));

        let nbrs = &inp.teacher.graph.item_users[i as usize];
        if !nbrs.is_empty() {
            let t_logits: Vec<f64> = nbrs
                .iter()
                .map(|&u| dot_slice(inp.teacher.emb.final_item(i as usize), inp.teacher.emb.final_user(u as usize)))
                .collect();
            let s_scores: Vec<NodeId> = nbrs
                .iter()
                .map(|&u| {
                    let hu = inp.fwd.final_user(u as usize);
                    tape.dot(h_now, hu)
                })
                .collect();
            parts.push((kl_to_student_node(tape, &t_logits, s_scores), 1.0));
        }

        let t_logits: Vec<f64> = (0..anchors.count)
            .map(|a| dot_slice(inp.teacher.emb.final_item(i as usize), &anchors.item[a * d..(a + 1) * d]))
            .collect();
        let s_scores: Vec<NodeId> = (0..anchors.count)
            .map(|a| {
                let an = tape.constant(&anchors.item[a * d..(a + 1) * d]);
                tape.dot(h_now, an)
            })
            .collect();
        parts.push((kl_to_student_node(tape, &t_logits, s_scores), 1.0));

        item_terms.push(tape.weighted_sum(parts));
    }

    match (mean_node(tape, user_terms), mean_node(tape, item_terms)) {
        (Some(u), Some(i)) => Some((u, i)),
        (Some(u), None) => {
            let zero = tape.scalar_const(0.0);
            Some((u, zero))
        }
        (None, Some(i)) => {
            let zero = tape.scalar_const(0.0);
            Some((zero, i))
        }
        (None, None) => None,
    }
}

/// Layer-0 contrastive distillation: users pulled toward their
/// previous-block item neighbors, mirrored unweighted for items.
fn sgct_loss_nodes(tape: &mut Tape, inp: &DistillInputs) -> Option<(NodeId, NodeId)> {
    let tau = inp.spec.tau;
    let mut cache = TeacherCache::new(inp.teacher);

    let mut user_terms = Vec::new();
    for &u in inp.batch_users {
        let Some(cands) = inp.candidates.ui.get(&u) else { continue };
        let positives = &inp.teacher.graph.user_items[u as usize];
        let h_u0 = inp.fwd.user[0][u as usize];
        if let Some(term) =
            contrastive_term_node(tape, h_u0, positives, cands, |t, i| cache.item(t, 0, i), tau)
        {
            user_terms.push(tape.mul_scalar(term, inp.weights[&u]));
        }
    }

    let mut item_terms = Vec::new();
    for &i in inp.batch_items {
        let Some(cands) = inp.candidates.iu.get(&i) else { continue };
        let positives = &inp.teacher.graph.item_users[i as usize];
        let h_i0 = inp.fwd.item[0][i as usize];
        if let Some(term) =
            contrastive_term_node(tape, h_i0, positives, cands, |t, u| cache.user(t, 0, u), tau)
        {
            item_terms.push(term);
        }
    }

    match (mean_node(tape, user_terms), mean_node(tape, item_terms)) {
        (None, None) => None,
        (u, i) => {
            let zu = u.unwrap_or_else(|| tape.scalar_const(0.0));
            let zi = i.unwrap_or_else(|| tape.scalar_const(0.0));
            Some((zu, zi))
        }
    }
}

/// Layer-wise contrastive distillation over all graphs: per layer, the
/// user side adds user-item and user-user terms (weighted) and the item
/// side the mirrored item-user and item-item terms (unweighted); all
/// averaged over the layer count.
fn lwckd_loss_nodes(tape: &mut Tape, inp: &DistillInputs) -> Option<(NodeId, NodeId)> {
    let tau = inp.spec.tau;
    let n_layers = inp.fwd.user.len();
    debug_assert_eq!(inp.teacher.emb.user.len(), n_layers);
    let layer_inv = 1.0 / n_layers as f64;
    let mut cache = TeacherCache::new(inp.teacher);

    let used_users: Vec<u32> = inp
        .batch_users
        .iter()
        .copied()
        .filter(|u| inp.candidates.ui.contains_key(u) || inp.candidates.uu.contains_key(u))
        .collect();
    let used_items: Vec<u32> = inp
        .batch_items
        .iter()
        .copied()
        .filter(|i| inp.candidates.iu.contains_key(i) || inp.candidates.ii.contains_key(i))
        .collect();
    if used_users.is_empty() && used_items.is_empty() {
        return None;
    }

    let mut user_layer_means = Vec::new();
    let mut item_layer_means = Vec::new();
    for k in 0..n_layers {
        let mut user_terms = Vec::new();
        for &u in &used_users {
            let h_uk = inp.fwd.user[k][u as usize];
            let mut parts = Vec::new();
            if let Some(cands) = inp.candidates.ui.get(&u) {
                let positives = &inp.teacher.graph.user_items[u as usize];
                if let Some(t) =
                    contrastive_term_node(tape, h_uk, positives, cands, |t, i| cache.item(t, k, i), tau)
                {
                    parts.push((t, 1.0));
                }
            }
            if let Some(cands) = inp.candidates.uu.get(&u) {
                let positives = &inp.teacher.graph.uu[u as usize];
                if let Some(t) =
                    contrastive_term_node(tape, h_uk, positives, cands, |t, v| cache.user(t, k, v), tau)
                {
                    parts.push((t, 1.0));
                }
            }
            if !parts.is_empty() {
                let combined = tape.weighted_sum(parts);
                user_terms.push(tape.mul_scalar(combined, inp.weights[&u]));
            }
        }
        if let Some(m) = mean_node(tape, user_terms) {
            user_layer_means.push((m, layer_inv));
        }

        let mut item_terms = Vec::new();
        for &i in &used_items {
            let h_ik = inp.fwd.item[k][i as usize];
            let mut parts = Vec::new();
            if let Some(cands) = inp.candidates.iu.get(&i) {
                let positives = &inp.teacher.graph.item_users[i as usize];
                if let Some(t) =
                    contrastive_term_node(tape, h_ik, positives, cands, |t, u| cache.user(t, k, u), tau)
                {
                    parts.push((t, 1.0));
                }
            }
            if let Some(cands) = inp.candidates.ii.get(&i) {
                let positives = &inp.teacher.graph.ii[i as usize];
                if let Some(t) =
                    contrastive_term_node(tape, h_ik, positives, cands, |t, j| cache.item(t, k, j), tau)
                {
                    parts.push((t, 1.0));
                }
            }
            if !parts.is_empty() {
                item_terms.push(tape.weighted_sum(parts));
            }
        }
        if let Some(m) = mean_node(tape, item_terms) {
            item_layer_means.push((m, layer_inv));
        }
    }

    let user = if user_layer_means.is_empty() {
        tape.scalar_const(0.0)
    } else {
        tape.weighted_sum(user_layer_means)
    };
    let item = if item_layer_means.is_empty() {
        tape.scalar_const(0.0)
    } else {
        tape.weighted_sum(item_layer_means)
    };
    Some((user, item))
}

fn dot_slice(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
