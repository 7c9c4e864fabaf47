//! Model parameters, the propagation backbone, BPR loss, the Adam
//! optimizer, and the finite-difference gradient checker.
//!
//! The backbone is a mean-aggregation propagation: per layer,
//! `h[v, k+1] = relu(W_k (h[v, k] + mean of neighbor h[., k]))`, with the
//! mean term absent for nodes that have no neighbors in the block. Every
//! layer's output is kept because the layer-wise distillation strategy
//! consumes intermediate embeddings.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::graph::GraphBundle;
use crate::seeds;
use crate::tape::{NodeId, Param, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    /// Embedding dimensionality.
    pub d: usize,
    /// Number of propagation layers (R).
    pub layers: usize,
    /// Number of item clusters (M).
    pub clusters: usize,
    /// Weight-generator hidden size (l).
    pub hidden: usize,
    /// Input size of the weight generator; equals `clusters` except for the
    /// neighbor-based state-vector variant, which uses a fixed neighbor cap.
    pub state_dim: usize,
}

impl Dims {
    pub fn new(d: usize, layers: usize, clusters: usize, hidden: usize) -> Self {
        Dims {
            d,
            layers,
            clusters,
            hidden,
            state_dim: clusters,
        }
    }

    pub fn with_state_dim(mut self, state_dim: usize) -> Self {
        self.state_dim = state_dim;
        self
    }
}

const EMB_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct ModelState {
    pub dims: Dims,
    pub n_users: usize,
    pub n_items: usize,
    pub user_emb: Vec<f64>,
    pub item_emb: Vec<f64>,
    pub layer_weights: Vec<Vec<f64>>,
    pub cluster_centers: Vec<f64>,
    pub cluster_transforms: Vec<Vec<f64>>,
    pub shared_transform: Vec<f64>,
    pub wg_w1: Vec<f64>,
    pub wg_b1: Vec<f64>,
    pub wg_w2: Vec<f64>,
    pub wg_b2: Vec<f64>,
}

fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

// Identity plus small noise: near-mean propagation at the start, and no
// exact-zero pre-activations sitting on the relu kink after layer one.
fn noisy_identity(rng: &mut ChaCha12Rng, d: usize) -> Vec<f64> {
    let mut m = identity(d);
    let dist = Normal::new(0.0, 0.05).expect("valid normal");
    for x in m.iter_mut() {
        *x += dist.sample(rng);
    }
    m
}

fn normal_vec(rng: &mut ChaCha12Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("valid normal");
    (0..n).map(|_| dist.sample(rng)).collect()
}

impl ModelState {
    pub fn new(dims: Dims, n_users: usize, n_items: usize, seed: u64) -> Self {
        let d = dims.d;
        let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(seed, &[seeds::TAG_INIT]));
        ModelState {
            dims,
            n_users,
            n_items,
            user_emb: normal_vec(&mut rng, n_users * d, EMB_INIT_STD),
            item_emb: normal_vec(&mut rng, n_items * d, EMB_INIT_STD),
            layer_weights: (0..dims.layers).map(|_| noisy_identity(&mut rng, d)).collect(),
            cluster_centers: normal_vec(&mut rng, dims.clusters * d, EMB_INIT_STD),
            cluster_transforms: (0..dims.clusters).map(|_| identity(d)).collect(),
            shared_transform: identity(d),
            wg_w1: normal_vec(&mut rng, dims.hidden * dims.state_dim, EMB_INIT_STD),
            wg_b1: normal_vec(&mut rng, dims.hidden, EMB_INIT_STD),
            wg_w2: normal_vec(&mut rng, dims.hidden, EMB_INIT_STD),
            wg_b2: vec![0.0],
        }
    }

    /// Appends freshly initialized rows for new nodes. Existing rows keep
    /// their position and values.
    pub fn grow(&mut self, n_users: usize, n_items: usize, seed: u64) {
        assert!(n_users >= self.n_users && n_items >= self.n_items);
        let d = self.dims.d;
        let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(seed, &[seeds::TAG_GROW]));
        self.user_emb
            .extend(normal_vec(&mut rng, (n_users - self.n_users) * d, EMB_INIT_STD));
        self.item_emb
            .extend(normal_vec(&mut rng, (n_items - self.n_items) * d, EMB_INIT_STD));
        self.n_users = n_users;
        self.n_items = n_items;
    }

    /// Canonical parameter-block order used by the optimizer and checkpoints.
    pub fn params(&self) -> Vec<Param> {
        let mut out = vec![Param::UserEmb, Param::ItemEmb];
        out.extend((0..self.dims.layers).map(Param::LayerWeight));
        out.push(Param::Centers);
        out.extend((0..self.dims.clusters).map(Param::ClusterTransform));
        out.push(Param::SharedTransform);
        out.extend([Param::WgW1, Param::WgB1, Param::WgW2, Param::WgB2]);
        out
    }

    pub fn block(&self, p: Param) -> &[f64] {
        match p {
            Param::UserEmb => &self.user_emb,
            Param::ItemEmb => &self.item_emb,
            Param::LayerWeight(k) => &self.layer_weights[k],
            Param::Centers => &self.cluster_centers,
            Param::ClusterTransform(m) => &self.cluster_transforms[m],
            Param::SharedTransform => &self.shared_transform,
            Param::WgW1 => &self.wg_w1,
            Param::WgB1 => &self.wg_b1,
            Param::WgW2 => &self.wg_w2,
            Param::WgB2 => &self.wg_b2,
        }
    }

    pub fn block_mut(&mut self, p: Param) -> &mut Vec<f64> {
        match p {
            Param::UserEmb => &mut self.user_emb,
            Param::ItemEmb => &mut self.item_emb,
            Param::LayerWeight(k) => &mut self.layer_weights[k],
            Param::Centers => &mut self.cluster_centers,
            Param::ClusterTransform(m) => &mut self.cluster_transforms[m],
            Param::SharedTransform => &mut self.shared_transform,
            Param::WgW1 => &mut self.wg_w1,
            Param::WgB1 => &mut self.wg_b1,
            Param::WgW2 => &mut self.wg_w2,
            Param::WgB2 => &mut self.wg_b2,
        }
    }

    pub fn user_row(&self, u: usize) -> &[f64] {
        let d = self.dims.d;
        &self.user_emb[u * d..(u + 1) * d]
    }

    pub fn item_row(&self, i: usize) -> &[f64] {
        let d = self.dims.d;
        &self.item_emb[i * d..(i + 1) * d]
    }
}

/// One gradient accumulator per parameter block, shapes matching the model.
#[derive(Debug, Clone)]
pub struct GradientBuffer {
    blocks: HashMap<Param, Vec<f64>>,
}

impl GradientBuffer {
    pub fn zeros_like(state: &ModelState) -> Self {
        let blocks = state
            .params()
            .into_iter()
            .map(|p| (p, vec![0.0; state.block(p).len()]))
            .collect();
        GradientBuffer { blocks }
    }

    pub fn accumulate(&mut self, grads: &crate::tape::Gradients) {
        for (p, buf) in self.blocks.iter_mut() {
            if let Some(g) = grads.param(*p) {
                for (b, x) in buf.iter_mut().zip(g) {
                    *b += x;
                }
            }
        }
    }

    pub fn block(&self, p: Param) -> &[f64] {
        &self.blocks[&p]
    }

    pub fn check_finite(&self) -> Result<()> {
        for (p, buf) in &self.blocks {
            if buf.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient { block: p.name() });
            }
        }
        Ok(())
    }
}

/// Per-layer embedding values for every node in a graph: `user[k][u]` is
/// the d-vector of user `u` at layer `k`.
#[derive(Debug, Clone)]
pub struct LayerEmbeddings {
    pub user: Vec<Vec<Vec<f64>>>,
    pub item: Vec<Vec<Vec<f64>>>,
}

impl LayerEmbeddings {
    pub fn final_user(&self, u: usize) -> &[f64] {
        &self.user[self.user.len() - 1][u]
    }

    pub fn final_item(&self, i: usize) -> &[f64] {
        &self.item[self.item.len() - 1][i]
    }
}

fn dropout_mask(seed: u64, layer: usize, side: u64, node: usize, d: usize, p: f64) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(
        seed,
        &[seeds::TAG_DROPOUT, layer as u64, side, node as u64],
    ));
    let keep = 1.0 / (1.0 - p);
    let dist = Uniform::new(0.0f64, 1.0).expect("valid range");
    (0..d)
        .map(|_| if dist.sample(&mut rng) < p { 0.0 } else { keep })
        .collect()
}

/// Plain-value forward pass. With `layers == 0` the output is exactly the
/// embedding tables. Dropout masks the inputs of each propagation layer;
/// `dropout_p == 0` is fully deterministic regardless of seed.
pub fn forward_embeddings(
    state: &ModelState,
    graph: &GraphBundle,
    dropout_p: f64,
    rng_seed: u64,
) -> LayerEmbeddings {
    let d = state.dims.d;
    let n_users = graph.n_users();
    let n_items = graph.n_items();
    assert!(n_users <= state.n_users && n_items <= state.n_items);

    let mut user: Vec<Vec<Vec<f64>>> = Vec::with_capacity(state.dims.layers + 1);
    let mut item: Vec<Vec<Vec<f64>>> = Vec::with_capacity(state.dims.layers + 1);
    user.push((0..n_users).map(|u| state.user_row(u).to_vec()).collect());
    item.push((0..n_items).map(|i| state.item_row(i).to_vec()).collect());

    for k in 0..state.dims.layers {
        let w = &state.layer_weights[k];
        let masked_u: Vec<Vec<f64>> = mask_all(&user[k], dropout_p, rng_seed, k, 0);
        let masked_i: Vec<Vec<f64>> = mask_all(&item[k], dropout_p, rng_seed, k, 1);
        let next_u = propagate_side(&masked_u, &masked_i, &graph.user_items, w, d);
        let next_i = propagate_side(&masked_i, &masked_u, &graph.item_users, w, d);
        user.push(next_u);
        item.push(next_i);
    }
    LayerEmbeddings { user, item }
}

fn mask_all(h: &[Vec<f64>], p: f64, seed: u64, layer: usize, side: u64) -> Vec<Vec<f64>> {
    if p == 0.0 {
        return h.to_vec();
    }
    h.iter()
        .enumerate()
        .map(|(n, v)| {
            let m = dropout_mask(seed, layer, side, n, v.len(), p);
            v.iter().zip(&m).map(|(x, mm)| x * mm).collect()
        })
        .collect()
}

fn propagate_side(
    own: &[Vec<f64>],
    other: &[Vec<f64>],
    adj: &[Vec<u32>],
    w: &[f64],
    d: usize,
) -> Vec<Vec<f64>> {
    own.iter()
        .enumerate()
        .map(|(v, h)| {
            let mut agg = h.clone();
            let nbrs = &adj[v];
            if !nbrs.is_empty() {
                let inv = 1.0 / nbrs.len() as f64;
                for c in 0..d {
                    let mut s = 0.0;
                    for &nb in nbrs {
                        s += other[nb as usize][c];
                    }
                    agg[c] += s * inv;
                }
            }
            let mut out = vec![0.0; d];
            for (r, o) in out.iter_mut().enumerate() {
                let row = &w[r * d..(r + 1) * d];
                let mut s = 0.0;
                for c in 0..d {
                    s += row[c] * agg[c];
                }
                *o = s.max(0.0);
            }
            out
        })
        .collect()
}

/// Frozen per-layer embeddings and clustering state of the previous
/// block's converged model. Gradients never flow into it: its values only
/// ever enter tapes as constants.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot {
    pub emb: LayerEmbeddings,
    pub centers: Vec<f64>,
    pub graph: GraphBundle,
}

impl TeacherSnapshot {
    /// Runs the converged model once on its own graph with dropout off and
    /// freezes the per-layer embeddings.
    pub fn capture(state: &ModelState, graph: &GraphBundle) -> Self {
        TeacherSnapshot {
            emb: forward_embeddings(state, graph, 0.0, 0),
            centers: state.cluster_centers.clone(),
            graph: graph.clone(),
        }
    }

    pub fn n_users(&self) -> usize {
        self.graph.n_users()
    }

    pub fn n_items(&self) -> usize {
        self.graph.n_items()
    }

    pub fn has_user(&self, u: u32) -> bool {
        (u as usize) < self.n_users()
    }

    pub fn has_item(&self, i: u32) -> bool {
        (i as usize) < self.n_items()
    }

    /// FNV-1a over all embedding bits; used to assert immutability.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |x: f64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for layer in self.emb.user.iter().chain(self.emb.item.iter()) {
            for v in layer {
                for &x in v {
                    eat(x);
                }
            }
        }
        for &x in &self.centers {
            eat(x);
        }
        h
    }
}

/// Tape node ids for every registered parameter block.
pub struct ModelNodes {
    pub user_emb: NodeId,
    pub item_emb: NodeId,
    pub layer_w: Vec<NodeId>,
    pub centers: NodeId,
    pub transforms: Vec<NodeId>,
    pub shared: NodeId,
    pub wg_w1: NodeId,
    pub wg_b1: NodeId,
    pub wg_w2: NodeId,
    pub wg_b2: NodeId,
}

/// Registers the model on a tape. With `centers_trainable == false` the
/// cluster centers enter as constants and receive no gradient.
pub fn register_model(tape: &mut Tape, state: &ModelState, centers_trainable: bool) -> ModelNodes {
    ModelNodes {
        user_emb: tape.leaf(Param::UserEmb, &state.user_emb),
        item_emb: tape.leaf(Param::ItemEmb, &state.item_emb),
        layer_w: (0..state.dims.layers)
            .map(|k| tape.leaf(Param::LayerWeight(k), &state.layer_weights[k]))
            .collect(),
        centers: if centers_trainable {
            tape.leaf(Param::Centers, &state.cluster_centers)
        } else {
            tape.constant(&state.cluster_centers)
        },
        transforms: (0..state.dims.clusters)
            .map(|m| tape.leaf(Param::ClusterTransform(m), &state.cluster_transforms[m]))
            .collect(),
        shared: tape.leaf(Param::SharedTransform, &state.shared_transform),
        wg_w1: tape.leaf(Param::WgW1, &state.wg_w1),
        wg_b1: tape.leaf(Param::WgB1, &state.wg_b1),
        wg_w2: tape.leaf(Param::WgW2, &state.wg_w2),
        wg_b2: tape.leaf(Param::WgB2, &state.wg_b2),
    }
}

/// Registers the model as constants; used for diagnostic evaluations
/// where no gradients are wanted.
pub fn register_model_const(tape: &mut Tape, state: &ModelState) -> ModelNodes {
    ModelNodes {
        user_emb: tape.constant(&state.user_emb),
        item_emb: tape.constant(&state.item_emb),
        layer_w: (0..state.dims.layers)
            .map(|k| tape.constant(&state.layer_weights[k]))
            .collect(),
        centers: tape.constant(&state.cluster_centers),
        transforms: (0..state.dims.clusters)
            .map(|m| tape.constant(&state.cluster_transforms[m]))
            .collect(),
        shared: tape.constant(&state.shared_transform),
        wg_w1: tape.constant(&state.wg_w1),
        wg_b1: tape.constant(&state.wg_b1),
        wg_w2: tape.constant(&state.wg_w2),
        wg_b2: tape.constant(&state.wg_b2),
    }
}

/// Per-layer embedding nodes for every node of a graph.
pub struct ForwardNodes {
    pub user: Vec<Vec<NodeId>>,
    pub item: Vec<Vec<NodeId>>,
}

impl ForwardNodes {
    pub fn final_user(&self, u: usize) -> NodeId {
        self.user[self.user.len() - 1][u]
    }

    pub fn final_item(&self, i: usize) -> NodeId {
        self.item[self.item.len() - 1][i]
    }
}

/// Wraps already-computed embeddings as constant nodes, for evaluations
/// that reuse the loss builders without wanting gradients.
pub fn constant_forward_nodes(tape: &mut Tape, emb: &LayerEmbeddings) -> ForwardNodes {
    ForwardNodes {
        user: emb
            .user
            .iter()
            .map(|layer| layer.iter().map(|v| tape.constant(v)).collect())
            .collect(),
        item: emb
            .item
            .iter()
            .map(|layer| layer.iter().map(|v| tape.constant(v)).collect())
            .collect(),
    }
}

/// Tape counterpart of [`forward_embeddings`]; identical masks and math.
pub fn forward_on_tape(
    tape: &mut Tape,
    model: &ModelNodes,
    state: &ModelState,
    graph: &GraphBundle,
    dropout_p: f64,
    rng_seed: u64,
) -> ForwardNodes {
    let d = state.dims.d;
    let n_users = graph.n_users();
    let n_items = graph.n_items();
    assert!(n_users <= state.n_users && n_items <= state.n_items);

    let mut user: Vec<Vec<NodeId>> = Vec::with_capacity(state.dims.layers + 1);
    let mut item: Vec<Vec<NodeId>> = Vec::with_capacity(state.dims.layers + 1);
    user.push(
        (0..n_users)
            .map(|u| tape.slice(model.user_emb, u * d, d))
            .collect(),
    );
    item.push(
        (0..n_items)
            .map(|i| tape.slice(model.item_emb, i * d, d))
            .collect(),
    );

    for k in 0..state.dims.layers {
        let w = model.layer_w[k];
        let masked_u = mask_all_tape(tape, &user[k], dropout_p, rng_seed, k, 0, d);
        let masked_i = mask_all_tape(tape, &item[k], dropout_p, rng_seed, k, 1, d);
        let next_u = propagate_side_tape(tape, &masked_u, &masked_i, &graph.user_items, w, d);
        let next_i = propagate_side_tape(tape, &masked_i, &masked_u, &graph.item_users, w, d);
        user.push(next_u);
        item.push(next_i);
    }
    ForwardNodes { user, item }
}

fn mask_all_tape(
    tape: &mut Tape,
    h: &[NodeId],
    p: f64,
    seed: u64,
    layer: usize,
    side: u64,
    d: usize,
) -> Vec<NodeId> {
    if p == 0.0 {
        return h.to_vec();
    }
    h.iter()
        .enumerate()
        .map(|(n, &id)| {
            let m = dropout_mask(seed, layer, side, n, d, p);
            let mc = tape.constant(&m);
            tape.mul(id, mc)
        })
        .collect()
}

fn propagate_side_tape(
    tape: &mut Tape,
    own: &[NodeId],
    other: &[NodeId],
    adj: &[Vec<u32>],
    w: NodeId,
    d: usize,
) -> Vec<NodeId> {
    own.iter()
        .enumerate()
        .map(|(v, &h)| {
            let nbrs = &adj[v];
            let agg = if nbrs.is_empty() {
                h
            } else {
                let mean = tape.mean_many(nbrs.iter().map(|&n| other[n as usize]).collect());
                tape.add(h, mean)
            };
            let lin = tape.matvec(w, agg, d, d);
            tape.relu(lin)
        })
        .collect()
}

/// Mean over the batch of `-ln sigmoid(u.pos - u.neg)` plus
/// `l2_coef * mean(|u|^2 + |pos|^2 + |neg|^2)`. The log-sigmoid is
/// evaluated as softplus of the negated margin for stability.
pub fn bpr_loss_nodes(
    tape: &mut Tape,
    triples: &[(NodeId, NodeId, NodeId)],
    l2_coef: f64,
) -> NodeId {
    assert!(!triples.is_empty(), "bpr batch must be non-empty");
    let inv_b = 1.0 / triples.len() as f64;
    let mut terms = Vec::new();
    for &(u, p, n) in triples {
        let sp = tape.dot(u, p);
        let sn = tape.dot(u, n);
        let margin = tape.weighted_sum(vec![(sp, 1.0), (sn, -1.0)]);
        let neg_margin = tape.scale(margin, -1.0);
        let nll = tape.softplus(neg_margin);
        terms.push((nll, inv_b));
        if l2_coef > 0.0 {
            for &v in &[u, p, n] {
                let sq = tape.dot(v, v);
                terms.push((sq, l2_coef * inv_b));
            }
        }
    }
    tape.weighted_sum(terms)
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Standard Adam with bias correction; moment buffers keyed per parameter
/// block and grown alongside the model.
#[derive(Debug, Clone)]
pub struct AdamOpt {
    pub t: u64,
    m: HashMap<Param, Vec<f64>>,
    v: HashMap<Param, Vec<f64>>,
}

impl AdamOpt {
    pub fn new(state: &ModelState) -> Self {
        let m = state
            .params()
            .into_iter()
            .map(|p| (p, vec![0.0; state.block(p).len()]))
            .collect();
        let v = state
            .params()
            .into_iter()
            .map(|p| (p, vec![0.0; state.block(p).len()]))
            .collect();
        AdamOpt { t: 0, m, v }
    }

    /// Extends moment buffers with zeros for newly appended parameters.
    pub fn grow_like(&mut self, state: &ModelState) {
        for p in state.params() {
            let len = state.block(p).len();
            self.m.entry(p).or_default().resize(len, 0.0);
            self.v.entry(p).or_default().resize(len, 0.0);
        }
    }

    pub fn step(&mut self, state: &mut ModelState, grads: &GradientBuffer, lr: f64) -> Result<()> {
        grads.check_finite()?;
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for p in state.params() {
            let g = grads.block(p);
            let m = self.m.get_mut(&p).expect("moment buffer");
            let v = self.v.get_mut(&p).expect("moment buffer");
            let x = state.block_mut(p);
            for i in 0..x.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                x[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }

    /// Moment buffers in canonical order, for checkpointing.
    pub fn moments(&self, state: &ModelState) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        state
            .params()
            .into_iter()
            .map(|p| (p.name(), self.m[&p].clone(), self.v[&p].clone()))
            .collect()
    }

    pub fn restore_moments(&mut self, state: &ModelState, t: u64, blocks: &[(String, Vec<f64>, Vec<f64>)]) {
        self.t = t;
        let by_name: HashMap<&str, usize> = blocks
            .iter()
            .enumerate()
            .map(|(i, (n, _, _))| (n.as_str(), i))
            .collect();
        for p in state.params() {
            if let Some(&i) = by_name.get(p.name().as_str()) {
                self.m.insert(p, blocks[i].1.clone());
                self.v.insert(p, blocks[i].2.clone());
            }
        }
    }
}

const FD_STEP: f64 = 1e-5;

/// Central finite differences on randomly probed scalar parameters
/// against the analytic gradient returned by `loss_fn`. Returns the
/// maximum relative error `|analytic - numeric| / max(1, |numeric|)`.
pub fn check_gradients<F>(loss_fn: F, state: &ModelState, probe_count: usize, seed: u64) -> f64
where
    F: Fn(&ModelState) -> (f64, GradientBuffer),
{
    let (_, analytic) = loss_fn(state);
    let mut coords: Vec<(Param, usize)> = Vec::new();
    for p in state.params() {
        for i in 0..state.block(p).len() {
            coords.push((p, i));
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut max_err: f64 = 0.0;
    for _ in 0..probe_count {
        let (p, i) = coords[rand::Rng::random_range(&mut rng, 0..coords.len())];
        let mut plus = state.clone();
        plus.block_mut(p)[i] += FD_STEP;
        let mut minus = state.clone();
        minus.block_mut(p)[i] -= FD_STEP;
        let numeric = (loss_fn(&plus).0 - loss_fn(&minus).0) / (2.0 * FD_STEP);
        let err = (analytic.block(p)[i] - numeric).abs() / numeric.abs().max(1.0);
        max_err = max_err.max(err);
    }
    max_err
}
