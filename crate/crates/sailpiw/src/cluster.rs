//! Soft item clustering: Student-t assignments against learnable cluster
//! centers, the self-sharpening target distribution, the KL
//! self-supervision loss, and the K-means machinery used for center
//! initialization and the hard-assignment variant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::tape::{NodeId, Tape};

/// Student-t soft assignment of each embedding row to each center:
/// `q[i][m] ∝ (1 + |h_i - mu_m|^2 / nu)^(-(nu+1)/2)`, rows normalized.
pub fn soft_assign(rows: &[Vec<f64>], centers: &[f64], d: usize, nu: f64) -> Vec<Vec<f64>> {
    assert!(nu > 0.0);
    let m_count = centers.len() / d;
    assert!(m_count >= 2, "need at least two clusters");
    let expo = -(nu + 1.0) / 2.0;
    rows.iter()
        .map(|h| {
            let mut row: Vec<f64> = (0..m_count)
                .map(|m| {
                    let mu = &centers[m * d..(m + 1) * d];
                    let dist2: f64 = h.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                    (1.0 + dist2 / nu).powf(expo)
                })
                .collect();
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
            row
        })
        .collect()
}

/// Tape counterpart of [`soft_assign`] for one item; returns the
/// normalized q row so gradients reach both the embedding and the centers.
pub fn soft_assign_node(
    tape: &mut Tape,
    item: NodeId,
    centers: NodeId,
    m_count: usize,
    d: usize,
    nu: f64,
) -> NodeId {
    let expo = -(nu + 1.0) / 2.0;
    let kernels: Vec<NodeId> = (0..m_count)
        .map(|m| {
            let mu = tape.slice(centers, m * d, d);
            let diff = tape.sub(item, mu);
            let dist2 = tape.dot(diff, diff);
            let scaled = tape.scale(dist2, 1.0 / nu);
            let shifted = tape.add_const(scaled, 1.0);
            tape.pow_const(shifted, expo)
        })
        .collect();
    let stacked = tape.stack(kernels);
    let total = tape.sum_elems(stacked);
    tape.div_scalar(stacked, total)
}

/// Self-sharpening target: `p[i][m] ∝ q[i][m]^2 / f_m` with
/// `f_m = sum_i q[i][m]`. Columns with zero mass contribute nothing.
pub fn target_distribution(q: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if q.is_empty() {
        return Vec::new();
    }
    let m_count = q[0].len();
    let mut freq = vec![0.0; m_count];
    for row in q {
        for (f, x) in freq.iter_mut().zip(row) {
            *f += x;
        }
    }
    if freq.iter().any(|&f| f == 0.0) {
        log::warn!("empty soft cluster; its target column is zeroed");
    }
    q.iter()
        .map(|row| {
            let mut p: Vec<f64> = row
                .iter()
                .zip(&freq)
                .map(|(&x, &f)| if f > 0.0 { x * x / f } else { 0.0 })
                .collect();
            let s: f64 = p.iter().sum();
            if s > 0.0 {
                p.iter_mut().for_each(|x| *x /= s);
            }
            p
        })
        .collect()
}

/// `sum_i sum_m p log(p / q)` with p a per-epoch constant (stop-gradient),
/// so gradients flow only through q. Zero p entries contribute zero.
pub fn clustering_kl_node(tape: &mut Tape, q_rows: &[NodeId], p_rows: &[Vec<f64>]) -> NodeId {
    assert_eq!(q_rows.len(), p_rows.len());
    let mut terms = Vec::new();
    for (&q, p) in q_rows.iter().zip(p_rows) {
        let p_log_p: f64 = p
            .iter()
            .map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 })
            .sum();
        let const_term = tape.scalar_const(p_log_p);
        let log_q = tape.ln_clamped(q);
        let p_node = tape.constant(p);
        let cross = tape.dot(p_node, log_q);
        terms.push((const_term, 1.0));
        terms.push((cross, -1.0));
    }
    tape.weighted_sum(terms)
}

/// Hard nearest-center assignment; ties broken by lower cluster index.
pub fn kmeans_assign(rows: &[Vec<f64>], centers: &[f64], d: usize) -> Vec<usize> {
    let m_count = centers.len() / d;
    rows.iter()
        .map(|h| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for m in 0..m_count {
                let mu = &centers[m * d..(m + 1) * d];
                let dist2: f64 = h.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist2 < best_d {
                    best_d = dist2;
                    best = m;
                }
            }
            best
        })
        .collect()
}

const KMEANS_MAX_ITERS: usize = 50;

/// Lloyd's algorithm with k-means++ seeding over the given rows. Clusters
/// that empty out are re-seeded from the point farthest from its center.
pub fn kmeans(rows: &[Vec<f64>], m_count: usize, d: usize, seed: u64) -> Vec<f64> {
    assert!(rows.len() >= m_count, "need at least as many points as clusters");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut centers = plus_plus_seed(rows, m_count, d, &mut rng);

    for _ in 0..KMEANS_MAX_ITERS {
        let assign = kmeans_assign(rows, &centers, d);
        let mut sums = vec![0.0; m_count * d];
        let mut counts = vec![0usize; m_count];
        for (row, &a) in rows.iter().zip(&assign) {
            counts[a] += 1;
            for (s, x) in sums[a * d..(a + 1) * d].iter_mut().zip(row) {
                *s += x;
            }
        }
        let mut next = centers.clone();
        for m in 0..m_count {
            if counts[m] > 0 {
                for c in 0..d {
                    next[m * d + c] = sums[m * d + c] / counts[m] as f64;
                }
            } else {
                // Re-seed an empty cluster from the farthest point.
                let far = farthest_point(rows, &centers, &assign, d);
                next[m * d..(m + 1) * d].copy_from_slice(&rows[far]);
            }
        }
        if next == centers {
            break;
        }
        centers = next;
    }
    centers
}

fn plus_plus_seed(rows: &[Vec<f64>], m_count: usize, d: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let mut centers = Vec::with_capacity(m_count * d);
    let first = rng.random_range(0..rows.len());
    centers.extend_from_slice(&rows[first]);
    let mut dist2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centers[0..d])).collect();
    for _ in 1..m_count {
        let total: f64 = dist2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = rows.len() - 1;
            for (i, &w) in dist2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..rows.len())
        };
        let start = centers.len();
        centers.extend_from_slice(&rows[pick]);
        for (i, r) in rows.iter().enumerate() {
            let nd = sq_dist(r, &centers[start..start + d]);
            if nd < dist2[i] {
                dist2[i] = nd;
            }
        }
    }
    centers
}

fn farthest_point(rows: &[Vec<f64>], centers: &[f64], assign: &[usize], d: usize) -> usize {
    let mut far = 0;
    let mut far_d = -1.0;
    for (i, row) in rows.iter().enumerate() {
        let a = assign[i];
        let dist2 = sq_dist(row, &centers[a * d..(a + 1) * d]);
        if dist2 > far_d {
            far_d = dist2;
            far = i;
        }
    }
    far
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// K-means centroids of the teacher's item embeddings, used as the initial
/// trainable centers for the new block.
pub fn init_centers(teacher_item_emb: &[Vec<f64>], m_count: usize, d: usize, seed: u64) -> Vec<f64> {
    kmeans(teacher_item_emb, m_count, d, seed)
}

/// Hard-assignment variant: cluster memberships come from K-means on the
/// teacher embeddings, and each center is the mean of the *student*
/// embeddings of its members. Empty clusters keep the previous center.
pub fn hard_centers(
    teacher_item_emb: &[Vec<f64>],
    student_item_emb: &[Vec<f64>],
    m_count: usize,
    d: usize,
    seed: u64,
    prev_centers: Option<&[f64]>,
) -> Vec<f64> {
    let t_centers = kmeans(teacher_item_emb, m_count, d, seed);
    let assign = kmeans_assign(teacher_item_emb, &t_centers, d);
    let mut sums = vec![0.0; m_count * d];
    let mut counts = vec![0usize; m_count];
    let n = teacher_item_emb.len().min(student_item_emb.len());
    for i in 0..n {
        let a = assign[i];
        counts[a] += 1;
        for (s, x) in sums[a * d..(a + 1) * d].iter_mut().zip(&student_item_emb[i]) {
            *s += x;
        }
    }
    let mut out = vec![0.0; m_count * d];
    for m in 0..m_count {
        if counts[m] > 0 {
            for c in 0..d {
                out[m * d + c] = sums[m * d + c] / counts[m] as f64;
            }
        } else if let Some(prev) = prev_centers {
            out[m * d..(m + 1) * d].copy_from_slice(&prev[m * d..(m + 1) * d]);
        } else {
            out[m * d..(m + 1) * d].copy_from_slice(&t_centers[m * d..(m + 1) * d]);
        }
    }
    out
}
