//! Eager reverse-mode differentiation over flat `f64` vectors.
//!
//! Every node holds its forward value; `backward` walks the tape in reverse
//! and accumulates vector-Jacobian products into the registered parameter
//! leaves. Scalars are length-1 vectors. All reductions run in index order,
//! so a given tape always produces bitwise-identical gradients.

use std::collections::HashMap;

pub type NodeId = usize;

/// Names a trainable parameter block of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Param {
    UserEmb,
    ItemEmb,
    LayerWeight(usize),
    Centers,
    ClusterTransform(usize),
    SharedTransform,
    WgW1,
    WgB1,
    WgW2,
    WgB2,
}

impl Param {
    pub fn name(&self) -> String {
        match self {
            Param::UserEmb => "user_emb".into(),
            Param::ItemEmb => "item_emb".into(),
            Param::LayerWeight(k) => format!("layer_w{k}"),
            Param::Centers => "cluster_centers".into(),
            Param::ClusterTransform(m) => format!("cluster_trans{m}"),
            Param::SharedTransform => "shared_trans".into(),
            Param::WgW1 => "wg_w1".into(),
            Param::WgB1 => "wg_b1".into(),
            Param::WgW2 => "wg_w2".into(),
            Param::WgB2 => "wg_b2".into(),
        }
    }
}

const LN_CLAMP: f64 = 1e-12;

enum Op {
    Leaf(Param),
    Const,
    /// Contiguous sub-range of a parent vector.
    Slice { p: NodeId, offset: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Elementwise product.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    /// x^c for strictly positive x.
    PowConst(NodeId, f64),
    /// Matrix (rows x cols, row-major) times column vector.
    MatVec { w: NodeId, x: NodeId, rows: usize, cols: usize },
    /// Elementwise mean of same-length vectors.
    MeanMany(Vec<NodeId>),
    /// Concatenate length-1 nodes into a vector.
    Stack(Vec<NodeId>),
    SumElems(NodeId),
    Dot(NodeId, NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Softmax(NodeId),
    LogSumExp(NodeId),
    /// ln(max(x, 1e-12)); clamped entries get zero gradient.
    LnClamped(NodeId),
    /// a / b where b is a scalar node.
    DivScalar { a: NodeId, b: NodeId },
    /// a * s where s is a scalar node.
    MulScalar { a: NodeId, s: NodeId },
    /// sum_k c_k * v_k over same-length nodes.
    WeightedSum(Vec<(NodeId, f64)>),
}

struct Node {
    op: Op,
    value: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Param, NodeId)>,
}

/// Per-parameter gradients produced by [`Tape::backward`].
pub struct Gradients {
    by_param: HashMap<Param, Vec<f64>>,
}

impl Gradients {
    pub fn param(&self, p: Param) -> Option<&[f64]> {
        self.by_param.get(&p).map(|v| v.as_slice())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value[0]
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    /// Registers a trainable parameter block. Gradients accumulate per block.
    pub fn leaf(&mut self, p: Param, data: &[f64]) -> NodeId {
        let id = self.push(Op::Leaf(p), data.to_vec());
        self.params.push((p, id));
        id
    }

    pub fn constant(&mut self, data: &[f64]) -> NodeId {
        self.push(Op::Const, data.to_vec())
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.push(Op::Const, vec![v])
    }

    pub fn slice(&mut self, p: NodeId, offset: usize, len: usize) -> NodeId {
        let v = self.nodes[p].value[offset..offset + len].to_vec();
        self.push(Op::Slice { p, offset }, v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v: Vec<f64> = self.zip(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v: Vec<f64> = self.zip(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v: Vec<f64> = self.zip(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v: Vec<f64> = self.nodes[a].value.iter().map(|x| x * c).collect();
        self.push(Op::Scale(a, c), v)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v: Vec<f64> = self.nodes[a].value.iter().map(|x| x + c).collect();
        self.push(Op::AddConst(a, c), v)
    }

    pub fn pow_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v: Vec<f64> = self.nodes[a].value.iter().map(|x| x.powf(c)).collect();
        self.push(Op::PowConst(a, c), v)
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId, rows: usize, cols: usize) -> NodeId {
        debug_assert_eq!(self.nodes[w].value.len(), rows * cols);
        debug_assert_eq!(self.nodes[x].value.len(), cols);
        let wv = &self.nodes[w].value;
        let xv = &self.nodes[x].value;
        let mut v = vec![0.0; rows];
        for r in 0..rows {
            let mut s = 0.0;
            let row = &wv[r * cols..(r + 1) * cols];
            for c in 0..cols {
                s += row[c] * xv[c];
            }
            v[r] = s;
        }
        self.push(Op::MatVec { w, x, rows, cols }, v)
    }

    pub fn mean_many(&mut self, parents: Vec<NodeId>) -> NodeId {
        assert!(!parents.is_empty());
        let len = self.nodes[parents[0]].value.len();
        let mut v = vec![0.0; len];
        for &p in &parents {
            debug_assert_eq!(self.nodes[p].value.len(), len);
            for (acc, x) in v.iter_mut().zip(&self.nodes[p].value) {
                *acc += x;
            }
        }
        let inv = 1.0 / parents.len() as f64;
        for x in v.iter_mut() {
            *x *= inv;
        }
        self.push(Op::MeanMany(parents), v)
    }

    pub fn stack(&mut self, parents: Vec<NodeId>) -> NodeId {
        let mut v = Vec::with_capacity(parents.len());
        for &p in &parents {
            debug_assert_eq!(self.nodes[p].value.len(), 1);
            v.push(self.nodes[p].value[0]);
        }
        self.push(Op::Stack(parents), v)
    }

    pub fn sum_elems(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.iter().sum();
        self.push(Op::SumElems(a), vec![s])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[a].value.len(), self.nodes[b].value.len());
        let s: f64 = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x * y)
            .sum();
        self.push(Op::Dot(a, b), vec![s])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v: Vec<f64> = self.nodes[a].value.iter().map(|x| x.max(0.0)).collect();
        self.push(Op::Relu(a), v)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v: Vec<f64> = self.nodes[a].value.iter().map(|&x| softplus(x)).collect();
        self.push(Op::Softplus(a), v)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = softmax(&self.nodes[a].value);
        self.push(Op::Softmax(a), v)
    }

    pub fn log_sum_exp(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = x.iter().map(|v| (v - m).exp()).sum();
        self.push(Op::LogSumExp(a), vec![m + s.ln()])
    }

    pub fn ln_clamped(&mut self, a: NodeId) -> NodeId {
        let mut clamped = false;
        let v: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .map(|&x| {
                if x < LN_CLAMP {
                    clamped = true;
                }
                x.max(LN_CLAMP).ln()
            })
            .collect();
        if clamped {
            log::warn!("ln input clamped at {LN_CLAMP}");
        }
        self.push(Op::LnClamped(a), v)
    }

    pub fn div_scalar(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[b].value.len(), 1);
        let bv = self.nodes[b].value[0];
        let v: Vec<f64> = self.nodes[a].value.iter().map(|x| x / bv).collect();
        self.push(Op::DivScalar { a, b }, v)
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[s].value.len(), 1);
        let sv = self.nodes[s].value[0];
        let v: Vec<f64> = self.nodes[a].value.iter().map(|x| x * sv).collect();
        self.push(Op::MulScalar { a, s }, v)
    }

    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f64)>) -> NodeId {
        assert!(!terms.is_empty());
        let len = self.nodes[terms[0].0].value.len();
        let mut v = vec![0.0; len];
        for &(p, c) in &terms {
            debug_assert_eq!(self.nodes[p].value.len(), len);
            for (acc, x) in v.iter_mut().zip(&self.nodes[p].value) {
                *acc += c * x;
            }
        }
        self.push(Op::WeightedSum(terms), v)
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        debug_assert_eq!(av.len(), bv.len());
        av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
    }

    /// Reverse pass from a scalar node; returns gradients for every
    /// registered parameter leaf (missing blocks get no entry).
    pub fn backward(&self, loss: NodeId) -> Gradients {
        debug_assert_eq!(self.nodes[loss].value.len(), 1);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for i in (0..=loss).rev() {
            if grads[i].is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf(_) | Op::Const) {
                continue;
            }
            let g = grads[i].take().expect("grad present");
            self.propagate(i, &g, &mut grads);
        }

        let mut by_param = HashMap::new();
        for &(p, id) in &self.params {
            if let Some(g) = grads[id].take() {
                by_param.insert(p, g);
            }
        }
        Gradients { by_param }
    }

    fn propagate(&self, i: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf(_) | Op::Const => {}
            Op::Slice { p, offset } => {
                let buf = acc(grads, *p, self.nodes[*p].value.len());
                for (k, gv) in g.iter().enumerate() {
                    buf[offset + k] += gv;
                }
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, g.len()), g, 1.0);
                add_into(acc(grads, *b, g.len()), g, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(acc(grads, *a, g.len()), g, 1.0);
                add_into(acc(grads, *b, g.len()), g, -1.0);
            }
            Op::Mul(a, b) => {
                let av = self.nodes[*a].value.clone();
                let bv = self.nodes[*b].value.clone();
                {
                    let buf = acc(grads, *a, g.len());
                    for k in 0..g.len() {
                        buf[k] += g[k] * bv[k];
                    }
                }
                let buf = acc(grads, *b, g.len());
                for k in 0..g.len() {
                    buf[k] += g[k] * av[k];
                }
            }
            Op::Scale(a, c) => {
                add_into(acc(grads, *a, g.len()), g, *c);
            }
            Op::AddConst(a, _) => {
                add_into(acc(grads, *a, g.len()), g, 1.0);
            }
            Op::PowConst(a, c) => {
                let av = self.nodes[*a].value.clone();
                let buf = acc(grads, *a, g.len());
                for k in 0..g.len() {
                    buf[k] += g[k] * c * av[k].powf(c - 1.0);
                }
            }
            Op::MatVec { w, x, rows, cols } => {
                let wv = self.nodes[*w].value.clone();
                let xv = self.nodes[*x].value.clone();
                {
                    let gw = acc(grads, *w, rows * cols);
                    for r in 0..*rows {
                        for c in 0..*cols {
                            gw[r * cols + c] += g[r] * xv[c];
                        }
                    }
                }
                let gx = acc(grads, *x, *cols);
                for r in 0..*rows {
                    let row = &wv[r * cols..(r + 1) * cols];
                    for c in 0..*cols {
                        gx[c] += g[r] * row[c];
                    }
                }
            }
            Op::MeanMany(parents) => {
                let inv = 1.0 / parents.len() as f64;
                for &p in parents {
                    add_into(acc(grads, p, g.len()), g, inv);
                }
            }
            Op::Stack(parents) => {
                for (k, &p) in parents.iter().enumerate() {
                    acc(grads, p, 1)[0] += g[k];
                }
            }
            Op::SumElems(a) => {
                let len = self.nodes[*a].value.len();
                let buf = acc(grads, *a, len);
                for v in buf.iter_mut() {
                    *v += g[0];
                }
            }
            Op::Dot(a, b) => {
                let av = self.nodes[*a].value.clone();
                let bv = self.nodes[*b].value.clone();
                add_into(acc(grads, *a, bv.len()), &bv, g[0]);
                add_into(acc(grads, *b, av.len()), &av, g[0]);
            }
            Op::Relu(a) => {
                let av = self.nodes[*a].value.clone();
                let buf = acc(grads, *a, g.len());
                for k in 0..g.len() {
                    if av[k] > 0.0 {
                        buf[k] += g[k];
                    }
                }
            }
            Op::Softplus(a) => {
                let av = self.nodes[*a].value.clone();
                let buf = acc(grads, *a, g.len());
                for k in 0..g.len() {
                    buf[k] += g[k] * sigmoid(av[k]);
                }
            }
            Op::Softmax(a) => {
                let y = node.value.clone();
                let gy: f64 = g.iter().zip(&y).map(|(gv, yv)| gv * yv).sum();
                let buf = acc(grads, *a, g.len());
                for k in 0..g.len() {
                    buf[k] += y[k] * (g[k] - gy);
                }
            }
            Op::LogSumExp(a) => {
                let sm = softmax(&self.nodes[*a].value);
                add_into(acc(grads, *a, sm.len()), &sm, g[0]);
            }
            Op::LnClamped(a) => {
                let av = self.nodes[*a].value.clone();
                let buf = acc(grads, *a, g.len());
                for k in 0..g.len() {
                    if av[k] >= LN_CLAMP {
                        buf[k] += g[k] / av[k];
                    }
                }
            }
            Op::DivScalar { a, b } => {
                let bv = self.nodes[*b].value[0];
                let av = self.nodes[*a].value.clone();
                add_into(acc(grads, *a, g.len()), g, 1.0 / bv);
                let mut gb = 0.0;
                for k in 0..g.len() {
                    gb -= g[k] * av[k] / (bv * bv);
                }
                acc(grads, *b, 1)[0] += gb;
            }
            Op::MulScalar { a, s } => {
                let sv = self.nodes[*s].value[0];
                let av = self.nodes[*a].value.clone();
                add_into(acc(grads, *a, g.len()), g, sv);
                let gs: f64 = g.iter().zip(&av).map(|(gv, x)| gv * x).sum();
                acc(grads, *s, 1)[0] += gs;
            }
            Op::WeightedSum(terms) => {
                for &(p, c) in terms {
                    add_into(acc(grads, p, g.len()), g, c);
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(buf: &mut [f64], g: &[f64], c: f64) {
    for (b, x) in buf.iter_mut().zip(g) {
        *b += c * x;
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!(
                (x - y).abs() <= tol * (1.0 + y.abs()),
                "grad mismatch: {x} vs {y}"
            );
        }
    }

    #[test]
    fn dot_with_shared_node_doubles_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Param::UserEmb, &[1.0, -2.0, 3.0]);
        let sq = t.dot(x, x);
        let g = t.backward(sq);
        assert_eq!(g.param(Param::UserEmb).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn composite_matches_finite_differences() {
        let x0 = vec![0.3, -0.5, 0.8, 0.1];
        let w0 = vec![0.2, -0.1, 0.4, 0.9, -0.3, 0.5, 0.7, 0.2, -0.6, 0.1, 0.3, -0.2];
        let eval = |x: &[f64], w: &[f64]| -> (f64, Option<(Vec<f64>, Vec<f64>)>) {
            let mut t = Tape::new();
            let xn = t.leaf(Param::UserEmb, x);
            let wn = t.leaf(Param::LayerWeight(0), w);
            let y = t.matvec(wn, xn, 3, 4);
            let r = t.relu(y);
            let sm = t.softmax(r);
            let lg = t.ln_clamped(sm);
            let p = t.constant(&[0.5, 0.25, 0.25]);
            let d = t.dot(p, lg);
            let sp = t.softplus(d);
            let lse = t.log_sum_exp(r);
            let loss = t.weighted_sum(vec![(sp, 1.0), (lse, 0.5)]);
            let g = t.backward(loss);
            (
                t.scalar(loss),
                Some((
                    g.param(Param::UserEmb).unwrap().to_vec(),
                    g.param(Param::LayerWeight(0)).unwrap().to_vec(),
                )),
            )
        };
        let (_, grads) = eval(&x0, &w0);
        let (gx, gw) = grads.unwrap();
        let nx = numeric_grad(|x| eval(x, &w0).0, &x0, 1e-6);
        let nw = numeric_grad(|w| eval(&x0, w).0, &w0, 1e-6);
        assert_close(&gx, &nx, 1e-7);
        assert_close(&gw, &nw, 1e-7);
    }

    #[test]
    fn div_scalar_and_mul_scalar_grads() {
        let x0 = vec![1.0, 2.0, 5.0];
        let eval = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut t = Tape::new();
            let xn = t.leaf(Param::WgB1, x);
            let s = t.sum_elems(xn);
            let m = t.scale(s, 1.0 / 3.0);
            let norm = t.div_scalar(xn, m);
            let a = t.slice(norm, 0, 1);
            let scaled = t.mul_scalar(norm, a);
            let loss = t.sum_elems(scaled);
            let g = t.backward(loss);
            (t.scalar(loss), g.param(Param::WgB1).unwrap().to_vec())
        };
        let (_, ga) = eval(&x0);
        let na = numeric_grad(|x| eval(x).0, &x0, 1e-6);
        assert_close(&ga, &na, 1e-7);
    }

    #[test]
    fn stack_mean_pow_grads() {
        let x0 = vec![0.7, 1.3];
        let eval = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut t = Tape::new();
            let xn = t.leaf(Param::Centers, x);
            let a = t.slice(xn, 0, 1);
            let b = t.slice(xn, 1, 1);
            let st = t.stack(vec![a, b, a]);
            let sq = t.mul(st, st);
            let mn = t.mean_many(vec![sq, st]);
            let pc = t.pow_const(mn, -1.5);
            let loss = t.sum_elems(pc);
            let g = t.backward(loss);
            (t.scalar(loss), g.param(Param::Centers).unwrap().to_vec())
        };
        let (_, ga) = eval(&x0);
        let na = numeric_grad(|x| eval(x).0, &x0, 1e-6);
        assert_close(&ga, &na, 1e-7);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert!(softplus(800.0).is_finite());
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn constants_receive_no_parameter_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Param::UserEmb, &[1.0, 2.0]);
        let c = t.constant(&[3.0, 4.0]);
        let d = t.dot(x, c);
        let g = t.backward(d);
        assert_eq!(g.param(Param::UserEmb).unwrap(), &[3.0, 4.0]);
        assert!(g.param(Param::ItemEmb).is_none());
    }
}
