use std::collections::HashMap;
use std::rc::Rc;

use super::layers::{AttentionGraph, ParamId, ParamSet, LEAKY_SLOPE};
use super::{Scalar, Tensor};
use crate::error::{contract, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct AttentionSaved<T> {
    h: Var,
    att_self: Var,
    att_nb: Var,
    edge_w: Var,
    graph: Rc<AttentionGraph>,
    heads: usize,
    /// Softmax weights, `[edge, head]`.
    alpha: Vec<T>,
    /// Pre-activation logits, `[edge, head]`.
    pre: Vec<T>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Elu(Var),
    Sigmoid(Var),
    Exp(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    FillRows { x: Var, fill: Var, rows: Rc<[bool]> },
    Attention(Box<AttentionSaved<T>>),
    SoftmaxCe { logits: Var, targets: Rc<[usize]>, weights: Option<Rc<[T]>>, probs: Vec<T>, norm: T },
    BceLogits { logits: Var, targets: Rc<[T]>, weights: Option<Rc<[T]>>, norm: T },
    L1 { x: Var, target: Rc<[T]>, weights: Option<Rc<[T]>>, norm: T },
    GaussianKl { mu: Var, log_var: Var },
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for one backward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn leaky<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * T::of(LEAKY_SLOPE)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Parameter leaf; repeated requests for the same parameter share one node.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(params.value(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(k, bv.rows(), "matmul inner dimensions");
        let mut out = vec![T::zero(); n * m];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = ad[i * k + p];
                if x == T::zero() {
                    continue;
                }
                let brow = &bd[p * m..(p + 1) * m];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&[n, m], out).unwrap(), Op::MatMul(a, b), rg)
    }

    /// `x + bias` with `bias` of shape `[1, cols]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        assert_eq!(bv.numel(), c, "row bias width");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddRow(x, bias), rg)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.numel(), bv.numel(), "elementwise shapes");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_vec(av.shape(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::from_vec(xv.shape(), data).unwrap();
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > T::zero() { v } else { v.exp() - T::one() }, Op::Elu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshaped(shape).expect("reshape element count");
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, p, q) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(n, bv.rows(), "concat rows");
        let mut out = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&[n, p + q], out).unwrap(), Op::ConcatCols(a, b), rg)
    }

    /// Rows flagged in `rows` are replaced by the single row `fill`.
    pub fn fill_rows(&mut self, x: Var, fill: Var, rows: Rc<[bool]>) -> Var {
        let (xv, fv) = (self.value(x), self.value(fill));
        let c = xv.cols();
        assert_eq!(fv.numel(), c, "fill row width");
        assert_eq!(rows.len(), xv.rows(), "fill flags");
        let mut out = xv.clone();
        for (r, row) in out.data_mut().chunks_mut(c).enumerate() {
            if rows[r] {
                row.copy_from_slice(fv.data());
            }
        }
        let rg = self.rg(x) || self.rg(fill);
        self.push(out, Op::FillRows { x, fill, rows }, rg)
    }

    /// Multi-head graph attention aggregation over projected features `h`
    /// (`[n, heads·d]`). For every receiving node i and head, logits
    /// `LeakyReLU(a_self·h_i + a_nb·h_j + w·bias_ij)` are softmax-normalized
    /// over incoming edges, and the output is `Σ_j α_ij h_j`.
    pub fn graph_attention(
        &mut self,
        h: Var,
        att_self: Var,
        att_nb: Var,
        edge_w: Var,
        graph: Rc<AttentionGraph>,
        heads: usize,
    ) -> Var {
        let hv = self.value(h);
        let n = hv.rows();
        let width = hv.cols();
        assert_eq!(graph.node_count(), n, "attention graph size");
        assert_eq!(width % heads, 0, "width divisible by heads");
        let d = width / heads;
        let (asv, anv, wv) = (self.value(att_self).data(), self.value(att_nb).data(), self.value(edge_w).data());
        assert_eq!(asv.len(), heads * d);
        assert_eq!(anv.len(), heads * d);
        assert_eq!(wv.len(), heads);
        let hd = hv.data();
        let mut s_self = vec![T::zero(); n * heads];
        let mut s_nb = vec![T::zero(); n * heads];
        for i in 0..n {
            for k in 0..heads {
                let seg = &hd[i * width + k * d..i * width + (k + 1) * d];
                let (mut a, mut b) = (T::zero(), T::zero());
                for t in 0..d {
                    a += seg[t] * asv[k * d + t];
                    b += seg[t] * anv[k * d + t];
                }
                s_self[i * heads + k] = a;
                s_nb[i * heads + k] = b;
            }
        }
        let e_count = graph.edge_count();
        let mut pre = vec![T::zero(); e_count * heads];
        let mut alpha = vec![T::zero(); e_count * heads];
        let mut out = vec![T::zero(); n * width];
        for i in 0..n {
            let range = graph.incoming(i);
            for k in 0..heads {
                let mut mx = T::neg_infinity();
                for e in range.clone() {
                    let j = graph.src[e];
                    let p = s_self[i * heads + k] + s_nb[j * heads + k] + wv[k] * T::of(graph.bias[e] as f64);
                    pre[e * heads + k] = p;
                    mx = mx.max(leaky(p));
                }
                let mut z = T::zero();
                for e in range.clone() {
                    let a = (leaky(pre[e * heads + k]) - mx).exp();
                    alpha[e * heads + k] = a;
                    z += a;
                }
                let orow = &mut out[i * width + k * d..i * width + (k + 1) * d];
                for e in range.clone() {
                    let a = alpha[e * heads + k] / z;
                    alpha[e * heads + k] = a;
                    let j = graph.src[e];
                    let src = &hd[j * width + k * d..j * width + (k + 1) * d];
                    for (o, &x) in orow.iter_mut().zip(src) {
                        *o += a * x;
                    }
                }
            }
        }
        let rg = self.rg(h) || self.rg(att_self) || self.rg(att_nb) || self.rg(edge_w);
        let saved = AttentionSaved { h, att_self, att_nb, edge_w, graph, heads, alpha, pre };
        self.push(Tensor::from_vec(&[n, width], out).unwrap(), Op::Attention(Box::new(saved)), rg)
    }

    /// Attention weights `[edge, head]` of the most recent attention node,
    /// in the graph's edge order.
    pub fn last_attention_weights(&self) -> Option<&[T]> {
        self.nodes.iter().rev().find_map(|n| match &n.op {
            Op::Attention(s) => Some(&s.alpha[..]),
            _ => None,
        })
    }

    /// Weighted mean over rows of `-log softmax(logits)[target]`. Rows with
    /// zero weight contribute nothing, to the value or the gradient.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Rc<[usize]>, weights: Option<Rc<[T]>>) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = (lv.rows(), lv.cols());
        if c < 2 {
            return Err(contract("cross-entropy needs at least two classes"));
        }
        if targets.len() != r || weights.as_ref().is_some_and(|w| w.len() != r) {
            return Err(contract("cross-entropy target/weight count does not match rows"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(contract(format!("target class {bad} out of range [0, {c})")));
        }
        let norm = match &weights {
            Some(w) => w.iter().fold(T::zero(), |a, &b| a + b),
            None => T::of(r as f64),
        };
        if !(norm > T::zero()) {
            return Err(contract("cross-entropy over zero weighted rows"));
        }
        let mut probs = vec![T::zero(); r * c];
        let mut loss = T::zero();
        for row in 0..r {
            let w = weights.as_ref().map_or(T::one(), |w| w[row]);
            if w == T::zero() {
                continue;
            }
            let x = lv.row(row);
            let mx = x.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for &v in x {
                z += (v - mx).exp();
            }
            let lse = mx + z.ln();
            for (p, &v) in probs[row * c..(row + 1) * c].iter_mut().zip(x) {
                *p = (v - lse).exp();
            }
            loss += w * (lse - x[targets[row]]);
        }
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss / norm), Op::SoftmaxCe { logits, targets, weights, probs, norm }, rg))
    }

    /// Weighted mean binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Rc<[T]>, weights: Option<Rc<[T]>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.numel(), targets.len());
        let norm = match &weights {
            Some(w) => w.iter().fold(T::zero(), |a, &b| a + b).max(T::of(1e-12)),
            None => T::of(lv.numel() as f64),
        };
        let mut loss = T::zero();
        for (k, (&x, &t)) in lv.data().iter().zip(targets.iter()).enumerate() {
            let w = weights.as_ref().map_or(T::one(), |w| w[k]);
            if w == T::zero() {
                continue;
            }
            loss += w * (x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln());
        }
        let rg = self.rg(logits);
        self.push(Tensor::scalar(loss / norm), Op::BceLogits { logits, targets, weights, norm }, rg)
    }

    /// `Σ w·|x − target| / Σ w`.
    pub fn weighted_l1(&mut self, x: Var, target: Rc<[T]>, weights: Option<Rc<[T]>>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.numel(), target.len());
        let norm = match &weights {
            Some(w) => w.iter().fold(T::zero(), |a, &b| a + b).max(T::one()),
            None => T::of(xv.numel() as f64),
        };
        let mut loss = T::zero();
        for (k, (&v, &t)) in xv.data().iter().zip(target.iter()).enumerate() {
            let w = weights.as_ref().map_or(T::one(), |w| w[k]);
            loss += w * (v - t).abs();
        }
        let rg = self.rg(x);
        self.push(Tensor::scalar(loss / norm), Op::L1 { x, target, weights, norm }, rg)
    }

    /// Mean over elements of `½(μ² + e^{logσ²} − logσ² − 1)`.
    pub fn gaussian_kl(&mut self, mu: Var, log_var: Var) -> Var {
        let (m, l) = (self.value(mu), self.value(log_var));
        assert_eq!(m.numel(), l.numel(), "kl shapes");
        let half = T::of(0.5);
        let mut acc = T::zero();
        for (&a, &b) in m.data().iter().zip(l.data()) {
            acc += half * (a * a + b.exp() - b - T::one());
        }
        let n = T::of(m.numel() as f64);
        let rg = self.rg(mu) || self.rg(log_var);
        self.push(Tensor::scalar(acc / n), Op::GaussianKl { mu, log_var }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().fold(T::zero(), |a, &b| a + b) / T::of(xv.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one(); self.nodes[loss.0].value.numel()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads, params: self.params.clone() }
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out = &nodes[idx].value;
        macro_rules! with_buf {
            ($v:expr, |$b:ident| $body:block) => {
                if let Some($b) = grad_slot(nodes, grads, $v) $body
            };
        }
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                with_buf!(*a, |ga| {
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &bv.data()[p * m..(p + 1) * m];
                            let mut s = T::zero();
                            for (&x, &y) in grow.iter().zip(brow) {
                                s += x * y;
                            }
                            ga[i * k + p] += s;
                        }
                    }
                });
                with_buf!(*b, |gb| {
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let x = av.data()[i * k + p];
                            if x == T::zero() {
                                continue;
                            }
                            for (o, &y) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                });
            }
            Op::AddRow(x, bias) => {
                with_buf!(*x, |gx| {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += v;
                    }
                });
                with_buf!(*bias, |gb| {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                with_buf!(*a, |ga| {
                    for (o, &v) in ga.iter_mut().zip(g) {
                        *o += v;
                    }
                });
                with_buf!(*b, |gb| {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o += v;
                    }
                });
            }
            Op::Sub(a, b) => {
                with_buf!(*a, |ga| {
                    for (o, &v) in ga.iter_mut().zip(g) {
                        *o += v;
                    }
                });
                with_buf!(*b, |gb| {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                with_buf!(*a, |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * bv[k];
                    }
                });
                with_buf!(*b, |gb| {
                    for k in 0..g.len() {
                        gb[k] += g[k] * av[k];
                    }
                });
            }
            Op::Scale(x, s) => with_buf!(*x, |gx| {
                for (o, &v) in gx.iter_mut().zip(g) {
                    *o += v * *s;
                }
            }),
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                with_buf!(*x, |gx| {
                    for k in 0..g.len() {
                        if xv[k] > T::zero() {
                            gx[k] += g[k];
                        }
                    }
                });
            }
            Op::Elu(x) => {
                let xv = nodes[x.0].value.data();
                let yv = out.data();
                with_buf!(*x, |gx| {
                    for k in 0..g.len() {
                        gx[k] += if xv[k] > T::zero() { g[k] } else { g[k] * (yv[k] + T::one()) };
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = out.data();
                with_buf!(*x, |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * yv[k] * (T::one() - yv[k]);
                    }
                });
            }
            Op::Exp(x) => {
                let yv = out.data();
                with_buf!(*x, |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * yv[k];
                    }
                });
            }
            Op::Reshape(x) => with_buf!(*x, |gx| {
                for (o, &v) in gx.iter_mut().zip(g) {
                    *o += v;
                }
            }),
            Op::ConcatCols(a, b) => {
                let (p, q) = (nodes[a.0].value.cols(), nodes[b.0].value.cols());
                let n = nodes[a.0].value.rows();
                with_buf!(*a, |ga| {
                    for r in 0..n {
                        for c in 0..p {
                            ga[r * p + c] += g[r * (p + q) + c];
                        }
                    }
                });
                with_buf!(*b, |gb| {
                    for r in 0..n {
                        for c in 0..q {
                            gb[r * q + c] += g[r * (p + q) + p + c];
                        }
                    }
                });
            }
            Op::FillRows { x, fill, rows } => {
                let c = out.cols();
                with_buf!(*x, |gx| {
                    for (r, &masked) in rows.iter().enumerate() {
                        if !masked {
                            for k in 0..c {
                                gx[r * c + k] += g[r * c + k];
                            }
                        }
                    }
                });
                with_buf!(*fill, |gf| {
                    for (r, &masked) in rows.iter().enumerate() {
                        if masked {
                            for k in 0..c {
                                gf[k] += g[r * c + k];
                            }
                        }
                    }
                });
            }
            Op::Attention(s) => self.backprop_attention(s, g, grads),
            Op::SoftmaxCe { logits, targets, weights, probs, norm } => {
                let go = g[0];
                let c = nodes[logits.0].value.cols();
                with_buf!(*logits, |gl| {
                    for (row, &t) in targets.iter().enumerate() {
                        let w = weights.as_ref().map_or(T::one(), |w| w[row]);
                        if w == T::zero() {
                            continue;
                        }
                        let scale = go * w / *norm;
                        for k in 0..c {
                            let onehot = if k == t { T::one() } else { T::zero() };
                            gl[row * c + k] += scale * (probs[row * c + k] - onehot);
                        }
                    }
                });
            }
            Op::BceLogits { logits, targets, weights, norm } => {
                let go = g[0];
                let xv = nodes[logits.0].value.data();
                with_buf!(*logits, |gl| {
                    for k in 0..xv.len() {
                        let w = weights.as_ref().map_or(T::one(), |w| w[k]);
                        if w == T::zero() {
                            continue;
                        }
                        let sig = T::one() / (T::one() + (-xv[k]).exp());
                        gl[k] += go * w * (sig - targets[k]) / *norm;
                    }
                });
            }
            Op::L1 { x, target, weights, norm } => {
                let go = g[0];
                let xv = nodes[x.0].value.data();
                with_buf!(*x, |gx| {
                    for k in 0..xv.len() {
                        let w = weights.as_ref().map_or(T::one(), |w| w[k]);
                        let d = xv[k] - target[k];
                        let sign = if d > T::zero() {
                            T::one()
                        } else if d < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        gx[k] += go * w * sign / *norm;
                    }
                });
            }
            Op::GaussianKl { mu, log_var } => {
                let go = g[0];
                let (m, l) = (nodes[mu.0].value.data(), nodes[log_var.0].value.data());
                let n = T::of(m.len() as f64);
                with_buf!(*mu, |gm| {
                    for k in 0..m.len() {
                        gm[k] += go * m[k] / n;
                    }
                });
                with_buf!(*log_var, |gv| {
                    for k in 0..l.len() {
                        gv[k] += go * T::of(0.5) * (l[k].exp() - T::one()) / n;
                    }
                });
            }
            Op::Mean(x) => {
                let n = T::of(nodes[x.0].value.numel() as f64);
                with_buf!(*x, |gx| {
                    for o in gx.iter_mut() {
                        *o += g[0] / n;
                    }
                });
            }
        }
    }

    fn backprop_attention(&self, s: &AttentionSaved<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let hv = &nodes[s.h.0].value;
        let (n, width) = (hv.rows(), hv.cols());
        let heads = s.heads;
        let d = width / heads;
        let hd = hv.data();
        let asv = nodes[s.att_self.0].value.data();
        let anv = nodes[s.att_nb.0].value.data();
        let graph = &s.graph;
        let slope = T::of(LEAKY_SLOPE);

        let mut dh = vec![T::zero(); n * width];
        let mut ds_self = vec![T::zero(); n * heads];
        let mut ds_nb = vec![T::zero(); n * heads];
        let mut dw = vec![T::zero(); heads];
        let mut dalpha = Vec::new();
        for i in 0..n {
            let range = graph.incoming(i);
            for k in 0..heads {
                let gi = &g[i * width + k * d..i * width + (k + 1) * d];
                dalpha.clear();
                let mut dot = T::zero();
                for e in range.clone() {
                    let j = graph.src[e];
                    let a = s.alpha[e * heads + k];
                    let src = &hd[j * width + k * d..j * width + (k + 1) * d];
                    let mut da = T::zero();
                    for t in 0..d {
                        da += gi[t] * src[t];
                        dh[j * width + k * d + t] += a * gi[t];
                    }
                    dalpha.push(da);
                    dot += a * da;
                }
                for (q, e) in range.clone().enumerate() {
                    let a = s.alpha[e * heads + k];
                    let dact = a * (dalpha[q] - dot);
                    let dpre = if s.pre[e * heads + k] > T::zero() { dact } else { dact * slope };
                    let j = graph.src[e];
                    ds_self[i * heads + k] += dpre;
                    ds_nb[j * heads + k] += dpre;
                    dw[k] += dpre * T::of(graph.bias[e] as f64);
                }
            }
        }
        let mut da_self = vec![T::zero(); heads * d];
        let mut da_nb = vec![T::zero(); heads * d];
        for i in 0..n {
            for k in 0..heads {
                let (a, b) = (ds_self[i * heads + k], ds_nb[i * heads + k]);
                for t in 0..d {
                    let hx = hd[i * width + k * d + t];
                    dh[i * width + k * d + t] += a * asv[k * d + t] + b * anv[k * d + t];
                    da_self[k * d + t] += a * hx;
                    da_nb[k * d + t] += b * hx;
                }
            }
        }
        let mut add = |v: Var, src: &[T]| {
            if nodes[v.0].requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
                for (o, &x) in slot.iter_mut().zip(src) {
                    *o += x;
                }
            }
        };
        add(s.h, &dh);
        add(s.att_self, &da_self);
        add(s.att_nb, &da_nb);
        add(s.edge_w, &dw);
    }
}

fn grad_slot<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]))
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Adds every recorded parameter gradient into `params`.
    pub fn accumulate_into(&self, params: &mut ParamSet<T>) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.get(v) {
                params.add_grad(id, g);
            }
        }
    }
}
