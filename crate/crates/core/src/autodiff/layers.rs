use std::ops::Range;
use std::rc::Rc;

use rand::Rng;

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{contract, Result};

/// Negative slope of the LeakyReLU applied to attention logits.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors with their accumulated gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Scalar = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Vec<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), grads: Vec::new() }
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.grads.push(vec![T::zero(); value.numel()]);
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.grads[id.0]
    }

    #[cfg(test)]
    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.grads[id.0]
    }

    pub fn add_grad(&mut self, id: ParamId, g: &[T]) {
        for (o, &x) in self.grads[id.0].iter_mut().zip(g) {
            *o += x;
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn total_numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: self.grads.iter().map(|g| vec![U::zero(); g.len()]).collect(),
        }
    }
}

/// Glorot-uniform initialized `[fan_in, fan_out]` matrix.
pub fn glorot<T: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::of(rng.random_range(-a..a))).collect();
    Tensor::from_vec(&[fan_in, fan_out], data).unwrap()
}

/// Affine map `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = params.add(format!("{name}.weight"), glorot(rng, in_dim, out_dim));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim]));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, x: Var) -> Var {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        let h = tape.matmul(x, w);
        tape.add_row(h, b)
    }
}

/// Directed message graph stored by receiving node.
///
/// Edges `incoming(i)` point from `src[e]` into `i`, each with a scalar
/// bias feature fed to the attention logit.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGraph {
    offsets: Vec<usize>,
    pub src: Vec<usize>,
    pub bias: Vec<f32>,
}

impl AttentionGraph {
    /// Builds from directed `(from, to, bias)` triples.
    pub fn directed(n: usize, edges: &[(usize, usize, f32)]) -> Result<Self> {
        let mut buckets: Vec<Vec<(usize, f32)>> = vec![Vec::new(); n];
        for &(a, b, w) in edges {
            if a >= n || b >= n {
                return Err(contract(format!("edge ({a}, {b}) outside graph of {n} nodes")));
            }
            buckets[b].push((a, w));
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let (mut src, mut bias) = (Vec::new(), Vec::new());
        offsets.push(0);
        for mut bucket in buckets {
            bucket.sort_by_key(|p| p.0);
            for (a, w) in bucket {
                src.push(a);
                bias.push(w);
            }
            offsets.push(src.len());
        }
        Ok(Self { offsets, src, bias })
    }

    /// Undirected edges in both directions plus a self loop on every node.
    pub fn undirected_with_self_loops(n: usize, edges: &[(usize, usize, f32)], self_bias: f32) -> Result<Self> {
        let mut all = Vec::with_capacity(2 * edges.len() + n);
        for &(a, b, w) in edges {
            if a == b {
                continue;
            }
            all.push((a, b, w));
            all.push((b, a, w));
        }
        all.extend((0..n).map(|i| (i, i, self_bias)));
        Self::directed(n, &all)
    }

    /// Disjoint union; node indices of `other` are shifted past `self`.
    pub fn append(&mut self, other: &AttentionGraph) {
        let shift = self.node_count();
        let base = self.src.len();
        self.src.extend(other.src.iter().map(|&s| s + shift));
        self.bias.extend_from_slice(&other.bias);
        self.offsets.extend(other.offsets[1..].iter().map(|&o| o + base));
    }

    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn edge_count(&self) -> usize {
        self.src.len()
    }

    pub fn incoming(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    /// Every node must receive at least one message for attention to be defined.
    pub fn check_receivers(&self) -> Result<()> {
        match (0..self.node_count()).find(|&i| self.incoming(i).is_empty()) {
            Some(i) => Err(contract(format!("node {i} has no incoming edges"))),
            None => Ok(()),
        }
    }
}

impl Default for AttentionGraph {
    fn default() -> Self {
        Self { offsets: vec![0], src: Vec::new(), bias: Vec::new() }
    }
}

/// One multi-head graph attention layer with concatenated head outputs.
#[derive(Clone, Copy, Debug)]
pub struct GatLayer {
    pub weight: ParamId,
    pub att_self: ParamId,
    pub att_nb: ParamId,
    pub edge_weight: ParamId,
    pub bias: ParamId,
    pub heads: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl GatLayer {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(heads > 0 && out_dim % heads == 0, "output width must split evenly over heads");
        let d = out_dim / heads;
        let weight = params.add(format!("{name}.weight"), glorot(rng, in_dim, out_dim));
        let mut att = |suffix: &str| {
            let t: Tensor<T> = glorot(rng, heads, d);
            params.add(format!("{name}.{suffix}"), t.reshaped(&[1, out_dim]).unwrap())
        };
        let att_self = att("att_self");
        let att_nb = att("att_nb");
        let edge_weight = params.add(format!("{name}.edge_weight"), Tensor::zeros(&[1, heads]));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim]));
        Self { weight, att_self, att_nb, edge_weight, bias, heads, in_dim, out_dim }
    }

    /// Attention-aggregated features before the nonlinearity.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, x: Var, graph: &Rc<AttentionGraph>) -> Result<Var> {
        graph.check_receivers()?;
        if tape.value(x).rows() != graph.node_count() {
            return Err(contract(format!(
                "{} feature rows for a graph of {} nodes",
                tape.value(x).rows(),
                graph.node_count()
            )));
        }
        let w = tape.param(params, self.weight);
        let a_s = tape.param(params, self.att_self);
        let a_n = tape.param(params, self.att_nb);
        let ew = tape.param(params, self.edge_weight);
        let b = tape.param(params, self.bias);
        let h = tape.matmul(x, w);
        let agg = tape.graph_attention(h, a_s, a_n, ew, Rc::clone(graph), self.heads);
        Ok(tape.add_row(agg, b))
    }
}

pub fn gat_layer_forward<T: Scalar>(
    layer: &GatLayer,
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    x: Var,
    graph: &Rc<AttentionGraph>,
) -> Result<Var> {
    layer.forward(tape, params, x, graph)
}

/// Attention weights `[edge, head]` the layer assigns for input `x`.
pub fn gat_attention_weights<T: Scalar>(
    layer: &GatLayer,
    params: &ParamSet<T>,
    x: &Tensor<T>,
    graph: &Rc<AttentionGraph>,
) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    layer.forward(&mut tape, params, xv, graph)?;
    tape.last_attention_weights().map(<[T]>::to_vec).ok_or_else(|| contract("no attention node recorded"))
}
