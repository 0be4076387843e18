//! Graph masked autoencoder over the city block graph.
//!
//! Every node carries its quantized layout code (or a learned mask vector
//! when the code is hidden) next to its normalized shape features. Stacked
//! graph attention mixes neighborhood context, and a two-layer MLP predicts
//! a categorical distribution over bins for each code dimension.

use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, AttentionGraph, Checkpoint, GatLayer, Linear, ParamId, ParamSet, Scalar, Tape, Tensor, Var};
use crate::citygraph::CityGraph;
use crate::error::{contract, Error, Result};
use crate::quantizer::QuantizedCode;

pub const MODEL_KIND: &str = "gmae";
/// Shape features per node: aspect ratio, area, convexity, centroid distance.
pub const SHAPE_FEATURES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmaeConfig {
    /// Number of attention layers, i.e. hops of context.
    pub depth: usize,
    pub heads: usize,
    pub hidden: usize,
    pub mask_mean: f64,
    pub mask_std: f64,
    pub mask_lo: f64,
    pub mask_hi: f64,
    pub radius_m: f64,
    /// Softening length of the inverse-distance edge bias.
    pub distance_scale_m: f64,
    /// Adds each layer's input to its output where widths match.
    pub residual: bool,
}

impl Default for GmaeConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            heads: 4,
            hidden: 64,
            mask_mean: 0.55,
            mask_std: 0.25,
            mask_lo: 0.5,
            mask_hi: 1.0,
            radius_m: 500.0,
            distance_scale_m: 100.0,
            residual: true,
        }
    }
}

impl GmaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(contract("depth must be at least 1"));
        }
        if !(self.mask_lo >= 0.0 && self.mask_hi <= 1.0 && self.mask_lo < self.mask_hi) {
            return Err(contract(format!("mask range [{}, {}] must lie in [0, 1] and be non-empty", self.mask_lo, self.mask_hi)));
        }
        if !(self.mask_std > 0.0) {
            return Err(contract("mask_std must be positive"));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(contract("hidden width must split evenly over heads"));
        }
        Ok(())
    }

    pub fn edge_bias(&self, distance: f64) -> f32 {
        (1.0 / (1.0 + distance / self.distance_scale_m)) as f32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmaeTrainConfig {
    pub steps: usize,
    /// Subgraphs merged into one step.
    pub subgraphs_per_step: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for GmaeTrainConfig {
    fn default() -> Self {
        Self { steps: 8000, subgraphs_per_step: 4, seed: 11, adam: AdamConfig { lr: 2e-3, ..AdamConfig::default() } }
    }
}

/// Draws a masking ratio from a normal distribution truncated to `[mask_lo, mask_hi]`.
pub fn sample_mask_ratio(cfg: &GmaeConfig, rng: &mut impl Rng) -> f64 {
    let normal = Normal::new(cfg.mask_mean, cfg.mask_std).expect("positive std");
    loop {
        let m = normal.sample(rng);
        if (cfg.mask_lo..=cfg.mask_hi).contains(&m) {
            return m;
        }
    }
}

/// Mean and standard deviation of the shape features and edge distances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: [f64; SHAPE_FEATURES],
    pub std: [f64; SHAPE_FEATURES],
    pub edge_mean: f64,
    pub edge_std: f64,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count().max(1) as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > 1e-12 { sd } else { 1.0 })
}

impl FeatureStats {
    pub fn fit(graphs: &[&CityGraph]) -> Result<Self> {
        let feats: Vec<[f64; 4]> = graphs
            .iter()
            .flat_map(|g| g.nodes.iter().filter(|n| !n.is_super).map(|n| n.shape_features.to_array()))
            .collect();
        if feats.is_empty() {
            return Err(contract("no blocks to fit feature statistics"));
        }
        let mut mean = [0.0; 4];
        let mut std = [1.0; 4];
        for k in 0..4 {
            (mean[k], std[k]) = mean_std(feats.iter().map(|f| f[k]));
        }
        let (edge_mean, edge_std) = mean_std(graphs.iter().flat_map(|g| g.edges.iter().map(|e| e.distance)));
        Ok(Self { mean, std, edge_mean, edge_std })
    }

    pub fn normalize(&self, f: [f64; 4]) -> [f32; 4] {
        std::array::from_fn(|k| ((f[k] - self.mean[k]) / self.std[k]) as f32)
    }
}

/// Model-facing view of a graph: raw shape features, known codes, weighted edges.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphInput {
    pub features: Vec<[f64; SHAPE_FEATURES]>,
    pub codes: Vec<Option<QuantizedCode>>,
    pub edges: Vec<(usize, usize, f64)>,
}

impl GraphInput {
    pub fn from_graph(g: &CityGraph) -> Self {
        Self {
            features: g.nodes.iter().map(|n| n.shape_features.to_array()).collect(),
            codes: g.nodes.iter().map(|n| n.layout_code.clone()).collect(),
            edges: g.edges.iter().map(|e| (e.i, e.j, e.distance)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Induced view over `members`, in the given order.
    pub fn subset(&self, members: &[usize]) -> Self {
        let mut remap = HashMap::with_capacity(members.len());
        for (k, &m) in members.iter().enumerate() {
            remap.insert(m, k);
        }
        Self {
            features: members.iter().map(|&m| self.features[m]).collect(),
            codes: members.iter().map(|&m| self.codes[m].clone()).collect(),
            edges: self
                .edges
                .iter()
                .filter_map(|&(i, j, d)| Some((*remap.get(&i)?, *remap.get(&j)?, d)))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmaeHyper {
    pub config: GmaeConfig,
    #[serde(rename = "D_q")]
    pub code_dim: usize,
    #[serde(rename = "L")]
    pub levels: usize,
    pub stats: FeatureStats,
}

#[derive(Clone, Debug)]
pub struct GmaeNet {
    pub hyper: GmaeHyper,
    mask_vector: ParamId,
    layers: Vec<GatLayer>,
    /// Projects the node input onto the hidden width for the first residual.
    skip: Option<Linear>,
    dec1: Linear,
    dec2: Linear,
}

impl GmaeNet {
    pub fn new<T: Scalar>(hyper: GmaeHyper, params: &mut ParamSet<T>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &hyper.config;
        let mask_vector = params.add("mask_vector", Tensor::from_vec(&[1, hyper.code_dim], vec![T::of(0.5); hyper.code_dim]).unwrap());
        let mut layers = Vec::with_capacity(c.depth);
        let mut width = hyper.code_dim + SHAPE_FEATURES;
        for k in 0..c.depth {
            layers.push(GatLayer::new(params, &format!("gat{k}"), width, c.hidden, c.heads, &mut rng));
            width = c.hidden;
        }
        let skip = c.residual.then(|| Linear::new(params, "skip", hyper.code_dim + SHAPE_FEATURES, c.hidden, &mut rng));
        let dec1 = Linear::new(params, "dec1", c.hidden, c.hidden, &mut rng);
        let dec2 = Linear::new(params, "dec2", c.hidden, hyper.code_dim * hyper.levels, &mut rng);
        Self { hyper, mask_vector, layers, skip, dec1, dec2 }
    }

    pub fn attention_graph(&self, input: &GraphInput) -> Result<Rc<AttentionGraph>> {
        let edges: Vec<(usize, usize, f32)> =
            input.edges.iter().map(|&(i, j, d)| (i, j, self.hyper.config.edge_bias(d))).collect();
        Ok(Rc::new(AttentionGraph::undirected_with_self_loops(input.len(), &edges, 1.0)?))
    }

    /// Code channel and normalized features; rows with `hidden[i]` or no code
    /// get the mask vector in the code channel.
    pub fn build_node_inputs<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, input: &GraphInput, hidden: &[bool]) -> Result<Var> {
        let (n, d, l) = (input.len(), self.hyper.code_dim, self.hyper.levels as f64);
        if hidden.len() != n {
            return Err(contract("one mask flag per node required"));
        }
        let mut codes = vec![T::zero(); n * d];
        let mut fill_flags = vec![false; n];
        for i in 0..n {
            match (&input.codes[i], hidden[i]) {
                (Some(q), false) => {
                    if q.len() != d {
                        return Err(contract(format!("node {i} code has {} dimensions, model expects {d}", q.len())));
                    }
                    for (k, &c) in q.0.iter().enumerate() {
                        codes[i * d + k] = T::of((c as f64 + 0.5) / l);
                    }
                }
                _ => fill_flags[i] = true,
            }
        }
        let feats: Vec<T> = input
            .features
            .iter()
            .flat_map(|f| self.hyper.stats.normalize(*f).map(|x| T::of(x as f64)))
            .collect();
        let code_var = tape.constant(Tensor::from_vec(&[n, d], codes)?);
        let mask = tape.param(params, self.mask_vector);
        let masked = tape.fill_rows(code_var, mask, fill_flags.into());
        let fv = tape.constant(Tensor::from_vec(&[n, SHAPE_FEATURES], feats)?);
        Ok(tape.concat_cols(masked, fv))
    }

    /// Logits `[N, D_q·L]`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        input: &GraphInput,
        hidden: &[bool],
        graph: &Rc<AttentionGraph>,
    ) -> Result<Var> {
        let mut h = self.build_node_inputs(tape, params, input, hidden)?;
        for (k, layer) in self.layers.iter().enumerate() {
            let a = layer.forward(tape, params, h, graph)?;
            let a = tape.elu(a);
            h = match (&self.skip, k) {
                (None, _) => a,
                (Some(skip), 0) => {
                    let s = skip.forward(tape, params, h);
                    tape.add(a, s)
                }
                (Some(_), _) => tape.add(a, h),
            };
        }
        let a = self.dec1.forward(tape, params, h);
        let a = tape.elu(a);
        Ok(self.dec2.forward(tape, params, a))
    }

    /// Cross-entropy averaged over the code dimensions of nodes with `scored[i]`.
    pub fn loss<T: Scalar>(&self, tape: &mut Tape<T>, logits: Var, input: &GraphInput, scored: &[bool]) -> Result<Var> {
        let (n, d) = (input.len(), self.hyper.code_dim);
        let mut targets = vec![0usize; n * d];
        let mut weights = vec![T::zero(); n * d];
        for i in 0..n {
            if !scored[i] {
                continue;
            }
            let q = input.codes[i].as_ref().ok_or_else(|| contract(format!("scored node {i} has no code")))?;
            for k in 0..d {
                targets[i * d + k] = q.0[k] as usize;
                weights[i * d + k] = T::one();
            }
        }
        if !scored.iter().any(|&s| s) {
            return Err(contract("no masked nodes to score"));
        }
        let rows = tape.reshape(logits, &[n * d, self.hyper.levels]);
        tape.softmax_cross_entropy(rows, targets.into(), Some(weights.into()))
    }
}

/// Trained model with the codebook hash it was fit against.
#[derive(Clone, Debug)]
pub struct Gmae {
    pub net: GmaeNet,
    pub params: ParamSet<f32>,
    pub codebook_hash: String,
}

/// Per-node, per-dimension class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeLogits {
    pub code_dim: usize,
    pub levels: usize,
    pub data: Vec<f32>,
}

impl NodeLogits {
    pub fn dim(&self, node: usize, k: usize) -> &[f32] {
        let start = (node * self.code_dim + k) * self.levels;
        &self.data[start..start + self.levels]
    }

    /// Per-dimension argmax, ties to the lower index.
    pub fn argmax(&self, node: usize) -> QuantizedCode {
        QuantizedCode(
            (0..self.code_dim)
                .map(|k| {
                    let row = self.dim(node, k);
                    let mut best = 0;
                    for (c, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = c;
                        }
                    }
                    best as u16
                })
                .collect(),
        )
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GmaeTrainReport {
    pub loss_history: Vec<f32>,
    pub steps: usize,
}

impl Gmae {
    pub fn new(hyper: GmaeHyper, seed: u64) -> Result<Self> {
        hyper.config.validate()?;
        let mut params = ParamSet::new();
        let net = GmaeNet::new(hyper, &mut params, seed);
        Ok(Self { net, params, codebook_hash: String::new() })
    }

    pub fn logits(&self, input: &GraphInput, hidden: &[bool]) -> Result<NodeLogits> {
        let graph = self.net.attention_graph(input)?;
        let mut tape = Tape::new();
        let out = self.net.forward(&mut tape, &self.params, input, hidden, &graph)?;
        Ok(NodeLogits {
            code_dim: self.net.hyper.code_dim,
            levels: self.net.hyper.levels,
            data: tape.value(out).data().to_vec(),
        })
    }

    pub fn to_checkpoint(&self, report: &GmaeTrainReport) -> Checkpoint {
        let mut ck = Checkpoint::from_params(MODEL_KIND, serde_json::to_value(&self.net.hyper).unwrap(), &self.params);
        ck.metadata.insert("codebook_hash".into(), self.codebook_hash.clone());
        ck.metadata.insert("loss_history".into(), serde_json::to_string(&report.loss_history).unwrap());
        ck
    }

    /// Restores a model, refusing one trained against a different codebook.
    pub fn from_checkpoint(ck: &Checkpoint, expected_codebook_hash: Option<&str>) -> Result<Self> {
        if ck.model_kind != MODEL_KIND {
            return Err(Error::Compatibility(format!("expected a {MODEL_KIND} checkpoint, found {}", ck.model_kind)));
        }
        let hyper: GmaeHyper = serde_json::from_value(ck.hyperparameters.clone())?;
        let mut model = Self::new(hyper, 0)?;
        ck.load_into(&mut model.params)?;
        model.codebook_hash = ck.metadata.get("codebook_hash").cloned().unwrap_or_default();
        if let Some(expected) = expected_codebook_hash {
            if expected != model.codebook_hash {
                return Err(Error::Compatibility(format!(
                    "model was trained against codebook {}, but codebook {expected} was supplied",
                    model.codebook_hash
                )));
            }
        }
        Ok(model)
    }

    /// Per-dimension top-1 accuracy on `score` nodes when each is masked.
    ///
    /// Nodes in `always_hidden` stay masked throughout. Score nodes are split
    /// into two random halves; each half is masked in turn while the other
    /// stays visible.
    pub fn masked_accuracy(&self, input: &GraphInput, score: &[usize], always_hidden: &[bool], seed: u64) -> Result<f64> {
        let mut order = score.to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let half = order.len().div_ceil(2);
        let (mut correct, mut total) = (0usize, 0usize);
        for group in [&order[..half], &order[half..]] {
            if group.is_empty() {
                continue;
            }
            let mut hidden = always_hidden.to_vec();
            for &i in group {
                hidden[i] = true;
            }
            let logits = self.logits(input, &hidden)?;
            for &i in group {
                let truth = input.codes[i].as_ref().ok_or_else(|| contract(format!("node {i} has no code")))?;
                let pred = logits.argmax(i);
                correct += pred.0.iter().zip(&truth.0).filter(|(a, b)| a == b).count();
                total += truth.len();
            }
        }
        if total == 0 {
            return Err(contract("no nodes to score"));
        }
        Ok(correct as f64 / total as f64)
    }
}

/// One graph of a training corpus.
#[derive(Clone, Debug)]
pub struct TrainingGraph {
    pub input: GraphInput,
    pub centroids: Vec<[f64; 2]>,
    /// Always masked and never scored.
    pub held_out: Vec<bool>,
}

impl TrainingGraph {
    pub fn new(graph: &CityGraph, held_out: Vec<bool>) -> Result<Self> {
        if held_out.len() != graph.nodes.len() {
            return Err(contract("one held-out flag per node required"));
        }
        let centroids = graph
            .nodes
            .iter()
            .map(|n| {
                let c = n.centroid();
                [c.x, c.y]
            })
            .collect();
        Ok(Self { input: GraphInput::from_graph(graph), centroids, held_out })
    }
}

/// Trains on a corpus of graphs. Each step merges `subgraphs_per_step`
/// radius-bounded subgraphs, centered on random coded training nodes,
/// into one block-diagonal batch and masks a truncated-normal fraction of
/// each.
pub fn train_gmae(corpus: &[TrainingGraph], hyper: GmaeHyper, cfg: &GmaeTrainConfig) -> Result<(Gmae, GmaeTrainReport)> {
    let mut trainable = Vec::new();
    for (gi, tg) in corpus.iter().enumerate() {
        let n = tg.input.len();
        if tg.centroids.len() != n || tg.held_out.len() != n {
            return Err(contract("centroids and held-out flags must cover every node"));
        }
        trainable.extend((0..n).filter(|&i| !tg.held_out[i] && tg.input.codes[i].is_some()).map(|i| (gi, i)));
    }
    if trainable.is_empty() {
        return Err(contract("no coded training nodes"));
    }
    let mut model = Gmae::new(hyper, cfg.seed)?;
    let c = model.net.hyper.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6D_AE);
    let mut adam = AdamState::new();
    let mut report = GmaeTrainReport::default();
    let r2 = c.radius_m * c.radius_m;
    let mut window = Vec::new();
    for step in 0..cfg.steps {
        let mut batch = GraphInput { features: Vec::new(), codes: Vec::new(), edges: Vec::new() };
        let mut hidden = Vec::new();
        let mut scored = Vec::new();
        for _ in 0..cfg.subgraphs_per_step.max(1) {
            let (gi, center) = trainable[rng.random_range(0..trainable.len())];
            let tg = &corpus[gi];
            let [cx, cy] = tg.centroids[center];
            let sub: Vec<usize> = (0..tg.input.len())
                .filter(|&k| (tg.centroids[k][0] - cx).powi(2) + (tg.centroids[k][1] - cy).powi(2) <= r2)
                .collect();
            let m = sample_mask_ratio(&c, &mut rng);
            let n_mask = ((m * sub.len() as f64).ceil() as usize).clamp(1, sub.len());
            let mut pick = sub.clone();
            pick.shuffle(&mut rng);
            let chosen: HashSet<usize> = pick[..n_mask].iter().copied().collect();
            for &k in &sub {
                let coded = tg.input.codes[k].is_some();
                hidden.push(chosen.contains(&k) || tg.held_out[k] || !coded);
                scored.push(chosen.contains(&k) && !tg.held_out[k] && coded);
            }
            let part = tg.input.subset(&sub);
            let offset = batch.len();
            batch.features.extend(part.features);
            batch.codes.extend(part.codes);
            batch.edges.extend(part.edges.iter().map(|&(i, j, d)| (i + offset, j + offset, d)));
        }
        if !scored.iter().any(|&s| s) {
            continue;
        }
        let graph = model.net.attention_graph(&batch)?;
        let mut tape = Tape::new();
        let logits = model.net.forward(&mut tape, &model.params, &batch, &hidden, &graph)?;
        let loss = model.net.loss(&mut tape, logits, &batch, &scored)?;
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::TrainingDiverged { step, loss: lv });
        }
        tape.backward(loss).accumulate_into(&mut model.params);
        adam_step(&mut model.params, &mut adam, &cfg.adam)?;
        report.steps += 1;
        window.push(lv);
        if window.len() == 50 || step + 1 == cfg.steps {
            report.loss_history.push(window.iter().sum::<f32>() / window.len() as f32);
            window.clear();
        }
    }
    Ok((model, report))
}
