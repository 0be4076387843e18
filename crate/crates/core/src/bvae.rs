//! Block-level variational autoencoder.
//!
//! A block's buildings are mapped into the block's oriented frame and laid
//! out in a fixed number of slots. Slots are joined in a chain and encoded
//! by stacked graph attention into a Gaussian latent; a mirrored decoder
//! recovers per-slot existence, box geometry and height.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::rc::Rc;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, AttentionGraph, Checkpoint, GatLayer, Linear, ParamSet, Scalar, Tape, Tensor, Var};
use crate::citygraph::Building;
use crate::error::{contract, Error, Result};
use crate::geometry::{oriented_bounding_frame, OrientedFrame, Point, Polygon};

pub const MODEL_KIND: &str = "bvae";
/// Per-slot features: exists, u, v, w, h, normalized height.
pub const SLOT_FEATURES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Slot {
    pub exists: bool,
    /// Box center in normalized frame coordinates.
    pub center: [f64; 2],
    /// Box size as fractions of the frame width and height.
    pub extent: [f64; 2],
    /// Height divided by the model's height normalizer.
    pub height: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalBlockLayout {
    pub slots: Vec<Slot>,
    pub frame: OrientedFrame,
}

fn slot_order(a: &Slot, b: &Slot) -> Ordering {
    // Centers within 1e-7 along u count as the same column.
    if (a.center[0] - b.center[0]).abs() > 1e-7 {
        a.center[0].total_cmp(&b.center[0])
    } else {
        a.center[1].total_cmp(&b.center[1])
    }
}

/// Maps `buildings` into the oriented frame of `contour`. At most
/// `capacity` buildings are kept, largest footprint first.
pub fn canonicalize_block(contour: &Polygon, buildings: &[Building], capacity: usize, h_max: f64) -> Result<CanonicalBlockLayout> {
    let frame = oriented_bounding_frame(contour)?;
    Ok(canonicalize_in_frame(frame, buildings, capacity, h_max))
}

pub fn canonicalize_in_frame(frame: OrientedFrame, buildings: &[Building], capacity: usize, h_max: f64) -> CanonicalBlockLayout {
    let mut chosen: Vec<&Building> = buildings.iter().collect();
    if chosen.len() > capacity {
        warn!("block has {} buildings, keeping the {capacity} largest", chosen.len());
        chosen.sort_by(|a, b| b.footprint.area().total_cmp(&a.footprint.area()));
        chosen.truncate(capacity);
    }
    let mut slots: Vec<Slot> = chosen
        .iter()
        .map(|b| {
            let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for &p in b.footprint.vertices() {
                let q = frame.to_local(p);
                lo = [lo[0].min(q.x), lo[1].min(q.y)];
                hi = [hi[0].max(q.x), hi[1].max(q.y)];
            }
            let clamp = |x: f64| x.clamp(0.0, 1.0);
            Slot {
                exists: true,
                center: [clamp(0.5 * (lo[0] + hi[0])), clamp(0.5 * (lo[1] + hi[1]))],
                extent: [clamp(hi[0] - lo[0]), clamp(hi[1] - lo[1])],
                height: clamp(b.height / h_max),
            }
        })
        .collect();
    slots.sort_by(slot_order);
    slots.resize(capacity, Slot::default());
    CanonicalBlockLayout { slots, frame }
}

impl CanonicalBlockLayout {
    pub fn count(&self) -> usize {
        self.slots.iter().filter(|s| s.exists).count()
    }

    fn push_features(&self, out: &mut Vec<f32>) {
        for s in &self.slots {
            if s.exists {
                out.extend([1.0, s.center[0], s.center[1], s.extent[0], s.extent[1], s.height].map(|x| x as f32));
            } else {
                out.extend([0.0f32; SLOT_FEATURES]);
            }
        }
    }

    /// World-space boxes of the existing slots.
    pub fn to_buildings(&self, h_max: f64) -> Vec<Building> {
        self.slots
            .iter()
            .filter(|s| s.exists && s.extent[0] > 1e-6 && s.extent[1] > 1e-6)
            .filter_map(|s| {
                let fp = self
                    .frame
                    .box_to_world(Point::new(s.center[0], s.center[1]), Point::new(s.extent[0], s.extent[1]))
                    .ok()?;
                Some(Building { footprint: fp, height: s.height * h_max })
            })
            .collect()
    }
}

/// Encoder output for one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockLatent {
    pub mu: Vec<f32>,
    pub log_var: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BvaeHyper {
    #[serde(rename = "M")]
    pub slots: usize,
    #[serde(rename = "D_q")]
    pub latent_dim: usize,
    pub heads: usize,
    pub hidden: usize,
    #[serde(rename = "H_max")]
    pub h_max: f64,
}

impl Default for BvaeHyper {
    fn default() -> Self {
        Self { slots: 10, latent_dim: 32, heads: 4, hidden: 64, h_max: 60.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BvaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub kl_weight: f64,
    /// Fraction of all steps over which the KL weight ramps up linearly.
    pub kl_warmup: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for BvaeTrainConfig {
    fn default() -> Self {
        Self { epochs: 150, batch_size: 16, kl_weight: 1e-3, kl_warmup: 0.1, seed: 7, adam: AdamConfig::default() }
    }
}

/// Parameter layout of the network; forward passes are generic over the float type.
#[derive(Clone, Debug)]
pub struct BvaeNet {
    pub hyper: BvaeHyper,
    enc: [GatLayer; 3],
    mu: Linear,
    log_var: Linear,
    dec_in: Linear,
    dec: [GatLayer; 3],
    exist_head: Linear,
    geom_head: Linear,
}

pub struct BvaeOutput {
    pub mu: Var,
    pub log_var: Var,
    pub exist_logits: Var,
    pub geometry: Var,
}

impl BvaeNet {
    pub fn new<T: Scalar>(hyper: BvaeHyper, params: &mut ParamSet<T>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, k, m, d) = (hyper.hidden, hyper.heads, hyper.slots, hyper.latent_dim);
        let enc = [
            GatLayer::new(params, "enc0", SLOT_FEATURES, h, k, &mut rng),
            GatLayer::new(params, "enc1", h, h, k, &mut rng),
            GatLayer::new(params, "enc2", h, h, k, &mut rng),
        ];
        let mu = Linear::new(params, "mu", m * h, d, &mut rng);
        let log_var = Linear::new(params, "log_var", m * h, d, &mut rng);
        let dec_in = Linear::new(params, "dec_in", d, m * h, &mut rng);
        let dec = [
            GatLayer::new(params, "dec0", h, h, k, &mut rng),
            GatLayer::new(params, "dec1", h, h, k, &mut rng),
            GatLayer::new(params, "dec2", h, h, k, &mut rng),
        ];
        let exist_head = Linear::new(params, "exist", h, 1, &mut rng);
        let geom_head = Linear::new(params, "geometry", h, 5, &mut rng);
        Self { hyper, enc, mu, log_var, dec_in, dec, exist_head, geom_head }
    }

    /// `batch` disjoint slot chains with self loops.
    pub fn chain_graph(&self, batch: usize) -> Rc<AttentionGraph> {
        let m = self.hyper.slots;
        let edges: Vec<(usize, usize, f32)> = (1..m).map(|i| (i - 1, i, 1.0)).collect();
        let one = AttentionGraph::undirected_with_self_loops(m, &edges, 1.0).expect("valid chain");
        let mut g = AttentionGraph::default();
        for _ in 0..batch {
            g.append(&one);
        }
        Rc::new(g)
    }

    pub fn encode_tape<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, x: Var, graph: &Rc<AttentionGraph>) -> Result<(Var, Var)> {
        let batch = graph.node_count() / self.hyper.slots;
        let mut h = x;
        for layer in &self.enc {
            let a = layer.forward(tape, params, h, graph)?;
            h = tape.elu(a);
        }
        let flat = tape.reshape(h, &[batch, self.hyper.slots * self.hyper.hidden]);
        let mu = self.mu.forward(tape, params, flat);
        let lv = self.log_var.forward(tape, params, flat);
        Ok((mu, lv))
    }

    /// Existence logits `[B·M, 1]` and sigmoid geometry `[B·M, 5]`.
    pub fn decode_tape<T: Scalar>(&self, tape: &mut Tape<T>, params: &ParamSet<T>, z: Var, graph: &Rc<AttentionGraph>) -> Result<(Var, Var)> {
        let batch = tape.value(z).rows();
        let a = self.dec_in.forward(tape, params, z);
        let a = tape.elu(a);
        let mut h = tape.reshape(a, &[batch * self.hyper.slots, self.hyper.hidden]);
        for layer in &self.dec {
            let a = layer.forward(tape, params, h, graph)?;
            h = tape.elu(a);
        }
        let exist = self.exist_head.forward(tape, params, h);
        let g = self.geom_head.forward(tape, params, h);
        let geom = tape.sigmoid(g);
        Ok((exist, geom))
    }

    /// Full pass with `z = μ + exp(½ logσ²)·ε`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamSet<T>,
        x: Tensor<T>,
        eps: Tensor<T>,
        graph: &Rc<AttentionGraph>,
    ) -> Result<BvaeOutput> {
        let xv = tape.constant(x);
        let (mu, log_var) = self.encode_tape(tape, params, xv, graph)?;
        let half = tape.scale(log_var, T::of(0.5));
        let std = tape.exp(half);
        let e = tape.constant(eps);
        let noise = tape.mul(std, e);
        let z = tape.add(mu, noise);
        let (exist_logits, geometry) = self.decode_tape(tape, params, z, graph)?;
        Ok(BvaeOutput { mu, log_var, exist_logits, geometry })
    }
}

/// Existence BCE + L1 on existing-slot geometry + weighted KL.
pub fn bvae_loss<T: Scalar>(tape: &mut Tape<T>, out: &BvaeOutput, targets: &[f32], kl_weight: T) -> Var {
    let rows = targets.len() / SLOT_FEATURES;
    let mut exist = Vec::with_capacity(rows);
    let mut geo = Vec::with_capacity(rows * 5);
    let mut w = Vec::with_capacity(rows * 5);
    for r in targets.chunks(SLOT_FEATURES) {
        exist.push(T::of(r[0] as f64));
        for &x in &r[1..] {
            geo.push(T::of(x as f64));
            w.push(T::of(r[0] as f64));
        }
    }
    let bce = tape.bce_with_logits(out.exist_logits, exist.into(), None);
    let l1 = tape.weighted_l1(out.geometry, geo.into(), Some(w.into()));
    let kl = tape.gaussian_kl(out.mu, out.log_var);
    let klw = tape.scale(kl, kl_weight);
    let rec = tape.add(bce, l1);
    tape.add(rec, klw)
}

/// Trained model bound to its parameters.
#[derive(Clone, Debug)]
pub struct Bvae {
    pub net: BvaeNet,
    pub params: ParamSet<f32>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss per epoch.
    pub loss_history: Vec<f32>,
    pub steps: usize,
}

fn stack_features(layouts: &[&CanonicalBlockLayout]) -> Vec<f32> {
    let mut x = Vec::new();
    for l in layouts {
        l.push_features(&mut x);
    }
    x
}

impl Bvae {
    pub fn new(hyper: BvaeHyper, seed: u64) -> Self {
        let mut params = ParamSet::new();
        let net = BvaeNet::new(hyper, &mut params, seed);
        Self { net, params }
    }

    pub fn hyper(&self) -> &BvaeHyper {
        &self.net.hyper
    }

    fn check_layouts(&self, layouts: &[&CanonicalBlockLayout]) -> Result<()> {
        match layouts.iter().find(|l| l.slots.len() != self.net.hyper.slots) {
            Some(l) => Err(contract(format!("layout has {} slots, model expects {}", l.slots.len(), self.net.hyper.slots))),
            None => Ok(()),
        }
    }

    pub fn encode(&self, layouts: &[&CanonicalBlockLayout]) -> Result<Vec<BlockLatent>> {
        self.check_layouts(layouts)?;
        let mut out = Vec::with_capacity(layouts.len());
        let d = self.net.hyper.latent_dim;
        for chunk in layouts.chunks(64) {
            let graph = self.net.chain_graph(chunk.len());
            let x = stack_features(chunk);
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::from_vec(&[chunk.len() * self.net.hyper.slots, SLOT_FEATURES], x)?);
            let (mu, lv) = self.net.encode_tape(&mut tape, &self.params, xv, &graph)?;
            for b in 0..chunk.len() {
                out.push(BlockLatent {
                    mu: tape.value(mu).row(b).to_vec(),
                    log_var: tape.value(lv).row(b).to_vec(),
                });
            }
            debug_assert_eq!(tape.value(mu).cols(), d);
        }
        Ok(out)
    }

    /// Decodes latents into layouts placed in the given frames.
    pub fn decode(&self, zs: &[Vec<f32>], frames: &[OrientedFrame]) -> Result<Vec<CanonicalBlockLayout>> {
        if zs.len() != frames.len() {
            return Err(contract("one frame per latent required"));
        }
        let (m, d) = (self.net.hyper.slots, self.net.hyper.latent_dim);
        if let Some(z) = zs.iter().find(|z| z.len() != d || z.iter().any(|x| !x.is_finite())) {
            return Err(contract(format!("latent must be {d} finite values, got {}", z.len())));
        }
        let mut out = Vec::with_capacity(zs.len());
        for (chunk, fchunk) in zs.chunks(64).zip(frames.chunks(64)) {
            let graph = self.net.chain_graph(chunk.len());
            let mut tape = Tape::new();
            let flat: Vec<f32> = chunk.iter().flatten().copied().collect();
            let zv = tape.constant(Tensor::from_vec(&[chunk.len(), d], flat)?);
            let (ex, geo) = self.net.decode_tape(&mut tape, &self.params, zv, &graph)?;
            for (b, frame) in fchunk.iter().enumerate() {
                let slots = (0..m)
                    .map(|s| {
                        let r = b * m + s;
                        let exists = tape.value(ex).row(r)[0] > 0.0;
                        if !exists {
                            return Slot::default();
                        }
                        let g: Vec<f64> = tape.value(geo).row(r).iter().map(|&x| (x as f64).clamp(0.0, 1.0)).collect();
                        Slot { exists, center: [g[0], g[1]], extent: [g[2], g[3]], height: g[4] }
                    })
                    .collect();
                out.push(CanonicalBlockLayout { slots, frame: *frame });
            }
        }
        Ok(out)
    }

    /// Encodes to the posterior mean and decodes again.
    pub fn reconstruct(&self, layouts: &[&CanonicalBlockLayout]) -> Result<Vec<CanonicalBlockLayout>> {
        let lat = self.encode(layouts)?;
        let zs: Vec<Vec<f32>> = lat.into_iter().map(|l| l.mu).collect();
        let frames: Vec<OrientedFrame> = layouts.iter().map(|l| l.frame).collect();
        self.decode(&zs, &frames)
    }

    pub fn to_checkpoint(&self, report: &TrainReport) -> Checkpoint {
        let mut ck = Checkpoint::from_params(MODEL_KIND, serde_json::to_value(&self.net.hyper).unwrap(), &self.params);
        ck.metadata.insert("loss_history".into(), serde_json::to_string(&report.loss_history).unwrap());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.model_kind != MODEL_KIND {
            return Err(Error::Compatibility(format!("expected a {MODEL_KIND} checkpoint, found {}", ck.model_kind)));
        }
        let hyper: BvaeHyper = serde_json::from_value(ck.hyperparameters.clone())?;
        let mut model = Self::new(hyper, 0);
        ck.load_into(&mut model.params)?;
        Ok(model)
    }
}

/// 99th-percentile building height of a corpus, at least 1 m.
pub fn height_normalizer(heights: impl IntoIterator<Item = f64>) -> f64 {
    let mut h: Vec<f64> = heights.into_iter().filter(|x| x.is_finite()).collect();
    if h.is_empty() {
        return 1.0;
    }
    h.sort_by(f64::total_cmp);
    let pos = 0.99 * (h.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(h.len() - 1);
    (h[lo] + (h[hi] - h[lo]) * (pos - lo as f64)).max(1.0)
}

/// Trains from scratch on `corpus`; every layout must have `hyper.slots` slots.
pub fn train_bvae(corpus: &[CanonicalBlockLayout], hyper: BvaeHyper, cfg: &BvaeTrainConfig) -> Result<(Bvae, TrainReport)> {
    if corpus.is_empty() {
        return Err(contract("empty training corpus"));
    }
    let (m, d) = (hyper.slots, hyper.latent_dim);
    let mut model = Bvae::new(hyper, cfg.seed);
    let refs: Vec<&CanonicalBlockLayout> = corpus.iter().collect();
    model.check_layouts(&refs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let batch = cfg.batch_size.max(1);
    let steps_per_epoch = corpus.len().div_ceil(batch);
    let total = (cfg.epochs * steps_per_epoch).max(1);
    let warmup = (cfg.kl_warmup * total as f64).max(1.0);
    let mut graphs: HashMap<usize, Rc<AttentionGraph>> = HashMap::new();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut adam = AdamState::new();
    let mut report = TrainReport::default();
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for idx in order.chunks(batch) {
            let step = report.steps;
            let kl_weight = cfg.kl_weight * ((step + 1) as f64 / warmup).min(1.0);
            let layouts: Vec<&CanonicalBlockLayout> = idx.iter().map(|&i| &corpus[i]).collect();
            let x = stack_features(&layouts);
            let graph = graphs.entry(idx.len()).or_insert_with(|| model.net.chain_graph(idx.len())).clone();
            let eps: Vec<f32> = (0..idx.len() * d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut tape = Tape::new();
            let out = model.net.forward(
                &mut tape,
                &model.params,
                Tensor::from_vec(&[idx.len() * m, SLOT_FEATURES], x.clone())?,
                Tensor::from_vec(&[idx.len(), d], eps)?,
                &graph,
            )?;
            let loss = bvae_loss(&mut tape, &out, &x, kl_weight as f32);
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::TrainingDiverged { step, loss: lv });
            }
            tape.backward(loss).accumulate_into(&mut model.params);
            adam_step(&mut model.params, &mut adam, &cfg.adam)?;
            epoch_loss += lv as f64 * idx.len() as f64;
            report.steps += 1;
        }
        report.loss_history.push((epoch_loss / corpus.len() as f64) as f32);
    }
    Ok((model, report))
}
