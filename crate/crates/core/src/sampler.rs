//! Priority-scheduled iterative generation.
//!
//! Every iteration runs the masked autoencoder over the whole graph with the
//! still-pending blocks masked, ranks pending blocks by prediction confidence
//! and accepts the most confident ones until the cumulative accepted count
//! reaches the schedule's target. Accepted codes are then decoded to
//! buildings through the codebook and the block autoencoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bvae::Bvae;
use crate::citygraph::{BlockNode, Building, CityGraph, Edge, ShapeFeatures};
use crate::error::{contract, Error, Result};
use crate::geometry::{oriented_bounding_frame, OrientedFrame, Point, Polygon};
use crate::gmae::{Gmae, GraphInput, NodeLogits};
use crate::quantizer::{Codebook, QuantizedCode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleFamily {
    /// `1 − cos(π·t / 2T)`, reaching 1 at `t = T`.
    #[default]
    Cosine,
    /// `1 − cos(t / T)` verbatim; the last iteration accepts everything left.
    LiteralCosine,
    Linear,
    Logarithmic,
}

impl std::str::FromStr for ScheduleFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| contract(format!("unknown schedule family `{s}` (cosine, literal-cosine, linear, logarithmic)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub iterations: usize,
    pub family: ScheduleFamily,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { iterations: 12, family: ScheduleFamily::Cosine, seed: 0 }
    }
}

/// Cumulative fraction of blocks accepted after iteration `t` of `T`.
pub fn schedule_fraction(t: usize, cfg: &ScheduleConfig) -> Result<f64> {
    let big_t = cfg.iterations;
    if big_t == 0 {
        return Err(contract("schedule needs at least one iteration"));
    }
    if t > big_t {
        return Err(contract(format!("iteration {t} outside 0..={big_t}")));
    }
    let (t, tf) = (t as f64, big_t as f64);
    Ok(match cfg.family {
        ScheduleFamily::Cosine => {
            if t == tf {
                1.0
            } else {
                1.0 - (std::f64::consts::PI * t / (2.0 * tf)).cos()
            }
        }
        ScheduleFamily::LiteralCosine => 1.0 - (t / tf).cos(),
        ScheduleFamily::Linear => t / tf,
        ScheduleFamily::Logarithmic => (1.0 + t).ln() / (1.0 + tf).ln(),
    })
}

/// Ceiling that ignores floating-point noise just above an integer.
fn ceil_count(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

/// Cumulative accepted-or-prior count after each iteration for `n` blocks of
/// which `priors` are fixed. Each iteration accepts at least one block while
/// any remain, and the last iteration accepts all of them.
pub fn cumulative_targets(n: usize, priors: usize, cfg: &ScheduleConfig) -> Result<Vec<usize>> {
    if priors > n {
        return Err(contract("more priors than blocks"));
    }
    let mut out = Vec::with_capacity(cfg.iterations);
    let mut done = priors;
    for t in 1..=cfg.iterations {
        let mut target = ceil_count(schedule_fraction(t, cfg)? * n as f64).clamp(done, n);
        if t == cfg.iterations {
            target = n;
        }
        if target == done && done < n {
            target += 1;
        }
        done = target;
        out.push(done);
    }
    Ok(out)
}

/// Mean over code dimensions of the log-probability of the argmax class.
pub fn node_confidence(logits: &NodeLogits, node: usize) -> f64 {
    let mut total = 0.0;
    for k in 0..logits.code_dim {
        let row = logits.dim(node, k);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
        let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
        total += max - lse;
    }
    total / logits.code_dim as f64
}

/// A style-steering node with a fixed code attached to existing blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperNode {
    pub style_code: QuantizedCode,
    pub attach_to: Vec<usize>,
    #[serde(default = "default_super_distance")]
    pub edge_distance_m: f64,
}

fn default_super_distance() -> f64 {
    100.0
}

/// Appends `sn` as a coded node joined to every block in `attach_to`. Its
/// shape features are the mean of the attached blocks'.
pub fn apply_super_node(graph: &CityGraph, sn: &SuperNode) -> Result<CityGraph> {
    if sn.attach_to.is_empty() {
        return Err(contract("super node must attach to at least one block"));
    }
    let n = graph.nodes.len();
    if let Some(&bad) = sn.attach_to.iter().find(|&&i| i >= n || graph.nodes[i].is_super) {
        return Err(contract(format!("super node cannot attach to node {bad}")));
    }
    let mut unique = sn.attach_to.clone();
    unique.sort_unstable();
    unique.dedup();
    if sn.style_code.len() != graph.code_dim {
        return Err(contract(format!("style code has {} dimensions, graph expects {}", sn.style_code.len(), graph.code_dim)));
    }
    if !(sn.edge_distance_m > 0.0) {
        return Err(contract("super node edge distance must be positive"));
    }
    let k = unique.len() as f64;
    let mut feats = [0.0; 4];
    let mut center = Point::default();
    for &i in &unique {
        let f = graph.nodes[i].shape_features.to_array();
        for d in 0..4 {
            feats[d] += f[d] / k;
        }
        center = center.add(graph.nodes[i].centroid().scale(1.0 / k));
    }
    let mut out = graph.clone();
    out.nodes.push(BlockNode {
        block_id: format!("super_{}", n),
        contour: Polygon::rect(center.x - 1.0, center.y - 1.0, center.x + 1.0, center.y + 1.0)?,
        buildings: Vec::new(),
        shape_features: ShapeFeatures {
            aspect_ratio: feats[0],
            block_area: feats[1],
            convexity: feats[2],
            centroid_distance: feats[3],
        },
        layout_code: Some(sn.style_code.clone()),
        is_super: true,
    });
    out.edges.extend(unique.iter().map(|&i| Edge { i, j: n, distance: sn.edge_distance_m }));
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "iteration")]
pub enum NodeStatus {
    Prior,
    Accepted(usize),
    Pending,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub accepted: Vec<usize>,
    pub confidences: Vec<f64>,
    pub cumulative: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationState {
    pub graph: CityGraph,
    pub status: Vec<NodeStatus>,
    pub trace: Vec<IterationTrace>,
}

impl GenerationState {
    /// Iteration in which each node was accepted (0 for priors).
    pub fn iteration_of(&self, node: usize) -> Option<usize> {
        match self.status[node] {
            NodeStatus::Prior => Some(0),
            NodeStatus::Accepted(t) => Some(t),
            NodeStatus::Pending => None,
        }
    }

    pub fn trace_json(&self) -> Value {
        json!({
            "city_id": self.graph.city_id,
            "iterations": self.trace,
            "status": self.graph.nodes.iter().zip(&self.status).filter(|(n, _)| !n.is_super).map(|(n, s)| json!({
                "block_id": n.block_id,
                "status": s,
            })).collect::<Vec<_>>(),
        })
    }

    /// Generated and prior buildings as a GeoJSON FeatureCollection, in
    /// longitude/latitude when the graph carries a projection.
    pub fn buildings_geojson(&self) -> Value {
        let mut features = Vec::new();
        for (i, node) in self.graph.nodes.iter().enumerate() {
            if node.is_super {
                continue;
            }
            let source = if self.status[i] == NodeStatus::Prior { "prior" } else { "generated" };
            for b in &node.buildings {
                let mut ring: Vec<[f64; 2]> = b
                    .footprint
                    .vertices()
                    .iter()
                    .map(|p| match &self.graph.projection {
                        Some(proj) => {
                            let (lon, lat) = proj.unproject(*p);
                            [lon, lat]
                        }
                        None => [p.x, p.y],
                    })
                    .collect();
                ring.push(ring[0]);
                features.push(json!({
                    "type": "Feature",
                    "geometry": {"type": "Polygon", "coordinates": [ring]},
                    "properties": {
                        "block_id": node.block_id,
                        "height_m": b.height,
                        "iteration_accepted": self.iteration_of(i),
                        "source": source,
                    },
                }));
            }
        }
        json!({"type": "FeatureCollection", "features": features})
    }
}

/// Runs the scheduled code generation. `priors[i]` keeps node `i` fixed; it
/// must carry a code. Super nodes are always treated as priors and do not
/// count toward the schedule.
pub fn generate_codes(graph: &CityGraph, priors: &[bool], gmae: &Gmae, cfg: &ScheduleConfig) -> Result<GenerationState> {
    let n = graph.nodes.len();
    if priors.len() != n {
        return Err(contract("one prior flag per node required"));
    }
    if cfg.iterations == 0 {
        return Err(contract("schedule needs at least one iteration"));
    }
    let mut graph = graph.clone();
    let mut status = Vec::with_capacity(n);
    for (i, node) in graph.nodes.iter_mut().enumerate() {
        if priors[i] || node.is_super {
            if node.layout_code.is_none() {
                return Err(contract(format!("prior block {} has no layout code", node.block_id)));
            }
            status.push(NodeStatus::Prior);
        } else {
            node.layout_code = None;
            status.push(NodeStatus::Pending);
        }
    }
    let real = graph.nodes.iter().filter(|b| !b.is_super).count();
    let prior_real = (0..n).filter(|&i| status[i] == NodeStatus::Prior && !graph.nodes[i].is_super).count();
    let targets = cumulative_targets(real, prior_real, cfg)?;
    let mut trace = Vec::new();
    let mut done = prior_real;
    for (t, &target) in (1..=cfg.iterations).zip(&targets) {
        if done == real {
            break;
        }
        let input = GraphInput::from_graph(&graph);
        let hidden: Vec<bool> = status.iter().map(|s| *s == NodeStatus::Pending).collect();
        let logits = gmae.logits(&input, &hidden)?;
        let mut ranked: Vec<(f64, usize)> =
            (0..n).filter(|&i| hidden[i]).map(|i| (node_confidence(&logits, i), i)).collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        ranked.truncate(target - done);
        for &(_, i) in &ranked {
            graph.nodes[i].layout_code = Some(logits.argmax(i));
            status[i] = NodeStatus::Accepted(t);
        }
        done = target;
        trace.push(IterationTrace {
            iteration: t,
            accepted: ranked.iter().map(|r| r.1).collect(),
            confidences: ranked.iter().map(|r| r.0).collect(),
            cumulative: done,
        });
    }
    Ok(GenerationState { graph, status, trace })
}

/// The three trained artifacts generation needs, with their content hashes.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub bvae: Bvae,
    pub bvae_hash: String,
    pub codebook: Codebook,
    pub gmae: Gmae,
}

impl ModelBundle {
    /// Checks that the codebook was fit on this block autoencoder and the
    /// graph model was trained on this codebook.
    pub fn check(&self) -> Result<()> {
        if self.codebook.source_checkpoint_hash != self.bvae_hash {
            return Err(Error::Compatibility(format!(
                "codebook was fit on checkpoint {}, but block autoencoder {} was supplied",
                self.codebook.source_checkpoint_hash, self.bvae_hash
            )));
        }
        let cb = self.codebook.hash();
        if self.gmae.codebook_hash != cb {
            return Err(Error::Compatibility(format!(
                "graph model was trained on codebook {}, but codebook {cb} was supplied",
                self.gmae.codebook_hash
            )));
        }
        let h = &self.gmae.net.hyper;
        if h.code_dim != self.codebook.dim() || h.levels != self.codebook.levels() {
            return Err(Error::Compatibility("graph model and codebook disagree on code shape".into()));
        }
        if self.bvae.hyper().latent_dim != self.codebook.dim() {
            return Err(Error::Compatibility("block autoencoder and codebook disagree on latent size".into()));
        }
        Ok(())
    }

    /// Latent for a code: bin representatives plus noise scaled by a
    /// log-variance vector drawn from the codebook's pool.
    pub fn latent_for(&self, code: &QuantizedCode, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
        let mut z = self.codebook.dequantize(code)?;
        let lv = self.codebook.sample_sigma(rng)?;
        for (zk, &l) in z.iter_mut().zip(lv) {
            let eps: f64 = StandardNormal.sample(rng);
            *zk += ((0.5 * l as f64).exp() * eps) as f32;
        }
        Ok(z)
    }

    /// Replaces the buildings of every accepted block with decoded geometry.
    pub fn decode_state(&self, state: &mut GenerationState, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDEC0DE);
        let mut targets = Vec::new();
        let mut zs = Vec::new();
        let mut frames: Vec<OrientedFrame> = Vec::new();
        for (i, node) in state.graph.nodes.iter().enumerate() {
            if node.is_super || !matches!(state.status[i], NodeStatus::Accepted(_)) {
                continue;
            }
            let code = node.layout_code.as_ref().ok_or_else(|| contract("accepted block without a code"))?;
            zs.push(self.latent_for(code, &mut rng)?);
            frames.push(oriented_bounding_frame(&node.contour)?);
            targets.push(i);
        }
        let layouts = self.bvae.decode(&zs, &frames)?;
        let h_max = self.bvae.hyper().h_max;
        for (i, layout) in targets.into_iter().zip(layouts) {
            state.graph.nodes[i].buildings = layout.to_buildings(h_max);
        }
        Ok(())
    }

    /// Full generation: scheduled codes, then geometry.
    pub fn generate(&self, graph: &CityGraph, priors: &[bool], cfg: &ScheduleConfig) -> Result<GenerationState> {
        self.check()?;
        let mut state = generate_codes(graph, priors, &self.gmae, cfg)?;
        self.decode_state(&mut state, cfg.seed)?;
        Ok(state)
    }

    /// Codes every block of `graph` from its existing buildings.
    pub fn encode_graph(&self, graph: &mut CityGraph) -> Result<()> {
        crate::pipeline::encode_graph(graph, &self.bvae, &self.codebook)
    }
}

/// Buildings of non-super nodes, for reporting.
pub fn generated_buildings(state: &GenerationState) -> Vec<(&str, &Building)> {
    state
        .graph
        .nodes
        .iter()
        .filter(|n| !n.is_super)
        .flat_map(|n| n.buildings.iter().map(move |b| (n.block_id.as_str(), b)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_fraction_at_midpoint() {
        let cfg = ScheduleConfig::default();
        assert!((schedule_fraction(6, &cfg).unwrap() - (1.0 - std::f64::consts::FRAC_PI_4.cos())).abs() < 1e-12);
        assert_eq!(schedule_fraction(12, &cfg).unwrap(), 1.0);
        assert!(schedule_fraction(13, &cfg).is_err());
    }

    #[test]
    fn every_family_starts_at_zero_and_is_monotone() {
        for family in [ScheduleFamily::Cosine, ScheduleFamily::LiteralCosine, ScheduleFamily::Linear, ScheduleFamily::Logarithmic] {
            let cfg = ScheduleConfig { iterations: 9, family, seed: 0 };
            assert_eq!(schedule_fraction(0, &cfg).unwrap(), 0.0);
            let v: Vec<f64> = (0..=9).map(|t| schedule_fraction(t, &cfg).unwrap()).collect();
            assert!(v.windows(2).all(|w| w[1] >= w[0]), "{family:?}");
        }
    }

    #[test]
    fn literal_cosine_forces_completion() {
        let cfg = ScheduleConfig { iterations: 12, family: ScheduleFamily::LiteralCosine, seed: 0 };
        let last = schedule_fraction(12, &cfg).unwrap();
        assert!((last - (1.0 - 1f64.cos())).abs() < 1e-12);
        assert_eq!(*cumulative_targets(50, 0, &cfg).unwrap().last().unwrap(), 50);
    }

    #[test]
    fn minimum_one_acceptance_per_iteration() {
        let cfg = ScheduleConfig { iterations: 5, family: ScheduleFamily::Cosine, seed: 0 };
        assert_eq!(cumulative_targets(10, 8, &cfg).unwrap(), vec![9, 10, 10, 10, 10]);
    }

    #[test]
    fn family_names_parse() {
        assert_eq!("literal-cosine".parse::<ScheduleFamily>().unwrap(), ScheduleFamily::LiteralCosine);
        assert!("exp".parse::<ScheduleFamily>().is_err());
    }
}
