//! Glue between the stages: corpus layouts, codebook fitting, graph coding
//! and community-level evaluation reports.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bvae::{canonicalize_block, Bvae, BvaeHyper, CanonicalBlockLayout};
use crate::citygraph::{induced_subgraph, sample_community_subgraph, CityGraph};
use crate::error::{contract, Result};
use crate::geometry::oriented_bounding_frame;
use crate::metrics::{context_score, out_block_pct, overlap_pct, wd_5d, wd_count};
use crate::quantizer::Codebook;
use crate::sampler::{GenerationState, ModelBundle, ScheduleConfig};

/// Canonical layouts of every non-super block, in node order.
pub fn block_layouts(graph: &CityGraph, hyper: &BvaeHyper) -> Result<Vec<CanonicalBlockLayout>> {
    graph
        .nodes
        .iter()
        .filter(|n| !n.is_super)
        .map(|n| canonicalize_block(&n.contour, &n.buildings, hyper.slots, hyper.h_max))
        .collect()
}

/// Encodes `layouts` and fits a percentile codebook to the posterior means,
/// recording `bvae_hash` as its source.
pub fn fit_codebook(bvae: &Bvae, bvae_hash: &str, layouts: &[CanonicalBlockLayout], levels: usize, seed: u64) -> Result<Codebook> {
    let refs: Vec<&CanonicalBlockLayout> = layouts.iter().collect();
    let lat = bvae.encode(&refs)?;
    let mus: Vec<Vec<f32>> = lat.iter().map(|l| l.mu.clone()).collect();
    let lvs: Vec<Vec<f32>> = lat.into_iter().map(|l| l.log_var).collect();
    let mut cb = Codebook::fit(&mus, &lvs, levels, seed)?;
    cb.source_checkpoint_hash = bvae_hash.to_string();
    Ok(cb)
}

/// Writes quantized codes of the posterior means into every block.
pub fn encode_graph(graph: &mut CityGraph, bvae: &Bvae, codebook: &Codebook) -> Result<()> {
    let layouts = block_layouts(graph, bvae.hyper())?;
    let refs: Vec<&CanonicalBlockLayout> = layouts.iter().collect();
    let lat = bvae.encode(&refs)?;
    let idx: Vec<usize> = (0..graph.nodes.len()).filter(|&i| !graph.nodes[i].is_super).collect();
    for (i, l) in idx.into_iter().zip(lat) {
        graph.nodes[i].layout_code = Some(codebook.quantize(&l.mu)?);
    }
    graph.code_dim = codebook.dim();
    Ok(())
}

/// Metrics of one generated community against its real counterpart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommunityReport {
    pub community: String,
    pub blocks: usize,
    /// Per-node neighbor-mean similarity, generated and real.
    pub per_node_ct: Vec<(String, Option<f64>, Option<f64>)>,
    pub ct_gen: f64,
    pub ct_real: f64,
    pub cts: f64,
    pub wd_5d: Option<f64>,
    pub wd_co: f64,
    pub overlap_pct: f64,
    pub out_block_pct: f64,
}

/// Compares two graphs with identical structure over the node set `members`.
pub fn community_report(name: &str, gen: &CityGraph, real: &CityGraph, members: &[usize]) -> Result<CommunityReport> {
    if gen.nodes.len() != real.nodes.len() {
        return Err(contract("generated and real graphs differ in size"));
    }
    let members: Vec<usize> = members.iter().copied().filter(|&i| !real.nodes[i].is_super).collect();
    let g = induced_subgraph(gen, &members);
    let r = induced_subgraph(real, &members);
    let cs = context_score(&g, &r)?;
    let per_node_ct = g
        .nodes
        .iter()
        .zip(cs.per_node_gen.iter().zip(&cs.per_node_real))
        .map(|(n, (a, b))| (n.block_id.clone(), *a, *b))
        .collect();
    let has_buildings = |x: &CityGraph| x.nodes.iter().any(|n| !n.buildings.is_empty());
    let wd5 = if has_buildings(&g) && has_buildings(&r) { Some(wd_5d(&g, &r)?) } else { None };
    Ok(CommunityReport {
        community: name.to_string(),
        blocks: members.len(),
        per_node_ct,
        ct_gen: cs.ct_gen,
        ct_real: cs.ct_real,
        cts: cs.cts,
        wd_5d: wd5,
        wd_co: wd_count(&g, &r)?,
        overlap_pct: overlap_pct(g.nodes.iter()),
        out_block_pct: out_block_pct(g.nodes.iter()),
    })
}

/// Community rows plus their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub city_id: String,
    pub communities: Vec<CommunityReport>,
    pub aggregate: AggregateRow,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct AggregateRow {
    pub communities: usize,
    pub ct_gen: f64,
    pub ct_real: f64,
    pub cts: f64,
    pub wd_5d: Option<f64>,
    pub wd_co: f64,
    pub overlap_pct: f64,
    pub out_block_pct: f64,
}

impl EvalReport {
    pub fn new(city_id: &str, communities: Vec<CommunityReport>) -> Self {
        let n = communities.len().max(1) as f64;
        let mean = |f: &dyn Fn(&CommunityReport) -> f64| communities.iter().map(f).sum::<f64>() / n;
        let wd: Vec<f64> = communities.iter().filter_map(|c| c.wd_5d).collect();
        let aggregate = AggregateRow {
            communities: communities.len(),
            ct_gen: mean(&|c| c.ct_gen),
            ct_real: mean(&|c| c.ct_real),
            cts: mean(&|c| c.cts),
            wd_5d: (!wd.is_empty()).then(|| wd.iter().sum::<f64>() / wd.len() as f64),
            wd_co: mean(&|c| c.wd_co),
            overlap_pct: mean(&|c| c.overlap_pct),
            out_block_pct: mean(&|c| c.out_block_pct),
        };
        Self { city_id: city_id.to_string(), communities, aggregate }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("community,blocks,ct_gen,ct_real,cts,wd_5d,wd_co,overlap_pct,out_block_pct\n");
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        for c in &self.communities {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{},{:.6},{:.6},{:.6}\n",
                c.community, c.blocks, c.ct_gen, c.ct_real, c.cts, opt(c.wd_5d), c.wd_co, c.overlap_pct, c.out_block_pct
            ));
        }
        let a = &self.aggregate;
        out.push_str(&format!(
            "aggregate,{},{:.6},{:.6},{:.6},{},{:.6},{:.6},{:.6}\n",
            a.communities, a.ct_gen, a.ct_real, a.cts, opt(a.wd_5d), a.wd_co, a.overlap_pct, a.out_block_pct
        ));
        out
    }
}

/// Communities of radius `radius` around each center.
pub fn communities_around(graph: &CityGraph, centers: &[usize], radius: f64) -> Result<Vec<Vec<usize>>> {
    centers
        .iter()
        .map(|&c| Ok(sample_community_subgraph(graph, c, radius)?.members))
        .collect()
}

/// Evenly spaced community centers, `count` of them, over non-super nodes.
pub fn spread_centers(graph: &CityGraph, count: usize) -> Vec<usize> {
    let real: Vec<usize> = (0..graph.nodes.len()).filter(|&i| !graph.nodes[i].is_super).collect();
    if real.is_empty() || count == 0 {
        return Vec::new();
    }
    let step = (real.len() as f64 / count as f64).max(1.0);
    (0..count.min(real.len())).map(|k| real[((k as f64 + 0.5) * step) as usize]).collect()
}

/// Generates the blocks in `members` with every other block of `real` held
/// as a prior. `real` must carry codes for all blocks.
pub fn generate_community(bundle: &ModelBundle, real: &CityGraph, members: &[usize], cfg: &ScheduleConfig) -> Result<GenerationState> {
    let mut priors = vec![true; real.nodes.len()];
    for &i in members {
        priors[i] = false;
    }
    bundle.generate(real, &priors, cfg)
}

fn decode_members(bundle: &ModelBundle, real: &CityGraph, members: &[usize], zs: Vec<Vec<f32>>) -> Result<CityGraph> {
    let frames = members
        .iter()
        .map(|&i| oriented_bounding_frame(&real.nodes[i].contour))
        .collect::<Result<Vec<_>>>()?;
    let layouts = bundle.bvae.decode(&zs, &frames)?;
    let mut out = real.clone();
    let h_max = bundle.bvae.hyper().h_max;
    for (&i, l) in members.iter().zip(layouts) {
        out.nodes[i].buildings = l.to_buildings(h_max);
    }
    Ok(out)
}

/// Over-diverse reference: each block in `members` receives the code of a
/// block drawn by a city-wide random permutation, decoded as in generation.
pub fn shuffled_codes_baseline(bundle: &ModelBundle, real: &CityGraph, members: &[usize], seed: u64) -> Result<CityGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..real.nodes.len()).filter(|&i| !real.nodes[i].is_super).collect();
    pool.shuffle(&mut rng);
    let mut zs = Vec::with_capacity(members.len());
    for (k, _) in members.iter().enumerate() {
        let src = pool[k % pool.len()];
        let code = real.nodes[src].layout_code.as_ref().ok_or_else(|| contract("baseline needs coded blocks"))?;
        zs.push(bundle.latent_for(code, &mut rng)?);
    }
    decode_members(bundle, real, members, zs)
}

/// Over-similar reference: every block in `members` receives one latent,
/// drawn once from the code of block `source`.
pub fn copy_block_baseline(bundle: &ModelBundle, real: &CityGraph, members: &[usize], source: usize, seed: u64) -> Result<CityGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let code = real
        .nodes
        .get(source)
        .and_then(|n| n.layout_code.as_ref())
        .ok_or_else(|| contract(format!("copy source {source} has no code")))?;
    let z = bundle.latent_for(code, &mut rng)?;
    decode_members(bundle, real, members, vec![z; members.len()])
}
