//! One function per pipeline stage. Each reads and writes only the files
//! named by [`Paths`](crate::config::Paths).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use coho_core::bvae::{train_bvae as fit_bvae, Bvae, CanonicalBlockLayout};
use coho_core::citygraph::{induced_subgraph, ingest_city, split_blocks, CityGraph, IngestConfig, IngestReport};
use coho_core::gmae::{train_gmae as fit_gmae, FeatureStats, Gmae, GmaeHyper, GmaeTrainConfig, GraphInput, TrainingGraph};
use coho_core::pipeline::{block_layouts, communities_around, community_report, encode_graph, fit_codebook as fit_percentiles, spread_centers, EvalReport};
use coho_core::quantizer::Codebook;
use coho_core::sampler::{GenerationState, ModelBundle, NodeStatus, ScheduleConfig};
use coho_core::toy::ToyCity;
use coho_core::autodiff::Checkpoint;
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::render::{render_svg, RenderOptions};

/// Fails with a pointer to the stage that produces `path` when it is missing.
fn require(path: &Path, what: &str, producer: &str) -> Result<()> {
    if !path.exists() {
        bail!("missing {what} {} (produced by `coho {producer}`)", path.display());
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn make_toy(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for toy in cfg.toy_cities() {
        let city = ToyCity::generate(&toy)?;
        let dir = cfg.paths.city_dir(&toy.city_id);
        city.write_geojson(&dir)?;
        info!("wrote toy city {} ({} blocks) to {}", toy.city_id, city.contours.len(), dir.display());
        dirs.push(dir);
    }
    Ok(dirs)
}

pub fn ingest(cfg: &PipelineConfig) -> Result<Vec<IngestReport>> {
    let mut reports = Vec::new();
    std::fs::create_dir_all(&cfg.paths.graphs)?;
    for city in &cfg.cities {
        let dir = cfg.paths.city_dir(city);
        let (blocks, buildings) = (dir.join("blocks.geojson"), dir.join("buildings.geojson"));
        require(&blocks, "block contours", "make-toy")?;
        require(&buildings, "building footprints", "make-toy")?;
        let icfg = IngestConfig { city_id: city.clone(), seed: cfg.stage_seed(cfg.ingest.seed), ..cfg.ingest.clone() };
        let (graph, report) = ingest_city(&blocks, &buildings, &icfg)?;
        graph.save(&cfg.paths.graph(city))?;
        info!("{city}: {} blocks, {} edges, {} buildings", graph.node_count(), graph.edge_count(), report.buildings);
        reports.push(report);
    }
    Ok(reports)
}

/// Node indices a city contributes to model fitting.
fn fitting_nodes(cfg: &PipelineConfig, city: &str, graph: &CityGraph) -> Vec<usize> {
    if cfg.split.holdout_cities.iter().any(|c| c == city) {
        split_blocks(graph.nodes.len(), cfg.split.seed).train
    } else {
        (0..graph.nodes.len()).collect()
    }
}

fn load_graph(path: &Path, producer: &str) -> Result<CityGraph> {
    require(path, "graph", producer)?;
    Ok(CityGraph::load(path)?)
}

/// Canonical layouts of every block the models may be fitted on.
pub fn training_layouts(cfg: &PipelineConfig) -> Result<Vec<CanonicalBlockLayout>> {
    let mut out = Vec::new();
    for city in &cfg.cities {
        let graph = load_graph(&cfg.paths.graph(city), "ingest")?;
        let layouts = block_layouts(&graph, &cfg.bvae.model)?;
        out.extend(fitting_nodes(cfg, city, &graph).into_iter().map(|i| layouts[i].clone()));
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageSummary {
    pub artifact: PathBuf,
    pub hash: String,
    pub final_loss: Option<f32>,
}

pub fn train_bvae(cfg: &PipelineConfig) -> Result<StageSummary> {
    let corpus = training_layouts(cfg)?;
    info!("training block autoencoder on {} blocks", corpus.len());
    let tcfg = coho_core::bvae::BvaeTrainConfig { seed: cfg.stage_seed(cfg.bvae.train.seed), ..cfg.bvae.train.clone() };
    let (model, report) = fit_bvae(&corpus, cfg.bvae.model.clone(), &tcfg)?;
    std::fs::create_dir_all(&cfg.paths.checkpoints)?;
    let path = cfg.paths.bvae();
    let hash = model.to_checkpoint(&report).save(&path)?;
    Ok(StageSummary { artifact: path, hash, final_loss: report.loss_history.last().copied() })
}

fn load_bvae(cfg: &PipelineConfig) -> Result<(Bvae, String)> {
    let path = cfg.paths.bvae();
    require(&path, "block autoencoder checkpoint", "train-bvae")?;
    let (ck, hash) = Checkpoint::load(&path)?;
    Ok((Bvae::from_checkpoint(&ck)?, hash))
}

fn load_codebook(cfg: &PipelineConfig) -> Result<(Codebook, String)> {
    require(&cfg.paths.codebook, "codebook", "fit-codebook")?;
    Ok(Codebook::load(&cfg.paths.codebook)?)
}

/// Fits the codebook on the training blocks and codes every city graph with it.
pub fn fit_codebook(cfg: &PipelineConfig) -> Result<StageSummary> {
    let (bvae, bvae_hash) = load_bvae(cfg)?;
    if bvae.hyper() != &cfg.bvae.model {
        bail!("checkpoint {} was trained with a different bvae.model section; rerun `coho train-bvae`", cfg.paths.bvae().display());
    }
    let layouts = training_layouts(cfg)?;
    let codebook = fit_percentiles(&bvae, &bvae_hash, &layouts, cfg.codebook.levels, cfg.stage_seed(cfg.codebook.seed))?;
    if let Some(dir) = cfg.paths.codebook.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let hash = codebook.save(&cfg.paths.codebook)?;
    for city in &cfg.cities {
        let mut graph = load_graph(&cfg.paths.graph(city), "ingest")?;
        encode_graph(&mut graph, &bvae, &codebook)?;
        graph.save(&cfg.paths.coded_graph(city))?;
    }
    Ok(StageSummary { artifact: cfg.paths.codebook.clone(), hash, final_loss: None })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GmaeSummary {
    pub stage: StageSummary,
    /// Masked top-1 accuracy per holdout city on its training and held-out blocks.
    pub accuracy: Vec<CityAccuracy>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CityAccuracy {
    pub city_id: String,
    pub held_in: f64,
    pub held_out: f64,
}

/// Marks the validation and test blocks of a holdout city.
pub fn holdout_flags(cfg: &PipelineConfig, city: &str, n: usize) -> Vec<bool> {
    let mut flags = vec![false; n];
    if cfg.split.holdout_cities.iter().any(|c| c == city) {
        let split = split_blocks(n, cfg.split.seed);
        for i in split.val.into_iter().chain(split.test) {
            flags[i] = true;
        }
    }
    flags
}

pub fn train_gmae(cfg: &PipelineConfig) -> Result<GmaeSummary> {
    let (codebook, codebook_hash) = load_codebook(cfg)?;
    let mut graphs = Vec::new();
    for city in &cfg.cities {
        let g = load_graph(&cfg.paths.coded_graph(city), "fit-codebook")?;
        if g.code_dim != codebook.dim() {
            bail!("coded graph {city} does not match the codebook; rerun `coho fit-codebook`");
        }
        graphs.push(g);
    }
    let refs: Vec<&CityGraph> = graphs.iter().collect();
    let hyper = GmaeHyper { config: cfg.gmae.model.clone(), code_dim: codebook.dim(), levels: codebook.levels(), stats: FeatureStats::fit(&refs)? };
    let corpus = cfg
        .cities
        .iter()
        .zip(&graphs)
        .map(|(city, g)| TrainingGraph::new(g, holdout_flags(cfg, city, g.nodes.len())))
        .collect::<coho_core::Result<Vec<_>>>()?;
    let tcfg = GmaeTrainConfig { seed: cfg.stage_seed(cfg.gmae.train.seed), ..cfg.gmae.train.clone() };
    let (mut model, report) = fit_gmae(&corpus, hyper, &tcfg)?;
    model.codebook_hash = codebook_hash;

    let mut accuracy = Vec::new();
    for (city, g) in cfg.cities.iter().zip(&graphs) {
        let held = holdout_flags(cfg, city, g.nodes.len());
        if !held.iter().any(|&h| h) {
            continue;
        }
        let input = GraphInput::from_graph(g);
        let (outside, inside): (Vec<usize>, Vec<usize>) = (0..g.nodes.len()).partition(|&i| held[i]);
        let acc = CityAccuracy {
            city_id: city.clone(),
            held_in: model.masked_accuracy(&input, &inside, &held, 1)?,
            held_out: model.masked_accuracy(&input, &outside, &held, 1)?,
        };
        info!("{city}: masked accuracy held-in {:.4}, held-out {:.4}", acc.held_in, acc.held_out);
        accuracy.push(acc);
    }

    std::fs::create_dir_all(&cfg.paths.checkpoints)?;
    let path = cfg.paths.gmae();
    let hash = model.to_checkpoint(&report).save(&path)?;
    let summary = GmaeSummary { stage: StageSummary { artifact: path, hash, final_loss: report.loss_history.last().copied() }, accuracy };
    write_json(&cfg.paths.checkpoints.join("gmae.report.json"), &summary)?;
    Ok(summary)
}

/// Content hashes of the three model artifacts a run was produced with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHashes {
    pub bvae: String,
    pub codebook: String,
    pub gmae: String,
}

/// Loads the trained models and checks the hash chain between them.
pub fn load_bundle(cfg: &PipelineConfig) -> Result<(ModelBundle, ArtifactHashes)> {
    let (bvae, bvae_hash) = load_bvae(cfg)?;
    let (codebook, codebook_hash) = load_codebook(cfg)?;
    let path = cfg.paths.gmae();
    require(&path, "graph model checkpoint", "train-gmae")?;
    let (ck, gmae_hash) = Checkpoint::load(&path)?;
    let gmae = Gmae::from_checkpoint(&ck, Some(&codebook_hash))?;
    let bundle = ModelBundle { bvae, bvae_hash: bvae_hash.clone(), codebook, gmae };
    bundle.check()?;
    Ok((bundle, ArtifactHashes { bvae: bvae_hash, codebook: codebook_hash, gmae: gmae_hash }))
}

/// Loads the coded graph of `city`, which must come from the bundle's codebook.
pub fn load_coded_graph(cfg: &PipelineConfig, city: &str, bundle: &ModelBundle) -> Result<CityGraph> {
    let g = load_graph(&cfg.paths.coded_graph(city), "fit-codebook")?;
    for n in g.nodes.iter().filter(|n| !n.is_super) {
        match &n.layout_code {
            Some(code) => bundle.codebook.check_code(code)?,
            None => bail!("block {} of {city} has no layout code; rerun `coho fit-codebook`", n.block_id),
        }
    }
    Ok(g)
}

/// Metadata stored beside every generated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub city_id: String,
    pub schedule: ScheduleConfig,
    pub prior_block_ids: Vec<String>,
    pub generated_block_ids: Vec<String>,
    pub super_nodes: usize,
    pub artifacts: ArtifactHashes,
}

impl RunManifest {
    pub fn new(run_id: &str, state: &GenerationState, schedule: ScheduleConfig, artifacts: ArtifactHashes) -> Self {
        let ids = |want: fn(&NodeStatus) -> bool| -> Vec<String> {
            state
                .graph
                .nodes
                .iter()
                .zip(&state.status)
                .filter(|(n, s)| !n.is_super && want(s))
                .map(|(n, _)| n.block_id.clone())
                .collect()
        };
        Self {
            run_id: run_id.to_string(),
            city_id: state.graph.city_id.clone(),
            schedule,
            prior_block_ids: ids(|s| *s == NodeStatus::Prior),
            generated_block_ids: ids(|s| matches!(s, NodeStatus::Accepted(_))),
            super_nodes: state.graph.nodes.iter().filter(|n| n.is_super).count(),
            artifacts,
        }
    }
}

/// Writes `run.json`, `graph.json`, `buildings.geojson` and `trace.json` into `dir`.
pub fn write_run(dir: &Path, state: &GenerationState, manifest: &RunManifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("run.json"), manifest)?;
    state.graph.save(&dir.join("graph.json"))?;
    write_json(&dir.join("buildings.geojson"), &state.buildings_geojson())?;
    write_json(&dir.join("trace.json"), &state.trace_json())?;
    Ok(())
}

/// Parses `100%`, `35%` or a plain fraction such as `0.35`.
pub fn parse_fraction(s: &str) -> Result<f64> {
    let s = s.trim();
    let v = match s.strip_suffix('%') {
        Some(p) => p.trim().parse::<f64>().map(|v| v / 100.0),
        None => s.parse::<f64>(),
    }
    .with_context(|| format!("`{s}` is not a fraction or percentage"))?;
    if !(0.0..=1.0).contains(&v) {
        bail!("prior fraction {s} lies outside [0, 100%]");
    }
    Ok(v)
}

/// Marks `round(fraction · n)` randomly chosen non-super blocks as priors.
pub fn choose_priors(graph: &CityGraph, fraction: f64, seed: u64) -> Vec<bool> {
    let mut real: Vec<usize> = (0..graph.nodes.len()).filter(|&i| !graph.nodes[i].is_super).collect();
    real.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let keep = (fraction * real.len() as f64).round() as usize;
    let mut priors: Vec<bool> = graph.nodes.iter().map(|n| n.is_super).collect();
    for &i in &real[..keep.min(real.len())] {
        priors[i] = true;
    }
    priors
}

#[derive(Clone, Debug, Default)]
pub struct GenerateArgs {
    pub run_id: String,
    /// Overrides `generate.prior_fraction`.
    pub prior_fraction: Option<f64>,
}

pub fn generate(cfg: &PipelineConfig, args: &GenerateArgs) -> Result<PathBuf> {
    let (bundle, hashes) = load_bundle(cfg)?;
    let graph = load_coded_graph(cfg, &cfg.eval_city, &bundle)?;
    let schedule = ScheduleConfig { seed: cfg.stage_seed(cfg.generate.schedule.seed), ..cfg.generate.schedule.clone() };
    let fraction = args.prior_fraction.unwrap_or(cfg.generate.prior_fraction);
    let priors = choose_priors(&graph, fraction, schedule.seed);
    let state = bundle.generate(&graph, &priors, &schedule)?;
    let dir = cfg.paths.run_dir(&args.run_id);
    write_run(&dir, &state, &RunManifest::new(&args.run_id, &state, schedule, hashes))?;
    info!("run {} written to {}", args.run_id, dir.display());
    Ok(dir)
}

/// Copy of `graph` without super nodes.
pub fn strip_super_nodes(graph: &CityGraph) -> CityGraph {
    let keep: Vec<usize> = (0..graph.nodes.len()).filter(|&i| !graph.nodes[i].is_super).collect();
    if keep.len() == graph.nodes.len() {
        return graph.clone();
    }
    let mut out = induced_subgraph(graph, &keep);
    out.city_id = graph.city_id.clone();
    out
}

/// Evaluates `generated` against `real` over evenly spread communities.
pub fn evaluate(generated: &CityGraph, real: &CityGraph, communities: usize, radius_m: f64) -> Result<EvalReport> {
    let gen = strip_super_nodes(generated);
    if gen.nodes.len() != real.nodes.len() || gen.nodes.iter().zip(&real.nodes).any(|(a, b)| a.block_id != b.block_id) {
        bail!("generated graph {} does not have the blocks of {}", gen.city_id, real.city_id);
    }
    let centers = spread_centers(real, communities);
    let members = communities_around(real, &centers, radius_m)?;
    let rows = centers
        .iter()
        .zip(&members)
        .map(|(&c, m)| community_report(&real.nodes[c].block_id, &gen, real, m))
        .collect::<coho_core::Result<Vec<_>>>()?;
    Ok(EvalReport::new(&real.city_id, rows))
}

#[derive(Clone, Debug, Default)]
pub struct EvalArgs {
    pub run_id: String,
    /// Graph to evaluate instead of the run's `graph.json`.
    pub generated: Option<PathBuf>,
    /// Directory for `eval.json` and `eval.csv`; defaults to the run directory.
    pub out_dir: Option<PathBuf>,
}

pub fn eval(cfg: &PipelineConfig, args: &EvalArgs) -> Result<EvalReport> {
    let real = load_graph(&cfg.paths.coded_graph(&cfg.eval_city), "fit-codebook")?;
    let run_dir = cfg.paths.run_dir(&args.run_id);
    let gen_path = args.generated.clone().unwrap_or_else(|| run_dir.join("graph.json"));
    let generated = load_graph(&gen_path, "generate")?;
    let report = evaluate(&generated, &real, cfg.eval.communities, cfg.eval.radius_m)?;
    let out = args.out_dir.clone().unwrap_or(run_dir);
    write_json(&out.join("eval.json"), &report)?;
    std::fs::write(out.join("eval.csv"), report.to_csv())?;
    Ok(report)
}

#[derive(Clone, Debug, Default)]
pub struct RenderArgs {
    pub run_id: String,
    /// Graph to draw instead of the run's `graph.json`.
    pub graph: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn render(cfg: &PipelineConfig, args: &RenderArgs) -> Result<PathBuf> {
    let run_dir = cfg.paths.run_dir(&args.run_id);
    let (graph, highlight) = match &args.graph {
        Some(p) => (load_graph(p, "ingest")?, Vec::new()),
        None => {
            let graph = load_graph(&run_dir.join("graph.json"), "generate")?;
            let manifest_path = run_dir.join("run.json");
            require(&manifest_path, "run manifest", "generate")?;
            let manifest: RunManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
            let highlight = manifest.generated_block_ids.iter().filter_map(|id| graph.index_of(id)).collect();
            (graph, highlight)
        }
    };
    let opts = RenderOptions { max_height_m: cfg.bvae.model.h_max, highlight, ..RenderOptions::default() };
    let out = args.out.clone().unwrap_or_else(|| run_dir.join("render.svg"));
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&out, render_svg(&graph, &opts))?;
    Ok(out)
}
