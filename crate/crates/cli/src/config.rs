//! Declarative pipeline configuration loaded from one TOML file.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use coho_core::bvae::{BvaeHyper, BvaeTrainConfig};
use coho_core::citygraph::IngestConfig;
use coho_core::gmae::{GmaeConfig, GmaeTrainConfig};
use coho_core::sampler::ScheduleConfig;
use coho_core::toy::ToyConfig;
use serde::{Deserialize, Serialize};

/// Environment variable that replaces the master `seed`.
pub const SEED_ENV: &str = "COHO_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Master seed. Every stage seed is mixed with it, so zero leaves the
    /// per-stage seeds as written.
    pub seed: u64,
    /// Cities taking part in training, in corpus order.
    pub cities: Vec<String>,
    /// City used by `generate`, `eval` and as the default for `render`.
    pub eval_city: String,
    pub paths: Paths,
    pub toy: ToyConfig,
    /// Additional toy cities sharing `toy` but for id and seed.
    pub toy_extra: Vec<ToyExtra>,
    pub ingest: IngestConfig,
    pub split: SplitConfig,
    pub bvae: BvaeSection,
    pub codebook: CodebookSection,
    pub gmae: GmaeSection,
    pub generate: GenerateSection,
    pub eval: EvalSection,
    pub serve: ServeSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cities: vec!["toy".into(), "toy-b".into(), "toy-c".into()],
            eval_city: "toy".into(),
            paths: Paths::default(),
            toy: ToyConfig::default(),
            toy_extra: vec![ToyExtra { city_id: "toy-b".into(), seed: 100 }, ToyExtra { city_id: "toy-c".into(), seed: 101 }],
            ingest: IngestConfig::default(),
            split: SplitConfig::default(),
            bvae: BvaeSection::default(),
            codebook: CodebookSection::default(),
            gmae: GmaeSection::default(),
            generate: GenerateSection::default(),
            eval: EvalSection::default(),
            serve: ServeSection::default(),
        }
    }
}

/// Artifact locations. Relative paths resolve against the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Per-city GeoJSON inputs, `<data>/<city>/{blocks,buildings}.geojson`.
    pub data: PathBuf,
    pub graphs: PathBuf,
    pub checkpoints: PathBuf,
    pub codebook: PathBuf,
    pub runs: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            graphs: "work/graphs".into(),
            checkpoints: "work/checkpoints".into(),
            codebook: "work/codebook.json".into(),
            runs: "work/runs".into(),
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.data, &mut self.graphs, &mut self.checkpoints, &mut self.codebook, &mut self.runs] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn city_dir(&self, city: &str) -> PathBuf {
        self.data.join(city)
    }

    /// Ingested graph without layout codes.
    pub fn graph(&self, city: &str) -> PathBuf {
        self.graphs.join(format!("{city}.graph.json"))
    }

    /// Graph whose blocks carry codes from the current codebook.
    pub fn coded_graph(&self, city: &str) -> PathBuf {
        self.graphs.join(format!("{city}.coded.json"))
    }

    pub fn bvae(&self) -> PathBuf {
        self.checkpoints.join("bvae.ckpt")
    }

    pub fn gmae(&self) -> PathBuf {
        self.checkpoints.join("gmae.ckpt")
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.runs.join(run_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyExtra {
    pub city_id: String,
    pub seed: u64,
}

/// Which cities hold out blocks, and how they are split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Cities split 70/20/10; only their train blocks are used for fitting.
    /// Other cities contribute every block.
    pub holdout_cities: Vec<String>,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { holdout_cities: vec!["toy".into()], seed: 5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BvaeSection {
    pub model: BvaeHyper,
    pub train: BvaeTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookSection {
    #[serde(rename = "L")]
    pub levels: usize,
    pub seed: u64,
}

impl Default for CodebookSection {
    fn default() -> Self {
        Self { levels: 20, seed: 3 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmaeSection {
    pub model: GmaeConfig,
    pub train: GmaeTrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub schedule: ScheduleConfig,
    /// Fraction of blocks, drawn at random, kept as priors.
    pub prior_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub communities: usize,
    pub radius_m: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { communities: 8, radius_m: 250.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSection {
    pub addr: String,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self { addr: "127.0.0.1:8080".into() }
    }
}

impl PipelineConfig {
    /// Loads `path`, applies `key.path=value` overrides, then the seed from
    /// the environment, and resolves relative paths.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut table: toml::Table = text.parse().with_context(|| format!("parsing config {}", path.display()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: PipelineConfig = table.try_into().with_context(|| format!("invalid config {}", path.display()))?;
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s.trim().parse().with_context(|| format!("{SEED_ENV}={s} is not an unsigned integer"))?;
        }
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        cfg.paths.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cities.is_empty() {
            bail!("`cities` must name at least one city");
        }
        if !self.cities.contains(&self.eval_city) {
            bail!("eval_city `{}` is not listed in `cities`", self.eval_city);
        }
        if !(0.0..=1.0).contains(&self.generate.prior_fraction) {
            bail!("generate.prior_fraction must lie in [0, 1]");
        }
        if self.ingest.code_dim != self.bvae.model.latent_dim {
            bail!("ingest.code_dim ({}) differs from bvae.model.D_q ({})", self.ingest.code_dim, self.bvae.model.latent_dim);
        }
        self.gmae.model.validate()?;
        Ok(())
    }

    /// A stage seed mixed with the master seed.
    pub fn stage_seed(&self, stage_seed: u64) -> u64 {
        stage_seed ^ self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }

    /// Every toy city this config generates, base city first.
    pub fn toy_cities(&self) -> Vec<ToyConfig> {
        let mut out = vec![ToyConfig { seed: self.stage_seed(self.toy.seed), ..self.toy.clone() }];
        for e in &self.toy_extra {
            out.push(ToyConfig { city_id: e.city_id.clone(), seed: self.stage_seed(e.seed), ..self.toy.clone() });
        }
        out
    }
}

/// Sets `a.b.c = value` in `table`. The value is parsed as TOML and falls
/// back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not of the form key=value"))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty component");
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| anyhow!("override `{key}`: `{p}` is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
