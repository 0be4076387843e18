//! Per-dimension equal-percentile quantization of block latents.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

pub const CODEBOOK_FORMAT_VERSION: u32 = 1;
/// Upper bound on stored log-variance vectors.
pub const SIGMA_POOL_CAPACITY: usize = 10_000;

/// Per-dimension bin indices of one block layout.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuantizedCode(pub Vec<u16>);

impl QuantizedCode {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn indices(&self) -> &[u16] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    levels: usize,
    /// `levels − 1` strictly ascending boundaries per dimension.
    edges: Vec<Vec<f64>>,
    /// Median of the fit values falling in each bin.
    representatives: Vec<Vec<f32>>,
    /// Smallest and largest fit value per dimension, closing the outer bins.
    support: Vec<[f64; 2]>,
    sigma_pool: Vec<Vec<f32>>,
    pub source_checkpoint_hash: String,
}

/// Linear-interpolated quantile of sorted data at fraction `q`.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn distinct_count(sorted: &[f64]) -> usize {
    let scale = sorted.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-6 * scale;
    let mut count = usize::from(!sorted.is_empty());
    let mut last = sorted.first().copied().unwrap_or(0.0);
    for &v in &sorted[1.min(sorted.len())..] {
        if v - last > tol {
            count += 1;
            last = v;
        }
    }
    count
}

/// Bin of `x` given ascending `edges`: the number of edges at or below it.
fn bin_of(edges: &[f64], x: f64) -> usize {
    edges.partition_point(|&e| e <= x)
}

impl Codebook {
    /// Fits bin boundaries at the `k/levels` quantiles of each latent
    /// dimension and keeps a reservoir sample of log-variance vectors.
    pub fn fit(latents: &[Vec<f32>], log_vars: &[Vec<f32>], levels: usize, seed: u64) -> Result<Self> {
        if levels < 2 || levels > u16::MAX as usize {
            return Err(contract(format!("quantization levels must be in [2, {}], got {levels}", u16::MAX)));
        }
        let dim = latents.first().map(Vec::len).ok_or_else(|| contract("no latents to fit"))?;
        if latents.iter().any(|v| v.len() != dim) {
            return Err(contract("latent vectors differ in length"));
        }
        let mut edges = Vec::with_capacity(dim);
        let mut representatives = Vec::with_capacity(dim);
        let mut support = Vec::with_capacity(dim);
        for d in 0..dim {
            let mut col: Vec<f64> = latents.iter().map(|v| v[d] as f64).collect();
            if col.iter().any(|v| !v.is_finite()) {
                return Err(contract(format!("non-finite latent in dimension {d}")));
            }
            col.sort_by(f64::total_cmp);
            if distinct_count(&col) < levels {
                return Err(Error::DegenerateDimension(d));
            }
            let e: Vec<f64> = (1..levels).map(|k| quantile(&col, k as f64 / levels as f64)).collect();
            if e.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::DegenerateDimension(d));
            }
            let mut reps = Vec::with_capacity(levels);
            let mut start = 0;
            for k in 0..levels {
                let end = if k + 1 < levels { col.partition_point(|&v| v < e[k]) } else { col.len() };
                let rep = if end > start {
                    median(&col[start..end])
                } else {
                    let lo = if k == 0 { col[0] } else { e[k - 1] };
                    let hi = if k + 1 < levels { e[k] } else { col[col.len() - 1] };
                    0.5 * (lo + hi)
                };
                reps.push(rep as f32);
                start = end;
            }
            edges.push(e);
            representatives.push(reps);
            support.push([col[0], col[col.len() - 1]]);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sigma_pool: Vec<Vec<f32>> = Vec::new();
        for (seen, lv) in log_vars.iter().enumerate() {
            if lv.len() != dim {
                return Err(contract("log-variance vector length differs from latent dimension"));
            }
            if sigma_pool.len() < SIGMA_POOL_CAPACITY {
                sigma_pool.push(lv.clone());
            } else {
                let j = rng.random_range(0..=seen);
                if j < SIGMA_POOL_CAPACITY {
                    sigma_pool[j] = lv.clone();
                }
            }
        }
        Ok(Self { levels, edges, representatives, support, sigma_pool, source_checkpoint_hash: String::new() })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn dim(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self, d: usize) -> &[f64] {
        &self.edges[d]
    }

    pub fn representatives(&self, d: usize) -> &[f32] {
        &self.representatives[d]
    }

    pub fn sigma_pool(&self) -> &[Vec<f32>] {
        &self.sigma_pool
    }

    /// Bin width for dimension `d`, bin `k`. The outer bins end at the
    /// extreme values seen during fitting.
    pub fn bin_width(&self, d: usize, k: usize) -> f64 {
        let e = &self.edges[d];
        let [min, max] = self.support[d];
        let lo = k.checked_sub(1).map_or(min, |i| e[i]);
        let hi = e.get(k).copied().unwrap_or(max);
        hi - lo
    }

    pub fn quantize(&self, mu: &[f32]) -> Result<QuantizedCode> {
        if mu.len() != self.dim() {
            return Err(contract(format!("latent has {} dimensions, codebook {}", mu.len(), self.dim())));
        }
        Ok(QuantizedCode(
            mu.iter().zip(&self.edges).map(|(&x, e)| bin_of(e, x as f64) as u16).collect(),
        ))
    }

    pub fn dequantize(&self, q: &QuantizedCode) -> Result<Vec<f32>> {
        self.check_code(q)?;
        Ok(q.0.iter().zip(&self.representatives).map(|(&k, r)| r[k as usize]).collect())
    }

    pub fn check_code(&self, q: &QuantizedCode) -> Result<()> {
        if q.len() != self.dim() {
            return Err(contract(format!("code has {} dimensions, codebook {}", q.len(), self.dim())));
        }
        if let Some(k) = q.0.iter().find(|&&k| k as usize >= self.levels) {
            return Err(contract(format!("code index {k} outside [0, {})", self.levels)));
        }
        Ok(())
    }

    /// One stored log-variance vector, drawn uniformly.
    pub fn sample_sigma(&self, rng: &mut impl Rng) -> Result<&[f32]> {
        if self.sigma_pool.is_empty() {
            return Err(contract("sigma pool is empty"));
        }
        Ok(&self.sigma_pool[rng.random_range(0..self.sigma_pool.len())])
    }

    pub fn to_json(&self) -> String {
        let mut bytes = Vec::with_capacity(4 * self.dim() * self.sigma_pool.len());
        for v in self.sigma_pool.iter().flatten() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let file = CodebookFile {
            format_version: CODEBOOK_FORMAT_VERSION,
            levels: self.levels,
            dim: self.dim(),
            edges: self.edges.clone(),
            representatives: self.representatives.clone(),
            support: self.support.clone(),
            sigma_pool: B64.encode(bytes),
            source_checkpoint_hash: self.source_checkpoint_hash.clone(),
        };
        serde_json::to_string(&file).expect("codebook serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: CodebookFile = serde_json::from_str(text)?;
        if f.format_version != CODEBOOK_FORMAT_VERSION {
            return Err(Error::Compatibility(format!("codebook format {} is not supported", f.format_version)));
        }
        let bad = |m: String| Error::Format(format!("codebook: {m}"));
        if f.levels < 2 || f.edges.len() != f.dim || f.representatives.len() != f.dim || f.support.len() != f.dim {
            return Err(bad("inconsistent dimensions".into()));
        }
        for (d, ((e, r), s)) in f.edges.iter().zip(&f.representatives).zip(&f.support).enumerate() {
            let closed = s[0] <= e[0] && e[e.len() - 1] <= s[1];
            if e.len() + 1 != f.levels || r.len() != f.levels || e.windows(2).any(|w| w[0] >= w[1]) || !closed {
                return Err(bad(format!("dimension {d} has malformed edges or representatives")));
            }
        }
        let bytes = B64.decode(&f.sigma_pool).map_err(|e| bad(e.to_string()))?;
        if f.dim == 0 || bytes.len() % (4 * f.dim) != 0 {
            return Err(bad("sigma pool length is not a whole number of vectors".into()));
        }
        let flat: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self {
            levels: f.levels,
            edges: f.edges,
            representatives: f.representatives,
            support: f.support,
            sigma_pool: flat.chunks(f.dim).map(<[f32]>::to_vec).collect(),
            source_checkpoint_hash: f.source_checkpoint_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let text = self.to_json();
        std::fs::write(path, &text)?;
        Ok(crate::autodiff::content_hash(text.as_bytes()))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)?;
        let cb = Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Parse { path: path.to_path_buf(), message: j.to_string() },
            other => other,
        })?;
        Ok((cb, crate::autodiff::content_hash(text.as_bytes())))
    }

    /// Content hash of the serialized form.
    pub fn hash(&self) -> String {
        crate::autodiff::content_hash(self.to_json().as_bytes())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodebookFile {
    format_version: u32,
    #[serde(rename = "L")]
    levels: usize,
    #[serde(rename = "D_q")]
    dim: usize,
    edges: Vec<Vec<f64>>,
    representatives: Vec<Vec<f32>>,
    support: Vec<[f64; 2]>,
    sigma_pool: String,
    source_checkpoint_hash: String,
}
