//! Compositing two building footprint sources inside one block.
//!
//! Cross-source footprints that intersect are grouped into overlap regions.
//! A region whose joint IoU exceeds the threshold is a duplicate detection
//! of the same buildings, and only the source with more buildings there is
//! kept. Everything else is kept from both sources.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Building;
use crate::geometry::{intersection_area, Polygon};

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateBuilding {
    pub footprint: Polygon,
    pub height: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeConfig {
    /// Region IoU above which two sources are treated as duplicates.
    pub iou_threshold: f64,
    /// Relative half-width of the uniform jitter applied to fallback heights.
    pub height_jitter: f64,
    /// Height used when no building in a block has one.
    pub default_height_m: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.3, height_jitter: 0.1, default_height_m: 10.0 }
    }
}

struct Dsu(Vec<usize>);

impl Dsu {
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut c = x;
        while self.0[c] != r {
            let next = self.0[c];
            self.0[c] = r;
            c = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

/// Merges `primary` and `secondary` footprints for one block. `seed` drives
/// the height jitter so results are reproducible.
pub fn merge_building_sources(
    primary: &[CandidateBuilding],
    secondary: &[CandidateBuilding],
    _block: &Polygon,
    cfg: &MergeConfig,
    seed: u64,
) -> Vec<Building> {
    let np = primary.len();
    let all: Vec<&CandidateBuilding> = primary.iter().chain(secondary).collect();
    let areas: Vec<f64> = all.iter().map(|b| b.footprint.area()).collect();
    let mut dsu = Dsu((0..all.len()).collect());
    let mut pairs = Vec::new();
    for a in 0..np {
        for b in np..all.len() {
            let inter = intersection_area(&all[a].footprint, &all[b].footprint);
            if inter > 1e-6 * areas[a].min(areas[b]) {
                dsu.union(a, b);
                pairs.push((a, b, inter));
            }
        }
    }

    let mut keep = vec![true; all.len()];
    let roots: Vec<usize> = (0..all.len()).map(|k| dsu.find(k)).collect();
    let mut components: Vec<usize> = roots.clone();
    components.sort_unstable();
    components.dedup();
    for &root in &components {
        let members: Vec<usize> = (0..all.len()).filter(|&k| roots[k] == root).collect();
        let n_primary = members.iter().filter(|&&k| k < np).count();
        let n_secondary = members.len() - n_primary;
        if n_primary == 0 || n_secondary == 0 {
            continue;
        }
        let inter: f64 = pairs.iter().filter(|p| roots[p.0] == root).map(|p| p.2).sum();
        let total: f64 = members.iter().map(|&k| areas[k]).sum();
        let iou = inter / (total - inter).max(f64::MIN_POSITIVE);
        if iou > cfg.iou_threshold {
            let keep_primary = n_primary >= n_secondary;
            for &k in &members {
                keep[k] = (k < np) == keep_primary;
            }
        }
    }

    // Heights: own value, else overlap-weighted value of dropped duplicates
    // from the other source, else jittered block mean.
    let mut heights: Vec<Option<f64>> = all.iter().map(|b| b.height.filter(|h| *h > 0.0)).collect();
    for k in 0..all.len() {
        if !keep[k] || heights[k].is_some() {
            continue;
        }
        let (mut wsum, mut hsum) = (0.0, 0.0);
        for &(a, b, inter) in &pairs {
            let other = if a == k { b } else if b == k { a } else { continue };
            if let Some(h) = all[other].height.filter(|h| *h > 0.0) {
                wsum += inter;
                hsum += inter * h;
            }
        }
        if wsum > 0.0 {
            heights[k] = Some(hsum / wsum);
        }
    }
    let known: Vec<f64> = (0..all.len()).filter(|&k| keep[k]).filter_map(|k| heights[k]).collect();
    let base = if known.is_empty() {
        cfg.default_height_m
    } else {
        known.iter().sum::<f64>() / known.len() as f64
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..all.len())
        .filter(|&k| keep[k])
        .map(|k| {
            let height = heights[k].unwrap_or_else(|| {
                let j = if cfg.height_jitter > 0.0 {
                    rng.random_range(-cfg.height_jitter..=cfg.height_jitter)
                } else {
                    0.0
                };
                base * (1.0 + j)
            });
            Building { footprint: all[k].footprint.clone(), height }
        })
        .collect()
}
