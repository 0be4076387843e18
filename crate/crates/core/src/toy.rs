//! Deterministic synthetic city for tests, demos and acceptance runs.
//!
//! Blocks form a jittered street grid. Each block gets one of three styles
//! by distance rank from the city center (dense core, mixed ring, sparse
//! outskirts), and its layout is a fixed function of style, block size and
//! distance, so every layout is predictable from observable block features.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::citygraph::{assemble_graph, Building, CityGraph};
use crate::error::Result;
use crate::geometry::{oriented_bounding_frame, LocalProjection, Point, Polygon};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Style {
    Dense,
    Mixed,
    Sparse,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Dense, Style::Mixed, Style::Sparse];

    pub fn name(self) -> &'static str {
        match self {
            Style::Dense => "dense",
            Style::Mixed => "mixed",
            Style::Sparse => "sparse",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub city_id: String,
    pub rows: usize,
    pub cols: usize,
    pub block_min_m: f64,
    pub block_max_m: f64,
    pub street_m: f64,
    pub seed: u64,
    /// Geographic anchor of the local frame when writing GeoJSON.
    pub origin_lon: f64,
    pub origin_lat: f64,
    /// Fraction of dense blocks whose footprints are repeated in the
    /// secondary source with heights, while the primary copy omits them.
    pub duplicate_fraction: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            city_id: "toy".into(),
            rows: 17,
            cols: 18,
            block_min_m: 70.0,
            block_max_m: 130.0,
            street_m: 20.0,
            seed: 1,
            origin_lon: 8.54,
            origin_lat: 47.37,
            duplicate_fraction: 0.2,
        }
    }
}

/// One generated building, tagged with its source dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyBuilding {
    pub block: usize,
    pub footprint: Polygon,
    pub height: Option<f64>,
    pub secondary: bool,
}

#[derive(Clone, Debug)]
pub struct ToyCity {
    pub city_id: String,
    pub block_ids: Vec<String>,
    pub contours: Vec<Polygon>,
    pub styles: Vec<Style>,
    pub buildings: Vec<ToyBuilding>,
    pub projection: LocalProjection,
    pub seed: u64,
}

/// Box in normalized block-frame coordinates with a height in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyBox {
    pub center: [f64; 2],
    pub size: [f64; 2],
    pub height: f64,
}

/// Layout of a block with long side `long`, short side `short`, whose
/// center lies `t ∈ [0, 1]` of the way from the city center to the edge.
pub fn style_layout(style: Style, long: f64, short: f64, t: f64) -> Vec<ToyBox> {
    let elongated = long / short >= 1.3;
    let mut out = Vec::new();
    let mut row = |k: usize, cv: f64, width: f64, depth: f64, height: &dyn Fn(f64) -> f64, stagger: bool| {
        let n = if stagger { k - 1 } else { k };
        for c in 0..n {
            let cu = (c as f64 + if stagger { 1.0 } else { 0.5 }) / k as f64;
            out.push(ToyBox { center: [cu, cv], size: [width / k as f64, depth], height: height(cu) });
        }
    };
    match style {
        Style::Dense => {
            let k = 4;
            let depth = 0.36;
            let h = 44.0 - 16.0 * t;
            let fill = 0.95 - 0.7 * t;
            let tall = |cu: f64| h * (1.0 + 0.15 * (std::f64::consts::PI * cu).sin());
            if elongated {
                row(k, depth / 2.0 + 0.03, fill, depth, &tall, false);
                row(k, 0.97 - depth / 2.0, fill, depth, &tall, false);
            } else {
                // Courtyard: thinner rows top and bottom closed by side wings.
                let (d, kc) = (0.24, k.min(4));
                row(kc, d / 2.0 + 0.03, fill, d, &tall, false);
                row(kc, 0.97 - d / 2.0, fill, d, &tall, false);
                for cu in [0.08, 0.92] {
                    out.push(ToyBox { center: [cu, 0.5], size: [0.12, 0.4], height: 0.8 * h });
                }
            }
        }
        Style::Mixed => {
            let h = 22.0 - 8.0 * t;
            if elongated {
                let slab_w = if long > 110.0 { 0.55 } else { 0.42 };
                out.push(ToyBox { center: [0.5, 0.5], size: [slab_w, 0.7 - 0.9 * (t - 0.4).max(0.0)], height: h });
                if long > 95.0 {
                    for cu in [0.1, 0.9] {
                        out.push(ToyBox { center: [cu, 0.5], size: [0.12, 0.3], height: 0.6 * h });
                    }
                }
            } else {
                let side = 0.75 - 0.6 * (t - 0.4).max(0.0);
                out.push(ToyBox { center: [0.5, 0.55], size: [side, side], height: h });
                out.push(ToyBox { center: [0.5, 0.1], size: [0.3, 0.1], height: 0.5 * h });
            }
        }
        Style::Sparse => {
            let k = 4;
            let h = 9.0 - 3.0 * t;
            let d = 0.12;
            let fill = 0.2 + 0.8 * (1.0 - t).max(0.0);
            if elongated {
                row(k, 0.5, fill, 2.0 * d, &|_| h, false);
            } else {
                row(k, 0.3, fill, d, &|_| h, false);
                row(k, 0.7, fill, d, &|_| h, true);
            }
        }
    }
    out
}

impl ToyCity {
    pub fn generate(cfg: &ToyConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let widths: Vec<f64> = (0..cfg.cols).map(|_| rng.random_range(cfg.block_min_m..cfg.block_max_m)).collect();
        let heights: Vec<f64> = (0..cfg.rows).map(|_| rng.random_range(cfg.block_min_m..cfg.block_max_m)).collect();
        let mut contours = Vec::new();
        let mut block_ids = Vec::new();
        let mut y = 0.0;
        for (r, &bh) in heights.iter().enumerate() {
            let mut x = 0.0;
            for (c, &bw) in widths.iter().enumerate() {
                contours.push(Polygon::rect(x, y, x + bw, y + bh)?);
                block_ids.push(format!("b{r:02}_{c:02}"));
                x += bw + cfg.street_m;
            }
            y += bh + cfg.street_m;
        }
        // Center the city on the local origin.
        let center = contours.iter().fold(Point::default(), |a, c| a.add(c.centroid())).scale(1.0 / contours.len() as f64);
        let contours: Vec<Polygon> = contours.iter().map(|c| c.translate(center.scale(-1.0))).collect();

        let dist: Vec<f64> = contours.iter().map(|c| c.centroid().norm()).collect();
        let max_d = dist.iter().cloned().fold(0.0, f64::max).max(1.0);
        let mut rank: Vec<usize> = (0..contours.len()).collect();
        rank.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
        let mut styles = vec![Style::Sparse; contours.len()];
        let n = contours.len();
        for (pos, &k) in rank.iter().enumerate() {
            styles[k] = Style::ALL[(3 * pos / n.max(1)).min(2)];
        }

        let mut buildings = Vec::new();
        for (k, contour) in contours.iter().enumerate() {
            let frame = oriented_bounding_frame(contour)?;
            let boxes = style_layout(styles[k], frame.width(), frame.height(), dist[k] / max_d);
            let duplicated = styles[k] == Style::Dense && rng.random_bool(cfg.duplicate_fraction.clamp(0.0, 1.0));
            for b in boxes {
                let fp = frame.box_to_world(Point::new(b.center[0], b.center[1]), Point::new(b.size[0], b.size[1]))?;
                if duplicated {
                    buildings.push(ToyBuilding { block: k, footprint: fp.clone(), height: None, secondary: false });
                    buildings.push(ToyBuilding { block: k, footprint: fp, height: Some(b.height), secondary: true });
                } else {
                    buildings.push(ToyBuilding { block: k, footprint: fp, height: Some(b.height), secondary: false });
                }
            }
        }
        Ok(Self {
            city_id: cfg.city_id.clone(),
            block_ids,
            contours,
            styles,
            buildings,
            projection: LocalProjection { lon0: cfg.origin_lon, lat0: cfg.origin_lat },
            seed: cfg.seed,
        })
    }

    /// The final layout per block, as ingestion would resolve it.
    pub fn block_buildings(&self) -> Vec<Vec<Building>> {
        let mut out: Vec<Vec<Building>> = vec![Vec::new(); self.contours.len()];
        for b in self.buildings.iter().filter(|b| b.secondary) {
            out[b.block].push(Building { footprint: b.footprint.clone(), height: b.height.unwrap_or(10.0) });
        }
        for b in self.buildings.iter().filter(|b| !b.secondary && b.height.is_some()) {
            out[b.block].push(Building { footprint: b.footprint.clone(), height: b.height.unwrap() });
        }
        out
    }

    /// The city graph in local meters, without going through files.
    pub fn to_graph(&self, epsilon: f64, k_max: usize, code_dim: usize) -> Result<CityGraph> {
        let blocks = self
            .block_ids
            .iter()
            .cloned()
            .zip(self.contours.iter().cloned())
            .zip(self.block_buildings())
            .map(|((id, c), b)| (id, c, b))
            .collect();
        assemble_graph(&self.city_id, blocks, epsilon, k_max, code_dim, self.seed)
    }

    fn ring(&self, p: &Polygon) -> Value {
        let mut coords: Vec<Value> = p
            .vertices()
            .iter()
            .map(|&v| {
                let (lon, lat) = self.projection.unproject(v);
                json!([lon, lat])
            })
            .collect();
        coords.push(coords[0].clone());
        json!([coords])
    }

    pub fn blocks_geojson(&self) -> Value {
        let features: Vec<Value> = self
            .contours
            .iter()
            .zip(&self.block_ids)
            .zip(&self.styles)
            .map(|((c, id), s)| {
                json!({
                    "type": "Feature",
                    "properties": {"block_id": id, "style": s.name()},
                    "geometry": {"type": "Polygon", "coordinates": self.ring(c)},
                })
            })
            .collect();
        json!({"type": "FeatureCollection", "features": features})
    }

    pub fn buildings_geojson(&self) -> Value {
        let features: Vec<Value> = self
            .buildings
            .iter()
            .map(|b| {
                json!({
                    "type": "Feature",
                    "properties": {
                        "block_id": self.block_ids[b.block],
                        "height_m": b.height,
                        "source": if b.secondary { "osm" } else { "msf" },
                    },
                    "geometry": {"type": "Polygon", "coordinates": self.ring(&b.footprint)},
                })
            })
            .collect();
        json!({"type": "FeatureCollection", "features": features})
    }

    /// Writes `blocks.geojson` and `buildings.geojson` into `dir`.
    pub fn write_geojson(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("blocks.geojson"), serde_json::to_string_pretty(&self.blocks_geojson())?)?;
        std::fs::write(dir.join("buildings.geojson"), serde_json::to_string(&self.buildings_geojson())?)?;
        Ok(())
    }
}
