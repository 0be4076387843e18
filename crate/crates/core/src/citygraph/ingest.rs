//! GeoJSON ingestion of block contours and building footprints.

use std::collections::HashMap;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::merge::{merge_building_sources, CandidateBuilding, MergeConfig};
use super::{assemble_graph, Building, CityGraph};
use crate::error::{Error, Result};
use crate::geometry::{LocalProjection, Point, Polygon};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Crs {
    /// Longitude/latitude degrees, projected about the city centroid.
    Wgs84,
    /// Already planar meters.
    LocalMeters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    pub city_id: String,
    pub crs: Crs,
    pub epsilon_m: f64,
    pub k_max: usize,
    pub code_dim: usize,
    pub seed: u64,
    /// Declared input bounds `[min_x, min_y, max_x, max_y]` in the input CRS.
    pub bounds: Option<[f64; 4]>,
    /// Buildings whose centroid is farther than this outside their block are dropped.
    pub containment_tolerance_m: f64,
    pub merge: MergeConfig,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            city_id: "city".into(),
            crs: Crs::Wgs84,
            epsilon_m: 25.0,
            k_max: 8,
            code_dim: 32,
            seed: 0,
            bounds: None,
            containment_tolerance_m: 1.0,
            merge: MergeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub blocks: usize,
    pub buildings: usize,
    pub skipped_blocks: usize,
    pub dropped_unknown_block: usize,
    pub dropped_outside_block: usize,
    pub dropped_invalid_geometry: usize,
}

impl IngestReport {
    pub fn warnings(&self) -> usize {
        self.skipped_blocks + self.dropped_unknown_block + self.dropped_outside_block + self.dropped_invalid_geometry
    }
}

/// One polygon feature: outer ring coordinates plus properties.
#[derive(Clone, Debug)]
pub struct RawFeature {
    pub index: usize,
    pub ring: Vec<[f64; 2]>,
    pub properties: serde_json::Map<String, Value>,
}

fn parse_err(path: &Path, msg: String) -> Error {
    Error::Parse { path: path.to_path_buf(), message: msg }
}

fn feature_label(index: usize, props: &serde_json::Map<String, Value>) -> String {
    match props.get("block_id").and_then(Value::as_str) {
        Some(id) => format!("feature #{index} (block_id {id})"),
        None => format!("feature #{index}"),
    }
}

fn parse_ring(v: &Value) -> Option<Vec<[f64; 2]>> {
    v.as_array()?
        .iter()
        .map(|c| {
            let c = c.as_array()?;
            Some([c.first()?.as_f64()?, c.get(1)?.as_f64()?])
        })
        .collect()
}

/// Parses a FeatureCollection of Polygon / MultiPolygon features. Holes are
/// ignored; for multipolygons the part with the largest outer ring is used.
pub fn parse_feature_collection(path: &Path, text: &str) -> Result<Vec<RawFeature>> {
    let root: Value = serde_json::from_str(text)
        .map_err(|e| parse_err(path, format!("line {} column {}: {e}", e.line(), e.column())))?;
    if root.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(parse_err(path, "top-level object is not a FeatureCollection".into()));
    }
    let features = root
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(path, "missing `features` array".into()))?;
    let mut out = Vec::with_capacity(features.len());
    for (index, f) in features.iter().enumerate() {
        let properties = f.get("properties").and_then(Value::as_object).cloned().unwrap_or_default();
        let label = feature_label(index, &properties);
        let geom = f
            .get("geometry")
            .ok_or_else(|| parse_err(path, format!("{label}: missing geometry")))?;
        let kind = geom.get("type").and_then(Value::as_str).unwrap_or("");
        let coords = geom
            .get("coordinates")
            .ok_or_else(|| parse_err(path, format!("{label}: missing coordinates")))?;
        let ring = match kind {
            "Polygon" => coords.as_array().and_then(|r| r.first()).and_then(parse_ring),
            "MultiPolygon" => coords.as_array().and_then(|parts| {
                let rings: Option<Vec<Vec<[f64; 2]>>> = parts
                    .iter()
                    .map(|p| p.as_array().and_then(|r| r.first()).and_then(parse_ring))
                    .collect();
                rings?.into_iter().max_by(|a, b| ring_area(a).total_cmp(&ring_area(b)))
            }),
            other => return Err(parse_err(path, format!("{label}: unsupported geometry type `{other}`"))),
        }
        .ok_or_else(|| parse_err(path, format!("{label}: malformed coordinates")))?;
        out.push(RawFeature { index, ring, properties });
    }
    Ok(out)
}

fn ring_area(r: &[[f64; 2]]) -> f64 {
    let pts: Vec<Point> = r.iter().map(|&c| c.into()).collect();
    crate::geometry::signed_area(&pts).abs()
}

fn check_bounds(path: &Path, f: &RawFeature, bounds: [f64; 4]) -> Result<()> {
    for c in &f.ring {
        if !(c[0] >= bounds[0] && c[0] <= bounds[2] && c[1] >= bounds[1] && c[1] <= bounds[3]) {
            return Err(Error::Validation(format!(
                "{}: {} coordinate ({}, {}) outside declared bounds {:?}",
                path.display(),
                feature_label(f.index, &f.properties),
                c[0],
                c[1],
                bounds
            )));
        }
    }
    Ok(())
}

/// Reads, validates, merges and assembles one city graph.
pub fn ingest_city(blocks_path: &Path, buildings_path: &Path, cfg: &IngestConfig) -> Result<(CityGraph, IngestReport)> {
    let block_feats = parse_feature_collection(blocks_path, &std::fs::read_to_string(blocks_path)?)?;
    let building_feats = parse_feature_collection(buildings_path, &std::fs::read_to_string(buildings_path)?)?;

    let bounds = cfg.bounds.or(match cfg.crs {
        Crs::Wgs84 => Some([-180.0, -90.0, 180.0, 90.0]),
        Crs::LocalMeters => None,
    });
    if let Some(b) = bounds {
        for f in &block_feats {
            check_bounds(blocks_path, f, b)?;
        }
        for f in &building_feats {
            check_bounds(buildings_path, f, b)?;
        }
    }

    let projection = match cfg.crs {
        Crs::Wgs84 => {
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
            for f in &block_feats {
                for c in &f.ring {
                    sx += c[0];
                    sy += c[1];
                    n += 1;
                }
            }
            let n = n.max(1) as f64;
            Some(LocalProjection { lon0: sx / n, lat0: sy / n })
        }
        Crs::LocalMeters => None,
    };
    let to_polygon = |ring: &[[f64; 2]]| -> Result<Polygon> {
        let pts = ring
            .iter()
            .map(|c| match projection {
                Some(p) => p.project(c[0], c[1]),
                None => Point::new(c[0], c[1]),
            })
            .collect();
        Polygon::new(pts)
    };

    let mut report = IngestReport::default();
    let mut blocks: Vec<(String, Polygon)> = Vec::new();
    let mut index_of: HashMap<String, usize> = HashMap::new();
    for f in &block_feats {
        let id = f
            .properties
            .get("block_id")
            .and_then(Value::as_str)
            .ok_or_else(|| parse_err(blocks_path, format!("feature #{}: missing string block_id", f.index)))?
            .to_string();
        if index_of.contains_key(&id) {
            return Err(Error::Validation(format!("duplicate block_id {id}")));
        }
        match to_polygon(&f.ring) {
            Ok(p) => {
                index_of.insert(id.clone(), blocks.len());
                blocks.push((id, p));
            }
            Err(e) => {
                warn!("skipping block {id}: {e}");
                report.skipped_blocks += 1;
            }
        }
    }

    let mut per_block: Vec<(Vec<CandidateBuilding>, Vec<CandidateBuilding>)> = vec![(Vec::new(), Vec::new()); blocks.len()];
    for f in &building_feats {
        let label = feature_label(f.index, &f.properties);
        let block_id = f
            .properties
            .get("block_id")
            .and_then(Value::as_str)
            .ok_or_else(|| parse_err(buildings_path, format!("{label}: missing string block_id")))?;
        let height = match f.properties.get("height_m") {
            None | Some(Value::Null) => None,
            Some(v) => Some(
                v.as_f64()
                    .ok_or_else(|| parse_err(buildings_path, format!("{label}: height_m is not a number")))?,
            ),
        };
        let primary = match f.properties.get("source").and_then(Value::as_str) {
            Some("msf") | None => true,
            Some("osm") => false,
            Some(other) => return Err(parse_err(buildings_path, format!("{label}: unknown source `{other}`"))),
        };
        let Some(&bi) = index_of.get(block_id) else {
            warn!("dropping building {label}: unknown block");
            report.dropped_unknown_block += 1;
            continue;
        };
        let footprint = match to_polygon(&f.ring) {
            Ok(p) => p,
            Err(e) => {
                warn!("dropping building {label}: {e}");
                report.dropped_invalid_geometry += 1;
                continue;
            }
        };
        if blocks[bi].1.distance_to_point(footprint.centroid()) > cfg.containment_tolerance_m {
            warn!("dropping building {label}: outside its block");
            report.dropped_outside_block += 1;
            continue;
        }
        let cand = CandidateBuilding { footprint, height: height.filter(|h| h.is_finite() && *h > 0.0) };
        if primary {
            per_block[bi].0.push(cand);
        } else {
            per_block[bi].1.push(cand);
        }
    }

    let assembled: Vec<(String, Polygon, Vec<Building>)> = blocks
        .into_iter()
        .zip(per_block)
        .enumerate()
        .map(|(k, ((id, contour), (prim, sec)))| {
            let seed = cfg.seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let merged = merge_building_sources(&prim, &sec, &contour, &cfg.merge, seed);
            (id, contour, merged)
        })
        .collect();
    report.blocks = assembled.len();
    report.buildings = assembled.iter().map(|b| b.2.len()).sum();
    let mut graph = assemble_graph(&cfg.city_id, assembled, cfg.epsilon_m, cfg.k_max, cfg.code_dim, cfg.seed)?;
    graph.projection = projection;
    Ok((graph, report))
}
