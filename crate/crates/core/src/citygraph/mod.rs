//! The city block-adjacency graph: block nodes with shape features and
//! optional layout codes, distance-weighted adjacency edges, community
//! sampling and the on-disk graph container.

mod ingest;
mod merge;

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::geometry::{self, LocalProjection, Point, Polygon};
use crate::quantizer::QuantizedCode;

pub use ingest::{ingest_city, parse_feature_collection, Crs, IngestConfig, IngestReport, RawFeature};
pub use merge::{merge_building_sources, CandidateBuilding, MergeConfig};

pub const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub footprint: Polygon,
    pub height: f64,
}

/// The four per-block shape and location features.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ShapeFeatures {
    pub aspect_ratio: f64,
    pub block_area: f64,
    pub convexity: f64,
    pub centroid_distance: f64,
}

impl ShapeFeatures {
    pub fn to_array(self) -> [f64; 4] {
        [self.aspect_ratio, self.block_area, self.convexity, self.centroid_distance]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockNode {
    pub block_id: String,
    pub contour: Polygon,
    pub buildings: Vec<Building>,
    pub shape_features: ShapeFeatures,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout_code: Option<QuantizedCode>,
    /// Style-steering node; never decoded and never scored.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub is_super: bool,
}

impl BlockNode {
    pub fn centroid(&self) -> Point {
        self.contour.centroid()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityGraph {
    pub city_id: String,
    pub nodes: Vec<BlockNode>,
    pub edges: Vec<Edge>,
    pub centroid: Point,
    /// Width of the layout code carried by each node.
    pub code_dim: usize,
    /// Seed used for stochastic ingestion steps (height jitter).
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection: Option<LocalProjection>,
}

impl CityGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// `(code_dim + 4)·N + K`; 516·N + K at the 512-wide code.
    pub fn variable_count(&self) -> usize {
        (self.code_dim + 4) * self.nodes.len() + self.edges.len()
    }

    /// Sorted neighbor lists.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            adj[e.i].push(e.j);
            adj[e.j].push(e.i);
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    pub fn index_of(&self, block_id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.block_id == block_id)
    }

    /// Checks the structural invariants of the graph.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        let mut seen = BTreeSet::new();
        for e in &self.edges {
            if e.i >= n || e.j >= n {
                return Err(Error::Validation(format!("edge ({}, {}) out of range", e.i, e.j)));
            }
            if e.i == e.j {
                return Err(Error::Validation(format!("self edge at {}", e.i)));
            }
            if !(e.distance > 0.0) {
                return Err(Error::Validation(format!("edge ({}, {}) has distance {}", e.i, e.j, e.distance)));
            }
            if !seen.insert((e.i.min(e.j), e.i.max(e.j))) {
                return Err(Error::Validation(format!("duplicate edge ({}, {})", e.i, e.j)));
            }
        }
        for node in &self.nodes {
            if let Some(code) = &node.layout_code {
                if code.len() != self.code_dim {
                    return Err(Error::Validation(format!(
                        "block {} carries a {}-wide code, graph expects {}",
                        node.block_id,
                        code.len(),
                        self.code_dim
                    )));
                }
            }
            if node.buildings.iter().any(|b| !(b.height > 0.0)) {
                return Err(Error::Validation(format!("block {} has a non-positive height", node.block_id)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = GraphFileRef {
            header: GraphHeader {
                format_version: GRAPH_FORMAT_VERSION,
                city_id: self.city_id.clone(),
                crs: "local-meters".into(),
                seed: self.seed,
                centroid: self.centroid,
                code_dim: self.code_dim,
                variable_count: self.variable_count(),
                projection: self.projection,
            },
            nodes: &self.nodes,
            edges: &self.edges,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(text)?;
        let h = file.header;
        if h.format_version != GRAPH_FORMAT_VERSION {
            return Err(Error::Format(format!("graph format_version {} unsupported", h.format_version)));
        }
        if h.crs != "local-meters" {
            return Err(Error::Format(format!("graph crs `{}` unsupported", h.crs)));
        }
        let g = CityGraph {
            city_id: h.city_id,
            nodes: file.nodes,
            edges: file.edges,
            centroid: h.centroid,
            code_dim: h.code_dim,
            seed: h.seed,
            projection: h.projection,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })
    }
}

#[derive(Serialize, Deserialize)]
struct GraphHeader {
    format_version: u32,
    city_id: String,
    crs: String,
    seed: u64,
    centroid: Point,
    code_dim: usize,
    variable_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    projection: Option<LocalProjection>,
}

#[derive(Serialize)]
struct GraphFileRef<'a> {
    header: GraphHeader,
    nodes: &'a [BlockNode],
    edges: &'a [Edge],
}

#[derive(Deserialize)]
struct GraphFile {
    header: GraphHeader,
    nodes: Vec<BlockNode>,
    edges: Vec<Edge>,
}

/// Aspect ratio, area, convexity and distance to the city centroid.
pub fn block_shape_features(contour: &Polygon, city_centroid: Point) -> Result<ShapeFeatures> {
    let frame = geometry::oriented_bounding_frame(contour)?;
    let hull = geometry::convex_hull(contour)?;
    let area = contour.area();
    Ok(ShapeFeatures {
        aspect_ratio: frame.width() / frame.height(),
        block_area: area,
        convexity: (area / hull.area()).min(1.0),
        centroid_distance: contour.centroid().distance(city_centroid),
    })
}

/// Edges between blocks whose contours lie within `epsilon` meters of each
/// other, keeping a pair only when each endpoint ranks the other among its
/// `k_max` nearest qualifying neighbors (by contour gap, then centroid
/// distance, then index). Edge distance is the centroid distance.
pub fn build_adjacency(nodes: &[BlockNode], epsilon: f64, k_max: usize) -> Vec<Edge> {
    let n = nodes.len();
    let centroids: Vec<Point> = nodes.iter().map(BlockNode::centroid).collect();
    let boxes: Vec<(Point, Point)> = nodes.iter().map(|b| b.contour.bbox()).collect();
    let mut candidates: Vec<Vec<(f64, f64, usize)>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (boxes[i], boxes[j]);
            if a.0.x - epsilon > b.1.x || b.0.x - epsilon > a.1.x || a.0.y - epsilon > b.1.y || b.0.y - epsilon > a.1.y {
                continue;
            }
            let gap = geometry::polygon_gap(&nodes[i].contour, &nodes[j].contour);
            if gap <= epsilon {
                let d = centroids[i].distance(centroids[j]);
                candidates[i].push((gap, d, j));
                candidates[j].push((gap, d, i));
            }
        }
    }
    let ranked: Vec<BTreeSet<usize>> = candidates
        .into_iter()
        .map(|mut c| {
            c.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)).then(x.2.cmp(&y.2)));
            c.into_iter().take(k_max).map(|(_, _, j)| j).collect()
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for &j in &ranked[i] {
            if i < j && ranked[j].contains(&i) {
                let distance = centroids[i].distance(centroids[j]);
                if distance > 0.0 {
                    edges.push(Edge { i, j, distance });
                }
            }
        }
    }
    edges
}

/// Induced subgraph over `members` (kept in the given order).
pub fn induced_subgraph(g: &CityGraph, members: &[usize]) -> CityGraph {
    let mut remap = vec![usize::MAX; g.nodes.len()];
    for (k, &m) in members.iter().enumerate() {
        remap[m] = k;
    }
    let edges = g
        .edges
        .iter()
        .filter(|e| remap[e.i] != usize::MAX && remap[e.j] != usize::MAX)
        .map(|e| Edge { i: remap[e.i], j: remap[e.j], distance: e.distance })
        .collect();
    CityGraph {
        city_id: g.city_id.clone(),
        nodes: members.iter().map(|&m| g.nodes[m].clone()).collect(),
        edges,
        centroid: g.centroid,
        code_dim: g.code_dim,
        seed: g.seed,
        projection: g.projection,
    }
}

/// A community view: the induced subgraph plus the original node indices.
#[derive(Clone, Debug)]
pub struct Community {
    pub graph: CityGraph,
    pub members: Vec<usize>,
}

/// Nodes whose centroids lie within `radius` of the center node's centroid,
/// in ascending original index order.
pub fn sample_community_subgraph(g: &CityGraph, center: usize, radius: f64) -> Result<Community> {
    if center >= g.nodes.len() {
        return Err(contract(format!("center {center} out of range for {} nodes", g.nodes.len())));
    }
    if !(radius > 0.0) {
        return Err(contract("community radius must be positive"));
    }
    let c = g.nodes[center].centroid();
    let members: Vec<usize> = (0..g.nodes.len())
        .filter(|&k| k == center || g.nodes[k].centroid().distance(c) <= radius)
        .collect();
    Ok(Community { graph: induced_subgraph(g, &members), members })
}

/// Block-level 70/20/10 train/validation/test partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_blocks(n: usize, seed: u64) -> BlockSplit {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = n * 7 / 10;
    let n_val = n * 2 / 10;
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..n_train + n_val].to_vec();
    let mut test = idx[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    BlockSplit { train, val, test }
}

/// Mean of block centroids.
pub fn city_centroid(contours: &[&Polygon]) -> Point {
    if contours.is_empty() {
        return Point::default();
    }
    let sum = contours.iter().fold(Point::default(), |acc, c| acc.add(c.centroid()));
    sum.scale(1.0 / contours.len() as f64)
}

/// Assembles a graph from validated blocks: city centroid, features, adjacency.
pub fn assemble_graph(
    city_id: &str,
    blocks: Vec<(String, Polygon, Vec<Building>)>,
    epsilon: f64,
    k_max: usize,
    code_dim: usize,
    seed: u64,
) -> Result<CityGraph> {
    let contours: Vec<&Polygon> = blocks.iter().map(|b| &b.1).collect();
    let centroid = city_centroid(&contours);
    let mut nodes = Vec::with_capacity(blocks.len());
    for (block_id, contour, buildings) in blocks {
        let shape_features = block_shape_features(&contour, centroid)?;
        nodes.push(BlockNode { block_id, contour, buildings, shape_features, layout_code: None, is_super: false });
    }
    let edges = build_adjacency(&nodes, epsilon, k_max);
    Ok(CityGraph {
        city_id: city_id.to_string(),
        nodes,
        edges,
        centroid,
        code_dim,
        seed,
        projection: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_block(id: &str, x: f64, y: f64, size: f64) -> BlockNode {
        let contour = Polygon::rect(x, y, x + size, y + size).unwrap();
        let shape_features = block_shape_features(&contour, Point::default()).unwrap();
        BlockNode {
            block_id: id.into(),
            contour,
            buildings: vec![],
            shape_features,
            layout_code: None,
            is_super: false,
        }
    }

    /// 3×3 grid of 100 m blocks separated by 20 m streets.
    pub(crate) fn grid3() -> CityGraph {
        let mut blocks = Vec::new();
        for r in 0..3 {
            for c in 0..3 {
                let x = c as f64 * 120.0;
                let y = r as f64 * 120.0;
                blocks.push((format!("b{r}{c}"), Polygon::rect(x, y, x + 100.0, y + 100.0).unwrap(), vec![]));
            }
        }
        assemble_graph("grid", blocks, 25.0, 8, 32, 0).unwrap()
    }

    #[test]
    fn adjacency_pair() {
        let nodes = vec![square_block("a", 0.0, 0.0, 100.0), square_block("b", 120.0, 0.0, 100.0)];
        let e = build_adjacency(&nodes, 25.0, 8);
        assert_eq!(e.len(), 1);
        assert!((e[0].distance - 120.0).abs() < 1e-9);
        assert!(build_adjacency(&nodes, 15.0, 8).is_empty());
    }

    #[test]
    fn adjacency_grid_is_rook() {
        let g = grid3();
        assert_eq!(g.edge_count(), 12);
        for e in &g.edges {
            assert!((e.distance - 120.0).abs() < 1e-9);
        }
        assert_eq!(g.variable_count(), 36 * 9 + 12);
    }

    #[test]
    fn k_max_truncates() {
        let g = grid3();
        let e = build_adjacency(&g.nodes, 25.0, 2);
        let mut deg = vec![0; 9];
        for x in &e {
            deg[x.i] += 1;
            deg[x.j] += 1;
        }
        assert!(deg.iter().all(|&d| d <= 2));
    }

    #[test]
    fn features() {
        let unit = Polygon::rect(-0.5, -0.5, 0.5, 0.5).unwrap();
        let f = block_shape_features(&unit, Point::default()).unwrap();
        assert_eq!(f.to_array(), [1.0, 1.0, 1.0, 0.0]);
        let r = Polygon::rect(400.0, 250.0, 600.0, 350.0).unwrap();
        let f = block_shape_features(&r, Point::new(0.0, 300.0)).unwrap();
        assert!((f.aspect_ratio - 2.0).abs() < 1e-12);
        assert!((f.block_area - 20000.0).abs() < 1e-9);
        assert!((f.convexity - 1.0).abs() < 1e-12);
        assert!((f.centroid_distance - 500.0).abs() < 1e-9);
        let l = Polygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(1.0, 0.5),
            Point::new(0.5, 0.5),
            Point::new(0.5, 1.0),
            Point::new(0.0, 1.0),
        ])
        .unwrap();
        let f = block_shape_features(&l, Point::default()).unwrap();
        assert!((f.convexity - 0.75 / 0.875).abs() < 1e-12);
    }

    #[test]
    fn community_sampling() {
        let g = grid3();
        let tiny = sample_community_subgraph(&g, 4, 0.001).unwrap();
        assert_eq!(tiny.members, vec![4]);
        assert!(tiny.graph.edges.is_empty());
        let all = sample_community_subgraph(&g, 0, 1e6).unwrap();
        assert_eq!(all.graph.node_count(), 9);
        assert_eq!(all.graph.edge_count(), 12);
        let rook = sample_community_subgraph(&g, 4, 130.0).unwrap();
        assert_eq!(rook.members, vec![1, 3, 4, 5, 7]);
        assert_eq!(rook.graph.edge_count(), 4);
        assert!(sample_community_subgraph(&g, 9, 10.0).is_err());
    }

    #[test]
    fn split_is_partition() {
        let s = split_blocks(103, 9);
        assert_eq!(s.train.len(), 72);
        assert_eq!(s.val.len(), 20);
        assert_eq!(s.test.len(), 11);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert_eq!(s, split_blocks(103, 9));
        assert_ne!(s, split_blocks(103, 10));
    }

    #[test]
    fn json_round_trip_is_stable() {
        let mut g = grid3();
        g.nodes[0].layout_code = Some(QuantizedCode(vec![1; 32]));
        let text = g.to_json().unwrap();
        let back = CityGraph::from_json(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn validate_rejects_bad_edges() {
        let mut g = grid3();
        g.edges.push(Edge { i: 0, j: 0, distance: 1.0 });
        assert!(g.validate().is_err());
        let mut g = grid3();
        g.edges.push(Edge { i: 0, j: 42, distance: 1.0 });
        assert!(g.validate().is_err());
    }
}
