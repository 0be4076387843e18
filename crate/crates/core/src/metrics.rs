//! Layout similarity, context consistency and distributional metrics.

use serde::{Deserialize, Serialize};

use crate::citygraph::{BlockNode, Building, CityGraph};
use crate::error::{contract, Error, Result};
use crate::geometry::{intersection_area, oriented_bounding_frame, OrientedFrame, Point, Polygon};

/// Position penalty per unit of normalized center distance (in powers of two).
pub const POSITION_PENALTY: f64 = 2.0;
/// Size penalty per unit of normalized extent difference.
pub const SIZE_PENALTY: f64 = 2.0;

/// A building reduced to its box in a block frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameBox {
    /// Center in normalized frame coordinates.
    pub center: [f64; 2],
    /// Size as fractions of the frame width and height.
    pub extent: [f64; 2],
    pub height: f64,
}

impl FrameBox {
    pub fn area(&self) -> f64 {
        self.extent[0] * self.extent[1]
    }
}

/// Frame-aligned bounding boxes of `buildings`, in `frame` coordinates.
pub fn frame_boxes(frame: &OrientedFrame, buildings: &[Building]) -> Vec<FrameBox> {
    buildings
        .iter()
        .map(|b| {
            let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for &p in b.footprint.vertices() {
                let q = frame.to_local(p);
                lo = [lo[0].min(q.x), lo[1].min(q.y)];
                hi = [hi[0].max(q.x), hi[1].max(q.y)];
            }
            FrameBox {
                center: [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])],
                extent: [hi[0] - lo[0], hi[1] - lo[1]],
                height: b.height,
            }
        })
        .collect()
}

fn pair_weight(a: &FrameBox, b: &FrameBox) -> f64 {
    let dc = (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1]);
    let ds = (a.extent[0] - b.extent[0]).abs() + (a.extent[1] - b.extent[1]).abs();
    a.area().min(b.area()) * (-POSITION_PENALTY * dc - SIZE_PENALTY * ds).exp2()
}

/// Greedy maximum-weight matching: pairs taken in order of decreasing
/// weight (ties by index) while both ends are free.
pub fn greedy_matching(a: &[FrameBox], b: &[FrameBox]) -> Vec<(usize, usize, f64)> {
    let mut pairs: Vec<(usize, usize, f64)> = Vec::with_capacity(a.len() * b.len());
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            pairs.push((i, j, pair_weight(x, y)));
        }
    }
    pairs.sort_by(|p, q| q.2.total_cmp(&p.2).then(p.0.cmp(&q.0)).then(p.1.cmp(&q.1)));
    let (mut used_a, mut used_b) = (vec![false; a.len()], vec![false; b.len()]);
    let mut out = Vec::new();
    for (i, j, w) in pairs {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j, w));
        }
    }
    out
}

/// Similarity of two box layouts that share one normalized frame.
pub fn layout_sim_boxes(a: &[FrameBox], b: &[FrameBox]) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let total_a: f64 = a.iter().map(FrameBox::area).sum();
    let total_b: f64 = b.iter().map(FrameBox::area).sum();
    let denom = total_a.max(total_b);
    if denom <= 0.0 {
        return 1.0;
    }
    let matched: f64 = greedy_matching(a, b).iter().map(|m| m.2).sum();
    (matched / denom).clamp(0.0, 1.0)
}

fn canonical_boxes(block: &BlockNode) -> Result<Vec<FrameBox>> {
    let frame = oriented_bounding_frame(&block.contour)?;
    Ok(frame_boxes(&frame, &block.buildings))
}

/// Similarity in `[0, 1]` of two blocks' layouts, each in its own frame.
pub fn layout_sim(a: &BlockNode, b: &BlockNode) -> Result<f64> {
    Ok(layout_sim_boxes(&canonical_boxes(a)?, &canonical_boxes(b)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextScore {
    /// Neighbor-mean similarity per node; `None` for isolated or super nodes.
    pub per_node_gen: Vec<Option<f64>>,
    pub per_node_real: Vec<Option<f64>>,
    pub ct_gen: f64,
    pub ct_real: f64,
    pub cts: f64,
}

/// Per-node neighbor-mean similarity and its mean over scored nodes.
pub fn context_consistency(g: &CityGraph) -> Result<(Vec<Option<f64>>, f64)> {
    if g.edges.is_empty() {
        return Err(Error::NoContext);
    }
    let boxes: Vec<Option<Vec<FrameBox>>> = g
        .nodes
        .iter()
        .map(|n| if n.is_super { Ok(None) } else { canonical_boxes(n).map(Some) })
        .collect::<Result<_>>()?;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); g.nodes.len()];
    for e in &g.edges {
        adj[e.i].push(e.j);
        adj[e.j].push(e.i);
    }
    let mut per_node = vec![None; g.nodes.len()];
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..g.nodes.len() {
        let Some(bi) = &boxes[i] else { continue };
        let sims: Vec<f64> = adj[i]
            .iter()
            .filter_map(|&j| boxes[j].as_ref().map(|bj| layout_sim_boxes(bi, bj)))
            .collect();
        if sims.is_empty() {
            continue;
        }
        let ct = sims.iter().sum::<f64>() / sims.len() as f64;
        per_node[i] = Some(ct);
        sum += ct;
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoContext);
    }
    Ok((per_node, sum / count as f64))
}

/// Context score of a generated city against the real one with the same graph.
pub fn context_score(gen: &CityGraph, real: &CityGraph) -> Result<ContextScore> {
    if gen.nodes.len() != real.nodes.len() || gen.edges.len() != real.edges.len() {
        return Err(contract("generated and real graphs differ in structure"));
    }
    let (per_node_gen, ct_gen) = context_consistency(gen)?;
    let (per_node_real, ct_real) = context_consistency(real)?;
    Ok(ContextScore { per_node_gen, per_node_real, ct_gen, ct_real, cts: ct_gen - ct_real })
}

/// 1-Wasserstein distance between two empirical distributions.
pub fn wasserstein_1d(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(contract("Wasserstein distance of an empty sample"));
    }
    let mut a = x.to_vec();
    let mut b = y.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return Ok(a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64);
    }
    // Integrate |F⁻¹(t) − G⁻¹(t)| over the merged quantile breakpoints.
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut t = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        total += (next - t) * (a[i] - b[j]).abs();
        t = next;
        // Advance by integer comparison so shared breakpoints move both.
        let (adv_a, adv_b) = match ((i + 1) * m).cmp(&((j + 1) * n)) {
            std::cmp::Ordering::Less => (true, false),
            std::cmp::Ordering::Greater => (false, true),
            std::cmp::Ordering::Equal => (true, true),
        };
        i += usize::from(adv_a);
        j += usize::from(adv_b);
    }
    Ok(total)
}

/// Per-building features: centroid offset from the city centroid (x, y),
/// oriented length and width, height.
pub fn building_features(g: &CityGraph) -> Vec<[f64; 5]> {
    let mut out = Vec::new();
    for n in g.nodes.iter().filter(|n| !n.is_super) {
        for b in &n.buildings {
            let c = b.footprint.centroid().sub(g.centroid);
            let (l, w) = match oriented_bounding_frame(&b.footprint) {
                Ok(f) => (f.width(), f.height()),
                Err(_) => (0.0, 0.0),
            };
            out.push([c.x, c.y, l, w, b.height]);
        }
    }
    out
}

/// Mean of five 1-D Wasserstein distances over building features,
/// each z-scored with the real set's mean and standard deviation.
pub fn wd_5d(gen: &CityGraph, real: &CityGraph) -> Result<f64> {
    let fg = building_features(gen);
    let fr = building_features(real);
    if fg.is_empty() || fr.is_empty() {
        return Err(contract("WD-5D needs buildings on both sides"));
    }
    let mut total = 0.0;
    for k in 0..5 {
        let r: Vec<f64> = fr.iter().map(|f| f[k]).collect();
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / r.len() as f64;
        let sd = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        let z = |v: f64| (v - mean) / sd;
        let zr: Vec<f64> = r.iter().map(|&v| z(v)).collect();
        let zg: Vec<f64> = fg.iter().map(|f| z(f[k])).collect();
        total += wasserstein_1d(&zg, &zr)?;
    }
    Ok(total / 5.0)
}

/// W1 between per-block building-count distributions.
pub fn wd_count(gen: &CityGraph, real: &CityGraph) -> Result<f64> {
    let counts = |g: &CityGraph| -> Vec<f64> {
        g.nodes.iter().filter(|n| !n.is_super).map(|n| n.buildings.len() as f64).collect()
    };
    wasserstein_1d(&counts(gen), &counts(real))
}

/// Pairwise intra-block footprint overlap as a percentage of total building area.
pub fn overlap_pct<'a>(blocks: impl IntoIterator<Item = &'a BlockNode>) -> f64 {
    let (mut inter, mut area) = (0.0, 0.0);
    for n in blocks {
        for (k, a) in n.buildings.iter().enumerate() {
            area += a.footprint.area();
            for b in &n.buildings[k + 1..] {
                inter += intersection_area(&a.footprint, &b.footprint);
            }
        }
    }
    if area <= 0.0 {
        0.0
    } else {
        (100.0 * inter / area).clamp(0.0, 100.0)
    }
}

/// Building area outside its block contour as a percentage of total building area.
pub fn out_block_pct<'a>(blocks: impl IntoIterator<Item = &'a BlockNode>) -> f64 {
    let (mut outside, mut area) = (0.0, 0.0);
    for n in blocks {
        for b in &n.buildings {
            let a = b.footprint.area();
            area += a;
            outside += (a - intersection_area(&b.footprint, &n.contour)).max(0.0);
        }
    }
    if area <= 0.0 {
        0.0
    } else {
        (100.0 * outside / area).clamp(0.0, 100.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionErrors {
    /// Matched centroid distance, percent of block diagonal.
    pub pos_e: f64,
    /// Matched length + width + height difference, percent of block diagonal.
    pub geom_e: f64,
    /// Building count error, percent of the true count.
    pub ct_e: f64,
    /// Covered-area fraction difference, percentage points.
    pub cov_e: f64,
}

/// Compares predicted to true building sets for blocks sharing one contour each.
pub fn reconstruction_errors(contours: &[Polygon], pred: &[Vec<Building>], truth: &[Vec<Building>]) -> Result<ReconstructionErrors> {
    if contours.len() != pred.len() || pred.len() != truth.len() {
        return Err(contract("reconstruction inputs differ in length"));
    }
    if contours.is_empty() {
        return Err(contract("no blocks to compare"));
    }
    let (mut pos, mut geom, mut pairs) = (0.0, 0.0, 0usize);
    let (mut ct, mut cov) = (0.0, 0.0);
    for ((contour, p), t) in contours.iter().zip(pred).zip(truth) {
        let frame = oriented_bounding_frame(contour)?;
        let diag = frame.diagonal();
        let (w, h) = (frame.width(), frame.height());
        let pb = frame_boxes(&frame, p);
        let tb = frame_boxes(&frame, t);
        if !tb.is_empty() {
            for (i, j, _) in greedy_matching(&pb, &tb) {
                let (a, b) = (&pb[i], &tb[j]);
                let d = ((a.center[0] - b.center[0]) * w).hypot((a.center[1] - b.center[1]) * h);
                pos += d / diag;
                let dl = ((a.extent[0] - b.extent[0]) * w).abs() + ((a.extent[1] - b.extent[1]) * h).abs();
                geom += (dl + (a.height - b.height).abs()) / diag;
                pairs += 1;
            }
        }
        let err = p.len().abs_diff(t.len()) as f64 / t.len().max(1) as f64;
        ct += err.min(1.0);
        let area = contour.area();
        let covered = |bs: &[Building]| (bs.iter().map(|b| b.footprint.area()).sum::<f64>() / area).min(1.0);
        cov += (covered(p) - covered(t)).abs();
    }
    let n = contours.len() as f64;
    let per_pair = |x: f64| if pairs == 0 { 0.0 } else { 100.0 * x / pairs as f64 };
    Ok(ReconstructionErrors { pos_e: per_pair(pos), geom_e: per_pair(geom), ct_e: 100.0 * ct / n, cov_e: 100.0 * cov / n })
}

/// Convenience for building a box from a center and size in a unit frame.
pub fn unit_box(cx: f64, cy: f64, w: f64, h: f64) -> FrameBox {
    FrameBox { center: [cx, cy], extent: [w, h], height: 0.0 }
}

/// World-space polygon of a unit-frame box in `frame`.
pub fn box_polygon(frame: &OrientedFrame, b: &FrameBox) -> Result<Polygon> {
    frame.box_to_world(Point::new(b.center[0], b.center[1]), Point::new(b.extent[0], b.extent[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_layout_sim() {
        let a = [unit_box(0.25, 0.25, 0.2, 0.2), unit_box(0.75, 0.75, 0.2, 0.2)];
        let b = [unit_box(0.25, 0.25, 0.2, 0.2), unit_box(0.25, 0.75, 0.2, 0.2)];
        assert!((layout_sim_boxes(&a, &b) - 0.75).abs() < 1e-15);
        assert!((layout_sim_boxes(&b, &a) - 0.75).abs() < 1e-15);
        assert_eq!(layout_sim_boxes(&a, &a), 1.0);
        assert_eq!(layout_sim_boxes(&a, &[]), 0.0);
        assert_eq!(layout_sim_boxes(&[], &[]), 1.0);
    }

    #[test]
    fn wasserstein_cases() {
        assert_eq!(wasserstein_1d(&[0.0], &[3.0]).unwrap(), 3.0);
        assert_eq!(wasserstein_1d(&[0.0, 1.0], &[0.5, 1.5]).unwrap(), 0.5);
        assert_eq!(wasserstein_1d(&[2.0], &[5.0, 5.0, 5.0]).unwrap(), 3.0);
        // {0, 1} vs {0, 0.5, 1}: thirds and halves.
        let w = wasserstein_1d(&[0.0, 1.0], &[0.0, 0.5, 1.0]).unwrap();
        assert!((w - (1.0 / 6.0) * 0.5 * 2.0).abs() < 1e-15, "{w}");
        assert!(wasserstein_1d(&[], &[1.0]).is_err());
    }

    #[test]
    fn overlap_and_outside() {
        let sq = |x0: f64, y0: f64| Building { footprint: Polygon::rect(x0, y0, x0 + 1.0, y0 + 1.0).unwrap(), height: 5.0 };
        let mut n = BlockNode {
            block_id: "b".into(),
            contour: Polygon::rect(0.0, 0.0, 10.0, 10.0).unwrap(),
            buildings: vec![sq(1.0, 1.0), sq(1.0, 1.0)],
            shape_features: Default::default(),
            layout_code: None,
            is_super: false,
        };
        assert_eq!(overlap_pct([&n]), 50.0);
        assert_eq!(out_block_pct([&n]), 0.0);
        n.buildings = vec![Building { footprint: Polygon::rect(9.0, 0.0, 11.0, 1.0).unwrap(), height: 5.0 }];
        assert!((out_block_pct([&n]) - 50.0).abs() < 1e-12);
        n.buildings.clear();
        assert_eq!(overlap_pct([&n]), 0.0);
    }

    #[test]
    fn shifted_building_pos_error() {
        let contour = Polygon::rect(0.0, 0.0, 30.0, 40.0).unwrap();
        let b = |dx: f64| vec![Building { footprint: Polygon::rect(5.0 + dx, 5.0, 10.0 + dx, 10.0).unwrap(), height: 8.0 }];
        let r = reconstruction_errors(&[contour.clone()], &[b(2.5)], &[b(0.0)]).unwrap();
        assert!((r.pos_e - 5.0).abs() < 1e-9, "{r:?}");
        assert!(r.geom_e.abs() < 1e-9 && r.ct_e == 0.0 && r.cov_e.abs() < 1e-12);
        let same = reconstruction_errors(&[contour], &[b(0.0)], &[b(0.0)]).unwrap();
        assert_eq!(same, ReconstructionErrors::default());
    }
}
