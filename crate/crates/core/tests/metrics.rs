use coho_core::citygraph::{block_shape_features, BlockNode, Building, CityGraph, Edge};
use coho_core::geometry::{Point, Polygon};
use coho_core::metrics::*;
use coho_core::toy::{ToyCity, ToyConfig};
use proptest::prelude::*;

/// A 120 × 100 block at `x` holding centered buildings of the given sizes.
fn block(id: &str, x: f64, sizes: &[(f64, f64)]) -> BlockNode {
    let contour = Polygon::rect(x, 0.0, x + 120.0, 100.0).unwrap();
    let buildings = sizes
        .iter()
        .map(|&(w, h)| Building {
            footprint: Polygon::rect(x + 60.0 - w / 2.0, 50.0 - h / 2.0, x + 60.0 + w / 2.0, 50.0 + h / 2.0).unwrap(),
            height: 10.0,
        })
        .collect();
    let shape_features = block_shape_features(&contour, Point::default()).unwrap();
    BlockNode { block_id: id.into(), contour, buildings, shape_features, layout_code: None, is_super: false }
}

/// Star of five blocks: a hub whose building covers half of each frame
/// axis, three spokes with a half-height building, one empty spoke.
fn star() -> CityGraph {
    let nodes = vec![
        block("hub", 0.0, &[(60.0, 50.0)]),
        block("s1", 200.0, &[(60.0, 25.0)]),
        block("s2", 400.0, &[(60.0, 25.0)]),
        block("s3", 600.0, &[(60.0, 25.0)]),
        block("s4", 800.0, &[]),
    ];
    let edges = (1..5).map(|j| Edge { i: 0, j, distance: 10.0 }).collect();
    CityGraph { city_id: "star".into(), nodes, edges, centroid: Point::default(), code_dim: 0, seed: 0, projection: None }
}

#[test]
fn five_node_context_consistency_by_hand() {
    // Hub vs half-height spoke: the smaller box has area 0.125, the
    // extents differ by 0.25 along one axis, so the pair weight is
    // 0.125 · 2^(−0.5), normalized by the larger total area 0.25.
    let s = 0.125 * 2f64.powf(-0.5) / 0.25;
    assert!((s - 0.353_553_390_593_273_8).abs() < 1e-15);

    let g = star();
    let (per_node, ct) = context_consistency(&g).unwrap();
    let expect = [0.75 * s, s, s, s, 0.0];
    for (k, (got, want)) in per_node.iter().zip(expect).enumerate() {
        assert!((got.unwrap() - want).abs() < 1e-12, "node {k}: {got:?} vs {want}");
    }
    assert!((ct - 0.75 * s).abs() < 1e-12);
}

#[test]
fn super_nodes_are_not_scored() {
    let mut g = star();
    g.nodes[4].is_super = true;
    let (per_node, ct) = context_consistency(&g).unwrap();
    let s = 0.125 * 2f64.powf(-0.5) / 0.25;
    assert_eq!(per_node[4], None);
    assert!((per_node[0].unwrap() - s).abs() < 1e-12, "hub averages only real neighbors");
    assert!((ct - s).abs() < 1e-12);
}

#[test]
fn graph_without_edges_has_no_context() {
    let mut g = star();
    g.edges.clear();
    assert!(context_consistency(&g).is_err());
}

#[test]
fn context_score_of_a_city_against_itself_is_zero() {
    let city = ToyCity::generate(&ToyConfig { rows: 6, cols: 7, ..ToyConfig::default() }).unwrap();
    let g = city.to_graph(25.0, 8, 32).unwrap();
    let score = context_score(&g, &g).unwrap();
    assert_eq!(score.cts, 0.0);
    assert!((0.0..=1.0).contains(&score.ct_real));
    assert_eq!(wd_5d(&g, &g).unwrap(), 0.0);
    assert_eq!(wd_count(&g, &g).unwrap(), 0.0);
}

#[test]
fn layout_similarity_edge_cases() {
    assert_eq!(layout_sim_boxes(&[], &[]), 1.0);
    assert_eq!(layout_sim_boxes(&[unit_box(0.5, 0.5, 0.1, 0.1)], &[]), 0.0);
    let a = [unit_box(0.3, 0.3, 0.2, 0.4), unit_box(0.7, 0.6, 0.3, 0.3)];
    assert!((layout_sim_boxes(&a, &a) - 1.0).abs() < 1e-15);
}

#[test]
fn overlap_and_out_of_block_shares() {
    let mut b = block("b", 0.0, &[(40.0, 40.0)]);
    // A second 40 × 40 building shifted by half its width overlaps by 800 m².
    b.buildings.push(Building { footprint: Polygon::rect(60.0, 30.0, 100.0, 70.0).unwrap(), height: 5.0 });
    assert!((overlap_pct([&b]) - 100.0 * 800.0 / 3200.0).abs() < 1e-9);
    assert_eq!(out_block_pct([&b]), 0.0);
    // Half of a third building hangs over the block edge at x = 120.
    b.buildings.push(Building { footprint: Polygon::rect(110.0, 0.0, 130.0, 20.0).unwrap(), height: 5.0 });
    assert!((out_block_pct([&b]) - 100.0 * 200.0 / 3600.0).abs() < 1e-9);
}

#[test]
fn reconstruction_of_the_truth_has_no_error() {
    let b = block("b", 0.0, &[(40.0, 20.0), (10.0, 10.0)]);
    let e = reconstruction_errors(&[b.contour.clone()], &[b.buildings.clone()], &[b.buildings.clone()]).unwrap();
    assert_eq!(e, ReconstructionErrors::default());
    let e = reconstruction_errors(&[b.contour.clone()], &[vec![]], &[b.buildings.clone()]).unwrap();
    assert_eq!(e.ct_e, 100.0);
}

#[test]
fn wasserstein_hand_values() {
    assert!((wasserstein_1d(&[0.0], &[0.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
    // F⁻¹ of {0, 3} against G⁻¹ of {1, 1, 4}: |0−1|/3 + |0−1|/6 + |3−1|/6 + |3−4|/3.
    let w = wasserstein_1d(&[3.0, 0.0], &[1.0, 4.0, 1.0]).unwrap();
    assert!((w - (1.0 / 3.0 + 1.0 / 6.0 + 2.0 / 6.0 + 1.0 / 3.0)).abs() < 1e-15);
    assert!(wasserstein_1d(&[], &[1.0]).is_err());
}

fn sample() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, 1..40)
}

proptest! {
    #[test]
    fn wasserstein_is_a_metric(x in sample(), y in sample(), z in sample()) {
        let xy = wasserstein_1d(&x, &y).unwrap();
        prop_assert!(xy >= 0.0);
        prop_assert!((xy - wasserstein_1d(&y, &x).unwrap()).abs() < 1e-9);
        prop_assert_eq!(wasserstein_1d(&x, &x).unwrap(), 0.0);
        let xz = wasserstein_1d(&x, &z).unwrap();
        let zy = wasserstein_1d(&z, &y).unwrap();
        prop_assert!(xy <= xz + zy + 1e-9);
    }

    #[test]
    fn shifting_a_sample_moves_it_by_the_shift(x in sample(), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        prop_assert!((wasserstein_1d(&x, &shifted).unwrap() - c.abs()).abs() < 1e-9);
    }

    #[test]
    fn duplicating_a_sample_leaves_its_distribution_unchanged(x in sample(), y in sample()) {
        let doubled: Vec<f64> = x.iter().chain(&x).copied().collect();
        prop_assert!((wasserstein_1d(&x, &y).unwrap() - wasserstein_1d(&doubled, &y).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn layout_similarity_is_in_unit_range(
        a in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.01f64..0.5, 0.01f64..0.5), 0..6),
        b in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.01f64..0.5, 0.01f64..0.5), 0..6),
    ) {
        let fa: Vec<FrameBox> = a.iter().map(|&(x, y, w, h)| unit_box(x, y, w, h)).collect();
        let fb: Vec<FrameBox> = b.iter().map(|&(x, y, w, h)| unit_box(x, y, w, h)).collect();
        let s = layout_sim_boxes(&fa, &fb);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((s - layout_sim_boxes(&fb, &fa)).abs() < 1e-12);
    }
}
