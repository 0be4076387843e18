//! SVG rendering of blocks and height-colored building footprints.

use std::fmt::Write as _;

use coho_core::citygraph::CityGraph;
use coho_core::geometry::{Point, Polygon};

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOptions {
    /// Output width in pixels; height follows the city's aspect ratio.
    pub width: f64,
    pub margin: f64,
    /// Height mapped to the top of the color ramp.
    pub max_height_m: f64,
    /// Blocks drawn with an accent outline, e.g. the generated ones.
    pub highlight: Vec<usize>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { width: 1024.0, margin: 16.0, max_height_m: 60.0, highlight: Vec::new() }
    }
}

/// Low-to-high ramp from pale yellow through orange to deep purple.
const RAMP: [[f64; 3]; 5] = [
    [255.0, 237.0, 160.0],
    [254.0, 178.0, 76.0],
    [240.0, 59.0, 32.0],
    [189.0, 0.0, 38.0],
    [84.0, 39.0, 143.0],
];

pub fn height_color(height: f64, max_height: f64) -> String {
    let t = if max_height > 0.0 { (height / max_height).clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (RAMP.len() - 1) as f64;
    let k = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - k as f64;
    let c: Vec<u8> = (0..3).map(|i| (RAMP[k][i] + (RAMP[k + 1][i] - RAMP[k][i]) * f).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

struct View {
    min: Point,
    scale: f64,
    margin: f64,
    height: f64,
}

impl View {
    fn fit(graph: &CityGraph, opts: &RenderOptions) -> Self {
        let mut min = Point::new(f64::INFINITY, f64::INFINITY);
        let mut max = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for n in graph.nodes.iter().filter(|n| !n.is_super) {
            let (lo, hi) = n.contour.bbox();
            min = Point::new(min.x.min(lo.x), min.y.min(lo.y));
            max = Point::new(max.x.max(hi.x), max.y.max(hi.y));
        }
        if !min.x.is_finite() {
            return Self { min: Point::default(), scale: 1.0, margin: opts.margin, height: 2.0 * opts.margin };
        }
        let span_x = (max.x - min.x).max(1.0);
        let span_y = (max.y - min.y).max(1.0);
        let scale = (opts.width - 2.0 * opts.margin).max(1.0) / span_x;
        Self { min, scale, margin: opts.margin, height: span_y * scale + 2.0 * opts.margin }
    }

    /// Screen coordinates with y pointing down.
    fn map(&self, p: Point) -> (f64, f64) {
        let x = self.margin + (p.x - self.min.x) * self.scale;
        let y = self.height - self.margin - (p.y - self.min.y) * self.scale;
        (x, y)
    }

    fn points(&self, poly: &Polygon) -> String {
        let mut s = String::new();
        for (k, &p) in poly.vertices().iter().enumerate() {
            let (x, y) = self.map(p);
            if k > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{x:.2},{y:.2}");
        }
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Draws every non-super block and its buildings. Buildings are painted in
/// ascending height so taller ones stay visible where footprints overlap.
pub fn render_svg(graph: &CityGraph, opts: &RenderOptions) -> String {
    let view = View::fit(graph, opts);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#,
        w = opts.width,
        h = view.height.ceil()
    );
    let _ = writeln!(out, r#"<title>{}</title>"#, escape(&graph.city_id));
    out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n");

    out.push_str("<g id=\"blocks\" fill=\"#eeeeee\" stroke=\"#9a9a9a\" stroke-width=\"0.8\">\n");
    for (i, n) in graph.nodes.iter().enumerate().filter(|(_, n)| !n.is_super) {
        let accent = if opts.highlight.contains(&i) { r##" stroke="#1f78b4" stroke-width="2""## } else { "" };
        let _ = writeln!(
            out,
            r#"<polygon data-block-id="{}" points="{}"{accent}/>"#,
            escape(&n.block_id),
            view.points(&n.contour)
        );
    }
    out.push_str("</g>\n");

    let mut buildings: Vec<(&str, &coho_core::citygraph::Building)> = graph
        .nodes
        .iter()
        .filter(|n| !n.is_super)
        .flat_map(|n| n.buildings.iter().map(move |b| (n.block_id.as_str(), b)))
        .collect();
    buildings.sort_by(|a, b| a.1.height.total_cmp(&b.1.height));
    out.push_str("<g id=\"buildings\" stroke=\"#333333\" stroke-width=\"0.4\">\n");
    for (block, b) in buildings {
        let _ = writeln!(
            out,
            r#"<polygon class="building" data-block-id="{}" data-height="{:.1}" fill="{}" points="{}"/>"#,
            escape(block),
            b.height,
            height_color(b.height, opts.max_height_m),
            view.points(&b.footprint)
        );
    }
    out.push_str("</g>\n</svg>\n");
    out
}
