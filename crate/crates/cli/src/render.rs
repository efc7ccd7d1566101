//! SVG drawing of points and partition rectangles.

use std::fmt::Write as _;

use spart::data::Point;
use spart::partition::PartitionSet;

/// Points beyond this are thinned by a fixed stride.
pub const MAX_POINTS: usize = 20_000;

const WIDTH: f64 = 800.0;

/// Every `k`-th point so that at most `max` remain.
pub fn subsample(points: &[Point], max: usize) -> Vec<Point> {
    if points.len() <= max {
        return points.to_vec();
    }
    let stride = points.len().div_ceil(max);
    points.iter().step_by(stride).copied().collect()
}

pub fn render_svg(ps: &PartitionSet, points: &[Point]) -> String {
    let b = ps.grid().bbox;
    let scale = WIDTH / b.width();
    let height = (b.height() * scale).max(1.0);
    let sx = |x: f64| (x - b.min_x) * scale;
    // SVG's y axis points down
    let sy = |y: f64| (b.max_y - y) * scale;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0}" height="{height:.0}" viewBox="0 0 {WIDTH:.2} {height:.2}">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{WIDTH:.2}" height="{height:.2}" fill="white"/>"#);
    let _ = writeln!(out, r##"<g fill="#3b6ea5" fill-opacity="0.5">"##);
    for p in subsample(points, MAX_POINTS) {
        let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="1"/>"#, sx(p.x), sy(p.y));
    }
    out.push_str("</g>\n");
    let _ = writeln!(out, r##"<g fill="none" stroke="#c0392b" stroke-width="1.5">"##);
    for r in ps.rects() {
        let rb = r.bbox(ps.grid());
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}"/>"#,
            sx(rb.min_x),
            sy(rb.max_y),
            rb.width() * scale,
            rb.height() * scale
        );
    }
    out.push_str("</g>\n</svg>\n");
    out
}
