//! SVG rendering of attributed star graphs.
//!
//! One panel per gate layer: the centroid sits at the panel center, leaves
//! on a circle around it, each edge drawn in its color — solid when
//! retained, faded (and dashed) when superfluous. The header annotates the
//! query colors and the prediction; gold-standard edges get a bold leaf
//! outline. Output is plain text built in a fixed order with fixed-width
//! number formatting, so identical inputs render byte-identical files.

use std::fmt::Write as _;

use graphmask_core::attribution::AttributionResult;
use graphmask_core::error::{Error, Result};
use graphmask_core::graphs::StarGraphExample;

const PANEL_W: f64 = 380.0;
const PANEL_H: f64 = 360.0;
const HEADER_H: f64 = 92.0;
const RADIUS: f64 = 120.0;

/// Qualitative palette (Tol bright); colors beyond its length cycle.
const PALETTE: [&str; 7] = [
    "#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377", "#bbbbbb",
];

fn color(c: usize) -> &'static str {
    PALETTE[c % PALETTE.len()]
}

fn f(x: f64) -> String {
    format!("{x:.2}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render one example's attribution. `title` leads the header line.
pub fn render_svg(ex: &StarGraphExample, attr: &AttributionResult, title: &str) -> Result<String> {
    let n = ex.graph.edges.len();
    if attr.layers.is_empty() {
        return Err(Error::InvalidArg("attribution has no layers to draw".into()));
    }
    for (k, layer) in attr.layers.iter().enumerate() {
        if layer.len() != n {
            return Err(Error::InvalidArg(format!(
                "attribution layer {k} covers {} edges but the example has {n}",
                layer.len()
            )));
        }
    }
    let num_layers = attr.layers.len();
    let width = PANEL_W * num_layers as f64;
    let height = HEADER_H + PANEL_H;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif">"##,
        w = f(width),
        h = f(height),
    );
    let _ = writeln!(s, r##"<rect width="{}" height="{}" fill="#ffffff"/>"##, f(width), f(height));

    // Header: title, query annotation with swatches, stroke legend.
    let (qx, qy) = ex.query;
    let _ = writeln!(
        s,
        r##"<text x="12" y="22" font-size="13" fill="#1a1a1a">{} — label {}, predicted {} (masked {}), divergence {:.4}</text>"##,
        escape(title),
        u8::from(ex.label),
        attr.original_prediction,
        attr.masked_prediction,
        attr.divergence,
    );
    let _ = writeln!(
        s,
        r##"<rect x="12" y="34" width="12" height="12" fill="{}" stroke="#1a1a1a"/>"##,
        color(qx)
    );
    let _ = writeln!(
        s,
        r##"<text x="30" y="44" font-size="11" fill="#1a1a1a">query x = color {qx}</text>"##
    );
    let _ = writeln!(
        s,
        r##"<rect x="150" y="34" width="12" height="12" fill="{}" stroke="#1a1a1a"/>"##,
        color(qy)
    );
    let _ = writeln!(
        s,
        r##"<text x="168" y="44" font-size="11" fill="#1a1a1a">query y = color {qy}</text>"##
    );
    let _ = writeln!(
        s,
        r##"<line x1="12" y1="62" x2="44" y2="62" stroke="#1a1a1a" stroke-width="3.5"/>"##
    );
    let _ = writeln!(s, r##"<text x="50" y="66" font-size="11" fill="#1a1a1a">retained</text>"##);
    let _ = writeln!(
        s,
        r##"<line x1="120" y1="62" x2="152" y2="62" stroke="#1a1a1a" stroke-width="1.5" stroke-opacity="0.25" stroke-dasharray="5 4"/>"##
    );
    let _ = writeln!(
        s,
        r##"<text x="158" y="66" font-size="11" fill="#1a1a1a">superfluous</text>"##
    );
    let _ = writeln!(
        s,
        r##"<text x="280" y="66" font-size="11" fill="#1a1a1a">bold leaf ring = gold edge</text>"##
    );

    for (k, layer) in attr.layers.iter().enumerate() {
        let x0 = PANEL_W * k as f64;
        let cx = x0 + PANEL_W / 2.0;
        let cy = HEADER_H + PANEL_H / 2.0 - 10.0;
        let retained = layer.iter().filter(|a| a.hard).count();

        let _ = writeln!(s, r##"<g class="panel" data-layer="{k}">"##);
        if num_layers > 1 {
            let _ = writeln!(
                s,
                r##"<text x="{}" y="{}" font-size="11" fill="#1a1a1a">layer {k}</text>"##,
                f(x0 + 12.0),
                f(HEADER_H + 16.0),
            );
        }

        let leaf_pos: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let theta = -std::f64::consts::FRAC_PI_2
                    + 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                (cx + RADIUS * theta.cos(), cy + RADIUS * theta.sin())
            })
            .collect();

        // Edges first so the vertex circles cover the line ends.
        for (e, a) in layer.iter().enumerate() {
            let (lx, ly) = leaf_pos[e];
            let c = color(ex.colors[e]);
            let (class, sw, extra) = if a.hard {
                ("retained", "3.5", String::new())
            } else {
                (
                    "superfluous",
                    "1.5",
                    r##" stroke-opacity="0.25" stroke-dasharray="5 4""##.to_string(),
                )
            };
            let _ = writeln!(
                s,
                r##"<g class="{class}"><title>edge {e}: color {col}, p={p:.3}, {class}</title><line x1="{x1}" y1="{y1}" x2="{x2}" y2="{y2}" stroke="{c}" stroke-width="{sw}"{extra}/></g>"##,
                col = ex.colors[e],
                p = a.prob,
                x1 = f(lx),
                y1 = f(ly),
                x2 = f(cx),
                y2 = f(cy),
            );
        }

        let _ = writeln!(
            s,
            r##"<circle cx="{}" cy="{}" r="13" fill="#444444"/>"##,
            f(cx),
            f(cy)
        );
        let _ = writeln!(
            s,
            r##"<text x="{}" y="{}" font-size="10" fill="#ffffff" text-anchor="middle">v0</text>"##,
            f(cx),
            f(cy + 3.5),
        );

        for (i, &(lx, ly)) in leaf_pos.iter().enumerate() {
            let (ring, ring_w) = if ex.gold_mask[i] { ("#1a1a1a", "2.5") } else { ("#999999", "1") };
            let _ = writeln!(
                s,
                r##"<circle cx="{}" cy="{}" r="11" fill="{}" stroke="{ring}" stroke-width="{ring_w}"/>"##,
                f(lx),
                f(ly),
                color(ex.colors[i]),
            );
            // Color-index labels sit just outside the leaf circle.
            let scale = (RADIUS + 24.0) / RADIUS;
            let tx = cx + (lx - cx) * scale;
            let ty = cy + (ly - cy) * scale;
            let _ = writeln!(
                s,
                r##"<text x="{}" y="{}" font-size="10" fill="#1a1a1a" text-anchor="middle">c{}</text>"##,
                f(tx),
                f(ty + 3.5),
                ex.colors[i],
            );
        }

        let _ = writeln!(
            s,
            r##"<text x="{}" y="{}" font-size="11" fill="#1a1a1a">retained {retained}/{n}</text>"##,
            f(x0 + 12.0),
            f(HEADER_H + PANEL_H - 12.0),
        );
        let _ = writeln!(s, "</g>");
    }

    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use graphmask_core::attribution::EdgeAttribution;

    use super::*;

    fn example() -> StarGraphExample {
        StarGraphExample::new(vec![0, 1, 2, 0, 1], (0, 1)).unwrap()
    }

    fn attribution(hard: &[bool], layers: usize) -> AttributionResult {
        let layer: Vec<EdgeAttribution> = hard
            .iter()
            .enumerate()
            .map(|(e, &h)| EdgeAttribution {
                edge: e,
                prob: if h { 0.9 } else { 0.1 },
                hard: h,
            })
            .collect();
        AttributionResult {
            original_prediction: 0,
            masked_prediction: 0,
            divergence: 0.01,
            layers: vec![layer; layers],
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let ex = example();
        let attr = attribution(&[true, true, false, true, false], 1);
        let a = render_svg(&ex, &attr, "example 3").unwrap();
        let b = render_svg(&ex, &attr, "example 3").unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.ends_with("</svg>\n"));
    }

    #[test]
    fn retained_and_superfluous_edges_get_their_classes() {
        let ex = example();
        let attr = attribution(&[true, false, false, false, false], 1);
        let svg = render_svg(&ex, &attr, "t").unwrap();
        assert_eq!(svg.matches(r##"<g class="retained">"##).count(), 1);
        assert_eq!(svg.matches(r##"<g class="superfluous">"##).count(), 4);
        assert!(svg.contains("retained 1/5"));
    }

    #[test]
    fn an_empty_retained_set_fades_every_edge() {
        let ex = example();
        let attr = attribution(&[false; 5], 1);
        let svg = render_svg(&ex, &attr, "t").unwrap();
        assert_eq!(svg.matches(r##"<g class="retained">"##).count(), 0);
        assert_eq!(svg.matches(r##"<g class="superfluous">"##).count(), 5);
    }

    #[test]
    fn multi_layer_attributions_get_one_panel_each() {
        let ex = example();
        let attr = attribution(&[true, false, true, false, true], 2);
        let svg = render_svg(&ex, &attr, "t").unwrap();
        assert_eq!(svg.matches(r##"<g class="panel""##).count(), 2);
        assert!(svg.contains(">layer 0<"));
        assert!(svg.contains(">layer 1<"));
    }

    #[test]
    fn query_colors_are_annotated() {
        let ex = example();
        let attr = attribution(&[true; 5], 1);
        let svg = render_svg(&ex, &attr, "t").unwrap();
        assert!(svg.contains("query x = color 0"));
        assert!(svg.contains("query y = color 1"));
    }

    #[test]
    fn shape_mismatches_are_refused() {
        let ex = example();
        let attr = attribution(&[true, false], 1);
        assert!(render_svg(&ex, &attr, "t").is_err());
        let empty = AttributionResult {
            original_prediction: 0,
            masked_prediction: 0,
            divergence: 0.0,
            layers: vec![],
        };
        assert!(render_svg(&ex, &empty, "t").is_err());
    }
}
