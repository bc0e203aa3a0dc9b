//! Minimal hand-written SVG output: attribution line plots and dendrograms.
//!
//! Only `svg`, `g`, `rect`, `line`, `polyline` and `text` elements are
//! emitted.

use std::fmt::Write as _;

use crate::attrib::AttributionGrid;
use crate::cluster::Dendrogram;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Fixed precision keeps files byte-stable and small.
fn num(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" {
        "0.00".to_string()
    } else {
        s
    }
}

fn label(x: f64) -> String {
    let s = format!("{x:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

/// Roughly `target` evenly spaced round values covering `[lo, hi]`.
fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = hi - lo;
    if !(span > 0.0) || !span.is_finite() {
        return vec![lo];
    }
    let raw = span / target.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn header(out: &mut String, w: f64, h: f64) {
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">",
        num(w),
        num(h),
        num(w),
        num(h)
    );
    let _ = writeln!(
        out,
        "<rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>",
        num(w),
        num(h)
    );
}

fn text(out: &mut String, x: f64, y: f64, anchor: &str, extra: &str, content: &str) {
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"{anchor}\" font-family=\"sans-serif\" font-size=\"11\"{extra}>{}</text>",
        num(x),
        num(y),
        escape(content)
    );
}

fn line(out: &mut String, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) {
    let _ = writeln!(
        out,
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{stroke}\" stroke-width=\"1\"/>",
        num(x1),
        num(y1),
        num(x2),
        num(y2)
    );
}

/// One polyline per grid row against mask start, with axes, tick labels
/// and a legend. Missing cells are skipped within a row's polyline.
pub fn line_plot(grid: &AttributionGrid, title: &str) -> String {
    let legend_w = 160.0;
    let plot_w = WIDTH - LEFT - legend_w - 20.0;
    let plot_h = HEIGHT - TOP - BOTTOM;

    let starts = grid.starts();
    let (x_lo, x_hi) = match (starts.first(), starts.last()) {
        (Some(&a), Some(&b)) if b > a => (a as f64, b as f64),
        (Some(&a), _) => (a as f64, a as f64 + 1.0),
        _ => (0.0, 1.0),
    };
    let present: Vec<f64> = grid.values().iter().flatten().copied().collect();
    let (mut y_lo, mut y_hi) = present.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if present.is_empty() {
        (y_lo, y_hi) = (-1.0, 1.0);
    }
    if y_hi - y_lo < 1e-12 {
        y_lo -= 0.5;
        y_hi += 0.5;
    } else {
        let pad = 0.05 * (y_hi - y_lo);
        y_lo -= pad;
        y_hi += pad;
    }
    let sx = |x: f64| LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = |y: f64| TOP + (y_hi - y) / (y_hi - y_lo) * plot_h;

    let mut out = String::new();
    header(&mut out, WIDTH, HEIGHT);
    text(
        &mut out,
        LEFT + plot_w / 2.0,
        TOP - 15.0,
        "middle",
        " font-weight=\"bold\"",
        title,
    );

    out.push_str("<g id=\"axes\">\n");
    line(&mut out, LEFT, TOP + plot_h, LEFT + plot_w, TOP + plot_h, "black");
    line(&mut out, LEFT, TOP, LEFT, TOP + plot_h, "black");
    for t in nice_ticks(x_lo, x_hi, 8) {
        let x = sx(t);
        line(&mut out, x, TOP + plot_h, x, TOP + plot_h + 5.0, "black");
        text(&mut out, x, TOP + plot_h + 18.0, "middle", "", &label(t));
    }
    for t in nice_ticks(y_lo, y_hi, 6) {
        let y = sy(t);
        line(&mut out, LEFT - 5.0, y, LEFT, y, "black");
        line(&mut out, LEFT, y, LEFT + plot_w, y, "#e0e0e0");
        text(&mut out, LEFT - 8.0, y + 4.0, "end", "", &label(t));
    }
    text(
        &mut out,
        LEFT + plot_w / 2.0,
        HEIGHT - 15.0,
        "middle",
        "",
        "mask start (timepoint)",
    );
    let mid = TOP + plot_h / 2.0;
    text(
        &mut out,
        18.0,
        mid,
        "middle",
        &format!(" transform=\"rotate(-90 18 {})\"", num(mid)),
        &grid.metric().to_string(),
    );
    out.push_str("</g>\n");

    out.push_str("<g id=\"curves\" fill=\"none\" stroke-width=\"1.5\">\n");
    for (i, id) in grid.row_ids().iter().enumerate() {
        let points: Vec<String> = grid
            .row(i)
            .iter()
            .zip(starts)
            .filter_map(|(v, &s)| v.map(|v| format!("{},{}", num(sx(s as f64)), num(sy(v)))))
            .collect();
        let _ = writeln!(
            out,
            "<polyline data-row=\"{}\" stroke=\"{}\" points=\"{}\"/>",
            escape(id),
            PALETTE[i % PALETTE.len()],
            points.join(" ")
        );
    }
    out.push_str("</g>\n");

    out.push_str("<g id=\"legend\">\n");
    let lx = LEFT + plot_w + 20.0;
    for (i, id) in grid.row_ids().iter().enumerate() {
        let y = TOP + 16.0 * i as f64;
        let _ = writeln!(
            out,
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"3\" fill=\"{}\"/>",
            num(lx),
            num(y + 4.0),
            PALETTE[i % PALETTE.len()]
        );
        text(&mut out, lx + 18.0, y + 9.0, "start", "", id);
    }
    out.push_str("</g>\n</svg>\n");
    out
}

/// Orthogonal dendrogram with merge heights drawn to scale. Leaves are
/// placed in [`Dendrogram::leaf_order`]; `clusters` (one id per leaf)
/// colours the leaf labels when given.
pub fn dendrogram(dend: &Dendrogram, clusters: Option<&[usize]>, title: &str) -> String {
    let n = dend.n_leaves();
    let label_space = 110.0;
    let plot_w = WIDTH - LEFT - 30.0;
    let plot_h = HEIGHT - TOP - label_space;
    let base = TOP + plot_h;

    let order = dend.leaf_order();
    let mut x_of = vec![0.0; 2 * n - 1];
    let step = plot_w / n as f64;
    for (pos, &leaf) in order.iter().enumerate() {
        x_of[leaf] = LEFT + step * (pos as f64 + 0.5);
    }
    let max_h = dend.merges().iter().map(|m| m.height).fold(0.0, f64::max);
    let top_h = if max_h > 0.0 { max_h } else { 1.0 };
    let sy = |h: f64| base - h / top_h * plot_h;
    let mut y_of = vec![base; 2 * n - 1];

    let mut out = String::new();
    header(&mut out, WIDTH, HEIGHT);
    text(
        &mut out,
        LEFT + plot_w / 2.0,
        TOP - 15.0,
        "middle",
        " font-weight=\"bold\"",
        title,
    );

    out.push_str("<g id=\"axes\">\n");
    line(&mut out, LEFT, TOP, LEFT, base, "black");
    for t in nice_ticks(0.0, top_h, 6) {
        let y = sy(t);
        line(&mut out, LEFT - 5.0, y, LEFT, y, "black");
        text(&mut out, LEFT - 8.0, y + 4.0, "end", "", &label(t));
    }
    let mid = TOP + plot_h / 2.0;
    text(
        &mut out,
        18.0,
        mid,
        "middle",
        &format!(" transform=\"rotate(-90 18 {})\"", num(mid)),
        "height",
    );
    out.push_str("</g>\n");

    out.push_str("<g id=\"links\">\n");
    for m in dend.merges() {
        let y = sy(m.height);
        let (xa, xb) = (x_of[m.a], x_of[m.b]);
        line(&mut out, xa, y_of[m.a], xa, y, "black");
        line(&mut out, xb, y_of[m.b], xb, y, "black");
        line(&mut out, xa, y, xb, y, "black");
        x_of[m.id] = (xa + xb) / 2.0;
        y_of[m.id] = y;
    }
    out.push_str("</g>\n");

    out.push_str("<g id=\"leaves\">\n");
    for &leaf in &order {
        let x = x_of[leaf];
        let y = base + 8.0;
        let fill = match clusters {
            Some(c) => format!(" fill=\"{}\"", PALETTE[c[leaf] % PALETTE.len()]),
            None => String::new(),
        };
        text(
            &mut out,
            x,
            y,
            "end",
            &format!("{fill} transform=\"rotate(-60 {} {})\"", num(x), num(y)),
            &dend.leaf_labels()[leaf],
        );
    }
    out.push_str("</g>\n</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attrib::Metric;
    use crate::cluster::Merge;

    #[test]
    fn ticks_cover_range() {
        let t = nice_ticks(0.0, 200.0, 8);
        assert_eq!(t.first(), Some(&0.0));
        assert_eq!(t.last(), Some(&200.0));
        assert!(nice_ticks(-0.13, 0.42, 6).iter().all(|v| (-0.13..=0.42).contains(v)));
    }

    #[test]
    fn escapes_markup() {
        assert_eq!(escape("a<b & \"c\""), "a&lt;b &amp; &quot;c&quot;");
    }

    #[test]
    fn one_polyline_per_row() {
        let grid = AttributionGrid::new(
            Metric::DeltaActivation,
            vec!["x".into(), "y".into(), "z".into()],
            vec![0, 1, 2],
            vec![
                Some(0.0),
                Some(1.0),
                None,
                Some(2.0),
                Some(0.5),
                Some(0.1),
                None,
                None,
                None,
            ],
            1,
            None,
        )
        .unwrap();
        let svg = line_plot(&grid, "t");
        assert_eq!(svg.matches("<polyline").count(), 3);
    }

    #[test]
    fn dendrogram_draws_three_segments_per_merge() {
        let d = Dendrogram::new(
            vec!["A".into(), "B".into(), "C".into()],
            vec![
                Merge {
                    a: 0,
                    b: 1,
                    height: 1.0,
                    id: 3,
                },
                Merge {
                    a: 2,
                    b: 3,
                    height: 4.5,
                    id: 4,
                },
            ],
        )
        .unwrap();
        let svg = dendrogram(&d, Some(&[0, 0, 1]), "d");
        let links = svg
            .split("<g id=\"links\">")
            .nth(1)
            .unwrap()
            .split("</g>")
            .next()
            .unwrap();
        assert_eq!(links.matches("<line").count(), 6);
    }
}
