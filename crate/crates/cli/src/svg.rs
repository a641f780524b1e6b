//! Static SVG rendering of trajectories and derived architectures.

use std::fmt::Write;

use fastsearch_core::{Genotype, OperatorKind};

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * lo.abs().max(1.0) };
    (lo - pad, hi + pad)
}

/// Line plot of one or more series; the last point of each series is filled.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 60.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(s, r#"<line x1="{px:.1}" y1="{:.1}" x2="{px:.1}" y2="{:.1}" stroke="black"/>"#, top + ph, top + ph + 5.0);
        let _ = writeln!(s, r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{xv:.3}</text>"#, top + ph + 18.0);
        let _ = writeln!(s, r#"<line x1="{:.1}" y1="{py:.1}" x2="{left}" y2="{py:.1}" stroke="black"/>"#, left - 5.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#, left - 8.0, py + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 15.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if ser.points.len() > 1 {
            let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
        }
        for (k, &(x, y)) in ser.points.iter().enumerate() {
            let fill = if k + 1 == ser.points.len() { color } else { "white" };
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="{fill}" stroke="{color}"/>"#, sx(x), sy(y));
        }
        let ly = top + 14.0 + 16.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/>"#, left + 10.0, ly - 9.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, left + 26.0, escape(&ser.name));
    }
    if series.iter().all(|s| s.points.is_empty()) {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">no evaluation rows</text>"#, left + pw / 2.0, top + ph / 2.0);
    }
    s.push_str("</svg>\n");
    s
}

fn short(op: OperatorKind) -> &'static str {
    match op {
        OperatorKind::Skip => "skip",
        OperatorKind::Conv3x3 => "conv",
        OperatorKind::Conv3x3X2 => "conv×2",
        OperatorKind::ZoomedConv => "zoom",
        OperatorKind::ZoomedConvX2 => "zoom×2",
    }
}

/// Cell-by-cell diagram of each genotype: one panel per genotype, one row per rate.
pub fn architecture(panels: &[(String, &Genotype)], rates: &[u32]) -> String {
    let (cw, rh, left, panel_gap) = (78.0, 44.0, 60.0, 40.0);
    // layer annotations place cells in their lattice column; unannotated cells go in sequence
    let col = |k: usize, c: &fastsearch_core::CellRecord| c.layer.unwrap_or(k);
    let max_cells = panels
        .iter()
        .flat_map(|(_, g)| g.branches.iter().flat_map(|b| b.cells.iter().enumerate().map(|(k, c)| col(k, c) + 1)))
        .max()
        .unwrap_or(0);
    let panel_h = rh * rates.len() as f64 + panel_gap;
    let w = left + cw * (max_cells.max(1) as f64) + 20.0;
    let h = panel_h * panels.len().max(1) as f64 + 10.0;
    let row_of = |s: u32| rates.iter().position(|&r| r == s).unwrap_or(0) as f64;

    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for (p, (title, g)) in panels.iter().enumerate() {
        let top = p as f64 * panel_h + 28.0;
        let _ = writeln!(out, r#"<text x="10" y="{:.1}" font-size="14">{}</text>"#, top - 10.0, escape(title));
        for (r, rate) in rates.iter().enumerate() {
            let y = top + rh * r as f64 + rh / 2.0;
            let _ = writeln!(out, r#"<text x="10" y="{:.1}">1/{rate}</text>"#, y + 4.0);
            let _ = writeln!(out, r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, w - 10.0);
        }
        for (bi, b) in g.branches.iter().enumerate() {
            let color = PALETTE[bi % PALETTE.len()];
            let center = |k: usize, s: u32| (left + cw * k as f64 + cw / 2.0, top + rh * row_of(s) + rh / 2.0);
            let pts: Vec<String> = b
                .cells
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let (x, y) = center(col(k, c), c.s);
                    format!("{x:.1},{y:.1}")
                })
                .collect();
            if pts.len() > 1 {
                let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
            }
            let start = if bi == 0 { 0 } else { g.shared_prefix_len };
            for (k, c) in b.cells.iter().enumerate().skip(start) {
                let (x, y) = center(col(k, c), c.s);
                let _ = writeln!(
                    out,
                    r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="26" rx="4" fill="white" stroke="{color}"/>"#,
                    x - cw / 2.0 + 4.0,
                    y - 13.0,
                    cw - 8.0
                );
                let _ = writeln!(out, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{} χ{}</text>"#, y + 4.0, short(c.op), c.chi);
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use fastsearch_core::{BranchSpec, CellRecord};

    #[test]
    fn line_plot_is_well_formed_and_deterministic() {
        let s = [Series { name: "a<b".into(), points: vec![(1.0, 0.2), (2.0, 0.4)] }];
        let a = line_plot("t", "x", "y", &s);
        assert_eq!(a, line_plot("t", "x", "y", &s));
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert!(a.contains("a&lt;b"));
        assert_eq!(a.matches("<circle").count(), 2);
    }

    #[test]
    fn empty_plot_still_renders() {
        let a = line_plot("t", "x", "y", &[Series { name: "e".into(), points: vec![] }]);
        assert!(a.contains("no evaluation rows"));
    }

    #[test]
    fn shared_prefix_cells_are_drawn_once() {
        let cell = |s| CellRecord::new(OperatorKind::Conv3x3, s, 6);
        let mut g = Genotype::new(vec![
            BranchSpec { cells: vec![cell(8), cell(16)], final_rate: 16 },
            BranchSpec { cells: vec![cell(8), cell(32)], final_rate: 32 },
        ]);
        g.shared_prefix_len = 1;
        let svg = architecture(&[("g".into(), &g)], &[8, 16, 32]);
        assert_eq!(svg.matches("conv χ6").count(), 3);
    }
}
