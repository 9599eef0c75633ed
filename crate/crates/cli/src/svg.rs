//! Minimal deterministic SVG line charts.

use std::fmt::Write;

const PANEL_W: f64 = 480.0;
const PANEL_H: f64 = 360.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 32.0;
const MARGIN_B: f64 = 48.0;
const LEGEND_W: f64 = 200.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    /// Drawn in the given order.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Plot `log10(y)`; non-positive values are dropped.
    pub log_y: bool,
    pub series: Vec<Series>,
}

#[derive(Debug, Clone, Copy)]
struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Range {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo > hi {
            return Range { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1e-12 {
            let pad = if lo.abs() > 1e-12 { 0.1 * lo.abs() } else { 1.0 };
            return Range { lo: lo - pad, hi: hi + pad };
        }
        let pad = 0.05 * (hi - lo);
        Range { lo: lo - pad, hi: hi + pad }
    }

    /// About five round tick positions inside the range.
    fn ticks(&self) -> Vec<f64> {
        let raw = (self.hi - self.lo) / 5.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 5.0, 10.0]
            .iter()
            .map(|m| m * mag)
            .find(|s| *s >= raw)
            .unwrap_or(10.0 * mag);
        let first = (self.lo / step).ceil() as i64;
        let last = (self.hi / step).floor() as i64;
        (first..=last).map(|k| k as f64 * step).collect()
    }
}

fn fmt_num(v: f64) -> String {
    let v = if v.abs() < 1e-12 { 0.0 } else { v };
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-3) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Panel {
    fn transformed(&self) -> Vec<Vec<(f64, f64)>> {
        self.series
            .iter()
            .map(|s| {
                s.points
                    .iter()
                    .filter(|(x, y)| x.is_finite() && y.is_finite() && (!self.log_y || *y > 0.0))
                    .map(|&(x, y)| (x, if self.log_y { y.log10() } else { y }))
                    .collect()
            })
            .collect()
    }

    fn render_into(&self, out: &mut String, origin_x: f64) {
        let data = self.transformed();
        let xr = Range::of(data.iter().flatten().map(|p| p.0));
        let yr = Range::of(data.iter().flatten().map(|p| p.1));
        let (x0, x1) = (origin_x + MARGIN_L, origin_x + PANEL_W - MARGIN_R);
        let (y0, y1) = (PANEL_H - MARGIN_B, MARGIN_T);
        let sx = |x: f64| x0 + (x - xr.lo) / (xr.hi - xr.lo) * (x1 - x0);
        let sy = |y: f64| y0 + (y - yr.lo) / (yr.hi - yr.lo) * (y1 - y0);

        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            (x0 + x1) / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            out,
            r##"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#333"/>"##,
            x1 - x0,
            y0 - y1
        );
        for t in xr.ticks() {
            let x = sx(t);
            let _ = writeln!(
                out,
                r##"<line x1="{x:.2}" y1="{y0:.2}" x2="{x:.2}" y2="{:.2}" stroke="#333"/><text x="{x:.2}" y="{:.2}" text-anchor="middle" font-size="10">{}</text>"##,
                y0 + 4.0,
                y0 + 16.0,
                fmt_num(t)
            );
        }
        for t in yr.ticks() {
            let y = sy(t);
            let label = if self.log_y { format!("1e{}", fmt_num(t)) } else { fmt_num(t) };
            let _ = writeln!(
                out,
                r##"<line x1="{:.2}" y1="{y:.2}" x2="{x0:.2}" y2="{y:.2}" stroke="#333"/><text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{}</text>"##,
                x0 - 4.0,
                x0 - 6.0,
                y + 3.0,
                label
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12">{}</text>"#,
            (x0 + x1) / 2.0,
            PANEL_H - 10.0,
            escape(&self.x_label)
        );
        let y_label = if self.log_y { format!("{} (log10)", self.y_label) } else { self.y_label.clone() };
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="12" transform="rotate(-90 {:.2} {:.2})">{}</text>"#,
            origin_x + 16.0,
            (y0 + y1) / 2.0,
            origin_x + 16.0,
            (y0 + y1) / 2.0,
            escape(&y_label)
        );

        for (k, pts) in data.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            if pts.len() > 1 {
                let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                let _ = writeln!(
                    out,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                    path.join(" ")
                );
            }
            for &(x, y) in pts {
                let _ = writeln!(
                    out,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                    sx(x),
                    sy(y)
                );
            }
        }
    }
}

/// Renders panels side by side with a shared legend on the right. The legend
/// lists the series of the first panel.
pub fn render(panels: &[Panel]) -> String {
    let width = PANEL_W * panels.len().max(1) as f64 + LEGEND_W;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{PANEL_H:.0}" viewBox="0 0 {width:.0} {PANEL_H:.0}" font-family="sans-serif">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, p) in panels.iter().enumerate() {
        p.render_into(&mut out, PANEL_W * i as f64);
    }
    if let Some(first) = panels.first() {
        let lx = PANEL_W * panels.len() as f64 + 8.0;
        for (k, s) in first.series.iter().enumerate() {
            let y = MARGIN_T + 8.0 + 18.0 * k as f64;
            let color = PALETTE[k % PALETTE.len()];
            let _ = writeln!(
                out,
                r#"<circle cx="{lx:.2}" cy="{y:.2}" r="4" fill="{color}"/><text x="{:.2}" y="{:.2}" font-size="11">{}</text>"#,
                lx + 10.0,
                y + 4.0,
                escape(&s.label)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
