//! Tables and static SVG plots. Numbers are printed with fixed precision so
//! that reruns produce identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
    /// Draw markers only.
    pub scatter: bool,
}

impl Series {
    pub fn line(label: &str, points: Vec<(f64, f64)>) -> Series {
        Series { label: label.to_string(), points, dashed: false, scatter: false }
    }
}

#[derive(Clone, Debug)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD_L: f64 = 70.0;
const PAD_R: f64 = 150.0;
const PAD_T: f64 = 40.0;
const PAD_B: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"];

fn header(out: &mut String, w: f64, h: f64) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w:.0}" height="{h:.0}" fill="white"/>"#);
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Axis transform; log axes work in `log10`.
struct Axis {
    log: bool,
    lo: f64,
    hi: f64,
    from: f64,
    to: f64,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>, log: bool, from: f64, to: f64) -> Axis {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            let t = if log { v.log10() } else { v };
            if t.is_finite() {
                lo = lo.min(t);
                hi = hi.max(t);
            }
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if log {
            lo = lo.floor();
            hi = hi.ceil().max(lo + 1.0);
        } else if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        Axis { log, lo, hi, from, to }
    }

    fn map(&self, v: f64) -> Option<f64> {
        let t = if self.log { v.log10() } else { v };
        t.is_finite().then(|| self.from + (t - self.lo) / (self.hi - self.lo) * (self.to - self.from))
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let step = ((self.hi - self.lo) / 8.0).ceil().max(1.0) as i64;
            (self.lo as i64..=self.hi as i64)
                .step_by(step as usize)
                .map(|e| (10f64.powi(e as i32), format!("1e{e}")))
                .collect()
        } else {
            (0..=5)
                .map(|i| {
                    let v = self.lo + (self.hi - self.lo) * i as f64 / 5.0;
                    (v, format!("{v:.3}"))
                })
                .collect()
        }
    }
}

pub fn render_plot(p: &Plot) -> String {
    let mut out = String::new();
    header(&mut out, W, H);
    let usable = |s: &Series| -> Vec<(f64, f64)> {
        s.points
            .iter()
            .cloned()
            .filter(|&(x, y)| x.is_finite() && y.is_finite() && (!p.log_x || x > 0.0) && (!p.log_y || y > 0.0))
            .collect()
    };
    let pts: Vec<Vec<(f64, f64)>> = p.series.iter().map(usable).collect();
    let ax = Axis::new(pts.iter().flatten().map(|q| q.0), p.log_x, PAD_L, W - PAD_R);
    let ay = Axis::new(pts.iter().flatten().map(|q| q.1), p.log_y, H - PAD_B, PAD_T);
    let _ = writeln!(out, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#, (PAD_L + W - PAD_R) / 2.0, escape(&p.title));
    let _ = writeln!(
        out,
        r#"<rect x="{PAD_L:.1}" y="{PAD_T:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
        W - PAD_L - PAD_R,
        H - PAD_T - PAD_B
    );
    for (v, label) in ax.ticks() {
        if let Some(x) = ax.map(v) {
            let _ = writeln!(out, r#"<line x1="{x:.2}" y1="{:.1}" x2="{x:.2}" y2="{:.1}" stroke="black"/>"#, H - PAD_B, H - PAD_B + 5.0);
            let _ = writeln!(out, r#"<text x="{x:.2}" y="{:.1}" text-anchor="middle">{label}</text>"#, H - PAD_B + 18.0);
        }
    }
    for (v, label) in ay.ticks() {
        if let Some(y) = ay.map(v) {
            let _ = writeln!(out, r#"<line x1="{:.1}" y1="{y:.2}" x2="{PAD_L:.1}" y2="{y:.2}" stroke="black"/>"#, PAD_L - 5.0);
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.2}" text-anchor="end">{label}</text>"#, PAD_L - 8.0, y + 4.0);
        }
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (PAD_L + W - PAD_R) / 2.0, H - 10.0, escape(&p.x_label));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(&p.y_label)
    );
    for (i, (s, sp)) in p.series.iter().zip(&pts).enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<(f64, f64)> = sp.iter().filter_map(|&(x, y)| Some((ax.map(x)?, ay.map(y)?))).collect();
        if s.scatter {
            for (x, y) in &coords {
                let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#);
            }
        } else if !coords.is_empty() {
            let path: Vec<String> = coords.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            let dash = if s.dashed { r#" stroke-dasharray="6 4""# } else { "" };
            let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#, path.join(" "));
        }
        let ly = PAD_T + 10.0 + 18.0 * i as f64;
        let lx = W - PAD_R + 10.0;
        let _ = writeln!(out, r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&s.label));
    }
    out.push_str("</svg>\n");
    out
}

/// Polygons drawn over a domain outline, in domain coordinates.
#[derive(Clone, Debug, Default)]
pub struct Overlay {
    pub title: String,
    pub outline: Vec<[f64; 2]>,
    /// `(polygon, stroke color, dashed)`
    pub polygons: Vec<(Vec<[f64; 2]>, String, bool)>,
    pub points: Vec<[f64; 2]>,
}

pub fn render_overlay(o: &Overlay) -> String {
    let size = 520.0;
    let pad = 20.0;
    let mut out = String::new();
    header(&mut out, size, size + 20.0);
    let all = o.outline.iter().chain(o.polygons.iter().flat_map(|p| p.0.iter())).chain(o.points.iter());
    let r = all.fold(1e-12f64, |m, p| m.max(p[0].abs()).max(p[1].abs())) * 1.02;
    let sc = (size - 2.0 * pad) / (2.0 * r);
    let map = |p: &[f64; 2]| (pad + (p[0] + r) * sc, 20.0 + pad + (r - p[1]) * sc);
    let poly = |v: &[[f64; 2]]| v.iter().map(|p| map(p)).map(|(x, y)| format!("{x:.2},{y:.2}")).collect::<Vec<_>>().join(" ");
    let _ = writeln!(out, r#"<text x="{:.1}" y="18" text-anchor="middle" font-size="14">{}</text>"#, size / 2.0, escape(&o.title));
    let _ = writeln!(out, r#"<polygon points="{}" fill="none" stroke="black" stroke-width="1.5"/>"#, poly(&o.outline));
    for p in &o.points {
        let (x, y) = map(p);
        let _ = writeln!(out, r##"<circle cx="{x:.2}" cy="{y:.2}" r="0.8" fill="#999999"/>"##);
    }
    for (v, color, dashed) in &o.polygons {
        let dash = if *dashed { r#" stroke-dasharray="3 2""# } else { "" };
        let _ = writeln!(out, r#"<polygon points="{}" fill="none" stroke="{color}" stroke-width="1"{dash}/>"#, poly(v));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_plot_skips_nonpositive_points() {
        let p = Plot {
            title: "t".into(),
            x_label: "K".into(),
            y_label: "|F_K|".into(),
            log_x: true,
            log_y: true,
            series: vec![Series::line("a", vec![(1.0, 1.0), (10.0, 0.0), (100.0, 0.01)])],
        };
        let s = render_plot(&p);
        assert!(s.starts_with("<svg"));
        assert_eq!(s.matches("<polyline").count(), 1);
        let line = s.lines().find(|l| l.starts_with("<polyline")).unwrap();
        assert_eq!(line.split_whitespace().filter(|t| t.contains(',')).count(), 2);
    }

    #[test]
    fn rendering_is_deterministic() {
        let o = Overlay {
            title: "x < y".into(),
            outline: vec![[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]],
            polygons: vec![(vec![[0.0, 0.0], [0.5, 0.0], [0.0, 0.5]], "red".into(), true)],
            points: vec![[0.1, 0.1]],
        };
        assert_eq!(render_overlay(&o), render_overlay(&o));
        assert!(render_overlay(&o).contains("x &lt; y"));
    }
}
