//! Minimal SVG renderings of run artifacts. CSV stays the canonical data;
//! these are for looking at.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{LabError, Result};
use crate::eval::{Heatmap, ADHERENCE_TOL};
use crate::io::{read_csv, write_atomic};
use crate::point::Vec2;
use crate::run::{read_run_record, read_trajectory_csv, TRAJ_HEADER};
use crate::toyworld::RingSpec;

const SIZE: f64 = 480.0;
const PAD: f64 = 40.0;

fn header(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    )
}

/// Maps a data box onto the padded canvas.
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (SIZE - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        SIZE - PAD - (y - self.y0) / (self.y1 - self.y0) * (SIZE - 2.0 * PAD)
    }

    fn scale(&self) -> f64 {
        (SIZE - 2.0 * PAD) / (self.x1 - self.x0)
    }
}

/// Endpoint scatter with the manifold band and the adherence wedge.
pub fn scatter_svg(points: &[Vec2], c: f64, ring: &RingSpec) -> String {
    let f = Frame {
        x0: -2.0,
        x1: 2.0,
        y0: -2.0,
        y1: 2.0,
    };
    let mut s = header(SIZE, SIZE);
    let (lo, hi) = ring.band();
    let (cx, cy) = (f.px(0.0), f.py(0.0));
    for r in [lo, hi] {
        let _ = writeln!(
            s,
            "<circle cx=\"{cx}\" cy=\"{cy}\" r=\"{:.2}\" fill=\"none\" stroke=\"black\"/>",
            r * f.scale()
        );
    }
    for a in [c - ADHERENCE_TOL, c + ADHERENCE_TOL] {
        let e = Vec2::from_polar(2.0, a);
        let _ = writeln!(
            s,
            "<line x1=\"{cx}\" y1=\"{cy}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"red\" stroke-dasharray=\"4 3\"/>",
            f.px(e.x),
            f.py(e.y)
        );
    }
    for p in points {
        if p.is_finite() {
            let _ = writeln!(
                s,
                "<circle class=\"pt\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"steelblue\" fill-opacity=\"0.6\"/>",
                f.px(p.x.clamp(-2.0, 2.0)),
                f.py(p.y.clamp(-2.0, 2.0))
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// One polyline of `(t, w)` per series.
pub fn w_lines_svg(series: &[Vec<(f64, f64)>]) -> String {
    let all = series.iter().flatten();
    let (mut t0, mut t1, mut w0, mut w1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(t, w) in all {
        t0 = t0.min(t);
        t1 = t1.max(t);
        w0 = w0.min(w);
        w1 = w1.max(w);
    }
    if !(t1 > t0) {
        t1 = t0 + 1.0;
    }
    if !(w1 > w0) {
        w1 = w0 + 1.0;
    }
    // Time runs right to left so the plot reads in sampling order.
    let f = Frame {
        x0: t1,
        x1: t0,
        y0: w0,
        y1: w1,
    };
    let mut s = header(SIZE, SIZE);
    let _ = writeln!(
        s,
        "<text x=\"{PAD}\" y=\"{:.0}\" font-size=\"11\">w in [{w0:.3}, {w1:.3}]</text>",
        PAD * 0.6
    );
    for line in series {
        let pts: Vec<String> = line
            .iter()
            .map(|&(t, w)| format!("{:.2},{:.2}", f.px(t), f.py(w)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"darkorange\" stroke-opacity=\"0.5\"/>",
            pts.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

fn ramp(u: f64) -> (u8, u8, u8) {
    let u = if u.is_finite() { u.clamp(0.0, 1.0) } else { 0.0 };
    let lerp = |a: f64, b: f64| (a + (b - a) * u).round() as u8;
    (lerp(30.0, 250.0), lerp(40.0, 220.0), lerp(120.0, 40.0))
}

/// Heatmap with a linear color ramp and min/max annotations.
pub fn heatmap_svg(h: &Heatmap) -> String {
    let (lo, hi) = h.min_max();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (nx, ny) = (h.xs.len(), h.ys.len());
    let cw = (SIZE - 2.0 * PAD) / nx.max(1) as f64;
    let ch = (SIZE - 2.0 * PAD) / ny.max(1) as f64;
    let mut s = header(SIZE, SIZE);
    for (i, row) in h.values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let (r, g, b) = ramp((v - lo) / span);
            let _ = writeln!(
                s,
                "<rect class=\"cell\" x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"rgb({r},{g},{b})\"/>",
                PAD + j as f64 * cw,
                SIZE - PAD - (i + 1) as f64 * ch,
                cw + 0.05,
                ch + 0.05
            );
        }
    }
    let _ = writeln!(
        s,
        "<text x=\"{PAD}\" y=\"{:.0}\" font-size=\"11\">{}: min {lo:.4} max {hi:.4}</text>",
        PAD * 0.6,
        h.value_label
    );
    let _ = writeln!(
        s,
        "<text x=\"{:.0}\" y=\"{:.0}\" font-size=\"11\">{} (x) / {} (y)</text>",
        PAD,
        SIZE - PAD * 0.3,
        h.x_label,
        h.y_label
    );
    s.push_str("</svg>\n");
    s
}

pub fn heatmap_csv_to_svg(path: &Path) -> Result<String> {
    let (header, rows) = read_csv(path)?;
    Ok(heatmap_svg(&Heatmap::from_csv(&header, &rows)?))
}

fn is_traj_file(name: &str) -> bool {
    name.starts_with("traj_") && name.ends_with(".csv")
}

/// Renders a run directory into `<run>/plots/`: `scatter.svg`, `w.svg` and
/// one SVG per heatmap CSV. Nothing is written unless every input parses.
pub fn export_plots(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut traj_files = Vec::new();
    let mut heat_files = Vec::new();
    let entries = fs::read_dir(run_dir).map_err(|e| LabError::io(run_dir, e))?;
    for e in entries {
        let p = e.map_err(|e| LabError::io(run_dir, e))?.path();
        let Some(name) = p.file_name().and_then(|n| n.to_str()).map(str::to_owned) else {
            continue;
        };
        if is_traj_file(&name) {
            traj_files.push(p);
        } else if name.ends_with(".csv") {
            heat_files.push(p);
        }
    }
    if traj_files.is_empty() && heat_files.is_empty() {
        return Err(LabError::EmptyInput("run directory has no trajectory or heatmap CSVs"));
    }
    // Numeric order so traj_10 follows traj_9.
    let idx = |p: &PathBuf| -> u64 {
        p.file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.trim_start_matches("traj_").parse().ok())
            .unwrap_or(u64::MAX)
    };
    traj_files.sort_by_key(idx);
    heat_files.sort();

    let mut outputs: Vec<(PathBuf, String)> = Vec::new();
    let plots = run_dir.join("plots");
    if !traj_files.is_empty() {
        let (c, ring) = match read_run_record(run_dir) {
            Ok(r) => (r.config.c, r.ring),
            Err(_) => (3.0 * std::f64::consts::PI / 4.0, RingSpec::default()),
        };
        let mut ends = Vec::new();
        let mut series = Vec::new();
        for p in &traj_files {
            let tab = read_trajectory_csv(p)?;
            ends.push(tab.endpoint());
            series.push(tab.t.iter().copied().zip(tab.w.iter().copied()).collect());
        }
        outputs.push((plots.join("scatter.svg"), scatter_svg(&ends, c, &ring)));
        outputs.push((plots.join("w.svg"), w_lines_svg(&series)));
    }
    for p in &heat_files {
        let (header, rows) = read_csv(p)?;
        if header == TRAJ_HEADER {
            continue;
        }
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("heatmap");
        let h = Heatmap::from_csv(&header, &rows).map_err(|e| LabError::Load {
            path: p.clone(),
            detail: e.to_string(),
        })?;
        outputs.push((plots.join(format!("{stem}.svg")), heatmap_svg(&h)));
    }
    for (p, svg) in &outputs {
        write_atomic(p, svg.as_bytes())?;
    }
    Ok(outputs.into_iter().map(|(p, _)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polyline_count() {
        let s = w_lines_svg(&[vec![(2.0, 0.1), (1.0, 0.2)], vec![(2.0, 0.3), (1.0, 0.0)]]);
        assert_eq!(s.matches("<polyline").count(), 2);
    }

    #[test]
    fn heatmap_cell_count() {
        let axis: Vec<f64> = (0..32).map(|i| i as f64).collect();
        let h = Heatmap {
            x_label: "x".into(),
            y_label: "y".into(),
            value_label: "v".into(),
            xs: axis.clone(),
            ys: axis,
            values: (0..32).map(|i| (0..32).map(|j| (i * j) as f64).collect()).collect(),
        };
        let s = heatmap_svg(&h);
        assert_eq!(s.matches("class=\"cell\"").count(), 1024);
        assert!(s.contains("min 0.0000 max 961.0000"));
    }

    #[test]
    fn empty_dir_errors_without_output() {
        let dir = tempfile::tempdir().unwrap();
        assert!(export_plots(dir.path()).is_err());
        assert!(!dir.path().join("plots").exists());
    }

    #[test]
    fn scatter_has_band_and_points() {
        let s = scatter_svg(&[Vec2::new(0.5, 0.5), Vec2::new(-1.0, 0.0)], 1.0, &RingSpec::default());
        assert_eq!(s.matches("class=\"pt\"").count(), 2);
        assert_eq!(s.matches("<line").count(), 2);
    }
}
