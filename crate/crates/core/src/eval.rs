//! Sample-quality metrics and heatmap probes.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserNet, VelocityNet};
use crate::error::{LabError, Result};
use crate::guidance::{compute_delta, compute_velocity_delta, Trajectory};
use crate::io::CsvWriter;
use crate::point::Vec2;
use crate::toyworld::{angular_distance, embed_condition, wrap_angle, Condition, RingSpec};

/// Half-width of the adherence wedge.
pub const ADHERENCE_TOL: f64 = PI / 64.0;
/// Half-width of the manifold band in units of `sigma_r`.
pub const BAND_K: f64 = 3.0;
pub const COVERAGE_BINS: usize = 16;
/// Floor applied before taking `ln |delta|`.
pub const LOG_FLOOR: f64 = 1e-12;

pub fn adherence_rate(points: &[Vec2], c: f64, tol: f64) -> Result<f64> {
    if points.is_empty() {
        return Err(LabError::EmptyInput("adherence needs at least one point"));
    }
    let hits = points
        .iter()
        .filter(|p| angular_distance(p.angle(), c) <= tol)
        .count();
    Ok(hits as f64 / points.len() as f64)
}

pub fn on_manifold_rate(points: &[Vec2], spec: &RingSpec, k: f64) -> Result<f64> {
    if points.is_empty() {
        return Err(LabError::EmptyInput("manifold rate needs at least one point"));
    }
    let (lo, hi) = (spec.mu_r - k * spec.sigma_r, spec.mu_r + k * spec.sigma_r);
    let hits = points
        .iter()
        .filter(|p| (lo..=hi).contains(&p.norm()))
        .count();
    Ok(hits as f64 / points.len() as f64)
}

/// Fraction of the `bins` equal sub-wedges of `[c_i - tol, c_i + tol]`
/// reached by at least one point, where `c_i` is each point's own target.
pub fn coverage(points: &[Vec2], conds: &[f64], tol: f64, bins: usize) -> Result<f64> {
    if points.is_empty() {
        return Err(LabError::EmptyInput("coverage needs at least one point"));
    }
    if points.len() != conds.len() {
        return Err(LabError::Shape {
            expected: points.len(),
            got: conds.len(),
        });
    }
    let mut hit = vec![false; bins];
    for (p, &c) in points.iter().zip(conds) {
        let mut off = wrap_angle(p.angle() - c);
        if off > PI {
            off -= TAU;
        }
        if off.abs() <= tol {
            let b = ((off + tol) / (2.0 * tol) * bins as f64) as usize;
            hit[b.min(bins - 1)] = true;
        }
    }
    Ok(hit.iter().filter(|&&h| h).count() as f64 / bins as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub n_samples: usize,
    pub adherence_rate: f64,
    pub on_manifold_rate: f64,
    pub coverage: f64,
    pub mean_w: f64,
}

impl EvalReport {
    pub fn off_manifold_rate(&self) -> f64 {
        1.0 - self.on_manifold_rate
    }

    pub fn from_trajectories(label: &str, trajs: &[Trajectory], ring: &RingSpec) -> Result<Self> {
        let ends: Vec<Vec2> = trajs.iter().map(|t| t.final_z).collect();
        let conds: Vec<f64> = trajs.iter().map(|t| t.c).collect();
        let ws: Vec<f64> = trajs.iter().map(|t| t.mean_w()).collect();
        Self::from_parts(label, &ends, &conds, &ws, ring)
    }

    /// Builds a report from endpoints, their targets and per-trajectory mean
    /// guidance scales.
    pub fn from_parts(
        label: &str,
        ends: &[Vec2],
        conds: &[f64],
        mean_ws: &[f64],
        ring: &RingSpec,
    ) -> Result<Self> {
        if ends.is_empty() {
            return Err(LabError::EmptyInput("report needs at least one trajectory"));
        }
        let adherent = ends
            .iter()
            .zip(conds)
            .filter(|(p, &c)| angular_distance(p.angle(), c) <= ADHERENCE_TOL)
            .count();
        Ok(EvalReport {
            label: label.to_string(),
            n_samples: ends.len(),
            adherence_rate: adherent as f64 / ends.len() as f64,
            on_manifold_rate: on_manifold_rate(ends, ring, BAND_K)?,
            coverage: coverage(ends, conds, ADHERENCE_TOL, COVERAGE_BINS)?,
            mean_w: mean_ws.iter().sum::<f64>() / mean_ws.len().max(1) as f64,
        })
    }
}

/// Square grid over `[lo, hi]^2` with `n` points per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            n: 64,
            lo: -1.5,
            hi: 1.5,
        }
    }
}

impl GridSpec {
    pub fn axis(&self) -> Vec<f64> {
        if self.n == 1 {
            return vec![0.5 * (self.lo + self.hi)];
        }
        (0..self.n)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (self.n - 1) as f64)
            .collect()
    }
}

/// Values on a rectilinear grid; `values[i][j]` sits at `(xs[j], ys[i])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub x_label: String,
    pub y_label: String,
    pub value_label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl Heatmap {
    pub fn to_csv(&self) -> CsvWriter {
        let mut w = CsvWriter::new(&[&self.x_label, &self.y_label, &self.value_label]);
        for (i, &y) in self.ys.iter().enumerate() {
            for (j, &x) in self.xs.iter().enumerate() {
                w.row([x, y, self.values[i][j]]);
            }
        }
        w
    }

    pub fn from_csv(header: &[String], rows: &[Vec<String>]) -> Result<Self> {
        if header.len() != 3 {
            return Err(LabError::config("heatmap csv needs exactly three columns"));
        }
        let mut cells = Vec::with_capacity(rows.len());
        for r in rows {
            let parse = |k: usize| -> Result<f64> {
                r.get(k)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| LabError::config(format!("bad heatmap row {r:?}")))
            };
            cells.push((parse(0)?, parse(1)?, parse(2)?));
        }
        let mut xs: Vec<f64> = cells.iter().map(|c| c.0).collect();
        let mut ys: Vec<f64> = cells.iter().map(|c| c.1).collect();
        for v in [&mut xs, &mut ys] {
            v.sort_by(f64::total_cmp);
            v.dedup();
        }
        if xs.len() * ys.len() != cells.len() {
            return Err(LabError::config("heatmap csv is not a full grid"));
        }
        let mut values = vec![vec![f64::NAN; xs.len()]; ys.len()];
        for (x, y, v) in cells {
            let j = xs.binary_search_by(|a| a.total_cmp(&x)).expect("present");
            let i = ys.binary_search_by(|a| a.total_cmp(&y)).expect("present");
            values[i][j] = v;
        }
        Ok(Heatmap {
            x_label: header[0].clone(),
            y_label: header[1].clone(),
            value_label: header[2].clone(),
            xs,
            ys,
            values,
        })
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    fn cells(&self) -> impl Iterator<Item = (Vec2, f64)> + '_ {
        self.ys.iter().enumerate().flat_map(move |(i, &y)| {
            self.xs
                .iter()
                .enumerate()
                .map(move |(j, &x)| (Vec2::new(x, y), self.values[i][j]))
        })
    }

    /// Angle of the smallest value among cells inside the manifold band.
    pub fn annulus_argmin_angle(&self, ring: &RingSpec) -> Option<f64> {
        let (lo, hi) = ring.band();
        self.cells()
            .filter(|(p, _)| (lo..=hi).contains(&p.norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(p, _)| wrap_angle(p.angle()))
    }

    /// Mean of `exp(value)` (the raw norm for log heatmaps) over cells with
    /// radius in `[r_lo, r_hi]`.
    pub fn mean_exp_in(&self, r_lo: f64, r_hi: f64) -> f64 {
        let (s, n) = self
            .cells()
            .filter(|(p, _)| (r_lo..=r_hi).contains(&p.norm()))
            .fold((0.0, 0usize), |(s, n), (_, v)| (s + v.exp(), n + 1));
        s / n.max(1) as f64
    }
}

fn log_norm(d: Vec2) -> f64 {
    d.norm().max(LOG_FLOOR).ln()
}

fn spatial_heatmap<F>(grid: &GridSpec, f: F) -> Result<Heatmap>
where
    F: Fn(Vec2) -> Result<Vec2>,
{
    if grid.n == 0 {
        return Err(LabError::EmptyInput("heatmap grid"));
    }
    let axis = grid.axis();
    let values = axis
        .iter()
        .map(|&y| axis.iter().map(|&x| f(Vec2::new(x, y)).map(log_norm)).collect())
        .collect::<Result<_>>()?;
    Ok(Heatmap {
        x_label: "x".into(),
        y_label: "y".into(),
        value_label: "log_delta_norm".into(),
        xs: axis.clone(),
        ys: axis,
        values,
    })
}

/// `ln |delta_t|` of the noise predictor over a spatial grid.
pub fn delta_norm_heatmap(dnet: &DenoiserNet, t: usize, c: f64, grid: &GridSpec) -> Result<Heatmap> {
    let cemb = embed_condition(Condition::angle(c));
    spatial_heatmap(grid, |z| Ok(compute_delta(dnet, z, t, &cemb)?.delta))
}

/// `ln |v_c - v_null|` of the velocity field at flow time `t`.
pub fn flow_delta_heatmap(vnet: &VelocityNet, t: f64, c: f64, grid: &GridSpec) -> Result<Heatmap> {
    let cemb = embed_condition(Condition::angle(c));
    spatial_heatmap(grid, |x| Ok(compute_velocity_delta(vnet, x, t, &cemb)?.delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::CondNet;
    use crate::nn::{Mlp, OutputSquash};
    use crate::schedule::ScheduleConfig;
    use proptest::prelude::*;

    #[test]
    fn adherence_examples() {
        let c = 3.0 * PI / 4.0;
        let at_c = vec![Vec2::from_polar(1.0, c); 5];
        assert_eq!(adherence_rate(&at_c, c, ADHERENCE_TOL).unwrap(), 1.0);
        assert_eq!(adherence_rate(&[Vec2::from_polar(1.0, c + PI)], c, ADHERENCE_TOL).unwrap(), 0.0);
        let pts: Vec<Vec2> = [0.0, PI / 128.0, PI / 32.0, PI]
            .iter()
            .map(|d| Vec2::from_polar(1.0, c + d))
            .collect();
        assert_eq!(adherence_rate(&pts, c, PI / 64.0).unwrap(), 0.5);
        assert!(adherence_rate(&[], c, ADHERENCE_TOL).is_err());
    }

    #[test]
    fn manifold_examples() {
        let s = RingSpec::default();
        assert_eq!(on_manifold_rate(&[Vec2::new(1.0, 0.0)], &s, 3.0).unwrap(), 1.0);
        assert_eq!(on_manifold_rate(&[Vec2::new(2.0, 0.0)], &s, 3.0).unwrap(), 0.0);
        let mut pts = vec![Vec2::new(0.0, 1.05); 7];
        pts.extend([Vec2::ZERO; 3]);
        assert!((on_manifold_rate(&pts, &s, 3.0).unwrap() - 0.7).abs() < 1e-15);
        assert!(on_manifold_rate(&[], &s, 3.0).is_err());
    }

    #[test]
    fn coverage_counts_bins() {
        let c = 1.0;
        let tol = ADHERENCE_TOL;
        let pts: Vec<Vec2> = (0..16)
            .map(|b| Vec2::from_polar(1.0, c - tol + (b as f64 + 0.5) * 2.0 * tol / 16.0))
            .collect();
        let conds = vec![c; 16];
        assert_eq!(coverage(&pts, &conds, tol, 16).unwrap(), 1.0);
        assert_eq!(coverage(&pts[..4], &conds[..4], tol, 16).unwrap(), 0.25);
        assert_eq!(coverage(&[Vec2::from_polar(1.0, c + 1.0)], &[c], tol, 16).unwrap(), 0.0);
    }

    #[test]
    fn zero_net_heatmap_is_floor() {
        let net = Mlp::zeros(&[13, 4, 2], OutputSquash::None).unwrap();
        let d = DenoiserNet::new(
            CondNet::new(net, 8).unwrap(),
            ScheduleConfig::default().build().unwrap(),
        );
        let h = delta_norm_heatmap(&d, 1, 1.0, &GridSpec { n: 3, lo: -1.5, hi: 1.5 }).unwrap();
        assert_eq!((h.values.len(), h.values[0].len()), (3, 3));
        assert!(h.values.iter().flatten().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn heatmap_csv_roundtrip() {
        let h = Heatmap {
            x_label: "delta_norm".into(),
            y_label: "t".into(),
            value_label: "w".into(),
            xs: vec![0.0, 0.5, 1.0],
            ys: vec![1.0, 2.0],
            values: vec![vec![0.1, 0.2, 0.3], vec![1.0 / 3.0, -2.0, 7.5]],
        };
        let text = h.to_csv().as_str().to_string();
        let mut lines = text.lines();
        let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
        let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
        assert_eq!(Heatmap::from_csv(&header, &rows).unwrap(), h);
        assert_eq!(h.min_max(), (-2.0, 7.5));
    }

    proptest! {
        #[test]
        fn rates_in_unit_interval(pts in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..50), c in 0.0f64..TAU) {
            let pts: Vec<Vec2> = pts.into_iter().map(|(x, y)| Vec2::new(x, y)).collect();
            let conds = vec![c; pts.len()];
            for r in [
                adherence_rate(&pts, c, ADHERENCE_TOL).unwrap(),
                on_manifold_rate(&pts, &RingSpec::default(), 3.0).unwrap(),
                coverage(&pts, &conds, ADHERENCE_TOL, 16).unwrap(),
            ] {
                prop_assert!((0.0..=1.0).contains(&r));
            }
        }
    }
}
