//! The 2D ring world: conditions are angles, data lives on a noisy ring and
//! each condition selects a narrow angular wedge of it.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::io::CsvWriter;
use crate::point::Vec2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RingSpec {
    pub mu_r: f64,
    pub sigma_r: f64,
    pub sigma_theta: f64,
}

impl Default for RingSpec {
    fn default() -> Self {
        RingSpec {
            mu_r: 1.0,
            sigma_r: 0.1,
            sigma_theta: PI / 128.0,
        }
    }
}

impl RingSpec {
    /// Checks the shape invariants. Degenerate (zero) spreads are accepted
    /// for testing but `sigma_theta` may not be negative.
    pub fn validate(&self) -> Result<()> {
        let ok = self.mu_r.is_finite()
            && self.sigma_r >= 0.0
            && self.sigma_theta >= 0.0
            && self.mu_r > 3.0 * self.sigma_r;
        if !ok {
            return Err(LabError::config(format!("bad ring spec {self:?}")));
        }
        Ok(())
    }

    /// Radial band `[mu_r - 3 sigma_r, mu_r + 3 sigma_r]`.
    pub fn band(&self) -> (f64, f64) {
        (self.mu_r - 3.0 * self.sigma_r, self.mu_r + 3.0 * self.sigma_r)
    }
}

/// A conditioning value: an angle in `[0, 2pi)` or the null condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Angle(f64),
    Null,
}

impl Condition {
    /// Canonicalizing constructor.
    pub fn angle(c: f64) -> Self {
        Condition::Angle(wrap_angle(c))
    }

    pub fn as_angle(&self) -> Option<f64> {
        match *self {
            Condition::Angle(c) => Some(c),
            Condition::Null => None,
        }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Condition::Null)
    }
}

/// Maps any finite angle into `[0, 2pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs.
    if w >= TAU {
        0.0
    } else {
        w
    }
}

pub fn angular_distance(a: f64, b: f64) -> f64 {
    let d = wrap_angle(a - b);
    d.min(TAU - d)
}

pub fn sample_condition<R: Rng + ?Sized>(rng: &mut R) -> Condition {
    Condition::Angle(wrap_angle(rng.random_range(0.0..TAU)))
}

pub fn sample_ring<R: Rng + ?Sized>(c: f64, spec: &RingSpec, rng: &mut R) -> Vec2 {
    let n1: f64 = StandardNormal.sample(rng);
    let n2: f64 = StandardNormal.sample(rng);
    let theta = wrap_angle(c + spec.sigma_theta * n1);
    Vec2::from_polar(spec.mu_r + spec.sigma_r * n2, theta)
}

/// `(cos c, sin c, 1)` for angles and the zero vector for the null condition.
pub fn embed_condition(cond: Condition) -> [f64; 3] {
    match cond {
        Condition::Angle(c) => [c.cos(), c.sin(), 1.0],
        Condition::Null => [0.0, 0.0, 0.0],
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub point: Vec2,
    pub cond: f64,
}

pub fn make_dataset(n: usize, spec: &RingSpec, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(LabError::EmptyInput("dataset size must be >= 1"));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let c = sample_condition(&mut rng).as_angle().unwrap_or(0.0);
            Sample {
                point: sample_ring(c, spec, &mut rng),
                cond: c,
            }
        })
        .collect())
}

pub fn dataset_csv(data: &[Sample]) -> CsvWriter {
    let mut w = CsvWriter::new(&["x", "y", "c"]);
    for s in data {
        w.row([s.point.x, s.point.y, s.cond]);
    }
    w
}
