//! Discrete DDPM noise schedules and the per-step algebra shared by all
//! samplers: forward noising, clean-estimate extraction, renoising and the
//! score-distillation coefficient `gamma_t`.
//!
//! Timesteps run `1..=T`; index 0 is the clean end with `alpha_bar = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::point::Vec2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    ScaledLinear,
}

/// Serializable schedule parameters, as embedded in run configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub schedule_kind: ScheduleKind,
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    /// Toy default: 50 linear steps ending at `beta = 0.1`, which leaves
    /// `alpha_bar_T ~ 0.08` so that `z_T ~ N(0, I)` is close to the chain's
    /// terminal marginal.
    fn default() -> Self {
        ScheduleConfig {
            schedule_kind: ScheduleKind::Linear,
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.1,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule_kind, self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
    /// `betas[t - 1]` is beta_t.
    betas: Vec<f64>,
    /// `alpha_bars[t]`, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(LabError::config("schedule needs T >= 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(LabError::config(format!(
                "betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let lerp = |a: f64, b: f64, i: usize| {
            if steps == 1 {
                a
            } else {
                a + (b - a) * i as f64 / (steps - 1) as f64
            }
        };
        let betas: Vec<f64> = (0..steps)
            .map(|i| match kind {
                ScheduleKind::Linear => lerp(beta_start, beta_end, i),
                ScheduleKind::ScaledLinear => lerp(beta_start.sqrt(), beta_end.sqrt(), i).powi(2),
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule {
            kind,
            beta_start,
            beta_end,
            betas,
            alpha_bars,
        })
    }

    pub fn config(&self) -> ScheduleConfig {
        ScheduleConfig {
            schedule_kind: self.kind,
            steps: self.steps(),
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, t: usize, allow_zero: bool) -> Result<()> {
        if t > self.steps() || (!allow_zero && t == 0) {
            return Err(LabError::Index {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// beta_t for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t, false)?;
        Ok(self.betas[t - 1])
    }

    /// alpha_bar_t for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t, true)?;
        Ok(self.alpha_bars[t])
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let ab = self.alpha_bar(t)?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    /// `z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
    pub fn add_noise(&self, z0: Vec2, t: usize, eps: Vec2) -> Result<Vec2> {
        self.check(t, false)?;
        Ok(self.mix(z0, eps, t))
    }

    #[inline]
    fn mix(&self, signal: Vec2, noise: Vec2, t: usize) -> Vec2 {
        let ab = self.alpha_bars[t];
        ab.sqrt() * signal + (1.0 - ab).sqrt() * noise
    }

    /// Clean estimate `z_{0|t} = (z_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t)`.
    pub fn denoise_estimate(&self, z_t: Vec2, eps_hat: Vec2, t: usize) -> Result<Vec2> {
        self.check(t, false)?;
        let ab = self.alpha_bars[t];
        if ab <= 0.0 {
            return Err(LabError::SingularSchedule(format!("alpha_bar_{t} = {ab}")));
        }
        Ok((z_t - (1.0 - ab).sqrt() * eps_hat) * (1.0 / ab.sqrt()))
    }

    /// `sqrt(ab_prev) z0 + sqrt(1 - ab_prev) eps`; `t_prev = 0` returns `z0`.
    pub fn renoise(&self, z0_est: Vec2, eps: Vec2, t_prev: usize) -> Result<Vec2> {
        self.check(t_prev, true)?;
        if t_prev == 0 {
            return Ok(z0_est);
        }
        Ok(self.mix(z0_est, eps, t_prev))
    }

    /// `gamma_t = sqrt(ab_t) / sqrt(1 - ab_t)`, the factor mapping `delta_t`
    /// to the score-distillation gradient in clean-latent space.
    pub fn gamma(&self, t: usize) -> Result<f64> {
        let ab = self.alpha_bar(t)?;
        if ab >= 1.0 {
            return Err(LabError::SingularSchedule(format!(
                "gamma undefined at alpha_bar = {ab}"
            )));
        }
        Ok(ab.sqrt() / (1.0 - ab).sqrt())
    }
}

/// `gamma` as a function of alpha_bar alone.
pub fn gamma_from_alpha_bar(ab: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&ab) {
        return Err(LabError::SingularSchedule(format!(
            "gamma undefined at alpha_bar = {ab}"
        )));
    }
    Ok(ab.sqrt() / (1.0 - ab).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Two-step schedule with alpha_bar = (0.25, 0.64)-style values is not
    /// reachable with monotone betas, so the hand-arithmetic cases use a
    /// schedule whose single step has the needed alpha_bar.
    fn single(ab: f64) -> NoiseSchedule {
        NoiseSchedule::new(ScheduleKind::Linear, 1, 1.0 - ab, 1.0 - ab).unwrap()
    }

    #[test]
    fn two_step_linear_product() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 2, 0.1, 0.3).unwrap();
        assert!((s.alpha_bar(1).unwrap() - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2).unwrap() - 0.63).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn scaled_linear_constant() {
        let s = NoiseSchedule::new(ScheduleKind::ScaledLinear, 3, 0.04, 0.04).unwrap();
        assert!(s.betas().iter().all(|b| (b - 0.04).abs() < 1e-16));
    }

    #[test]
    fn thousand_step_linear_endpoints() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(1).unwrap(), 1e-4);
        assert!((s.beta(1000).unwrap() - 0.02).abs() < 1e-17);
        assert!((s.beta(2).unwrap() - (1e-4 + (0.02 - 1e-4) / 999.0)).abs() < 1e-17);
    }

    #[test]
    fn invalid_configs() {
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 5, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 5, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 5, 0.1, 1.0).is_err());
    }

    #[test]
    fn hand_arithmetic_cases() {
        let s = single(0.25);
        let r = 0.75f64.sqrt();
        let z = s.add_noise(Vec2::new(2.0, 0.0), 1, Vec2::new(1.0, -1.0)).unwrap();
        assert!((z.x - (1.0 + r)).abs() < 1e-12 && (z.y + r).abs() < 1e-12);
        assert!((z.x - 1.8660).abs() < 1e-4);

        let z0 = s.denoise_estimate(Vec2::new(1.0, 0.0), Vec2::new(0.5, 0.5), 1).unwrap();
        assert!((z0.x - (1.0 - r * 0.5) / 0.5).abs() < 1e-12);
        assert!((z0.y - (-r * 0.5) / 0.5).abs() < 1e-12);
        assert!((z0.x - 1.1340).abs() < 1e-4 && (z0.y + 0.8660).abs() < 1e-4);

        let s64 = single(0.64);
        let zp = s64.renoise(z0, Vec2::new(0.5, 0.5), 1).unwrap();
        assert!((zp.x - (0.8 * z0.x + 0.6 * 0.5)).abs() < 1e-12);
        assert!((zp.x - 1.2072).abs() < 1e-4 && (zp.y + 0.3928).abs() < 1e-4);
    }

    #[test]
    fn degenerate_cases() {
        let s = ScheduleConfig::default().build().unwrap();
        let z0 = Vec2::new(0.3, -0.2);
        assert_eq!(s.renoise(z0, Vec2::new(5.0, 5.0), 0).unwrap(), z0);
        let (a, _) = s.coefficients(7).unwrap();
        assert_eq!(s.add_noise(z0, 7, Vec2::ZERO).unwrap(), a * z0);
        let zt = Vec2::new(0.4, 0.1);
        let e = s.denoise_estimate(zt, Vec2::ZERO, 7).unwrap();
        assert_eq!(e, zt * (1.0 / a));
        assert!(s.add_noise(z0, 0, z0).is_err());
        assert!(s.add_noise(z0, 51, z0).is_err());
        assert!(s.renoise(z0, z0, 51).is_err());
    }

    #[test]
    fn gamma_exact_values() {
        assert_eq!(gamma_from_alpha_bar(0.5).unwrap(), 1.0);
        assert!((gamma_from_alpha_bar(0.8).unwrap() - 2.0).abs() < 1e-12);
        assert!((gamma_from_alpha_bar(0.9).unwrap() - 3.0).abs() < 1e-12);
        assert!(gamma_from_alpha_bar(1.0).is_err());
        let s = ScheduleConfig::default().build().unwrap();
        assert!(s.gamma(0).is_err());
    }

    #[test]
    fn monotone_and_unit_norm() {
        for kind in [ScheduleKind::Linear, ScheduleKind::ScaledLinear] {
            let s = NoiseSchedule::new(kind, 50, 1e-4, 0.1).unwrap();
            for t in 1..=50 {
                assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
                let (a, b) = s.coefficients(t).unwrap();
                assert!((a * a + b * b - 1.0).abs() < 1e-12);
                if t > 1 {
                    assert!(s.gamma(t).unwrap() < s.gamma(t - 1).unwrap());
                }
                assert!((s.gamma(t).unwrap() * b - a).abs() < 1e-12);
            }
            assert!(s.alpha_bar(50).unwrap() > 0.0);
        }
    }

    proptest! {
        #[test]
        fn noise_roundtrip(t in 1usize..=50, x in -3.0f64..3.0, y in -3.0f64..3.0,
                           ex in -4.0f64..4.0, ey in -4.0f64..4.0) {
            let s = ScheduleConfig::default().build().unwrap();
            let z0 = Vec2::new(x, y);
            let eps = Vec2::new(ex, ey);
            let zt = s.add_noise(z0, t, eps).unwrap();
            let back = s.denoise_estimate(zt, eps, t).unwrap();
            prop_assert!((back - z0).max_abs() <= 1e-10);
            prop_assert_eq!(s.renoise(z0, eps, t).unwrap(), zt);
        }
    }
}
