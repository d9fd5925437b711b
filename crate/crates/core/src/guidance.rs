//! Guided sampling on top of a frozen backbone.
//!
//! Every step evaluates the conditional and unconditional predictions, forms
//! `eps_hat = eps_null + w (eps_c - eps_null)`, extracts the clean estimate and
//! renoises. The three modes differ in where `w` comes from and in the
//! renoise source: `eps_hat` for CFG, `eps_null` for CFG++ and annealing.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::annealer::SchedulerNet;
use crate::denoiser::{CondEmbed, DenoiserNet, VelocityNet};
use crate::error::{LabError, Result};
use crate::point::Vec2;
use crate::toyworld::{embed_condition, Condition};

/// Guidance mode and its scalar parameter. Annealing needs a scheduler
/// supplied alongside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum GuidanceMode {
    Cfg { w: f64 },
    Cfgpp { w: f64 },
    Anneal { lambda: f64 },
}

impl GuidanceMode {
    pub fn label(&self) -> String {
        match *self {
            GuidanceMode::Cfg { w } => format!("cfg(w={w})"),
            GuidanceMode::Cfgpp { w } => format!("cfgpp(w={w})"),
            GuidanceMode::Anneal { lambda } => format!("anneal(lambda={lambda})"),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GuidanceMode::Cfg { .. } => "cfg",
            GuidanceMode::Cfgpp { .. } => "cfgpp",
            GuidanceMode::Anneal { .. } => "anneal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SamplerKind {
    #[default]
    #[serde(rename = "ddim")]
    Ddim,
    #[serde(rename = "euler")]
    Euler,
    #[serde(rename = "euler-a")]
    EulerAncestral,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::Ddim => "ddim",
            SamplerKind::Euler => "euler",
            SamplerKind::EulerAncestral => "euler-a",
        })
    }
}

impl FromStr for SamplerKind {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(SamplerKind::Ddim),
            "euler" => Ok(SamplerKind::Euler),
            "euler-a" | "euler_a" | "euler-ancestral" => Ok(SamplerKind::EulerAncestral),
            _ => Err(LabError::config(format!("unknown sampler \"{s}\""))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaEval {
    pub delta: Vec2,
    pub eps_c: Vec2,
    pub eps_null: Vec2,
}

pub fn compute_delta(dnet: &DenoiserNet, z: Vec2, t: usize, cond: &CondEmbed) -> Result<DeltaEval> {
    let eps_c = dnet.predict_eps_embed(z, t, cond)?;
    let eps_null = dnet.predict_eps(z, t, Condition::Null)?;
    Ok(DeltaEval {
        delta: eps_c - eps_null,
        eps_c,
        eps_null,
    })
}

pub fn compute_velocity_delta(
    vnet: &VelocityNet,
    x: Vec2,
    t: f64,
    cond: &CondEmbed,
) -> Result<DeltaEval> {
    let eps_c = vnet.predict_velocity_embed(x, t, cond)?;
    let eps_null = vnet.predict_velocity(x, t, Condition::Null)?;
    Ok(DeltaEval {
        delta: eps_c - eps_null,
        eps_c,
        eps_null,
    })
}

pub fn cfg_combine(eps_null: Vec2, eps_c: Vec2, w: f64) -> Vec2 {
    eps_null + w * (eps_c - eps_null)
}

/// Training-time Gaussian corruption of the condition embedding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbConfig {
    pub enabled: bool,
    pub s: f64,
    pub psi: f64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            enabled: true,
            s: 0.025,
            psi: 1.0,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s >= 0.0) || !(0.0..=1.0).contains(&self.psi) {
            return Err(LabError::config(format!(
                "perturbation needs s >= 0 and psi in [0, 1], got s={} psi={}",
                self.s, self.psi
            )));
        }
        Ok(())
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Corrupts `c` at diffusion step `t` of `steps`, with signal fraction
/// `g = 1 - t/T` (heavy corruption early in sampling, none at `t = 0`).
pub fn perturb_condition<R: Rng + ?Sized>(
    c: &CondEmbed,
    t: usize,
    steps: usize,
    cfg: &PerturbConfig,
    rng: &mut R,
) -> Result<CondEmbed> {
    if t > steps {
        return Err(LabError::Index { t, max: steps });
    }
    perturb_condition_g(c, 1.0 - t as f64 / steps as f64, cfg, rng)
}

/// [`perturb_condition`] parameterized directly by the signal fraction
/// `g in [0, 1]`.
pub fn perturb_condition_g<R: Rng + ?Sized>(
    c: &CondEmbed,
    g: f64,
    cfg: &PerturbConfig,
    rng: &mut R,
) -> Result<CondEmbed> {
    if !(0.0..=1.0).contains(&g) {
        return Err(LabError::Range {
            what: "perturbation signal fraction must lie in [0, 1]",
            value: g,
        });
    }
    if !cfg.enabled {
        return Ok(*c);
    }
    // Without noise (and at g = 1) the rescale maps c back onto itself, so
    // return it directly and keep the identity bitwise. With s = 0 this also
    // covers g = 0, where the scaled copy degenerates to the zero vector.
    if g == 1.0 || (cfg.s == 0.0 && cfg.psi == 1.0) {
        return Ok(*c);
    }
    let (a, b) = (g.sqrt(), cfg.s * (1.0 - g).sqrt());
    let mut hat = [0.0; 3];
    for (h, &ci) in hat.iter_mut().zip(c) {
        let n: f64 = StandardNormal.sample(rng);
        *h = a * ci + b * n;
    }
    let (mh, sh) = mean_std(&hat);
    if sh < 1e-12 {
        return Ok(hat);
    }
    let (mc, sc) = mean_std(c);
    let mut out = [0.0; 3];
    for (o, &h) in out.iter_mut().zip(&hat) {
        let rescaled = (h - mh) / sh * sc + mc;
        *o = cfg.psi * rescaled + (1.0 - cfg.psi) * h;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Diffusion step index (as a float) or flow time at the step start.
    pub t: f64,
    pub z: Vec2,
    pub w: f64,
    pub delta_norm: f64,
    pub eps_c: Vec2,
    pub eps_null: Vec2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub final_z: Vec2,
    pub mode: GuidanceMode,
    pub sampler: String,
    pub c: f64,
    pub seed: u64,
}

impl Trajectory {
    pub fn mean_w(&self) -> f64 {
        self.records.iter().map(|r| r.w).sum::<f64>() / self.records.len().max(1) as f64
    }

    /// Path `z_T, .., z_1, z_0`.
    pub fn states(&self) -> Vec<Vec2> {
        let mut v: Vec<Vec2> = self.records.iter().map(|r| r.z).collect();
        v.push(self.final_z);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SampleOptions {
    pub sampler: SamplerKind,
    /// Rejects CFG++ scales outside `[0, 1]`.
    pub strict_cfgpp: bool,
}

impl SampleOptions {
    pub fn with_sampler(sampler: SamplerKind) -> Self {
        SampleOptions {
            sampler,
            ..Default::default()
        }
    }
}

fn normal2<R: Rng + ?Sized>(rng: &mut R) -> Vec2 {
    Vec2::new(StandardNormal.sample(rng), StandardNormal.sample(rng))
}

fn resolve_mode<'a>(
    mode: &GuidanceMode,
    scheduler: Option<&'a SchedulerNet>,
    strict: bool,
) -> Result<Option<&'a SchedulerNet>> {
    match *mode {
        GuidanceMode::Anneal { lambda } => {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(LabError::Range {
                    what: "lambda must lie in [0, 1]",
                    value: lambda,
                });
            }
            scheduler
                .map(Some)
                .ok_or_else(|| LabError::config("annealing mode requires a scheduler"))
        }
        GuidanceMode::Cfgpp { w } if strict && !(0.0..=1.0).contains(&w) => Err(LabError::Range {
            what: "strict CFG++ restricts w to [0, 1]",
            value: w,
        }),
        GuidanceMode::Cfg { w } | GuidanceMode::Cfgpp { w } if !w.is_finite() => {
            Err(LabError::NonFinite(format!("guidance scale {w}")))
        }
        _ => Ok(None),
    }
}

fn check_state(z: Vec2, t: f64) -> Result<()> {
    if !z.is_finite() {
        return Err(LabError::Divergence(format!("state became non-finite at t={t}")));
    }
    Ok(())
}

/// Runs the reverse chain `t = T..1` from `z_T ~ N(0, I)` drawn from `seed`.
pub fn sample_trajectory(
    dnet: &DenoiserNet,
    mode: &GuidanceMode,
    scheduler: Option<&SchedulerNet>,
    opts: &SampleOptions,
    cond: Condition,
    seed: u64,
) -> Result<Trajectory> {
    let c = cond
        .as_angle()
        .ok_or_else(|| LabError::config("guided sampling needs a non-null condition"))?;
    let snet = resolve_mode(mode, scheduler, opts.strict_cfgpp)?;
    let sched = dnet.schedule();
    let steps = sched.steps();
    if let Some(s) = snet {
        if s.steps() != steps {
            return Err(LabError::config(format!(
                "scheduler was trained for T={} but the backbone uses T={steps}",
                s.steps()
            )));
        }
    }
    let cemb = embed_condition(cond);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = normal2(&mut rng);
    let mut records = Vec::with_capacity(steps);
    for t in (1..=steps).rev() {
        let d = compute_delta(dnet, z, t, &cemb)?;
        let dn = d.delta.norm();
        let (w, renoise_null) = match (*mode, snet) {
            (GuidanceMode::Cfg { w }, _) => (w, false),
            (GuidanceMode::Cfgpp { w }, _) => (w, true),
            (GuidanceMode::Anneal { lambda }, Some(s)) => {
                (s.forward(t, dn, lambda)?, s.ablation().use_cfgpp_renoise)
            }
            (GuidanceMode::Anneal { .. }, None) => unreachable!("resolved above"),
        };
        let eps_hat = cfg_combine(d.eps_null, d.eps_c, w);
        let z0 = sched.denoise_estimate(z, eps_hat, t)?;
        let r = if renoise_null { d.eps_null } else { eps_hat };
        records.push(StepRecord {
            t: t as f64,
            z,
            w,
            delta_norm: dn,
            eps_c: d.eps_c,
            eps_null: d.eps_null,
        });
        z = match opts.sampler {
            SamplerKind::Ddim | SamplerKind::Euler => sched.renoise(z0, r, t - 1)?,
            SamplerKind::EulerAncestral => {
                let ab = sched.alpha_bar(t)?;
                let ab_prev = sched.alpha_bar(t - 1)?;
                let var_up = (1.0 - ab_prev) / (1.0 - ab) * sched.beta(t)?;
                let keep = (1.0 - ab_prev - var_up).max(0.0).sqrt();
                let n = normal2(&mut rng);
                ab_prev.sqrt() * z0 + keep * r + var_up.sqrt() * n
            }
        };
        check_state(z, t as f64)?;
    }
    Ok(Trajectory {
        records,
        final_z: z,
        mode: *mode,
        sampler: opts.sampler.to_string(),
        c,
        seed,
    })
}

/// Euler integration of the guided velocity field from `x(0) ~ N(0, I)` to
/// `t = 1` in `steps` equal increments. Annealing queries the scheduler with
/// time feature `1 - t`, so the feature runs from 1 (pure noise) to 0 as in
/// the diffusion chain.
pub fn flow_guided_sample(
    vnet: &VelocityNet,
    mode: &GuidanceMode,
    scheduler: Option<&SchedulerNet>,
    cond: Condition,
    steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = normal2(&mut rng);
    flow_guided_from(vnet, mode, scheduler, cond, steps, x0, seed)
}

/// [`flow_guided_sample`] from an explicit starting point.
pub fn flow_guided_from(
    vnet: &VelocityNet,
    mode: &GuidanceMode,
    scheduler: Option<&SchedulerNet>,
    cond: Condition,
    steps: usize,
    x_start: Vec2,
    seed: u64,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(LabError::config("flow sampling needs steps >= 1"));
    }
    let c = cond
        .as_angle()
        .ok_or_else(|| LabError::config("guided sampling needs a non-null condition"))?;
    let snet = resolve_mode(mode, scheduler, false)?;
    let cemb = embed_condition(cond);
    let dt = 1.0 / steps as f64;
    let mut x = x_start;
    let mut records = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = k as f64 * dt;
        let d = compute_velocity_delta(vnet, x, t, &cemb)?;
        let dn = d.delta.norm();
        let w = match (*mode, snet) {
            (GuidanceMode::Cfg { w } | GuidanceMode::Cfgpp { w }, _) => w,
            (GuidanceMode::Anneal { lambda }, Some(s)) => s.forward_frac(1.0 - t, dn, lambda)?,
            (GuidanceMode::Anneal { .. }, None) => unreachable!("resolved above"),
        };
        records.push(StepRecord {
            t,
            z: x,
            w,
            delta_norm: dn,
            eps_c: d.eps_c,
            eps_null: d.eps_null,
        });
        x += dt * cfg_combine(d.eps_null, d.eps_c, w);
        check_state(x, t)?;
    }
    Ok(Trajectory {
        records,
        final_z: x,
        mode: *mode,
        sampler: "flow-euler".into(),
        c,
        seed,
    })
}

/// Samples trajectories for `seeds`, fanning out across threads when the
/// `parallel` feature is on. Output order follows `seeds`.
pub fn sample_many<F>(seeds: &[u64], f: F) -> Result<Vec<Trajectory>>
where
    F: Fn(u64) -> Result<Trajectory> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        seeds.par_iter().map(|&s| f(s)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        seeds.iter().map(|&s| f(s)).collect()
    }
}
