//! The learned guidance scale `w(t, |delta_t|, lambda)` and its training.
//!
//! One training sample takes a single guided denoise/renoise step from a
//! noised data point and scores it with
//! `L = lambda |delta_{t-1}|^2 + (1 - lambda) |eps - eps_hat|^2`.
//! Everything upstream of `w` (the state, `delta_t`, the scheduler inputs) is
//! independent of the scheduler parameters, so the gradient is
//! `dL/dw * dw/dtheta`, where `dL/dw` is formed analytically from the frozen
//! backbone's input Jacobian at the renoised state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{meta_field, CondEmbed, DenoiserNet, VelocityNet};
use crate::error::{LabError, Result};
use crate::guidance::{
    cfg_combine, compute_delta, compute_velocity_delta, perturb_condition, perturb_condition_g,
    PerturbConfig,
};
use crate::nn::{
    sinusoidal_embed_into, AdamW, AdamWConfig, Checkpoint, CheckpointKind, GradTape, Grads, Mlp,
    OutputSquash,
};
use crate::point::Vec2;
use crate::toyworld::{embed_condition, sample_condition, sample_ring, Condition, RingSpec};

pub const FEATURE_EMBED_DIM: usize = 4;
pub const SCHEDULER_INPUT_DIM: usize = 3 * FEATURE_EMBED_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub use_t: bool,
    pub use_delta_norm: bool,
    pub use_cfgpp_renoise: bool,
    pub use_perturbation: bool,
    pub constrain_w: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_t: true,
            use_delta_norm: true,
            use_cfgpp_renoise: true,
            use_perturbation: true,
            constrain_w: false,
        }
    }
}

/// Network timestep used for the post-step delta evaluation at `z_{t-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaEvalTimestep {
    /// `t - 1`, clamped to 1.
    #[default]
    Prev,
    /// `t`, the literal subscript.
    Same,
}

/// Regression target of the flow fidelity term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowEpsTarget {
    /// Guided velocity `v_hat` against `x1 - x0`.
    #[default]
    Guided,
    /// Raw conditional velocity; the term then carries no gradient.
    Conditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LambdaSampling {
    Uniform,
    Fixed { value: f64 },
}

impl LambdaSampling {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            LambdaSampling::Uniform => rng.random::<f64>(),
            LambdaSampling::Fixed { value } => value,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerNet {
    net: Mlp,
    steps: usize,
    delta_max: f64,
    ablation: AblationFlags,
}

impl SchedulerNet {
    pub fn init(
        hidden: &[usize],
        steps: usize,
        delta_max: f64,
        ablation: AblationFlags,
        seed: u64,
    ) -> Result<Self> {
        let mut dims = vec![SCHEDULER_INPUT_DIM];
        dims.extend(hidden);
        dims.push(1);
        let squash = if ablation.constrain_w {
            OutputSquash::Sigmoid
        } else {
            OutputSquash::None
        };
        SchedulerNet::from_net(Mlp::init(&dims, squash, seed)?, steps, delta_max, ablation)
    }

    pub fn from_net(net: Mlp, steps: usize, delta_max: f64, ablation: AblationFlags) -> Result<Self> {
        if net.input_dim() != SCHEDULER_INPUT_DIM || net.output_dim() != 1 {
            return Err(LabError::Shape {
                expected: SCHEDULER_INPUT_DIM,
                got: net.input_dim(),
            });
        }
        if steps == 0 || !(delta_max > 0.0 && delta_max.is_finite()) {
            return Err(LabError::config(format!(
                "scheduler needs T >= 1 and delta_max > 0, got T={steps} delta_max={delta_max}"
            )));
        }
        let want = if ablation.constrain_w {
            OutputSquash::Sigmoid
        } else {
            OutputSquash::None
        };
        if net.squash() != want {
            return Err(LabError::config("output squash disagrees with constrain_w"));
        }
        Ok(SchedulerNet {
            net,
            steps,
            delta_max,
            ablation,
        })
    }

    /// Unconstrained scheduler whose output is identically zero.
    pub fn zeroed(steps: usize) -> Self {
        let net = Mlp::zeros(&[SCHEDULER_INPUT_DIM, 4, 1], OutputSquash::None).expect("valid dims");
        SchedulerNet::from_net(net, steps, 1.0, AblationFlags::default()).expect("valid scheduler")
    }

    pub fn mlp(&self) -> &Mlp {
        &self.net
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn delta_max(&self) -> f64 {
        self.delta_max
    }

    pub fn ablation(&self) -> &AblationFlags {
        &self.ablation
    }

    /// Input features for normalized time `tau`, with ablated blocks zeroed.
    pub fn features(&self, tau: f64, delta_norm: f64, lambda: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(LabError::Range {
                what: "lambda must lie in [0, 1]",
                value: lambda,
            });
        }
        if !(delta_norm >= 0.0) {
            return Err(LabError::Range {
                what: "delta norm must be non-negative",
                value: delta_norm,
            });
        }
        let mut x = Vec::with_capacity(SCHEDULER_INPUT_DIM);
        let dn = delta_norm.min(self.delta_max) / self.delta_max;
        for (v, on) in [
            (tau, self.ablation.use_t),
            (dn, self.ablation.use_delta_norm),
            (lambda, true),
        ] {
            if on {
                sinusoidal_embed_into(v, FEATURE_EMBED_DIM, &mut x)?;
            } else {
                x.extend([0.0; FEATURE_EMBED_DIM]);
            }
        }
        Ok(x)
    }

    fn tau(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.steps {
            return Err(LabError::Index { t, max: self.steps });
        }
        Ok(t as f64 / self.steps as f64)
    }

    /// `w` at diffusion step `t`.
    pub fn forward(&self, t: usize, delta_norm: f64, lambda: f64) -> Result<f64> {
        self.forward_frac(self.tau(t)?, delta_norm, lambda)
    }

    /// `w` at normalized time `tau in [0, 1]` (1 = pure noise).
    pub fn forward_frac(&self, tau: f64, delta_norm: f64, lambda: f64) -> Result<f64> {
        Ok(self.net.predict(&self.features(tau, delta_norm, lambda)?)?[0])
    }

    pub fn forward_taped(&self, tau: f64, delta_norm: f64, lambda: f64) -> Result<(f64, GradTape)> {
        let (y, tape) = self.net.forward(&self.features(tau, delta_norm, lambda)?)?;
        Ok((y[0], tape))
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let mut meta = serde_json::json!({
            "delta_max": self.delta_max,
            "T": self.steps,
            "ablation": self.ablation,
        });
        if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
            m.extend(e);
        }
        Checkpoint::from_net(CheckpointKind::Scheduler, &self.net, meta)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Scheduler {
            return Err(LabError::config(format!(
                "expected a scheduler checkpoint, got {:?}",
                ckpt.kind
            )));
        }
        SchedulerNet::from_net(
            ckpt.to_net()?,
            meta_field(&ckpt.meta, "T")?,
            meta_field(&ckpt.meta, "delta_max")?,
            meta_field(&ckpt.meta, "ablation")?,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchedulerTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub accumulation: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub hidden: Vec<usize>,
    pub lambda_sampling: LambdaSampling,
    pub perturb: PerturbConfig,
    pub ablation: AblationFlags,
    pub delta_eval_timestep: DeltaEvalTimestep,
    pub flow_eps_target: FlowEpsTarget,
    /// Integration increment for the flow variant.
    pub flow_dt: f64,
    /// Overrides the measured normalization constant when set.
    pub delta_max: Option<f64>,
    pub delta_probes: usize,
    pub ring: RingSpec,
    pub seed: u64,
}

impl Default for SchedulerTrainConfig {
    fn default() -> Self {
        SchedulerTrainConfig {
            steps: 20_000,
            batch: 2,
            accumulation: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            hidden: vec![128, 128, 128],
            lambda_sampling: LambdaSampling::Uniform,
            perturb: PerturbConfig::default(),
            ablation: AblationFlags::default(),
            delta_eval_timestep: DeltaEvalTimestep::Prev,
            flow_eps_target: FlowEpsTarget::Guided,
            flow_dt: 0.01,
            delta_max: None,
            delta_probes: 10_000,
            ring: RingSpec::default(),
            seed: 0,
        }
    }
}

impl SchedulerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.accumulation == 0 {
            return Err(LabError::config("batch and accumulation must be >= 1"));
        }
        if let LambdaSampling::Fixed { value } = self.lambda_sampling {
            if !(0.0..=1.0).contains(&value) {
                return Err(LabError::config(format!("fixed lambda {value} outside [0, 1]")));
            }
        }
        if !(self.flow_dt > 0.0 && self.flow_dt < 1.0) {
            return Err(LabError::config(format!("flow_dt {} outside (0, 1)", self.flow_dt)));
        }
        if self.delta_probes == 0 && self.delta_max.is_none() {
            return Err(LabError::config("delta_probes must be >= 1"));
        }
        self.perturb.validate()?;
        self.ring.validate()
    }

    fn perturb(&self) -> PerturbConfig {
        PerturbConfig {
            enabled: self.perturb.enabled && self.ablation.use_perturbation,
            ..self.perturb
        }
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Loss components of one sample or a batch mean.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub l_delta: f64,
    pub l_eps: f64,
    pub combined: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts, k: f64) {
        self.l_delta += k * o.l_delta;
        self.l_eps += k * o.l_eps;
        self.combined += k * o.combined;
    }
}

/// Random inputs of one diffusion training sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionDraw {
    pub z0: Vec2,
    /// Possibly perturbed condition embedding, shared by both delta
    /// evaluations.
    pub cond: CondEmbed,
    pub t: usize,
    pub eps: Vec2,
    pub lambda: f64,
}

/// Random inputs of one flow training sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowDraw {
    pub x0: Vec2,
    pub x1: Vec2,
    pub cond: CondEmbed,
    pub t: f64,
    pub lambda: f64,
}

/// Options of the per-sample loss/gradient evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub renoise_null: bool,
    pub delta_eval_timestep: DeltaEvalTimestep,
    pub flow_eps_target: FlowEpsTarget,
    pub flow_dt: f64,
    /// Differentiate through the backbone at the post-step state. Turning it
    /// off drops the delta term's gradient entirely.
    pub backbone_grad: bool,
}

impl StepOptions {
    pub fn from_config(cfg: &SchedulerTrainConfig) -> Self {
        StepOptions {
            renoise_null: cfg.ablation.use_cfgpp_renoise,
            delta_eval_timestep: cfg.delta_eval_timestep,
            flow_eps_target: cfg.flow_eps_target,
            flow_dt: cfg.flow_dt,
            backbone_grad: true,
        }
    }
}

fn normal2<R: Rng + ?Sized>(rng: &mut R) -> Vec2 {
    Vec2::new(StandardNormal.sample(rng), StandardNormal.sample(rng))
}

fn draw_condition<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    sample_condition(rng).as_angle().expect("angle")
}

pub fn draw_diffusion<R: Rng + ?Sized>(
    cfg: &SchedulerTrainConfig,
    steps: usize,
    rng: &mut R,
) -> Result<DiffusionDraw> {
    let c = draw_condition(rng);
    let z0 = sample_ring(c, &cfg.ring, rng);
    let t = rng.random_range(1..=steps);
    let eps = normal2(rng);
    let lambda = cfg.lambda_sampling.draw(rng);
    let cond = perturb_condition(&embed_condition(Condition::Angle(c)), t, steps, &cfg.perturb(), rng)?;
    Ok(DiffusionDraw {
        z0,
        cond,
        t,
        eps,
        lambda,
    })
}

/// Flow perturbation uses signal fraction `g = t`, so corruption is
/// strongest at the noise end `t = 0`.
pub fn draw_flow<R: Rng + ?Sized>(cfg: &SchedulerTrainConfig, rng: &mut R) -> Result<FlowDraw> {
    let c = draw_condition(rng);
    let x1 = sample_ring(c, &cfg.ring, rng);
    let x0 = normal2(rng);
    let t = rng.random_range(0.0..=1.0 - cfg.flow_dt);
    let lambda = cfg.lambda_sampling.draw(rng);
    let cond = perturb_condition_g(&embed_condition(Condition::Angle(c)), t, &cfg.perturb(), rng)?;
    Ok(FlowDraw {
        x0,
        x1,
        cond,
        t,
        lambda,
    })
}

fn diagnostics(step: usize, t: f64, dn: f64, w: f64, parts: &LossParts) -> LabError {
    LabError::TrainingFailure {
        step,
        detail: format!(
            "non-finite loss {:?} (t={t}, |delta_t|={dn}, w={w})",
            parts.combined
        ),
    }
}

/// Loss of one diffusion sample; when `grads` is given, adds
/// `scale * dL/dtheta` into it.
pub fn diffusion_loss_and_grad(
    snet: &SchedulerNet,
    dnet: &DenoiserNet,
    d: &DiffusionDraw,
    opts: &StepOptions,
    grads: Option<(&mut Grads, f64)>,
) -> Result<(LossParts, f64)> {
    let sched = dnet.schedule();
    let t = d.t;
    let z_t = sched.add_noise(d.z0, t, d.eps)?;
    let cur = compute_delta(dnet, z_t, t, &d.cond)?;
    let dn = cur.delta.norm();
    let (w, tape) = snet.forward_taped(t as f64 / sched.steps() as f64, dn, d.lambda)?;
    let eps_hat = cfg_combine(cur.eps_null, cur.eps_c, w);
    let z0 = sched.denoise_estimate(z_t, eps_hat, t)?;
    let r = if opts.renoise_null { cur.eps_null } else { eps_hat };
    let z_prev = sched.renoise(z0, r, t - 1)?;

    let t_eval = match opts.delta_eval_timestep {
        DeltaEvalTimestep::Prev => (t - 1).max(1),
        DeltaEvalTimestep::Same => t,
    };
    let (ec, tape_c) = dnet.predict_eps_taped(z_prev, t_eval, &d.cond)?;
    let (en, tape_n) = dnet.predict_eps_taped(z_prev, t_eval, &embed_condition(Condition::Null))?;
    let delta_prev = ec - en;
    let resid = d.eps - eps_hat;
    let l_delta = delta_prev.norm_sq();
    let l_eps = resid.norm_sq();
    let parts = LossParts {
        l_delta,
        l_eps,
        combined: d.lambda * l_delta + (1.0 - d.lambda) * l_eps,
    };
    if !parts.combined.is_finite() {
        return Err(diagnostics(0, t as f64, dn, w, &parts));
    }

    if let Some((g, scale)) = grads {
        let (ab, ab_prev) = (sched.alpha_bar(t)?, sched.alpha_bar(t - 1)?);
        let dz0_dw = -((1.0 - ab) / ab).sqrt() * cur.delta;
        let mut dzp_dw = ab_prev.sqrt() * dz0_dw;
        if !opts.renoise_null {
            dzp_dw += (1.0 - ab_prev).sqrt() * cur.delta;
        }
        let dldelta_dw = if opts.backbone_grad {
            let gd = 2.0 * delta_prev;
            let gz = dnet.core().z_grad(&tape_c, gd)? - dnet.core().z_grad(&tape_n, gd)?;
            gz.dot(dzp_dw)
        } else {
            0.0
        };
        let dleps_dw = -2.0 * resid.dot(cur.delta);
        let dl_dw = d.lambda * dldelta_dw + (1.0 - d.lambda) * dleps_dw;
        snet.net.backward_accumulate(&tape, &[scale * dl_dw], g)?;
    }
    Ok((parts, w))
}

/// Loss of one flow sample: one guided Euler step of size `flow_dt`.
pub fn flow_loss_and_grad(
    snet: &SchedulerNet,
    vnet: &VelocityNet,
    d: &FlowDraw,
    opts: &StepOptions,
    grads: Option<(&mut Grads, f64)>,
) -> Result<(LossParts, f64)> {
    let dt = opts.flow_dt;
    let x_t = d.x0 + d.t * (d.x1 - d.x0);
    let cur = compute_velocity_delta(vnet, x_t, d.t, &d.cond)?;
    let dn = cur.delta.norm();
    let (w, tape) = snet.forward_taped(1.0 - d.t, dn, d.lambda)?;
    let v_hat = cfg_combine(cur.eps_null, cur.eps_c, w);
    let x_next = x_t + dt * v_hat;
    let t_next = (d.t + dt).min(1.0);
    let (vc, tape_c) = vnet.predict_velocity_taped(x_next, t_next, &d.cond)?;
    let (vn, tape_n) =
        vnet.predict_velocity_taped(x_next, t_next, &embed_condition(Condition::Null))?;
    let delta_next = vc - vn;
    let target = d.x1 - d.x0;
    let pred = match opts.flow_eps_target {
        FlowEpsTarget::Guided => v_hat,
        FlowEpsTarget::Conditional => cur.eps_c,
    };
    let resid = pred - target;
    let l_delta = delta_next.norm_sq();
    let l_eps = resid.norm_sq();
    let parts = LossParts {
        l_delta,
        l_eps,
        combined: d.lambda * l_delta + (1.0 - d.lambda) * l_eps,
    };
    if !parts.combined.is_finite() {
        return Err(diagnostics(0, d.t, dn, w, &parts));
    }

    if let Some((g, scale)) = grads {
        let dx_dw = dt * cur.delta;
        let dldelta_dw = if opts.backbone_grad {
            let gd = 2.0 * delta_next;
            let gz = vnet.core().z_grad(&tape_c, gd)? - vnet.core().z_grad(&tape_n, gd)?;
            gz.dot(dx_dw)
        } else {
            0.0
        };
        let dleps_dw = match opts.flow_eps_target {
            FlowEpsTarget::Guided => 2.0 * resid.dot(cur.delta),
            FlowEpsTarget::Conditional => 0.0,
        };
        let dl_dw = d.lambda * dldelta_dw + (1.0 - d.lambda) * dleps_dw;
        snet.net.backward_accumulate(&tape, &[scale * dl_dw], g)?;
    }
    Ok((parts, w))
}

/// Per-optimizer-step mean losses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SchedulerTrainLog {
    pub steps: Vec<LossParts>,
}

impl SchedulerTrainLog {
    fn window_mean(parts: &[LossParts]) -> f64 {
        parts.iter().map(|p| p.combined).sum::<f64>() / parts.len().max(1) as f64
    }

    pub fn head_mean(&self, n: usize) -> f64 {
        Self::window_mean(&self.steps[..n.min(self.steps.len())])
    }

    pub fn tail_mean(&self, n: usize) -> f64 {
        Self::window_mean(&self.steps[self.steps.len().saturating_sub(n)..])
    }
}

/// One micro-batch: accumulates `scale`-weighted gradients of the batch
/// losses into `grads` and returns the micro-batch mean losses.
pub fn scheduler_train_step<R: Rng + ?Sized>(
    snet: &SchedulerNet,
    dnet: &DenoiserNet,
    cfg: &SchedulerTrainConfig,
    grads: &mut Grads,
    scale: f64,
    rng: &mut R,
) -> Result<LossParts> {
    let opts = StepOptions::from_config(cfg);
    let mut mean = LossParts::default();
    let k = 1.0 / cfg.batch as f64;
    for _ in 0..cfg.batch {
        let d = draw_diffusion(cfg, dnet.schedule().steps(), rng)?;
        let (p, _) = diffusion_loss_and_grad(snet, dnet, &d, &opts, Some((grads, scale * k)))?;
        mean.add(&p, k);
    }
    Ok(mean)
}

/// Flow counterpart of [`scheduler_train_step`].
pub fn flow_scheduler_train_step<R: Rng + ?Sized>(
    snet: &SchedulerNet,
    vnet: &VelocityNet,
    cfg: &SchedulerTrainConfig,
    grads: &mut Grads,
    scale: f64,
    rng: &mut R,
) -> Result<LossParts> {
    let opts = StepOptions::from_config(cfg);
    let mut mean = LossParts::default();
    let k = 1.0 / cfg.batch as f64;
    for _ in 0..cfg.batch {
        let d = draw_flow(cfg, rng)?;
        let (p, _) = flow_loss_and_grad(snet, vnet, &d, &opts, Some((grads, scale * k)))?;
        mean.add(&p, k);
    }
    Ok(mean)
}

/// Nearest-rank 99.9th percentile of the probe norms. Falls back to 1 when
/// every probe is zero (an untrained or degenerate backbone).
fn upper_quantile(mut norms: Vec<f64>) -> f64 {
    norms.sort_by(f64::total_cmp);
    let idx = ((0.999 * norms.len() as f64).ceil() as usize).clamp(1, norms.len()) - 1;
    let q = norms[idx];
    if q > 0.0 {
        q
    } else {
        1.0
    }
}

/// Typical maximum of `|delta_t|` over random noised ring points.
pub fn measure_delta_max(dnet: &DenoiserNet, ring: &RingSpec, probes: usize, seed: u64) -> Result<f64> {
    if probes == 0 {
        return Err(LabError::EmptyInput("delta probes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sched = dnet.schedule();
    let mut norms = Vec::with_capacity(probes);
    for _ in 0..probes {
        let c = draw_condition(&mut rng);
        let z0 = sample_ring(c, ring, &mut rng);
        let t = rng.random_range(1..=sched.steps());
        let z = sched.add_noise(z0, t, normal2(&mut rng))?;
        let cemb = embed_condition(Condition::Angle(c));
        norms.push(compute_delta(dnet, z, t, &cemb)?.delta.norm());
    }
    Ok(upper_quantile(norms))
}

/// Flow counterpart of [`measure_delta_max`], probing along interpolation
/// paths.
pub fn measure_flow_delta_max(
    vnet: &VelocityNet,
    ring: &RingSpec,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    if probes == 0 {
        return Err(LabError::EmptyInput("delta probes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut norms = Vec::with_capacity(probes);
    for _ in 0..probes {
        let c = draw_condition(&mut rng);
        let x1 = sample_ring(c, ring, &mut rng);
        let x0 = normal2(&mut rng);
        let t: f64 = rng.random();
        let cemb = embed_condition(Condition::Angle(c));
        norms.push(compute_velocity_delta(vnet, x0 + t * (x1 - x0), t, &cemb)?.delta.norm());
    }
    Ok(upper_quantile(norms))
}

fn optimize<F>(
    snet: &mut SchedulerNet,
    cfg: &SchedulerTrainConfig,
    mut micro: F,
) -> Result<SchedulerTrainLog>
where
    F: FnMut(&SchedulerNet, &mut Grads, f64, &mut ChaCha8Rng) -> Result<LossParts>,
{
    let mut opt = AdamW::new(&snet.net, cfg.adamw());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa11e_a1e5);
    let mut grads = Grads::zeros_like(&snet.net);
    let mut log = SchedulerTrainLog {
        steps: Vec::with_capacity(cfg.steps),
    };
    let k = 1.0 / cfg.accumulation as f64;
    for step in 0..cfg.steps {
        grads.iter_mut().for_each(|g| *g = 0.0);
        let mut mean = LossParts::default();
        for _ in 0..cfg.accumulation {
            let p = micro(snet, &mut grads, k, &mut rng).map_err(|e| match e {
                LabError::TrainingFailure { detail, .. } => LabError::TrainingFailure { step, detail },
                other => other,
            })?;
            mean.add(&p, k);
        }
        opt.step(&mut snet.net, &grads)
            .map_err(|e| LabError::TrainingFailure {
                step,
                detail: e.to_string(),
            })?;
        log.steps.push(mean);
    }
    Ok(log)
}

/// Trains a scheduler against a frozen noise predictor. Gradients of the
/// `accumulation` micro-batches are averaged before each optimizer update.
pub fn train_scheduler(
    cfg: &SchedulerTrainConfig,
    dnet: &DenoiserNet,
) -> Result<(SchedulerNet, SchedulerTrainLog)> {
    cfg.validate()?;
    let steps = dnet.schedule().steps();
    let delta_max = match cfg.delta_max {
        Some(v) => v,
        None => measure_delta_max(dnet, &cfg.ring, cfg.delta_probes, cfg.seed ^ 0xde17a)?,
    };
    let mut snet = SchedulerNet::init(&cfg.hidden, steps, delta_max, cfg.ablation, cfg.seed)?;
    let log = optimize(&mut snet, cfg, |s, g, k, rng| {
        scheduler_train_step(s, dnet, cfg, g, k, rng)
    })?;
    Ok((snet, log))
}

/// Trains a scheduler against a frozen velocity field.
pub fn train_flow_scheduler(
    cfg: &SchedulerTrainConfig,
    vnet: &VelocityNet,
) -> Result<(SchedulerNet, SchedulerTrainLog)> {
    cfg.validate()?;
    let delta_max = match cfg.delta_max {
        Some(v) => v,
        None => measure_flow_delta_max(vnet, &cfg.ring, cfg.delta_probes, cfg.seed ^ 0xde17a)?,
    };
    let steps = (1.0 / cfg.flow_dt).round().max(1.0) as usize;
    let mut snet = SchedulerNet::init(&cfg.hidden, steps, delta_max, cfg.ablation, cfg.seed)?;
    let log = optimize(&mut snet, cfg, |s, g, k, rng| {
        flow_scheduler_train_step(s, vnet, cfg, g, k, rng)
    })?;
    Ok((snet, log))
}

/// `M[i][j] = w(t_grid[i], delta_grid[j], lambda)`.
pub fn w_heatmap(
    snet: &SchedulerNet,
    lambda: f64,
    t_grid: &[usize],
    delta_grid: &[f64],
) -> Result<Vec<Vec<f64>>> {
    if t_grid.is_empty() || delta_grid.is_empty() {
        return Err(LabError::EmptyInput("heatmap grid"));
    }
    t_grid
        .iter()
        .map(|&t| {
            delta_grid
                .iter()
                .map(|&dn| snet.forward(t, dn, lambda))
                .collect()
        })
        .collect()
}

/// Default probe grid: every step `1..=T` against 32 norms spanning
/// `[0, delta_max]`.
pub fn default_w_grid(snet: &SchedulerNet) -> (Vec<usize>, Vec<f64>) {
    let ts = (1..=snet.steps()).collect();
    let ds = (0..32).map(|j| snet.delta_max() * j as f64 / 31.0).collect();
    (ts, ds)
}
