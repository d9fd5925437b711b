//! Frozen backbones: a conditional epsilon-predictor for the discrete
//! diffusion chain and a conditional velocity field for flow matching.
//!
//! Both nets see `[z, sin/cos(time), cond_embed]` and are trained with
//! null-condition dropout so one network serves the conditional and
//! unconditional branches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::nn::{
    param_hash, sinusoidal_embed_into, AdamW, AdamWConfig, Checkpoint, CheckpointKind, GradTape,
    Grads, Mlp, OutputSquash,
};
use crate::point::Vec2;
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::toyworld::{embed_condition, make_dataset, Condition, RingSpec};

pub const COND_DIM: usize = 3;
pub type CondEmbed = [f64; COND_DIM];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneTrainConfig {
    pub dataset_size: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub p_uncond: f64,
    pub hidden: Vec<usize>,
    pub t_embed_dim: usize,
    pub seed: u64,
}

impl Default for BackboneTrainConfig {
    fn default() -> Self {
        BackboneTrainConfig {
            dataset_size: 100_000,
            batch_size: 256,
            steps: 20_000,
            lr: 1e-3,
            weight_decay: 0.01,
            p_uncond: 0.1,
            hidden: vec![64, 64, 64],
            t_embed_dim: 8,
            seed: 0,
        }
    }
}

impl BackboneTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_uncond) {
            return Err(LabError::config(format!(
                "p_uncond must lie in [0, 1), got {}",
                self.p_uncond
            )));
        }
        if self.batch_size == 0 || self.dataset_size == 0 {
            return Err(LabError::config("batch_size and dataset_size must be >= 1"));
        }
        if self.t_embed_dim == 0 || !self.t_embed_dim.is_multiple_of(2) {
            return Err(LabError::config("t_embed_dim must be even and positive"));
        }
        if self.hidden.contains(&0) {
            return Err(LabError::config("hidden widths must be positive"));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![2 + self.t_embed_dim + COND_DIM];
        dims.extend(&self.hidden);
        dims.push(2);
        dims
    }
}

/// Per-step mean training losses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    /// Mean of the first `n` (or fewer) recorded losses.
    pub fn head_mean(&self, n: usize) -> f64 {
        mean(&self.losses[..n.min(self.losses.len())])
    }

    /// Mean of the last `n` (or fewer) recorded losses.
    pub fn tail_mean(&self, n: usize) -> f64 {
        mean(&self.losses[self.losses.len().saturating_sub(n)..])
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// An MLP mapping `(point, time feature, condition embedding)` to a 2D
/// output. Shared by both backbones.
#[derive(Debug, Clone, PartialEq)]
pub struct CondNet {
    net: Mlp,
    t_embed_dim: usize,
}

impl CondNet {
    pub fn new(net: Mlp, t_embed_dim: usize) -> Result<Self> {
        if net.input_dim() != 2 + t_embed_dim + COND_DIM || net.output_dim() != 2 {
            return Err(LabError::Shape {
                expected: 2 + t_embed_dim + COND_DIM,
                got: net.input_dim(),
            });
        }
        Ok(CondNet { net, t_embed_dim })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.net
    }

    pub fn t_embed_dim(&self) -> usize {
        self.t_embed_dim
    }

    fn input(&self, z: Vec2, time: f64, cond: &CondEmbed) -> Result<Vec<f64>> {
        let mut x = Vec::with_capacity(self.net.input_dim());
        x.push(z.x);
        x.push(z.y);
        sinusoidal_embed_into(time, self.t_embed_dim, &mut x)?;
        x.extend_from_slice(cond);
        Ok(x)
    }

    pub fn eval(&self, z: Vec2, time: f64, cond: &CondEmbed) -> Result<Vec2> {
        Ok(Vec2::from_slice(&self.net.predict(&self.input(z, time, cond)?)?))
    }

    /// Forward pass that keeps the tape for input-gradient queries.
    pub fn eval_taped(&self, z: Vec2, time: f64, cond: &CondEmbed) -> Result<(Vec2, GradTape)> {
        let (y, tape) = self.net.forward(&self.input(z, time, cond)?)?;
        Ok((Vec2::from_slice(&y), tape))
    }

    /// `J^T g` restricted to the point coordinates, where `J` is the output
    /// Jacobian with respect to `z`.
    pub fn z_grad(&self, tape: &GradTape, g: Vec2) -> Result<Vec2> {
        let gi = self.net.input_grad(tape, &g.to_array())?;
        Ok(Vec2::new(gi[0], gi[1]))
    }

    fn fit<F>(&mut self, cfg: &BackboneTrainConfig, mut draw: F) -> Result<TrainLog>
    where
        F: FnMut(&mut ChaCha8Rng) -> (Vec2, f64, CondEmbed, Vec2),
    {
        let mut opt = AdamW::new(&self.net, cfg.adamw());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
        let mut grads = Grads::zeros_like(&self.net);
        let mut log = TrainLog {
            losses: Vec::with_capacity(cfg.steps),
        };
        let inv_b = 1.0 / cfg.batch_size as f64;
        for step in 0..cfg.steps {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for _ in 0..cfg.batch_size {
                let (z, time, mut cond, target) = draw(&mut rng);
                if rng.random::<f64>() < cfg.p_uncond {
                    cond = embed_condition(Condition::Null);
                }
                let (y, tape) = self.net.forward(&self.input(z, time, &cond)?)?;
                let r = Vec2::from_slice(&y) - target;
                loss += r.norm_sq();
                let og = [2.0 * r.x * inv_b, 2.0 * r.y * inv_b];
                self.net.backward_accumulate(&tape, &og, &mut grads)?;
            }
            loss *= inv_b;
            if !loss.is_finite() {
                return Err(LabError::TrainingFailure {
                    step,
                    detail: format!("non-finite loss {loss}"),
                });
            }
            opt.step(&mut self.net, &grads)
                .map_err(|e| LabError::TrainingFailure {
                    step,
                    detail: e.to_string(),
                })?;
            log.losses.push(loss);
        }
        Ok(log)
    }
}

fn normal2<R: Rng + ?Sized>(rng: &mut R) -> Vec2 {
    Vec2::new(StandardNormal.sample(rng), StandardNormal.sample(rng))
}

/// Conditional noise predictor `eps(z_t, t, c)` bound to its schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    core: CondNet,
    schedule: NoiseSchedule,
}

impl DenoiserNet {
    pub fn new(core: CondNet, schedule: NoiseSchedule) -> Self {
        DenoiserNet { core, schedule }
    }

    pub fn init(cfg: &BackboneTrainConfig, schedule: NoiseSchedule) -> Result<Self> {
        cfg.validate()?;
        let net = Mlp::init(&cfg.layer_dims(), OutputSquash::None, cfg.seed)?;
        Ok(DenoiserNet::new(CondNet::new(net, cfg.t_embed_dim)?, schedule))
    }

    pub fn core(&self) -> &CondNet {
        &self.core
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn hash(&self) -> String {
        param_hash(self.core.mlp())
    }

    fn time(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.schedule.steps() {
            return Err(LabError::Index {
                t,
                max: self.schedule.steps(),
            });
        }
        Ok(t as f64 / self.schedule.steps() as f64)
    }

    pub fn predict_eps(&self, z: Vec2, t: usize, cond: Condition) -> Result<Vec2> {
        self.predict_eps_embed(z, t, &embed_condition(cond))
    }

    /// Like [`DenoiserNet::predict_eps`] for an already embedded (possibly
    /// perturbed) condition.
    pub fn predict_eps_embed(&self, z: Vec2, t: usize, cond: &CondEmbed) -> Result<Vec2> {
        self.core.eval(z, self.time(t)?, cond)
    }

    pub fn predict_eps_taped(
        &self,
        z: Vec2,
        t: usize,
        cond: &CondEmbed,
    ) -> Result<(Vec2, GradTape)> {
        self.core.eval_taped(z, self.time(t)?, cond)
    }

    pub fn to_checkpoint(&self, ring: &RingSpec, cfg: &BackboneTrainConfig) -> Checkpoint {
        Checkpoint::from_net(
            CheckpointKind::Denoiser,
            self.core.mlp(),
            serde_json::json!({
                "schedule": self.schedule.config(),
                "ring": ring,
                "train": cfg,
                "t_embed_dim": self.core.t_embed_dim,
            }),
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Denoiser {
            return Err(LabError::config(format!(
                "expected a denoiser checkpoint, got {:?}",
                ckpt.kind
            )));
        }
        let sched: ScheduleConfig = meta_field(&ckpt.meta, "schedule")?;
        let t_dim: usize = meta_field(&ckpt.meta, "t_embed_dim")?;
        Ok(DenoiserNet::new(CondNet::new(ckpt.to_net()?, t_dim)?, sched.build()?))
    }
}

pub(crate) fn meta_field<T: serde::de::DeserializeOwned>(
    meta: &serde_json::Value,
    key: &str,
) -> Result<T> {
    let v = meta
        .get(key)
        .ok_or_else(|| LabError::config(format!("checkpoint meta lacks \"{key}\"")))?;
    Ok(T::deserialize(v)?)
}

/// Ring spec recorded in a backbone checkpoint, or the default.
pub fn checkpoint_ring(ckpt: &Checkpoint) -> RingSpec {
    meta_field(&ckpt.meta, "ring").unwrap_or_default()
}

/// Trains the noise predictor on `||eps_theta(z_t, t, c') - eps||^2` with
/// `t ~ U{1..T}` and `c'` dropped to null with probability `p_uncond`.
pub fn train_denoiser(
    cfg: &BackboneTrainConfig,
    spec: &RingSpec,
    sched: &NoiseSchedule,
) -> Result<(DenoiserNet, TrainLog)> {
    let mut dnet = DenoiserNet::init(cfg, sched.clone())?;
    if cfg.steps == 0 {
        return Ok((dnet, TrainLog::default()));
    }
    let data = make_dataset(cfg.dataset_size, spec, cfg.seed.wrapping_add(1))?;
    let steps = sched.steps();
    let log = dnet.core.fit(cfg, |rng| {
        let s = data[rng.random_range(0..data.len())];
        let t = rng.random_range(1..=steps);
        let eps = normal2(rng);
        let z_t = sched
            .add_noise(s.point, t, eps)
            .expect("t drawn in range");
        (
            z_t,
            t as f64 / steps as f64,
            embed_condition(Condition::Angle(s.cond)),
            eps,
        )
    })?;
    Ok((dnet, log))
}

/// Conditional velocity field `v(x, t, c)` on continuous time `t in [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    core: CondNet,
}

impl VelocityNet {
    pub fn new(core: CondNet) -> Self {
        VelocityNet { core }
    }

    pub fn init(cfg: &BackboneTrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = Mlp::init(&cfg.layer_dims(), OutputSquash::None, cfg.seed)?;
        Ok(VelocityNet::new(CondNet::new(net, cfg.t_embed_dim)?))
    }

    pub fn core(&self) -> &CondNet {
        &self.core
    }

    pub fn hash(&self) -> String {
        param_hash(self.core.mlp())
    }

    fn check_t(t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(LabError::Range {
                what: "flow time must lie in [0, 1]",
                value: t,
            });
        }
        Ok(())
    }

    pub fn predict_velocity(&self, x: Vec2, t: f64, cond: Condition) -> Result<Vec2> {
        self.predict_velocity_embed(x, t, &embed_condition(cond))
    }

    pub fn predict_velocity_embed(&self, x: Vec2, t: f64, cond: &CondEmbed) -> Result<Vec2> {
        Self::check_t(t)?;
        self.core.eval(x, t, cond)
    }

    pub fn predict_velocity_taped(
        &self,
        x: Vec2,
        t: f64,
        cond: &CondEmbed,
    ) -> Result<(Vec2, GradTape)> {
        Self::check_t(t)?;
        self.core.eval_taped(x, t, cond)
    }

    pub fn to_checkpoint(&self, ring: &RingSpec, cfg: &BackboneTrainConfig) -> Checkpoint {
        Checkpoint::from_net(
            CheckpointKind::Velocity,
            self.core.mlp(),
            serde_json::json!({
                "ring": ring,
                "train": cfg,
                "t_embed_dim": self.core.t_embed_dim,
            }),
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Velocity {
            return Err(LabError::config(format!(
                "expected a velocity checkpoint, got {:?}",
                ckpt.kind
            )));
        }
        let t_dim: usize = meta_field(&ckpt.meta, "t_embed_dim")?;
        Ok(VelocityNet::new(CondNet::new(ckpt.to_net()?, t_dim)?))
    }
}

/// Flow matching on `x(t) = x0 + t (x1 - x0)` with `x0 ~ N(0, I)`, `(x1, c)`
/// from the ring and target velocity `x1 - x0`.
pub fn train_velocity(cfg: &BackboneTrainConfig, spec: &RingSpec) -> Result<(VelocityNet, TrainLog)> {
    cfg.validate()?;
    let data = make_dataset(cfg.dataset_size, spec, cfg.seed.wrapping_add(1))?;
    train_velocity_with(cfg, |rng| {
        let s = data[rng.random_range(0..data.len())];
        (normal2(rng), s.point, Condition::Angle(s.cond))
    })
}

/// Flow matching against pairs `(x0, x1, c)` produced by `draw`.
pub fn train_velocity_with<F>(cfg: &BackboneTrainConfig, mut draw: F) -> Result<(VelocityNet, TrainLog)>
where
    F: FnMut(&mut ChaCha8Rng) -> (Vec2, Vec2, Condition),
{
    let mut vnet = VelocityNet::init(cfg)?;
    if cfg.steps == 0 {
        return Ok((vnet, TrainLog::default()));
    }
    let log = vnet.core.fit(cfg, |rng| {
        let (x0, x1, c) = draw(rng);
        let t: f64 = rng.random();
        (x0 + t * (x1 - x0), t, embed_condition(c), x1 - x0)
    })?;
    Ok((vnet, log))
}
