//! Evaluation runs: load checkpoints, sample a seed range, score the
//! endpoints and persist everything under one output directory.
//!
//! Layout: `run.json`, `traj_<i>.csv`, `report.json`, and `plots/` once
//! rendered.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annealer::SchedulerNet;
use crate::denoiser::{checkpoint_ring, DenoiserNet, VelocityNet};
use crate::error::{LabError, Result};
use crate::eval::EvalReport;
use crate::guidance::{
    flow_guided_sample, sample_many, sample_trajectory, GuidanceMode, SampleOptions, SamplerKind,
    Trajectory,
};
use crate::io::{read_csv, read_json, write_atomic, write_json, CsvWriter};
use crate::nn::{param_hash, Checkpoint, CheckpointKind};
use crate::point::Vec2;
use crate::schedule::ScheduleConfig;
use crate::toyworld::{Condition, RingSpec};

pub const TRAJ_HEADER: [&str; 5] = ["t", "z_x", "z_y", "w", "delta_norm"];

/// A frozen backbone of either family.
#[derive(Debug, Clone, PartialEq)]
pub enum Backbone {
    Diffusion(DenoiserNet),
    Flow(VelocityNet),
}

impl Backbone {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        match ckpt.kind {
            CheckpointKind::Denoiser => Ok(Backbone::Diffusion(DenoiserNet::from_checkpoint(ckpt)?)),
            CheckpointKind::Velocity => Ok(Backbone::Flow(VelocityNet::from_checkpoint(ckpt)?)),
            CheckpointKind::Scheduler => Err(LabError::config(
                "a scheduler checkpoint cannot serve as the backbone",
            )),
        }
    }

    /// Loads a backbone and the ring spec it was trained on.
    pub fn load(path: &Path) -> Result<(Self, RingSpec)> {
        let ckpt = Checkpoint::load(path)?;
        let b = Backbone::from_checkpoint(&ckpt).map_err(|e| LabError::Load {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Ok((b, checkpoint_ring(&ckpt)))
    }

    pub fn hash(&self) -> String {
        match self {
            Backbone::Diffusion(d) => d.hash(),
            Backbone::Flow(v) => v.hash(),
        }
    }
}

/// What to sample, independent of where results land.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSpec {
    pub mode: GuidanceMode,
    pub sampler: SamplerKind,
    pub c: f64,
    pub n: usize,
    pub seed_base: u64,
    pub flow_steps: usize,
    pub strict_cfgpp: bool,
}

/// Samples trajectories `seed_base .. seed_base + n`; trajectory `i` depends
/// only on its own seed.
pub fn sample_backbone(
    backbone: &Backbone,
    scheduler: Option<&SchedulerNet>,
    spec: &SampleSpec,
) -> Result<Vec<Trajectory>> {
    let seeds: Vec<u64> = (0..spec.n as u64).map(|i| spec.seed_base + i).collect();
    let cond = Condition::angle(spec.c);
    let opts = SampleOptions {
        sampler: spec.sampler,
        strict_cfgpp: spec.strict_cfgpp,
    };
    match backbone {
        Backbone::Diffusion(d) => sample_many(&seeds, |s| {
            sample_trajectory(d, &spec.mode, scheduler, &opts, cond, s)
        }),
        Backbone::Flow(v) => sample_many(&seeds, |s| {
            flow_guided_sample(v, &spec.mode, scheduler, cond, spec.flow_steps, s)
        }),
    }
}

fn default_flow_steps() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub backbone: PathBuf,
    #[serde(default)]
    pub scheduler: Option<PathBuf>,
    /// `cfg`, `cfgpp` or `anneal`.
    pub mode: String,
    #[serde(default)]
    pub w: Option<f64>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub sampler: SamplerKind,
    pub c: f64,
    pub seeds: usize,
    #[serde(default)]
    pub seed_base: u64,
    pub out: PathBuf,
    /// Defaults to the ring recorded in the backbone checkpoint.
    #[serde(default)]
    pub ring: Option<RingSpec>,
    /// Must agree with the diffusion backbone's schedule when given.
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default = "default_flow_steps")]
    pub flow_steps: usize,
    #[serde(default)]
    pub strict_cfgpp: bool,
}

impl RunConfig {
    pub fn guidance_mode(&self) -> Result<GuidanceMode> {
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| LabError::config(format!("mode \"{}\" needs --{name}", self.mode)))
        };
        let mode = match self.mode.as_str() {
            "cfg" => GuidanceMode::Cfg { w: need(self.w, "w")? },
            "cfgpp" => GuidanceMode::Cfgpp { w: need(self.w, "w")? },
            "anneal" => GuidanceMode::Anneal {
                lambda: need(self.lambda, "lambda")?,
            },
            m => return Err(LabError::config(format!("unknown mode \"{m}\""))),
        };
        match (&mode, &self.scheduler) {
            (GuidanceMode::Anneal { .. }, None) => {
                Err(LabError::config("mode \"anneal\" requires a scheduler checkpoint"))
            }
            (GuidanceMode::Cfg { .. } | GuidanceMode::Cfgpp { .. }, Some(_)) => Err(LabError::config(
                "a scheduler checkpoint is only used with mode \"anneal\"",
            )),
            _ => Ok(mode),
        }
    }

    pub fn validate(&self) -> Result<GuidanceMode> {
        if self.seeds == 0 {
            return Err(LabError::EmptyInput("seeds must be >= 1"));
        }
        if !self.c.is_finite() {
            return Err(LabError::NonFinite(format!("condition angle {}", self.c)));
        }
        self.guidance_mode()
    }
}

/// What `run.json` records besides the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub label: String,
    pub ring: RingSpec,
    pub backbone_hash: String,
    pub scheduler_hash: Option<String>,
    pub trajectories: Vec<TrajectoryEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub file: String,
    pub seed: u64,
    pub c: f64,
}

pub fn trajectory_csv(traj: &Trajectory) -> CsvWriter {
    let mut w = CsvWriter::new(&TRAJ_HEADER);
    for r in &traj.records {
        w.row([
            r.t.to_string(),
            r.z.x.to_string(),
            r.z.y.to_string(),
            r.w.to_string(),
            r.delta_norm.to_string(),
        ]);
    }
    let t_end = if traj.sampler == "flow-euler" { 1.0 } else { 0.0 };
    w.row([
        t_end.to_string(),
        traj.final_z.x.to_string(),
        traj.final_z.y.to_string(),
        String::new(),
        String::new(),
    ]);
    w
}

/// A trajectory as read back from CSV. The terminal row carries no `w` or
/// `delta_norm`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTable {
    pub t: Vec<f64>,
    pub z: Vec<Vec2>,
    pub w: Vec<f64>,
    pub delta_norm: Vec<f64>,
}

impl TrajectoryTable {
    pub fn endpoint(&self) -> Vec2 {
        *self.z.last().expect("non-empty")
    }

    pub fn mean_w(&self) -> f64 {
        self.w.iter().sum::<f64>() / self.w.len().max(1) as f64
    }
}

pub fn read_trajectory_csv(path: &Path) -> Result<TrajectoryTable> {
    let (header, rows) = read_csv(path)?;
    let bad = |detail: String| LabError::Load {
        path: path.to_path_buf(),
        detail,
    };
    if header != TRAJ_HEADER {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    if rows.is_empty() {
        return Err(bad("no rows".into()));
    }
    let mut tab = TrajectoryTable {
        t: Vec::new(),
        z: Vec::new(),
        w: Vec::new(),
        delta_norm: Vec::new(),
    };
    let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
    let last = rows.len() - 1;
    for (i, r) in rows.iter().enumerate() {
        if r.len() != TRAJ_HEADER.len() {
            return Err(bad(format!("row {i} has {} fields", r.len())));
        }
        tab.t.push(num(&r[0])?);
        tab.z.push(Vec2::new(num(&r[1])?, num(&r[2])?));
        if i < last {
            tab.w.push(num(&r[3])?);
            tab.delta_norm.push(num(&r[4])?);
        }
    }
    Ok(tab)
}

/// Scores a sampled batch without touching the filesystem.
pub fn report_for(label: &str, trajs: &[Trajectory], ring: &RingSpec) -> Result<EvalReport> {
    EvalReport::from_trajectories(label, trajs, ring)
}

pub fn load_scheduler(path: &Path) -> Result<SchedulerNet> {
    let ckpt = Checkpoint::load_kind(path, CheckpointKind::Scheduler)?;
    SchedulerNet::from_checkpoint(&ckpt).map_err(|e| LabError::Load {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Samples, scores and writes a full run directory. All files are written
/// after sampling finishes.
pub fn run_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let mode = cfg.validate()?;
    let (backbone, ckpt_ring) = Backbone::load(&cfg.backbone)?;
    if let (Some(want), Backbone::Diffusion(d)) = (&cfg.schedule, &backbone) {
        if *want != d.schedule().config() {
            return Err(LabError::config(
                "run schedule disagrees with the backbone checkpoint",
            ));
        }
    }
    let ring = cfg.ring.unwrap_or(ckpt_ring);
    let snet = cfg.scheduler.as_deref().map(load_scheduler).transpose()?;
    let spec = SampleSpec {
        mode,
        sampler: cfg.sampler,
        c: cfg.c,
        n: cfg.seeds,
        seed_base: cfg.seed_base,
        flow_steps: cfg.flow_steps,
        strict_cfgpp: cfg.strict_cfgpp,
    };
    let trajs = sample_backbone(&backbone, snet.as_ref(), &spec)?;
    let label = mode.label();
    let report = report_for(&label, &trajs, &ring)?;

    let record = RunRecord {
        config: cfg.clone(),
        label,
        ring,
        backbone_hash: backbone.hash(),
        scheduler_hash: snet.as_ref().map(|s| param_hash(s.mlp())),
        trajectories: trajs
            .iter()
            .enumerate()
            .map(|(i, t)| TrajectoryEntry {
                file: format!("traj_{i}.csv"),
                seed: t.seed,
                c: t.c,
            })
            .collect(),
    };
    for (entry, t) in record.trajectories.iter().zip(&trajs) {
        write_atomic(&cfg.out.join(&entry.file), trajectory_csv(t).as_str().as_bytes())?;
    }
    write_json(&cfg.out.join("run.json"), &record)?;
    write_json(&cfg.out.join("report.json"), &report)?;
    Ok(report)
}

pub fn read_run_record(dir: &Path) -> Result<RunRecord> {
    read_json(&dir.join("run.json"))
}

/// Recomputes the report of a run directory from its exported CSVs.
pub fn reevaluate(dir: &Path) -> Result<EvalReport> {
    let rec = read_run_record(dir)?;
    let mut ends = Vec::with_capacity(rec.trajectories.len());
    let mut conds = Vec::with_capacity(rec.trajectories.len());
    let mut ws = Vec::with_capacity(rec.trajectories.len());
    for e in &rec.trajectories {
        let tab = read_trajectory_csv(&dir.join(&e.file))?;
        ends.push(tab.endpoint());
        conds.push(e.c);
        ws.push(tab.mean_w());
    }
    EvalReport::from_parts(&rec.label, &ends, &conds, &ws, &rec.ring)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{train_denoiser, BackboneTrainConfig};

    fn tiny_backbone(dir: &Path) -> PathBuf {
        let cfg = BackboneTrainConfig {
            steps: 20,
            batch_size: 16,
            dataset_size: 500,
            hidden: vec![16],
            ..Default::default()
        };
        let ring = RingSpec::default();
        let sched = ScheduleConfig::default().build().unwrap();
        let (d, _) = train_denoiser(&cfg, &ring, &sched).unwrap();
        let p = dir.join("dn.json");
        d.to_checkpoint(&ring, &cfg).save(&p).unwrap();
        p
    }

    fn run_cfg(backbone: PathBuf, out: PathBuf, seeds: usize) -> RunConfig {
        RunConfig {
            backbone,
            scheduler: None,
            mode: "cfgpp".into(),
            w: Some(0.3),
            lambda: None,
            sampler: SamplerKind::Ddim,
            c: 2.356,
            seeds,
            seed_base: 10,
            out,
            ring: None,
            schedule: None,
            flow_steps: 100,
            strict_cfgpp: false,
        }
    }

    #[test]
    fn run_writes_layout_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let bb = tiny_backbone(dir.path());
        let a = run_cfg(bb.clone(), dir.path().join("a"), 4);
        let r1 = run_eval(&a).unwrap();
        let bytes1 = std::fs::read(dir.path().join("a/report.json")).unwrap();
        let r2 = run_eval(&a).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(bytes1, std::fs::read(dir.path().join("a/report.json")).unwrap());
        for i in 0..4 {
            assert!(dir.path().join(format!("a/traj_{i}.csv")).exists());
        }
        let re = reevaluate(&dir.path().join("a")).unwrap();
        assert!((re.adherence_rate - r1.adherence_rate).abs() <= 1e-12);
        assert!((re.on_manifold_rate - r1.on_manifold_rate).abs() <= 1e-12);
        assert!((re.mean_w - r1.mean_w).abs() <= 1e-12);

        // Seed isolation: more seeds never change earlier files.
        let b = run_cfg(bb, dir.path().join("b"), 6);
        run_eval(&b).unwrap();
        for i in 0..4 {
            let f = format!("traj_{i}.csv");
            assert_eq!(
                std::fs::read(dir.path().join("a").join(&f)).unwrap(),
                std::fs::read(dir.path().join("b").join(&f)).unwrap()
            );
        }
    }

    #[test]
    fn trajectory_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let bb = tiny_backbone(dir.path());
        let (b, _) = Backbone::load(&bb).unwrap();
        let spec = SampleSpec {
            mode: GuidanceMode::Cfg { w: 1.1 },
            sampler: SamplerKind::Ddim,
            c: 1.0,
            n: 1,
            seed_base: 3,
            flow_steps: 10,
            strict_cfgpp: false,
        };
        let t = &sample_backbone(&b, None, &spec).unwrap()[0];
        let p = dir.path().join("t.csv");
        trajectory_csv(t).save(&p).unwrap();
        let tab = read_trajectory_csv(&p).unwrap();
        assert_eq!(tab.z, t.states());
        assert_eq!(tab.w, t.records.iter().map(|r| r.w).collect::<Vec<_>>());
        assert_eq!(tab.delta_norm, t.records.iter().map(|r| r.delta_norm).collect::<Vec<_>>());
        assert_eq!(tab.t.last(), Some(&0.0));
        assert_eq!(tab.t[0], 50.0);
    }

    #[test]
    fn config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = run_cfg(dir.path().join("missing.json"), dir.path().join("o"), 2);
        assert!(matches!(run_eval(&c), Err(LabError::Io { .. })));
        std::fs::write(dir.path().join("bad.json"), "{not json").unwrap();
        c.backbone = dir.path().join("bad.json");
        assert!(matches!(run_eval(&c), Err(LabError::Load { .. })));
        c.mode = "anneal".into();
        c.lambda = Some(0.5);
        assert!(matches!(c.validate(), Err(LabError::InvalidConfig(_))));
        c.mode = "cfg".into();
        c.w = None;
        assert!(c.validate().is_err());
    }
}
