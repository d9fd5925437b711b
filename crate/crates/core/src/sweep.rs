//! Variant sweeps: train (or fix) a guidance rule per variant, evaluate all
//! of them on common seeds and tabulate one CSV row each.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annealer::{train_flow_scheduler, train_scheduler, SchedulerNet, SchedulerTrainConfig};
use crate::error::{LabError, Result};
use crate::eval::EvalReport;
use crate::guidance::{GuidanceMode, SamplerKind};
use crate::io::{merge_json, CsvWriter};
use crate::run::{report_for, sample_backbone, Backbone, SampleSpec};
use crate::toyworld::RingSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepEval {
    pub c: f64,
    pub lambda: f64,
    pub seeds: usize,
    pub seed_base: u64,
    pub sampler: SamplerKind,
    pub flow_steps: usize,
}

impl Default for SweepEval {
    fn default() -> Self {
        SweepEval {
            c: 3.0 * std::f64::consts::PI / 4.0,
            lambda: 0.7,
            seeds: 200,
            seed_base: 0,
            sampler: SamplerKind::Ddim,
            flow_steps: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    /// Partial scheduler training config overlaid on the sweep's base.
    #[serde(default)]
    pub train: serde_json::Value,
    /// A fixed-scale baseline instead of a trained scheduler.
    #[serde(default)]
    pub constant: Option<GuidanceMode>,
    /// Overrides the sweep's evaluation lambda.
    #[serde(default)]
    pub lambda: Option<f64>,
}

impl Variant {
    pub fn trained(name: &str, train: serde_json::Value) -> Self {
        Variant {
            name: name.into(),
            train,
            constant: None,
            lambda: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// full, w/o t, w/o delta, constrained w, w/o renoise, w/o perturbation.
    Ablation,
    /// Perturbation noise scale s in {0, 0.025, 0.1, 0.25}.
    PerturbS,
}

impl Preset {
    pub fn variants(self) -> Vec<Variant> {
        use serde_json::json;
        match self {
            Preset::Ablation => vec![
                Variant::trained("full", json!({})),
                Variant::trained("w/o t", json!({"ablation": {"use_t": false}})),
                Variant::trained("w/o delta", json!({"ablation": {"use_delta_norm": false}})),
                Variant::trained("constrained w", json!({"ablation": {"constrain_w": true}})),
                Variant::trained("w/o renoise", json!({"ablation": {"use_cfgpp_renoise": false}})),
                Variant::trained(
                    "w/o perturbation",
                    json!({"ablation": {"use_perturbation": false}}),
                ),
            ],
            Preset::PerturbS => [0.0, 0.025, 0.1, 0.25]
                .iter()
                .map(|&s| Variant::trained(&format!("s={s}"), json!({"perturb": {"s": s}})))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub backbone: PathBuf,
    /// Partial scheduler training config shared by every variant.
    #[serde(default)]
    pub train: serde_json::Value,
    #[serde(default)]
    pub eval: SweepEval,
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub variants: Vec<Variant>,
}

impl SweepConfig {
    /// Preset variants followed by explicit ones.
    pub fn all_variants(&self) -> Vec<Variant> {
        let mut v = self.preset.map(Preset::variants).unwrap_or_default();
        v.extend(self.variants.iter().cloned());
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub name: String,
    pub report: Option<EvalReport>,
    /// Extremes of every emitted guidance scale.
    pub w_range: Option<(f64, f64)>,
    pub error: Option<String>,
    pub scheduler: Option<SchedulerNet>,
}

/// Resolves a variant's training config from the base patch and its own.
pub fn variant_train_config(base: &serde_json::Value, v: &Variant) -> Result<SchedulerTrainConfig> {
    let mut cfg = serde_json::to_value(SchedulerTrainConfig::default())?;
    if !base.is_null() {
        merge_json(&mut cfg, base);
    }
    if !v.train.is_null() {
        merge_json(&mut cfg, &v.train);
    }
    let cfg: SchedulerTrainConfig = serde_json::from_value(cfg)
        .map_err(|e| LabError::config(format!("variant \"{}\": {e}", v.name)))?;
    cfg.validate()?;
    Ok(cfg)
}

fn run_variant(
    backbone: &Backbone,
    ring: &RingSpec,
    base: &serde_json::Value,
    eval: &SweepEval,
    v: &Variant,
) -> Result<(EvalReport, (f64, f64), Option<SchedulerNet>)> {
    let (mode, snet) = match v.constant {
        Some(m) => (m, None),
        None => {
            let cfg = variant_train_config(base, v)?;
            let snet = match backbone {
                Backbone::Diffusion(d) => train_scheduler(&cfg, d)?.0,
                Backbone::Flow(f) => train_flow_scheduler(&cfg, f)?.0,
            };
            let lambda = v.lambda.unwrap_or(eval.lambda);
            (GuidanceMode::Anneal { lambda }, Some(snet))
        }
    };
    let spec = SampleSpec {
        mode,
        sampler: eval.sampler,
        c: eval.c,
        n: eval.seeds,
        seed_base: eval.seed_base,
        flow_steps: eval.flow_steps,
        strict_cfgpp: false,
    };
    let trajs = sample_backbone(backbone, snet.as_ref(), &spec)?;
    let range = trajs
        .iter()
        .flat_map(|t| t.records.iter().map(|r| r.w))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), w| (lo.min(w), hi.max(w)));
    let report = report_for(&mode.label(), &trajs, ring)?;
    Ok((report, range, snet))
}

/// Runs every variant; a failing variant yields an error row and the sweep
/// carries on.
pub fn sweep_with(backbone: &Backbone, ring: &RingSpec, cfg: &SweepConfig) -> Vec<SweepRow> {
    cfg.all_variants()
        .iter()
        .map(|v| match run_variant(backbone, ring, &cfg.train, &cfg.eval, v) {
            Ok((report, range, scheduler)) => SweepRow {
                name: v.name.clone(),
                report: Some(report),
                w_range: Some(range),
                error: None,
                scheduler,
            },
            Err(e) => SweepRow {
                name: v.name.clone(),
                report: None,
                w_range: None,
                error: Some(e.to_string()),
                scheduler: None,
            },
        })
        .collect()
}

pub const SWEEP_HEADER: [&str; 10] = [
    "name",
    "label",
    "n_samples",
    "adherence_rate",
    "on_manifold_rate",
    "coverage",
    "mean_w",
    "min_w",
    "max_w",
    "error",
];

fn csv_safe(s: &str) -> String {
    s.replace([',', '\n', '\r'], ";")
}

pub fn sweep_csv(rows: &[SweepRow]) -> CsvWriter {
    let mut w = CsvWriter::new(&SWEEP_HEADER);
    for r in rows {
        let mut f = vec![csv_safe(&r.name)];
        match (&r.report, r.w_range) {
            (Some(rep), Some((lo, hi))) => f.extend([
                csv_safe(&rep.label),
                rep.n_samples.to_string(),
                rep.adherence_rate.to_string(),
                rep.on_manifold_rate.to_string(),
                rep.coverage.to_string(),
                rep.mean_w.to_string(),
                lo.to_string(),
                hi.to_string(),
                String::new(),
            ]),
            _ => {
                f.extend(std::iter::repeat_n(String::new(), 8));
                f.push(format!(
                    "ERROR: {}",
                    csv_safe(r.error.as_deref().unwrap_or("unknown"))
                ));
            }
        }
        w.row(f);
    }
    w
}

/// Loads the sweep's backbone, runs it and writes the CSV table.
pub fn run_sweep(cfg: &SweepConfig, out: &Path) -> Result<Vec<SweepRow>> {
    if cfg.all_variants().is_empty() {
        return Err(LabError::EmptyInput("sweep has no variants"));
    }
    let (backbone, ring) = Backbone::load(&cfg.backbone)?;
    let rows = sweep_with(&backbone, &ring, cfg);
    sweep_csv(&rows).save(out)?;
    Ok(rows)
}
