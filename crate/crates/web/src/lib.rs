//! Browser demo. [`Lab`] is the plain Rust surface (tested natively);
//! [`WebLab`] wraps it for JavaScript and speaks JSON strings.

use guidance_lab::annealer::{default_w_grid, train_scheduler, w_heatmap, SchedulerNet, SchedulerTrainConfig};
use guidance_lab::denoiser::{train_denoiser, BackboneTrainConfig, DenoiserNet};
use guidance_lab::eval::{delta_norm_heatmap, EvalReport, GridSpec};
use guidance_lab::guidance::{sample_trajectory, GuidanceMode, SampleOptions, SamplerKind};
use guidance_lab::nn::{Checkpoint, CheckpointKind};
use guidance_lab::run::report_for;
use guidance_lab::{denoiser::checkpoint_ring, Condition, LabError, Result, RingSpec, ScheduleConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Trajectories whose w paths are returned for plotting.
const W_PATHS: usize = 16;

pub struct Lab {
    dnet: DenoiserNet,
    snet: Option<SchedulerNet>,
    ring: RingSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleView {
    pub points: Vec<[f64; 2]>,
    /// `w` per step for the first few trajectories, in sampling order.
    pub w_paths: Vec<Vec<f64>>,
    pub report: EvalReport,
    pub ring: RingSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapView {
    pub x_label: String,
    pub y_label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub min: f64,
    pub max: f64,
}

impl Lab {
    /// Small backbone and scheduler sized to train in seconds.
    pub fn quick_train(seed: u64, backbone_steps: usize, scheduler_steps: usize) -> Result<Lab> {
        let ring = RingSpec::default();
        let cfg = BackboneTrainConfig {
            steps: backbone_steps,
            batch_size: 128,
            dataset_size: 20_000,
            hidden: vec![48, 48, 48],
            seed,
            ..Default::default()
        };
        let (dnet, _) = train_denoiser(&cfg, &ring, &ScheduleConfig::default().build()?)?;
        let snet = if scheduler_steps > 0 {
            let scfg = SchedulerTrainConfig {
                steps: scheduler_steps,
                hidden: vec![64, 64],
                delta_probes: 2000,
                seed,
                ..Default::default()
            };
            Some(train_scheduler(&scfg, &dnet)?.0)
        } else {
            None
        };
        Ok(Lab { dnet, snet, ring })
    }

    /// Loads checkpoint JSON as written by the command line tool.
    pub fn from_checkpoints(backbone: &str, scheduler: Option<&str>) -> Result<Lab> {
        let ck = Checkpoint::from_json(backbone)?;
        if ck.kind != CheckpointKind::Denoiser {
            return Err(LabError::InvalidConfig("the demo needs a diffusion backbone checkpoint".into()));
        }
        let dnet = DenoiserNet::from_checkpoint(&ck)?;
        let snet = scheduler
            .map(|s| SchedulerNet::from_checkpoint(&Checkpoint::from_json(s)?))
            .transpose()?;
        if let Some(s) = &snet {
            if s.steps() != dnet.schedule().steps() {
                return Err(LabError::InvalidConfig("scheduler and backbone disagree on the step count".into()));
            }
        }
        Ok(Lab {
            dnet,
            snet,
            ring: checkpoint_ring(&ck),
        })
    }

    pub fn has_scheduler(&self) -> bool {
        self.snet.is_some()
    }

    pub fn sample(&self, mode: GuidanceMode, sampler: SamplerKind, c: f64, n: usize, seed_base: u64) -> Result<SampleView> {
        if n == 0 {
            return Err(LabError::EmptyInput("need at least one sample"));
        }
        let opts = SampleOptions::with_sampler(sampler);
        let trajs = (0..n as u64)
            .map(|i| {
                sample_trajectory(&self.dnet, &mode, self.snet.as_ref(), &opts, Condition::angle(c), seed_base + i)
            })
            .collect::<Result<Vec<_>>>()?;
        let report = report_for(&mode.label(), &trajs, &self.ring)?;
        Ok(SampleView {
            points: trajs.iter().map(|t| t.final_z.to_array()).collect(),
            w_paths: trajs
                .iter()
                .take(W_PATHS)
                .map(|t| t.records.iter().map(|r| r.w).collect())
                .collect(),
            report,
            ring: self.ring,
        })
    }

    pub fn delta_heatmap(&self, t: usize, c: f64, n: usize) -> Result<HeatmapView> {
        let grid = GridSpec {
            n,
            ..Default::default()
        };
        let h = delta_norm_heatmap(&self.dnet, t, c, &grid)?;
        let (min, max) = h.min_max();
        Ok(HeatmapView {
            x_label: h.x_label,
            y_label: h.y_label,
            xs: h.xs,
            ys: h.ys,
            values: h.values,
            min,
            max,
        })
    }

    /// `w` over diffusion step (rows) and `|delta|` (columns).
    pub fn w_heatmap(&self, lambda: f64) -> Result<HeatmapView> {
        let snet = self
            .snet
            .as_ref()
            .ok_or_else(|| LabError::InvalidConfig("no scheduler loaded".into()))?;
        let (ts, ds) = default_w_grid(snet);
        let values = w_heatmap(snet, lambda, &ts, &ds)?;
        let (min, max) = values
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Ok(HeatmapView {
            x_label: "delta_norm".into(),
            y_label: "t".into(),
            xs: ds,
            ys: ts.iter().map(|&t| t as f64).collect(),
            values,
            min,
            max,
        })
    }
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> std::result::Result<String, JsError> {
    serde_json::to_string(v).map_err(js_err)
}

#[wasm_bindgen]
pub struct WebLab(Lab);

#[wasm_bindgen]
impl WebLab {
    #[wasm_bindgen(js_name = quickTrain)]
    pub fn quick_train(seed: u32, backbone_steps: u32, scheduler_steps: u32) -> std::result::Result<WebLab, JsError> {
        Lab::quick_train(seed.into(), backbone_steps as usize, scheduler_steps as usize)
            .map(WebLab)
            .map_err(js_err)
    }

    /// `scheduler` may be empty.
    pub fn load(backbone: &str, scheduler: &str) -> std::result::Result<WebLab, JsError> {
        let s = (!scheduler.trim().is_empty()).then_some(scheduler);
        Lab::from_checkpoints(backbone, s).map(WebLab).map_err(js_err)
    }

    #[wasm_bindgen(js_name = hasScheduler)]
    pub fn has_scheduler(&self) -> bool {
        self.0.has_scheduler()
    }

    /// `mode` is cfg, cfgpp or anneal; `param` is w or lambda accordingly.
    pub fn sample(
        &self,
        mode: &str,
        param: f64,
        sampler: &str,
        c: f64,
        n: u32,
        seed_base: u32,
    ) -> std::result::Result<String, JsError> {
        let mode = match mode {
            "cfg" => GuidanceMode::Cfg { w: param },
            "cfgpp" => GuidanceMode::Cfgpp { w: param },
            "anneal" => GuidanceMode::Anneal { lambda: param },
            m => return Err(JsError::new(&format!("unknown mode \"{m}\""))),
        };
        let sampler: SamplerKind = sampler.parse().map_err(js_err)?;
        to_json(&self.0.sample(mode, sampler, c, n as usize, seed_base.into()).map_err(js_err)?)
    }

    #[wasm_bindgen(js_name = deltaHeatmap)]
    pub fn delta_heatmap(&self, t: u32, c: f64, n: u32) -> std::result::Result<String, JsError> {
        to_json(&self.0.delta_heatmap(t as usize, c, n as usize).map_err(js_err)?)
    }

    #[wasm_bindgen(js_name = wHeatmap)]
    pub fn w_heatmap(&self, lambda: f64) -> std::result::Result<String, JsError> {
        to_json(&self.0.w_heatmap(lambda).map_err(js_err)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lab() -> Lab {
        Lab::quick_train(3, 60, 10).unwrap()
    }

    #[test]
    fn sample_view_shapes() {
        let l = lab();
        let v = l.sample(GuidanceMode::Anneal { lambda: 0.5 }, SamplerKind::Ddim, 2.0, 20, 0).unwrap();
        assert_eq!(v.points.len(), 20);
        assert_eq!(v.w_paths.len(), W_PATHS);
        assert!(v.w_paths.iter().all(|p| p.len() == 50));
        assert_eq!(v.report.n_samples, 20);
        let again = l.sample(GuidanceMode::Anneal { lambda: 0.5 }, SamplerKind::Ddim, 2.0, 20, 0).unwrap();
        assert_eq!(v, again);
    }

    #[test]
    fn heatmaps() {
        let l = lab();
        let h = l.delta_heatmap(1, 0.3, 12).unwrap();
        assert_eq!((h.xs.len(), h.values.len(), h.values[0].len()), (12, 12, 12));
        assert!(h.min <= h.max);
        let w = l.w_heatmap(0.7).unwrap();
        assert_eq!((w.ys.len(), w.xs.len()), (50, 32));
        assert!(l.delta_heatmap(51, 0.3, 4).is_err());
    }

    #[test]
    fn checkpoint_load_matches_original() {
        let l = lab();
        let bb = l.dnet.to_checkpoint(&l.ring, &BackboneTrainConfig::default()).to_json().unwrap();
        let sn = l.snet.as_ref().unwrap().to_checkpoint(serde_json::json!({})).to_json().unwrap();
        let back = Lab::from_checkpoints(&bb, Some(&sn)).unwrap();
        let mode = GuidanceMode::Anneal { lambda: 0.2 };
        assert_eq!(
            l.sample(mode, SamplerKind::Euler, 1.0, 5, 9).unwrap(),
            back.sample(mode, SamplerKind::Euler, 1.0, 5, 9).unwrap()
        );
        assert!(Lab::from_checkpoints(&sn, None).is_err());
        assert!(Lab::from_checkpoints("{", None).is_err());
    }

    #[test]
    fn missing_scheduler_is_an_error() {
        let l = Lab::quick_train(1, 20, 0).unwrap();
        assert!(!l.has_scheduler());
        assert!(l.w_heatmap(0.5).is_err());
        assert!(l.sample(GuidanceMode::Anneal { lambda: 0.5 }, SamplerKind::Ddim, 0.0, 3, 0).is_err());
        assert!(l.sample(GuidanceMode::Cfgpp { w: 0.2 }, SamplerKind::Ddim, 0.0, 3, 0).is_ok());
    }
}
