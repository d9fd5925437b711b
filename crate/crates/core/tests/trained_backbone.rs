mod common;

use std::f64::consts::TAU;

use guidance_lab::eval::{adherence_rate, on_manifold_rate};
use guidance_lab::guidance::{sample_many, sample_trajectory, GuidanceMode, SampleOptions};
use guidance_lab::plot::export_plots;
use guidance_lab::run::{reevaluate, run_eval, RunConfig};
use guidance_lab::toyworld::angular_distance;
use guidance_lab::{Condition, RingSpec, Vec2};

fn endpoints(mode: GuidanceMode, c: f64, n: u64) -> Vec<Vec2> {
    let dnet = common::denoiser(0);
    let seeds: Vec<u64> = (0..n).map(|i| 5000 + i).collect();
    let opts = SampleOptions::default();
    sample_many(&seeds, |s| sample_trajectory(&dnet, &mode, None, &opts, Condition::angle(c), s))
        .unwrap()
        .iter()
        .map(|t| t.final_z)
        .collect()
}

#[test]
fn unconditional_samples_fill_the_ring() {
    let pts = endpoints(GuidanceMode::Cfg { w: 0.0 }, 0.0, 500);
    let on = on_manifold_rate(&pts, &RingSpec::default(), 3.0).unwrap();
    assert!(on >= 0.9, "on-manifold {on}");
    let mut bins = [0usize; 8];
    for p in &pts {
        let a = p.y.atan2(p.x).rem_euclid(TAU);
        bins[((a / TAU * 8.0) as usize).min(7)] += 1;
    }
    assert!(bins.iter().all(|&b| b >= 20), "angular bins {bins:?}");
}

#[test]
fn conditional_mass_concentrates_near_target() {
    let c = 1.0;
    let pts = endpoints(GuidanceMode::Cfg { w: 1.0 }, c, 400);
    // Three nearest of sixteen angular bins.
    let half = 1.5 * TAU / 16.0;
    let near = pts
        .iter()
        .filter(|p| angular_distance(p.y.atan2(p.x), c) <= half)
        .count() as f64
        / pts.len() as f64;
    assert!(near >= 0.6, "mass near target {near}");
}

#[test]
fn cfgpp_adherence_grows_with_scale() {
    let c = 2.5;
    let rates: Vec<f64> = [0.0, 0.05, 0.1, 0.2]
        .iter()
        .map(|&w| adherence_rate(&endpoints(GuidanceMode::Cfgpp { w }, c, 300), c, std::f64::consts::PI / 64.0).unwrap())
        .collect();
    assert!(rates.windows(2).all(|p| p[1] >= p[0] - 0.02), "adherence {rates:?}");
    assert!(rates[3] > rates[0] + 0.5, "adherence {rates:?}");
}

#[test]
fn run_directory_reevaluates_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let dnet = common::denoiser(0);
    let bb = dir.path().join("backbone.json");
    dnet.to_checkpoint(&RingSpec::default(), &common::backbone_config(0))
        .save(&bb)
        .unwrap();
    let cfg = RunConfig {
        backbone: bb,
        scheduler: None,
        mode: "cfgpp".into(),
        w: Some(0.15),
        lambda: None,
        sampler: Default::default(),
        c: 0.7,
        seeds: 40,
        seed_base: 0,
        out: dir.path().join("run"),
        ring: None,
        schedule: None,
        flow_steps: 100,
        strict_cfgpp: false,
    };
    let report = run_eval(&cfg).unwrap();
    assert_eq!(report.n_samples, 40);
    assert_eq!(reevaluate(&cfg.out).unwrap(), report);
    let plots = export_plots(&cfg.out).unwrap();
    assert!(!plots.is_empty());
    for p in plots {
        let svg = std::fs::read_to_string(&p).unwrap();
        assert!(svg.starts_with("<svg"), "{}", p.display());
    }
}
