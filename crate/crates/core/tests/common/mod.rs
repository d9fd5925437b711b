//! Trained fixtures shared by the integration tests. Trained networks are
//! cached as checkpoints under the cargo target tmpdir keyed by a hash of
//! their full configuration, so separate test binaries reuse them.

#![allow(dead_code)]

use std::path::PathBuf;

use guidance_lab::annealer::{train_flow_scheduler, train_scheduler, SchedulerNet, SchedulerTrainConfig};
use guidance_lab::denoiser::{train_denoiser, train_velocity, BackboneTrainConfig, DenoiserNet, VelocityNet};
use guidance_lab::nn::Checkpoint;
use guidance_lab::{RingSpec, ScheduleConfig};
use sha2::{Digest, Sha256};

/// Bump when training code changes in a way that invalidates cached nets.
const FIXTURE_VERSION: &str = "v1";

fn cache_path(kind: &str, key: &serde_json::Value) -> PathBuf {
    let digest = Sha256::digest(format!("{FIXTURE_VERSION}{key}").as_bytes());
    PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
        .join("fixtures")
        .join(format!("{kind}_{}.json", &hex::encode(digest)[..16]))
}

fn cached<T>(
    kind: &str,
    key: serde_json::Value,
    load: impl Fn(&Checkpoint) -> T,
    train: impl FnOnce() -> (T, Checkpoint),
) -> T {
    let path = cache_path(kind, &key);
    if let Ok(ck) = Checkpoint::load(&path) {
        return load(&ck);
    }
    let (net, ck) = train();
    ck.save(&path).expect("write fixture");
    net
}

pub fn backbone_config(seed: u64) -> BackboneTrainConfig {
    BackboneTrainConfig {
        seed,
        ..Default::default()
    }
}

/// Fully trained noise predictor on the default ring and schedule.
pub fn denoiser(seed: u64) -> DenoiserNet {
    denoiser_with(&backbone_config(seed))
}

pub fn denoiser_with(cfg: &BackboneTrainConfig) -> DenoiserNet {
    let ring = RingSpec::default();
    let sched = ScheduleConfig::default();
    let key = serde_json::json!({"train": cfg, "ring": ring, "schedule": sched});
    cached(
        "denoiser",
        key,
        |ck| DenoiserNet::from_checkpoint(ck).expect("fixture"),
        || {
            let (d, _) = train_denoiser(cfg, &ring, &sched.build().unwrap()).expect("train");
            let ck = d.to_checkpoint(&ring, cfg);
            (d, ck)
        },
    )
}

pub fn velocity(seed: u64) -> VelocityNet {
    let cfg = backbone_config(seed);
    let ring = RingSpec::default();
    let key = serde_json::json!({"train": cfg, "ring": ring});
    cached(
        "velocity",
        key,
        |ck| VelocityNet::from_checkpoint(ck).expect("fixture"),
        || {
            let (v, _) = train_velocity(&cfg, &ring).expect("train");
            let ck = v.to_checkpoint(&ring, &cfg);
            (v, ck)
        },
    )
}

pub fn scheduler(cfg: &SchedulerTrainConfig, dnet: &DenoiserNet) -> SchedulerNet {
    let key = serde_json::json!({"train": cfg, "backbone": dnet.hash()});
    cached(
        "scheduler",
        key,
        |ck| SchedulerNet::from_checkpoint(ck).expect("fixture"),
        || {
            let (s, _) = train_scheduler(cfg, dnet).expect("train");
            let ck = s.to_checkpoint(serde_json::json!({}));
            (s, ck)
        },
    )
}

pub fn flow_scheduler(cfg: &SchedulerTrainConfig, vnet: &VelocityNet) -> SchedulerNet {
    let key = serde_json::json!({"train": cfg, "backbone": vnet.hash()});
    cached(
        "flow_scheduler",
        key,
        |ck| SchedulerNet::from_checkpoint(ck).expect("fixture"),
        || {
            let (s, _) = train_flow_scheduler(cfg, vnet).expect("train");
            let ck = s.to_checkpoint(serde_json::json!({}));
            (s, ck)
        },
    )
}
