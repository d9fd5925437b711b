use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_guidance-lab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn guidance-lab")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn fails(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(err.trim_end().lines().count(), 1, "multi-line error: {err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Lab {
    dir: tempfile::TempDir,
}

impl Lab {
    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.p(name);
        std::fs::write(&p, text).unwrap();
        p
    }
}

/// Small backbone plus scheduler, trained through the CLI.
fn lab() -> Lab {
    let lab = Lab {
        dir: tempfile::tempdir().unwrap(),
    };
    let bcfg = lab.write(
        "backbone.json",
        r#"{"steps": 150, "batch_size": 64, "dataset_size": 2000, "hidden": [16, 16]}"#,
    );
    let scfg = lab.write("sched.json", r#"{"steps": 30, "hidden": [16], "delta_probes": 200}"#);
    ok(&["train-denoiser", "--config", s(&bcfg), "--out", s(&lab.p("dn.json"))]);
    ok(&[
        "train-scheduler",
        "--backbone",
        s(&lab.p("dn.json")),
        "--config",
        s(&scfg),
        "--out",
        s(&lab.p("sn.json")),
    ]);
    lab
}

fn sample_args(lab: &Lab, out: &Path, extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = [
        "sample",
        "--backbone",
        s(&lab.p("dn.json")),
        "--sampler",
        "ddim",
        "--c",
        "2.356194490192345",
        "--seeds",
        "12",
        "--out",
        s(out),
    ]
    .iter()
    .map(|x| x.to_string())
    .collect();
    v.extend(extra.iter().map(|x| x.to_string()));
    v
}

fn ok_vec(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&refs)
}

#[test]
fn full_pipeline_is_deterministic() {
    let lab = lab();
    let sn = lab.p("sn.json");
    let (a, b) = (lab.p("run_a"), lab.p("run_b"));
    for out in [&a, &b] {
        ok_vec(&sample_args(&lab, out, &["--mode", "anneal", "--lambda", "0.7", "--scheduler", s(&sn)]));
    }
    // run.json records its own output path, so it is left out.
    for f in ["report.json", "traj_0.csv", "traj_11.csv"] {
        let x = std::fs::read(a.join(f)).unwrap();
        let y = std::fs::read(b.join(f)).unwrap();
        assert!(x == y, "{f} differs between reruns");
    }
    // `eval` recomputes exactly what `sample` reported.
    let printed = ok(&["eval", "--run", s(&a)]).stdout;
    let re: serde_json::Value = serde_json::from_slice(&printed).unwrap();
    let stored: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(re, stored, "{re:#} vs {stored:#}");

    ok(&["plot", "--run", s(&a)]);
    assert!(a.join("plots/scatter.svg").exists() && a.join("plots/w.svg").exists());

    ok(&[
        "heatmap",
        "--backbone",
        s(&lab.p("dn.json")),
        "--t",
        "1",
        "--c",
        "2.356",
        "--grid",
        "8",
        "--out",
        s(&lab.p("heat.csv")),
    ]);
    let heat = std::fs::read_to_string(lab.p("heat.csv")).unwrap();
    assert_eq!(heat.lines().count(), 65);
    ok(&["whmap", "--scheduler", s(&sn), "--lambda", "0.5", "--out", s(&lab.p("w.csv"))]);
    let wmap = std::fs::read_to_string(lab.p("w.csv")).unwrap();
    assert_eq!(wmap.lines().next(), Some("delta_norm,t,w"));
    assert_eq!(wmap.lines().count(), 1 + 50 * 32);
}

#[test]
fn training_is_deterministic_and_flags_reach_config() {
    let lab = lab();
    let scfg = lab.p("sched.json");
    let args = |out: &str| {
        vec![
            "train-scheduler".to_string(),
            "--backbone".into(),
            s(&lab.p("dn.json")).into(),
            "--config".into(),
            s(&scfg).into(),
            "--constrain-w".into(),
            "--no-t".into(),
            "--perturb-s".into(),
            "0.1".into(),
            "--out".into(),
            s(&lab.p(out)).into(),
        ]
    };
    ok_vec(&args("c1.json"));
    ok_vec(&args("c2.json"));
    let a = std::fs::read(lab.p("c1.json")).unwrap();
    assert_eq!(a, std::fs::read(lab.p("c2.json")).unwrap());
    let ck: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(ck["meta"]["ablation"]["constrain_w"], true);
    assert_eq!(ck["meta"]["ablation"]["use_t"], false);
    assert_eq!(ck["meta"]["train"]["perturb"]["s"], 0.1);
    assert!(ck["meta"]["backbone_hash"].is_string());

    // A constrained scheduler only emits w in (0, 1).
    let out = lab.p("run_c");
    ok_vec(&sample_args(&lab, &out, &["--mode", "anneal", "--lambda", "0.3", "--scheduler", s(&lab.p("c1.json"))]));
    let rep: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    let w = rep["mean_w"].as_f64().unwrap();
    assert!(w > 0.0 && w < 1.0);
}

#[test]
fn thread_count_does_not_change_results() {
    let lab = lab();
    let mut reports = Vec::new();
    for threads in ["1", "3"] {
        let out = lab.p(&format!("run_{threads}"));
        let args = sample_args(&lab, &out, &["--mode", "cfgpp", "--w", "0.2"]);
        let st = bin().args(&args).env("GUIDANCE_LAB_THREADS", threads).output().unwrap();
        assert!(st.status.success());
        reports.push(std::fs::read(out.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn sweep_writes_one_row_per_variant() {
    let lab = lab();
    let cfg = lab.write(
        "sweep.json",
        r#"{"backbone": "dn.json", "train": {"steps": 5, "hidden": [8], "delta_probes": 50},
            "eval": {"seeds": 6}, "preset": "perturb_s",
            "variants": [{"name": "cfgpp 0.15", "constant": {"mode": "cfgpp", "w": 0.15}}]}"#,
    );
    ok(&["sweep", "--config", s(&cfg), "--out", s(&lab.p("sweep.csv"))]);
    let text = std::fs::read_to_string(lab.p("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(!text.contains("ERROR"));
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = dir.path().join("out");
    let e = fails(&[
        "sample", "--backbone", s(&missing), "--mode", "cfg", "--w", "1", "--c", "0", "--seeds", "2", "--out",
        s(&out),
    ]);
    assert!(e.contains("nope.json"), "{e}");
    assert!(!out.exists());

    fails(&["sample", "--bogus-flag"]);
    fails(&["eval", "--run", s(dir.path())]);
    fails(&["plot", "--run", s(dir.path())]);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"stpes": 10}"#).unwrap();
    let e = fails(&["train-denoiser", "--config", s(&bad), "--out", s(&dir.path().join("x.json"))]);
    assert!(e.contains("stpes"), "{e}");

    let garbage = dir.path().join("garbage.json");
    std::fs::write(&garbage, "not json").unwrap();
    let e = fails(&["whmap", "--scheduler", s(&garbage), "--lambda", "0.5", "--out", s(&out)]);
    assert!(e.contains("garbage.json"), "{e}");

    let st = bin()
        .args(["eval", "--run", s(dir.path())])
        .env("GUIDANCE_LAB_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!st.status.success());
    assert!(String::from_utf8_lossy(&st.stderr).contains("GUIDANCE_LAB_THREADS"));
}

#[test]
fn mode_checkpoint_mismatch_is_rejected() {
    let lab = lab();
    let out = lab.p("r");
    let args = sample_args(&lab, &out, &["--mode", "anneal", "--lambda", "0.5"]);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let e = fails(&refs);
    assert!(e.contains("scheduler"), "{e}");
    let args = sample_args(&lab, &out, &["--mode", "cfgpp", "--w", "0.2", "--scheduler", s(&lab.p("sn.json"))]);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    fails(&refs);
    // A scheduler cannot be fed as a backbone.
    let e = fails(&[
        "heatmap", "--backbone", s(&lab.p("sn.json")), "--t", "1", "--c", "0", "--out", s(&lab.p("h.csv")),
    ]);
    assert!(e.contains("sn.json"), "{e}");
}

#[test]
fn flow_backbone_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("f.json");
    std::fs::write(&cfg, r#"{"steps": 100, "batch_size": 32, "dataset_size": 500, "hidden": [16]}"#).unwrap();
    let ck = dir.path().join("flow.json");
    ok(&["train-flow", "--config", s(&cfg), "--out", s(&ck)]);
    let out = dir.path().join("run");
    ok(&[
        "sample", "--backbone", s(&ck), "--mode", "cfg", "--w", "1.5", "--sampler", "euler", "--c", "1.0",
        "--seeds", "5", "--flow-steps", "20", "--out", s(&out),
    ]);
    assert!(out.join("traj_4.csv").exists());
    ok(&["heatmap", "--backbone", s(&ck), "--t", "0.5", "--c", "1.0", "--grid", "4", "--out", s(&dir.path().join("h.csv"))]);
}
