//! `guidance-lab` command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use guidance_lab::annealer::{
    default_w_grid, train_flow_scheduler, train_scheduler, w_heatmap, SchedulerTrainConfig,
};
use guidance_lab::denoiser::{train_denoiser, train_velocity, BackboneTrainConfig};
use guidance_lab::eval::{delta_norm_heatmap, flow_delta_heatmap, GridSpec, Heatmap};
use guidance_lab::guidance::SamplerKind;
use guidance_lab::io::{merge_json, read_json, CsvWriter};
use guidance_lab::plot::export_plots;
use guidance_lab::run::{load_scheduler, reevaluate, run_eval, Backbone, RunConfig};
use guidance_lab::sweep::{run_sweep, SweepConfig};
use guidance_lab::{RingSpec, ScheduleConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

#[derive(Parser)]
#[command(name = "guidance-lab", version, about = "Toy ring diffusion and flow guidance lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a conditional noise predictor.
    TrainDenoiser(TrainBackbone),
    /// Train a conditional velocity field.
    TrainFlow(TrainBackbone),
    /// Train a guidance scheduler against a frozen backbone.
    TrainScheduler(TrainScheduler),
    /// Sample trajectories, score them and write a run directory.
    Sample(Sample),
    /// Recompute a run's report from its trajectory CSVs.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Write the log |delta| heatmap of a backbone as CSV.
    Heatmap(HeatmapArgs),
    /// Write the scheduler's w over (t, |delta|) as CSV.
    Whmap {
        #[arg(long)]
        scheduler: PathBuf,
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate a list of variants into one CSV table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's backbone path.
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Render a run directory's CSVs as SVG.
    Plot {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Args)]
struct TrainBackbone {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dataset_size: Option<usize>,
    /// Per-step loss CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TrainScheduler {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train with lambda fixed at this value instead of uniform.
    #[arg(long)]
    lambda_fixed: Option<f64>,
    #[arg(long)]
    no_t: bool,
    #[arg(long)]
    no_delta: bool,
    #[arg(long)]
    constrain_w: bool,
    #[arg(long)]
    no_renoise: bool,
    #[arg(long)]
    no_perturb: bool,
    #[arg(long)]
    perturb_s: Option<f64>,
    /// Per-step loss CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct Sample {
    /// Run config JSON; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long)]
    scheduler: Option<PathBuf>,
    /// cfg, cfgpp or anneal.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    sampler: Option<SamplerKind>,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    w: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    seed_base: Option<u64>,
    #[arg(long)]
    flow_steps: Option<usize>,
    #[arg(long)]
    strict_cfgpp: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    backbone: PathBuf,
    /// Diffusion step (integer) or flow time in [0, 1].
    #[arg(long)]
    t: f64,
    #[arg(long)]
    c: f64,
    #[arg(long)]
    out: PathBuf,
    /// Points per axis.
    #[arg(long, default_value_t = 64)]
    grid: usize,
}

fn read_config(path: Option<&Path>) -> Result<Value> {
    match path {
        Some(p) => read_json(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(json!({})),
    }
}

fn set<T: Serialize>(m: &mut Map<String, Value>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        m.insert(key.into(), serde_json::to_value(v).expect("serializable flag"));
    }
}

fn collect_keys(v: &Value, prefix: &str, out: &mut Vec<String>) {
    if let Value::Object(m) = v {
        for (k, x) in m {
            let key = format!("{prefix}{k}");
            collect_keys(x, &format!("{key}."), out);
            out.push(key);
        }
    }
}

/// Deserializes `v` and rejects keys the target type silently dropped, so
/// config typos do not pass as defaults.
fn parse_strict<T: Serialize + DeserializeOwned>(v: Value, what: &str) -> Result<T> {
    let parsed: T = serde_json::from_value(v.clone()).map_err(|e| anyhow!("{what}: {e}"))?;
    let back = serde_json::to_value(&parsed)?;
    let (mut want, mut have) = (Vec::new(), Vec::new());
    collect_keys(&v, "", &mut want);
    collect_keys(&back, "", &mut have);
    // Tagged enums and optional values reshape between the two, so only
    // top-level keys are compared strictly.
    if let Some(k) = want.iter().find(|k| !k.contains('.') && !have.contains(k)) {
        bail!("{what}: unknown key \"{k}\"");
    }
    Ok(parsed)
}

fn take<T: DeserializeOwned>(m: &mut Map<String, Value>, key: &str) -> Result<Option<T>> {
    m.remove(key)
        .map(|v| serde_json::from_value(v).map_err(|e| anyhow!("config key \"{key}\": {e}")))
        .transpose()
}

fn write_loss_log(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = CsvWriter::new(header);
    for (i, r) in rows.enumerate() {
        w.row(std::iter::once(i as f64).chain(r));
    }
    Ok(w.save(path)?)
}

fn cmd_train_backbone(a: TrainBackbone, flow: bool) -> Result<()> {
    let mut cfg = read_config(a.config.as_deref())?;
    let m = cfg.as_object_mut().ok_or_else(|| anyhow!("config must be a JSON object"))?;
    let ring: RingSpec = take(m, "ring")?.unwrap_or_default();
    let schedule: Option<ScheduleConfig> = take(m, "schedule")?;
    set(m, "steps", a.steps);
    set(m, "seed", a.seed);
    set(m, "batch_size", a.batch_size);
    set(m, "dataset_size", a.dataset_size);
    let train: BackboneTrainConfig = parse_strict(cfg, "training config")?;
    ring.validate()?;
    let (ckpt, log) = if flow {
        if schedule.is_some() {
            bail!("config key \"schedule\" does not apply to a flow backbone");
        }
        let (v, log) = train_velocity(&train, &ring)?;
        (v.to_checkpoint(&ring, &train), log)
    } else {
        let sched = schedule.unwrap_or_default().build()?;
        let (d, log) = train_denoiser(&train, &ring, &sched)?;
        (d.to_checkpoint(&ring, &train), log)
    };
    ckpt.save(&a.out)?;
    if let Some(p) = &a.log {
        write_loss_log(p, &["step", "loss"], log.losses.iter().map(|&l| vec![l]))?;
    }
    eprintln!("trained {} steps, final loss {:.4}, wrote {}", train.steps, log.tail_mean(100), a.out.display());
    Ok(())
}

fn cmd_train_scheduler(a: TrainScheduler) -> Result<()> {
    let (backbone, ring) = Backbone::load(&a.backbone)?;
    let mut cfg = read_config(a.config.as_deref())?;
    let m = cfg.as_object_mut().ok_or_else(|| anyhow!("config must be a JSON object"))?;
    if !m.contains_key("ring") {
        m.insert("ring".into(), serde_json::to_value(ring)?);
    }
    set(m, "steps", a.steps);
    set(m, "seed", a.seed);
    set(m, "lambda_sampling", a.lambda_fixed.map(|v| json!({"kind": "fixed", "value": v})));
    let mut patch = json!({});
    let flags = [
        (a.no_t, "use_t"),
        (a.no_delta, "use_delta_norm"),
        (a.no_renoise, "use_cfgpp_renoise"),
        (a.no_perturb, "use_perturbation"),
    ];
    for (on, key) in flags {
        if on {
            patch["ablation"][key] = json!(false);
        }
    }
    if a.constrain_w {
        patch["ablation"]["constrain_w"] = json!(true);
    }
    if let Some(s) = a.perturb_s {
        patch["perturb"]["s"] = json!(s);
    }
    merge_json(&mut cfg, &patch);
    let train: SchedulerTrainConfig = parse_strict(cfg, "scheduler config")?;
    let (snet, log) = match &backbone {
        Backbone::Diffusion(d) => train_scheduler(&train, d)?,
        Backbone::Flow(v) => train_flow_scheduler(&train, v)?,
    };
    let meta = json!({
        "backbone_hash": backbone.hash(),
        "lambda_sampling": train.lambda_sampling,
        "train": train,
    });
    snet.to_checkpoint(meta).save(&a.out)?;
    if let Some(p) = &a.log {
        let rows = log.steps.iter().map(|s| vec![s.l_delta, s.l_eps, s.combined]);
        write_loss_log(p, &["step", "l_delta", "l_eps", "combined"], rows)?;
    }
    eprintln!(
        "trained {} steps, final loss {:.4}, delta_max {:.4}, wrote {}",
        train.steps,
        log.tail_mean(100),
        snet.delta_max(),
        a.out.display()
    );
    Ok(())
}

fn cmd_sample(a: Sample) -> Result<()> {
    let mut cfg = read_config(a.config.as_deref())?;
    let m = cfg.as_object_mut().ok_or_else(|| anyhow!("config must be a JSON object"))?;
    set(m, "backbone", a.backbone);
    set(m, "scheduler", a.scheduler);
    set(m, "mode", a.mode);
    set(m, "sampler", a.sampler);
    set(m, "c", a.c);
    set(m, "w", a.w);
    set(m, "lambda", a.lambda);
    set(m, "seeds", a.seeds);
    set(m, "seed_base", a.seed_base);
    set(m, "flow_steps", a.flow_steps);
    set(m, "out", a.out);
    if a.strict_cfgpp {
        m.insert("strict_cfgpp".into(), json!(true));
    }
    let run: RunConfig = parse_strict(cfg, "run config")?;
    let report = run_eval(&run)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_heatmap(a: HeatmapArgs) -> Result<()> {
    let (backbone, _) = Backbone::load(&a.backbone)?;
    let grid = GridSpec {
        n: a.grid,
        ..Default::default()
    };
    let h = match &backbone {
        Backbone::Diffusion(d) => {
            if a.t.fract() != 0.0 || a.t < 0.0 {
                bail!("--t must be an integer step for a diffusion backbone, got {}", a.t);
            }
            delta_norm_heatmap(d, a.t as usize, a.c, &grid)?
        }
        Backbone::Flow(v) => flow_delta_heatmap(v, a.t, a.c, &grid)?,
    };
    h.to_csv().save(&a.out)?;
    Ok(())
}

fn cmd_whmap(scheduler: &Path, lambda: f64, out: &Path) -> Result<()> {
    let snet = load_scheduler(scheduler)?;
    let (ts, ds) = default_w_grid(&snet);
    let values = w_heatmap(&snet, lambda, &ts, &ds)?;
    let h = Heatmap {
        x_label: "delta_norm".into(),
        y_label: "t".into(),
        value_label: "w".into(),
        xs: ds,
        ys: ts.iter().map(|&t| t as f64).collect(),
        values,
    };
    h.to_csv().save(out)?;
    Ok(())
}

fn cmd_sweep(config: &Path, out: &Path, backbone: Option<PathBuf>) -> Result<()> {
    let mut cfg: SweepConfig =
        parse_strict(read_json(config).with_context(|| format!("reading {}", config.display()))?, "sweep config")?;
    match backbone {
        Some(b) => cfg.backbone = b,
        // Relative backbone paths are relative to the config file.
        None if cfg.backbone.is_relative() => {
            if let Some(dir) = config.parent() {
                cfg.backbone = dir.join(&cfg.backbone);
            }
        }
        None => {}
    }
    let rows = run_sweep(&cfg, out)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    eprintln!("{} variants, {failed} failed, wrote {}", rows.len(), out.display());
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("GUIDANCE_LAB_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| anyhow!("GUIDANCE_LAB_THREADS must be a positive integer, got \"{v}\""))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.cmd {
        Cmd::TrainDenoiser(a) => cmd_train_backbone(a, false),
        Cmd::TrainFlow(a) => cmd_train_backbone(a, true),
        Cmd::TrainScheduler(a) => cmd_train_scheduler(a),
        Cmd::Sample(a) => cmd_sample(a),
        Cmd::Eval { run } => {
            let report = reevaluate(&run)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Cmd::Heatmap(a) => cmd_heatmap(a),
        Cmd::Whmap { scheduler, lambda, out } => cmd_whmap(&scheduler, lambda, &out),
        Cmd::Sweep { config, out, backbone } => cmd_sweep(&config, &out, backbone),
        Cmd::Plot { run } => {
            for p in export_plots(&run)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
