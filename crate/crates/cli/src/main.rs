use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use coperception::gridcore::params::ParamStore;
use coperception::numerics::gradient_suite;
use coperception::pipeline::output::{
    ablation_csv, detections_file, metrics_csv, metrics_json, sweep_csv, write_map, Format, Provenance,
};
use coperception::pipeline::{
    ablation_run, evaluate, run_frame, sweep, toy_config, train_toy, Episode, FusionMode, Model, Optimizer, RunConfig,
    Suite, SweepAxis, TrainConfig, Variant, TOY_LR, TOY_STEPS,
};

#[derive(Parser)]
#[command(name = "coperception", version, about = "Collaborative BEV perception simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and dump its worlds.
    Generate(Common),
    /// Detect on every evaluation frame and write metrics and detections.
    Run(RunArgs),
    /// Evaluate a set of component variants on the seeded suite.
    Ablate(AblateArgs),
    /// Evaluate along a noise or bandwidth axis.
    Sweep(SweepArgs),
    /// Train on the first evaluation frame and save the weights.
    Train(TrainArgs),
    /// Check every differentiable op against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Common {
    /// Scenario TOML, optionally with a `[run]` table.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<FusionMode>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
}

#[derive(Args)]
struct Evaluation {
    /// Weight snapshot; tensors are matched by name and shape.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Number of seeded scenarios, starting at the config seed.
    #[arg(long, default_value_t = 1)]
    suite: usize,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    eval: Evaluation,
    /// Write attention, importance and mask maps of every frame.
    #[arg(long)]
    dump_maps: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Study {
    Ladder,
    Frames,
    Keypoints,
    Features,
    Fusion,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    eval: Evaluation,
    #[arg(long, value_enum, default_value_t = Study::Ladder)]
    study: Study,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    eval: Evaluation,
    /// noise-xyz (m), noise-heading (deg) or bandwidth (selection threshold).
    #[arg(long, value_parser = parse_axis)]
    axis: SweepAxis,
    /// Comma-separated grid values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Gd,
    Adam,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = TOY_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = TOY_LR)]
    lr: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
        }
    }
}

fn parse_mode(s: &str) -> Result<FusionMode, String> {
    s.parse().map_err(|e: coperception::Error| e.to_string())
}

fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    s.parse().map_err(|e: coperception::Error| e.to_string())
}

fn load_config(c: &Common, default: RunConfig) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => default,
    };
    if let Some(seed) = c.seed {
        cfg.scenario.seed = seed;
    }
    if let Some(mode) = c.mode {
        cfg.run.mode = mode;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn default_config() -> RunConfig {
    RunConfig::desk(2, 5, 0)
}

fn load_model(cfg: &RunConfig, weights: Option<&Path>) -> Result<(Model, Option<ParamStore>)> {
    let mut model = Model::for_config(cfg)?;
    let snapshot = match weights {
        Some(path) => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let store = ParamStore::from_snapshot_bytes(&bytes)?;
            let copied = model.load_matching(&store);
            eprintln!("loaded {copied} of {} tensors from {}", model.store.len(), path.display());
            Some(store)
        }
        None => None,
    };
    Ok((model, snapshot))
}

fn suite(cfg: &RunConfig, eval: &Evaluation) -> Result<Vec<Episode>> {
    if eval.suite == 0 {
        bail!("--suite must be at least 1");
    }
    Ok(Suite::seeded(&cfg.scenario, eval.suite).episodes()?)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(path)
}

#[derive(Serialize)]
struct Table<'a, T> {
    provenance: &'a Provenance,
    rows: &'a [T],
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn generate(c: &Common) -> Result<()> {
    let cfg = load_config(c, default_config())?;
    let ep = Episode::simulate(&cfg.scenario)?;
    write(&c.out, "scenario.toml", &cfg.to_toml())?;
    write(&c.out, "worlds.json", &json(&ep.worlds)?)?;
    let points: Vec<Vec<usize>> = ep.clouds.iter().map(|f| f.iter().map(|c| c.len()).collect()).collect();
    write(&c.out, "points.json", &json(&points)?)?;
    Ok(())
}

fn run(a: &RunArgs) -> Result<()> {
    let cfg = load_config(&a.common, default_config())?;
    let (model, _) = load_model(&cfg, a.eval.weights.as_deref())?;
    let episodes = suite(&cfg, &a.eval)?;
    let summary = evaluate(&cfg, &model, &episodes)?;
    let prov = Provenance::of(&cfg, &model);
    let out = &a.common.out;
    match Format::from(a.common.format) {
        Format::Csv => write(out, "metrics.csv", &metrics_csv(&prov, &summary.per_frame, &summary))?,
        Format::Json => write(out, "metrics.json", &metrics_json(&prov, &summary.per_frame, &summary))?,
    };
    let mut frames = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        for t in cfg.eval_frames() {
            let r = run_frame(ep, t, &cfg, &model)?;
            if a.dump_maps {
                let dir = out.join("maps").join(format!("scene{e}_frame{t}"));
                fs::create_dir_all(&dir)?;
                for m in &r.maps {
                    write_map(&dir, m)?;
                }
            }
            let t_global = e * cfg.scenario.frames + t;
            frames.push((t_global, r.detections));
        }
    }
    write(out, "detections.csv", &detections_file(&prov, &frames))?;
    println!(
        "{} frames  AP@0.5 {:.4}  AP@0.7 {:.4}  mean bytes {:.1}  log2 {:.3}",
        summary.frames, summary.ap50, summary.ap70, summary.mean_bytes, summary.log2_bytes
    );
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let cfg = load_config(&a.common, default_config())?;
    let (model, snapshot) = load_model(&cfg, a.eval.weights.as_deref())?;
    let episodes = suite(&cfg, &a.eval)?;
    let variants = match a.study {
        Study::Ladder => Variant::ladder(&cfg),
        Study::Frames => Variant::frame_study(&cfg),
        Study::Keypoints => Variant::keypoint_study(&cfg),
        Study::Features => Variant::feature_study(&cfg),
        Study::Fusion => Variant::fusion_study(&cfg),
    };
    let rows = ablation_run(&cfg, &variants, &episodes, snapshot.as_ref())?;
    let prov = Provenance::of(&cfg, &model);
    for r in &rows {
        println!("{:<28} AP@0.5 {:.4}  AP@0.7 {:.4}  log2 bytes {:.3}", r.label, r.ap50, r.ap70, r.log2_bytes);
    }
    match Format::from(a.common.format) {
        Format::Csv => write(&a.common.out, "ablation.csv", &ablation_csv(&prov, &rows))?,
        Format::Json => write(&a.common.out, "ablation.json", &json(&Table { provenance: &prov, rows: &rows })?)?,
    };
    Ok(())
}

fn sweep_cmd(a: &SweepArgs) -> Result<()> {
    let cfg = load_config(&a.common, default_config())?;
    let (model, _) = load_model(&cfg, a.eval.weights.as_deref())?;
    let episodes = suite(&cfg, &a.eval)?;
    let records = sweep(&cfg, a.axis, &a.values, &model, &episodes)?;
    let prov = Provenance::of(&cfg, &model);
    for r in &records {
        println!("{} = {:<6} AP@0.5 {:.4}  AP@0.7 {:.4}  log2 bytes {:.3}", r.axis, r.value, r.ap50, r.ap70, r.log2_bytes);
    }
    match Format::from(a.common.format) {
        Format::Csv => write(&a.common.out, "sweep.csv", &sweep_csv(&prov, &records))?,
        Format::Json => write(&a.common.out, "sweep.json", &json(&Table { provenance: &prov, rows: &records })?)?,
    };
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = load_config(&a.common, toy_config())?;
    let ep = Episode::simulate(&cfg.scenario)?;
    let mut model = Model::for_config(&cfg)?;
    let mut tc = TrainConfig::toy(&cfg);
    tc.steps = a.steps;
    tc.lr = a.lr;
    tc.optimizer = match a.optimizer {
        OptimizerArg::Gd => Optimizer::Gd,
        OptimizerArg::Adam => Optimizer::adam(),
    };
    let report = train_toy(&mut model, &ep, &cfg, &tc)?;
    let out = &a.common.out;
    let mut losses = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        losses.push_str(&format!("{i},{l}\n"));
    }
    losses.push_str(&format!("{},{}\n", report.losses.len(), report.final_loss));
    write(out, "loss.csv", &losses)?;
    fs::create_dir_all(out)?;
    let weights = out.join("weights.bin");
    fs::write(&weights, model.store.to_snapshot_bytes())?;
    println!("wrote {}", weights.display());
    println!(
        "loss {:.6} -> {:.6} ({:.1}% lower), weights {}",
        report.initial_loss(),
        report.final_loss,
        100.0 * report.reduction(),
        model.weights_hash()
    );
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let checks = gradient_suite(a.eps, a.seed)?;
    let mut ok = true;
    for c in &checks {
        let pass = c.report.max_rel_error < a.tolerance;
        ok &= pass;
        println!(
            "{:<32} {:>6} coords  max rel {:.3e}  {}",
            c.name,
            c.report.coordinates,
            c.report.max_rel_error,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(c) => generate(c).map(|_| true),
        Command::Run(a) => run(a).map(|_| true),
        Command::Ablate(a) => ablate(a).map(|_| true),
        Command::Sweep(a) => sweep_cmd(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
