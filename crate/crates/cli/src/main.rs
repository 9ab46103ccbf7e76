//! `mlfed`: ingest traces, synthesize providers, train and evaluate selectors, plot logs.
//!
//! Success prints a JSON summary on stdout. Failure prints one JSON line
//! `{"error": {"kind": .., "message": ..}}` on stderr and exits with status 1
//! (2 for usage errors).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mlfed_core::baselines::DEFAULT_ORACLE_CAP;
use mlfed_core::detection::BoxFormat;
use mlfed_core::ensemble::{Ablation, Voting};
use mlfed_core::env::RewardMode;
use mlfed_core::experiment::{
    cmd_evaluate, cmd_ingest, cmd_plot, cmd_synthesize, cmd_train, EvaluateRequest, ExperimentConfig,
    ExperimentError, IngestRequest, Method, Preset, SynthesisSource, SynthesisSpec,
};
use mlfed_core::Execution;
use serde_json::json;

#[derive(Parser)]
#[command(name = "mlfed", version, about = "Cost-aware selection and ensembling of object-detection services")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile raw provider dumps, features and ground truth into a trace.
    Ingest(IngestArgs),
    /// Add synthetic providers to a trace, or generate a preset trace.
    Synthesize(SynthArgs),
    /// Train the selection agent.
    Train(TrainArgs),
    /// Evaluate a selector on the test records.
    Evaluate(EvalArgs),
    /// Same as `evaluate --method oracle`.
    Oracle(OracleArgs),
    /// Plot AP50 and cost curves from training logs.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Coords {
    Xyxy,
    Xywh,
}

#[derive(Args)]
struct IngestArgs {
    /// Provider dump as NAME=PATH; repeat once per provider, in order.
    #[arg(long = "provider", required = true, value_parser = parse_pair)]
    providers: Vec<(String, PathBuf)>,
    /// JSON lines of {image_id, features}.
    #[arg(long)]
    features: PathBuf,
    /// JSON lines of {image_id, gt}.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "xyxy")]
    coords: Coords,
    /// Boxes are in [0,1] image coordinates.
    #[arg(long)]
    normalized: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Trace to extend.
    #[arg(long, conflicts_with = "preset")]
    base: Option<PathBuf>,
    /// TOML recipe with `seed`, optional `[scene]` and `[[provider]]` tables.
    #[arg(long, conflicts_with = "preset")]
    spec: Option<PathBuf>,
    /// Built-in trace: `expert` or `scalability`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 2000)]
    images: usize,
    /// Feature vector length for presets.
    #[arg(long, default_value_t = 8)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    WithGt,
    WithoutGt,
}

#[derive(Clone, Copy, ValueEnum)]
enum VotingArg {
    Affirmative,
    Consensus,
    Unanimous,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    None,
    Nms,
    SoftNms,
    Wbf,
}

/// Overrides applied on top of the config file.
#[derive(Args)]
struct ConfigArgs {
    /// Experiment TOML file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    beta: Option<f64>,
    #[arg(long, value_enum)]
    reward_mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    voting: Option<VotingArg>,
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    env_seed: Option<u64>,
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    explore_seed: Option<u64>,
    #[arg(long)]
    baseline_seed: Option<u64>,
    /// Disable data-parallel evaluation.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// random1, randomN, ensembleN, oracle or agent.
    #[arg(long)]
    method: String,
    /// Agent checkpoint (defaults to the output directory's).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    oracle: OracleFlags,
}

#[derive(Args)]
struct OracleFlags {
    /// Oracle: take the cheapest of the best actions.
    #[arg(long)]
    prefer_cheap: bool,
    /// Oracle: largest provider count to enumerate.
    #[arg(long, default_value_t = DEFAULT_ORACLE_CAP)]
    oracle_cap: usize,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    oracle: OracleFlags,
}

#[derive(Args)]
struct PlotArgs {
    /// Training log as LABEL=PATH or PATH; repeat per series.
    #[arg(long = "log", required = true)]
    logs: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_pair(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected NAME=PATH, got {s:?}")),
    }
}

fn load_config(a: &ConfigArgs) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load_unvalidated(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = &a.trace {
        cfg.trace = v.clone();
    }
    if let Some(v) = &a.output_dir {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.steps_per_epoch {
        cfg.steps_per_epoch = v;
    }
    if let Some(v) = a.beta {
        cfg.reward.beta = v;
    }
    if let Some(v) = a.reward_mode {
        cfg.reward.mode = match v {
            ModeArg::WithGt => RewardMode::WithGt,
            ModeArg::WithoutGt => RewardMode::WithoutGt,
        };
    }
    if let Some(v) = a.voting {
        cfg.ensemble.voting = match v {
            VotingArg::Affirmative => Voting::Affirmative,
            VotingArg::Consensus => Voting::Consensus,
            VotingArg::Unanimous => Voting::Unanimous,
        };
    }
    if let Some(v) = a.ablation {
        cfg.ensemble.ablation = match v {
            AblationArg::None => Ablation::None,
            AblationArg::Nms => Ablation::Nms,
            AblationArg::SoftNms => Ablation::SoftNms,
            AblationArg::Wbf => Ablation::Wbf,
        };
    }
    if let Some(v) = a.test_fraction {
        cfg.test_fraction = v;
    }
    for (dst, src) in [
        (&mut cfg.seeds.env, a.env_seed),
        (&mut cfg.seeds.init, a.init_seed),
        (&mut cfg.seeds.explore, a.explore_seed),
        (&mut cfg.seeds.baseline, a.baseline_seed),
    ] {
        if let Some(v) = src {
            *dst = v;
        }
    }
    if a.sequential {
        cfg.execution = Execution::Sequential;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn evaluate(cfg: &ConfigArgs, method: Method, checkpoint: Option<PathBuf>, o: &OracleFlags) -> Result<serde_json::Value, ExperimentError> {
    let cfg = load_config(cfg)?;
    let req = EvaluateRequest { method, checkpoint, prefer_cheap: o.prefer_cheap, oracle_cap: o.oracle_cap };
    let r = cmd_evaluate(&cfg, &req)?;
    Ok(json!({
        "method": r.method,
        "ap50": 100.0 * r.ap50,
        "map": 100.0 * r.map,
        "ap75": 100.0 * r.ap75,
        "episode_cost": r.cost,
        "mean_reward": r.mean_reward,
        "selections": r.selections,
        "output_dir": cfg.output_dir,
    }))
}

fn run(cli: Cli) -> Result<serde_json::Value, ExperimentError> {
    match cli.command {
        Command::Ingest(a) => {
            let req = IngestRequest {
                providers: a.providers,
                features: a.features,
                gt: a.gt,
                coords: match a.coords {
                    Coords::Xyxy => BoxFormat::Xyxy,
                    Coords::Xywh => BoxFormat::Xywh,
                },
                normalized: a.normalized,
                out: a.out.clone(),
            };
            let s = cmd_ingest(&req)?;
            Ok(json!({ "trace": a.out, "records": s.records, "providers": s.providers, "detections": s.detections }))
        }
        Command::Synthesize(a) => {
            let source = match (&a.preset, &a.spec) {
                (Some(p), _) => SynthesisSource::Preset {
                    preset: p.parse::<Preset>()?,
                    images: a.images,
                    feature_dim: a.feature_dim,
                    seed: a.seed,
                },
                (None, Some(spec)) => SynthesisSource::Spec { base: a.base.as_deref(), spec: read_spec(spec)? },
                (None, None) => return Err(ExperimentError::Config("synthesize needs --preset or --spec".into())),
            };
            let s = cmd_synthesize(source, &a.out)?;
            Ok(json!({ "trace": a.out, "records": s.records, "providers": s.providers, "detections": s.detections }))
        }
        Command::Train(a) => {
            let cfg = load_config(&a.config)?;
            let s = cmd_train(&cfg, a.resume)?;
            Ok(json!({
                "epochs": s.epochs,
                "final_ap50": 100.0 * s.final_ap50,
                "final_cost": s.final_cost,
                "log": s.log,
                "checkpoint": s.checkpoint,
            }))
        }
        Command::Evaluate(a) => evaluate(&a.config, a.method.parse()?, a.checkpoint, &a.oracle),
        Command::Oracle(a) => evaluate(&a.config, Method::Oracle, None, &a.oracle),
        Command::Plot(a) => {
            let logs: Vec<(String, PathBuf)> = a
                .logs
                .iter()
                .map(|s| match s.split_once('=') {
                    Some((label, path)) => (label.to_string(), PathBuf::from(path)),
                    None => {
                        let p = PathBuf::from(s);
                        let label = p.parent().and_then(Path::file_name).or(p.file_stem());
                        (label.map_or_else(|| s.clone(), |l| l.to_string_lossy().into_owned()), p)
                    }
                })
                .collect();
            let files = cmd_plot(&logs, &a.out)?;
            Ok(json!({ "files": files }))
        }
    }
}

fn read_spec(path: &Path) -> Result<SynthesisSpec, ExperimentError> {
    if !path.is_file() {
        return Err(ExperimentError::MissingFile { what: "synthesis spec", path: path.to_path_buf() });
    }
    let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })?;
    toml::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => return fail("usage", e.to_string().trim(), 2),
    };
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), &e.to_string(), 1),
    }
}
