use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adanet::complexity::{generalization_bound, BoundConfig, ComplexityProvenance};
use adanet::data::{load_csv, synth, Dataset, SynthKind};
use adanet::harness::{
    cross_validate, default_grid, evaluate, expand_grid, fit, merge_config, validate_config,
    Algorithm,
};
use adanet::kernel::dual_exponent;
use adanet::network::{AdaNetModel, ConnectionPolicy};
use adanet::weaklearner::PenaltyMode;
use adanet::Error;
use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "adanet",
    version,
    about = "Adaptive structural learning of neural networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV (label first, then features).
    Synth(SynthArgs),
    /// Fit a model and write it with a JSON-lines round log.
    Train(TrainArgs),
    /// Accuracy and margin errors of a model on a dataset.
    Eval(EvalArgs),
    /// Grid search over the 10-fold rotation protocol.
    Cv(CvArgs),
    /// Evaluate the explicit generalization bound of a model.
    Bounds(BoundsArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = parse_from_str::<SynthKind>)]
    kind: SynthKind,
    #[arg(long)]
    m: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// The CSV file starts with a header row.
    #[arg(long)]
    header: bool,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, value_parser = parse_from_str::<Algorithm>)]
    algo: Algorithm,
    /// JSON file with configuration values; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_from_str::<ConnectionPolicy>)]
    policy: Option<ConnectionPolicy>,
    #[arg(long, value_parser = parse_from_str::<PenaltyMode>)]
    penalty: Option<PenaltyMode>,
    #[arg(long, value_parser = parse_from_str::<ComplexityProvenance>)]
    complexity: Option<ComplexityProvenance>,
    /// Extra `key=value` settings; dotted keys reach nested fields and the
    /// value is parsed as JSON when possible.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long)]
    out: PathBuf,
    /// Round log path; defaults to the model path with `.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    rho: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitArgs,
    /// JSON object of axis -> list of values; defaults to the standard grid.
    #[arg(long)]
    grid_file: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    rho: f64,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// Per-layer norm bounds; defaults to those the model was trained with.
    #[arg(long, value_delimiter = ',')]
    norm_bounds: Option<Vec<f64>>,
    /// Norm exponent p; defaults to the training value.
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_from_str<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Failures split by exit code.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::InvalidParameter(_)) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow::anyhow!("{msg}"))
}

fn load_data(args: &DataArgs) -> CliResult<Dataset> {
    Ok(load_csv(&args.data, args.header)
        .with_context(|| format!("reading {}", args.data.display()))?)
}

fn write_output(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn to_line(v: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string(v).expect("serializable");
    s.push('\n');
    s
}

fn read_json(path: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Runtime)?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Config file values, then flags.
fn effective_config(args: &FitArgs) -> CliResult<Value> {
    let mut cfg = match &args.config {
        Some(p) => read_json(p)?,
        None => json!({}),
    };
    if !cfg.is_object() {
        return Err(usage("config must be a JSON object"));
    }
    let adanet = matches!(args.algo, Algorithm::Adanet | Algorithm::AdanetCvx);
    let mut flags = serde_json::Map::new();
    if let Some(seed) = args.seed {
        if args.algo != Algorithm::Logreg {
            flags.insert("seed".into(), json!(seed));
        }
    }
    let variants = [
        (
            "policy",
            args.policy.map(|v| serde_json::to_value(v).unwrap()),
        ),
        (
            "penalty",
            args.penalty.map(|v| serde_json::to_value(v).unwrap()),
        ),
        (
            "complexity",
            args.complexity.map(|v| serde_json::to_value(v).unwrap()),
        ),
    ];
    for (key, value) in variants {
        if let Some(v) = value {
            if !adanet {
                return Err(usage(format!("--{key} only applies to adanet algorithms")));
            }
            flags.insert(key.into(), v);
        }
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        flags.insert(k.to_string(), value);
    }
    cfg = merge_config(&cfg, &Value::Object(flags));
    validate_config(args.algo, &cfg)?;
    Ok(cfg)
}

fn cmd_synth(args: SynthArgs) -> CliResult<()> {
    let d = synth(args.kind, args.m, args.noise, args.seed)?;
    write_output(args.out.as_deref(), &d.to_csv_string())
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let cfg = effective_config(&args.fit)?;
    let d = load_data(&args.data)?;
    let fitted = fit(args.fit.algo, &cfg, &d)?;
    let mut log = to_line(&json!({
        "algo": args.fit.algo,
        "config": cfg,
        "data": args.data.data,
        "m": d.len(),
    }));
    for r in &fitted.records {
        log.push_str(&to_line(r));
    }
    let log_path = args
        .log
        .unwrap_or_else(|| args.out.with_extension("log.jsonl"));
    write_output(Some(&args.out), &fitted.model.to_json())?;
    write_output(Some(&log_path), &log)
}

fn load_model(path: &Path) -> CliResult<AdaNetModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(AdaNetModel::from_json(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let d = load_data(&args.data)?;
    let report = evaluate(&model, &d, &args.rho)?;
    let mut out = serde_json::to_value(&report).expect("serializable");
    out["config"] = json!({ "model": args.model, "data": args.data.data, "rho": args.rho });
    write_output(args.out.as_deref(), &to_line(&out))
}

fn cmd_cv(args: CvArgs) -> CliResult<()> {
    let cfg = effective_config(&args.fit)?;
    let axes = match &args.grid_file {
        Some(p) => read_json(p)?,
        None => default_grid(args.fit.algo),
    };
    let grid = expand_grid(&axes)?;
    let d = load_data(&args.data)?;
    let report = cross_validate(&d, args.fit.algo, &cfg, &grid, args.fit.seed.unwrap_or(0))?;
    let mut out = serde_json::to_value(&report).expect("serializable");
    out["grid_axes"] = axes;
    out["data"] = json!(args.data.data);
    write_output(args.out.as_deref(), &to_line(&out))?;
    eprintln!("{} test accuracy {}", args.fit.algo, report.summary);
    Ok(())
}

fn cmd_bounds(args: BoundsArgs) -> CliResult<()> {
    let model = load_model(&args.model)?;
    let d = model.prepare_inputs(&load_data(&args.data)?)?;
    let hyper = model.hyperparams();
    let norm_bounds = match args.norm_bounds {
        Some(v) => v,
        None => serde_json::from_value(hyper["norm_bounds"].clone()).unwrap_or_else(|_| vec![1.0]),
    };
    let p = args.p.or_else(|| hyper["p"].as_f64()).unwrap_or(2.0);
    if p.is_nan() || p < 1.0 {
        return Err(usage("p must be >= 1"));
    }
    let cfg = BoundConfig {
        rho: args.rho,
        delta: args.delta,
    };
    let report = generalization_bound(&model, &d, cfg, &norm_bounds, dual_exponent(p)?)?;
    let mut out = serde_json::to_value(&report).expect("serializable");
    out["config"] = json!({
        "model": args.model, "data": args.data.data, "norm_bounds": norm_bounds, "p": p,
    });
    write_output(args.out.as_deref(), &to_line(&out))
}

fn configure_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("ADANET_THREADS") {
        let n: usize = v.parse().ok().filter(|n| *n > 0).ok_or_else(|| {
            usage(format!(
                "ADANET_THREADS must be a positive integer, got `{v}`"
            ))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker pool")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Bounds(a) => cmd_bounds(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
