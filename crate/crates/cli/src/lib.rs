//! `phasealloc` command-line tool.
//!
//! Every command reads JSON documents, writes one JSON document (plus a CSV
//! for `sweep`), and embeds a `provenance` block with the tool version, the
//! effective configuration and the seed. Outputs depend only on inputs and
//! flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Map, Value};

use phasealloc::estimator::parse_estimate;
use phasealloc::{
    budget_from_alpha, inject_noise, reallocate, solve, sweep_tasks, Allocation, ExperimentConfig, NoiseSpec,
    Objective, ObjectiveKind, PhaseCurve, PricingTable, SolveConfig, StrategySpec, SyntheticPipeline,
};

pub const TOOL: &str = "phasealloc";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] phasealloc::Error),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Io { .. } => "io",
            CliError::Usage(_) => "usage",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 3,
            CliError::Core(phasealloc::Error::NotConverged { .. }) => 4,
            _ => 2,
        }
    }

    /// Machine-readable record for the diagnostic stream.
    pub fn record(&self) -> Value {
        let mut error = json!({ "kind": self.kind(), "message": self.to_string() });
        match self {
            CliError::Core(phasealloc::Error::Validation { field, .. }) => {
                error["field"] = json!(field);
            }
            CliError::Core(phasealloc::Error::Parse { offset, .. }) => {
                error["offset"] = json!(offset);
            }
            CliError::Core(phasealloc::Error::NotConverged {
                iterations,
                lambda_lo,
                lambda_hi,
                residual,
            }) => {
                error["iterations"] = json!(iterations);
                error["lambda_lo"] = json!(lambda_lo);
                error["lambda_hi"] = json!(lambda_hi);
                error["residual"] = json!(residual);
            }
            CliError::Io { path, .. } => {
                error["path"] = json!(path.display().to_string());
            }
            _ => {}
        }
        json!({ "tool": TOOL, "version": VERSION, "error": error })
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "phasealloc", version, about = "Budget allocation across pipeline phases")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit per-phase curves from an estimate document and a pricing table.
    Fit(FitArgs),
    /// Solve for the optimal allocation on a curves document.
    Solve(SolveArgs),
    /// Run a strategy sweep over synthetic pipelines.
    Sweep(SweepArgs),
    /// Write a noisy copy of a curves document.
    Noise(NoiseArgs),
    /// Re-solve on the budget left after `spent` has been used.
    Reallocate(ReallocateArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub estimates: PathBuf,
    #[arg(long)]
    pub pricing: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SolveArgs {
    #[arg(long)]
    pub curves: PathBuf,
    #[arg(long, conflicts_with_all = ["alpha", "reference_cost"])]
    pub budget: Option<f64>,
    #[arg(long, requires = "reference_cost")]
    pub alpha: Option<f64>,
    #[arg(long, requires = "alpha")]
    pub reference_cost: Option<f64>,
    #[arg(long, default_value = "additive")]
    pub objective: String,
    /// JSON array of per-phase caps, or an object keyed by phase label.
    #[arg(long)]
    pub caps: Option<PathBuf>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub pipeline: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Writes `<prefix>.json` and `<prefix>.csv`.
    #[arg(long)]
    pub out_prefix: PathBuf,
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct NoiseArgs {
    #[arg(long)]
    pub curves: PathBuf,
    #[arg(long)]
    pub sigma: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReallocateArgs {
    #[arg(long)]
    pub curves: PathBuf,
    #[arg(long)]
    pub spent: f64,
    /// Total budget, including what has been spent.
    #[arg(long)]
    pub budget: f64,
    #[arg(long, default_value = "additive")]
    pub objective: String,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Fit(a) => write_json(&a.out, &run_fit(a)?),
        Command::Solve(a) => write_json(&a.out, &run_solve(a)?),
        Command::Sweep(a) => run_sweep(a),
        Command::Noise(a) => write_json(&a.out, &run_noise(a)?),
        Command::Reallocate(a) => write_json(&a.out, &run_reallocate(a)?),
    }
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_json(path: &Path, doc: &Value) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(doc).expect("documents are plain JSON values");
    text.push('\n');
    write(path, &text)
}

fn parse_json(path: &Path, text: &str) -> CliResult<Value> {
    serde_json::from_str(text).map_err(|e| {
        CliError::Core(phasealloc::Error::Parse {
            offset: 0,
            message: format!("{}: {e}", path.display()),
        })
    })
}

fn provenance(command: &str, config: impl Serialize, seed: Option<u64>) -> Value {
    json!({
        "tool": TOOL,
        "version": VERSION,
        "command": command,
        "config": config,
        "seed": seed,
    })
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Curves document: `{"currency": .., "phases": [{"label", "a", "b"}, ..]}`.
/// A bare array of curves is accepted as well.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvesDocument {
    pub currency: String,
    pub curves: Vec<PhaseCurve>,
}

impl CurvesDocument {
    pub fn from_value(value: Value) -> CliResult<Self> {
        let (currency, phases) = match value {
            Value::Array(_) => ("USD".to_string(), value),
            Value::Object(mut map) => {
                let currency = map
                    .get("currency")
                    .and_then(Value::as_str)
                    .unwrap_or("USD")
                    .to_string();
                let phases = map
                    .remove("phases")
                    .ok_or_else(|| usage("curves document has no 'phases' field"))?;
                (currency, phases)
            }
            _ => return Err(usage("curves document must be an object or an array")),
        };
        let curves: Vec<PhaseCurve> =
            serde_json::from_value(phases).map_err(|e| usage(format!("malformed curves: {e}")))?;
        if curves.is_empty() {
            return Err(usage("curves document lists no phases"));
        }
        curves.iter().try_for_each(PhaseCurve::validate)?;
        Ok(Self { currency, curves })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = read(path)?;
        Self::from_value(parse_json(path, &text)?)
    }
}

fn curves_value(curves: &[PhaseCurve]) -> Value {
    serde_json::to_value(curves).expect("curves serialize")
}

pub fn run_fit(args: &FitArgs) -> CliResult<Value> {
    let estimates = parse_estimate(&read(&args.estimates)?, None, &args.estimates.display().to_string())?;
    let pricing = PricingTable::from_json(&read(&args.pricing)?)?;
    let (curves, pricing_warnings) = estimates.fit(&pricing)?;
    let mut warnings = estimates.warnings.clone();
    warnings.extend(pricing_warnings);
    Ok(json!({
        "provenance": provenance("fit", args, None),
        "currency": pricing.currency,
        "units": { "a": "quality", "b": format!("per {}", pricing.currency) },
        "phases": curves_value(&curves),
        "warnings": warnings,
    }))
}

fn objective_for(name: &str, curves: &[PhaseCurve]) -> CliResult<Objective> {
    let kind: ObjectiveKind = name.parse()?;
    Ok(Objective::for_curves(kind, curves))
}

fn load_caps(path: &Path, curves: &[PhaseCurve]) -> CliResult<Vec<f64>> {
    let value = parse_json(path, &read(path)?)?;
    match value {
        Value::Array(items) => items
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| usage(format!("cap is not a number: {v}"))))
            .collect(),
        Value::Object(map) => {
            if let Some(extra) = map.keys().find(|k| !curves.iter().any(|c| &c.label == *k)) {
                return Err(usage(format!("caps name unknown phase '{extra}'")));
            }
            curves
                .iter()
                .map(|c| match map.get(&c.label) {
                    None => Ok(f64::INFINITY),
                    Some(v) => v.as_f64().ok_or_else(|| usage(format!("cap for '{}' is not a number", c.label))),
                })
                .collect()
        }
        _ => Err(usage("caps must be an array or an object")),
    }
}

fn allocation_value(curves: &[PhaseCurve], allocation: &Allocation, currency: &str) -> Value {
    let fractions = allocation.fractions();
    let phases: Vec<Value> = curves
        .iter()
        .zip(&allocation.amounts)
        .zip(&fractions)
        .map(|((c, x), f)| json!({ "label": c.label, "amount": x, "fraction": f }))
        .collect();
    json!({
        "currency": currency,
        "phases": phases,
        "amounts": allocation.amounts,
        "lambda_star": allocation.lambda_star,
        "objective_value": allocation.objective_value,
        "log_objective_value": allocation.log_objective_value,
        "budget_used": allocation.budget_used,
    })
}

fn merge(mut base: Value, extra: Value) -> Value {
    if let (Value::Object(b), Value::Object(e)) = (&mut base, extra) {
        b.extend(e);
    }
    base
}

pub fn run_solve(args: &SolveArgs) -> CliResult<Value> {
    let doc = CurvesDocument::load(&args.curves)?;
    let budget = match (args.budget, args.alpha, args.reference_cost) {
        (Some(b), None, None) => b,
        (None, Some(a), Some(c)) => budget_from_alpha(a, c)?,
        _ => return Err(usage("supply exactly one of --budget or --alpha with --reference-cost")),
    };
    let objective = objective_for(&args.objective, &doc.curves)?;
    let mut config = SolveConfig::new(budget);
    if let Some(t) = args.tolerance {
        config = config.with_tolerance(t);
    }
    if let Some(path) = &args.caps {
        config = config.with_caps(load_caps(path, &doc.curves)?);
    }
    let allocation = solve(&doc.curves, &objective, &config)?;
    let effective = json!({
        "args": args,
        "budget": budget,
        "objective": objective,
        "tolerance": config.effective_tolerance(),
        "max_iterations": config.max_iterations,
        "caps": config.caps,
    });
    Ok(merge(
        json!({ "provenance": provenance("solve", effective, None) }),
        allocation_value(&doc.curves, &allocation, &doc.currency),
    ))
}

pub fn run_reallocate(args: &ReallocateArgs) -> CliResult<Value> {
    let doc = CurvesDocument::load(&args.curves)?;
    let objective = objective_for(&args.objective, &doc.curves)?;
    let mut config = SolveConfig::new(args.budget);
    if let Some(t) = args.tolerance {
        config = config.with_tolerance(t);
    }
    let allocation = reallocate(&doc.curves, &objective, args.spent, &config)?;
    let effective = json!({
        "args": args,
        "remaining_budget": (args.budget - args.spent).max(0.0),
        "objective": objective,
        "tolerance": config.effective_tolerance(),
    });
    Ok(merge(
        json!({ "provenance": provenance("reallocate", effective, None) }),
        allocation_value(&doc.curves, &allocation, &doc.currency),
    ))
}

pub fn run_noise(args: &NoiseArgs) -> CliResult<Value> {
    let doc = CurvesDocument::load(&args.curves)?;
    let noisy = inject_noise(&doc.curves, &NoiseSpec::new(args.sigma, args.seed)?)?;
    Ok(json!({
        "provenance": provenance("noise", args, Some(args.seed)),
        "currency": doc.currency,
        "phases": curves_value(&noisy),
    }))
}

/// Pipeline file: one pipeline object or `{"tasks": [pipeline, ..]}`.
/// `aggregation` may be an objective name; `prop-offset` then takes its
/// weights from the phase ceilings.
pub fn parse_pipelines(value: Value) -> CliResult<Vec<SyntheticPipeline>> {
    let items = match value {
        Value::Object(mut map) if map.contains_key("tasks") => match map.remove("tasks") {
            Some(Value::Array(items)) => items,
            _ => return Err(usage("'tasks' must be an array of pipelines")),
        },
        other => vec![other],
    };
    if items.is_empty() {
        return Err(usage("pipeline file lists no tasks"));
    }
    items.into_iter().map(parse_pipeline).collect()
}

fn parse_pipeline(value: Value) -> CliResult<SyntheticPipeline> {
    let mut map: Map<String, Value> = match value {
        Value::Object(m) => m,
        _ => return Err(usage("pipeline must be an object")),
    };
    let phases: Vec<PhaseCurve> = serde_json::from_value(map.remove("phases").unwrap_or(Value::Null))
        .map_err(|e| usage(format!("malformed pipeline phases: {e}")))?;
    let aggregation = match map.remove("aggregation") {
        None => Objective::additive(),
        Some(Value::String(name)) => objective_for(&name, &phases)?,
        Some(v) => serde_json::from_value(v).map_err(|e| usage(format!("malformed aggregation: {e}")))?,
    };
    let reference_cost = map
        .get("reference_cost")
        .and_then(Value::as_f64)
        .ok_or_else(|| usage("pipeline needs a numeric 'reference_cost'"))?;
    let mut pipeline = SyntheticPipeline::new(phases, aggregation, reference_cost)?;
    pipeline.name = map.get("name").and_then(Value::as_str).map(str::to_string);
    Ok(pipeline)
}

/// Experiment config file. Strategies may be names or tagged objects.
pub fn parse_experiment(value: Value) -> CliResult<ExperimentConfig> {
    let mut map = match value {
        Value::Object(m) => m,
        _ => return Err(usage("config must be an object")),
    };
    if let Some(Value::Array(items)) = map.get_mut("strategies") {
        for item in items.iter_mut() {
            if let Value::String(name) = item {
                let spec: StrategySpec = name.parse()?;
                *item = serde_json::to_value(spec).expect("strategy serializes");
            }
        }
    }
    let config: ExperimentConfig =
        serde_json::from_value(Value::Object(map)).map_err(|e| usage(format!("malformed config: {e}")))?;
    config.validate()?;
    Ok(config)
}

pub fn run_sweep(args: &SweepArgs) -> CliResult<()> {
    let pipelines = parse_pipelines(parse_json(&args.pipeline, &read(&args.pipeline)?)?)?;
    let config = parse_experiment(parse_json(&args.config, &read(&args.config)?)?)?;
    let report = match args.jobs {
        Some(0) => return Err(usage("--jobs must be >= 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| usage(e.to_string()))?
            .install(|| sweep_tasks(&pipelines, &config))?,
        None => sweep_tasks(&pipelines, &config)?,
    };
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    let effective = json!({ "pipelines": pipelines, "experiment": config, "jobs": args.jobs });
    let doc = merge(
        json!({ "provenance": provenance("sweep", effective, Some(config.seed)) }),
        serde_json::to_value(&report).expect("report serializes"),
    );
    write_json(&with_extension(&args.out_prefix, "json"), &doc)?;
    write(
        &with_extension(&args.out_prefix, "csv"),
        &String::from_utf8(csv).expect("csv output is UTF-8"),
    )
}

fn with_extension(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}
