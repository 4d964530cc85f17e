//! The `llm-ensemble` command line.
//!
//! Exit codes: 0 success, 1 environment or I/O failure, 2 invalid input.

use std::collections::HashMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::aggregate::{run_ensemble, EnsembleConfig, TieBreak};
use crate::error::Error;
use crate::extract::{extract_labels, read_providers, PromptTemplate, SynonymMap};
use crate::io::{self, PredictionRecord, WeightsReport};
use crate::label::{build_matrix, normalize, AttributeSchema};
use crate::simulate::{
    generate_ground_truth, simulate_annotations, SimulationConfig, WorkerProfile,
};

#[derive(Debug, Parser)]
#[command(
    name = "llm-ensemble",
    version,
    about = "Ensemble attribute labels from multiple annotators"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic annotators with known accuracies.
    Simulate(SimulateArgs),
    /// Ask LLM providers to label products.
    Extract(ExtractArgs),
    /// Learn annotator weights and write consensus labels.
    Aggregate(AggregateArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SchemaArgs {
    /// Attribute name; may be omitted when --schema is given.
    #[arg(long)]
    pub attribute: Option<String>,
    /// Comma separated label set, e.g. `male,female,unisex`.
    #[arg(long)]
    pub labels: Option<String>,
    /// Schema JSON file (`{"attribute": ..., "labels": [...]}`).
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub items: usize,
    #[command(flatten)]
    pub schema: SchemaArgs,
    /// JSON array of `{"worker_id", "accuracy", "missing_rate"}` objects.
    #[arg(long)]
    pub workers: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub truth_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// JSONL of `{"item_id", "title", "description"}`.
    #[arg(long)]
    pub products: PathBuf,
    #[command(flatten)]
    pub schema: SchemaArgs,
    /// JSON providers file (`{"providers": [...]}`).
    #[arg(long)]
    pub providers: PathBuf,
    /// Prompt template; the bundled default is used when omitted.
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// JSON object mapping surface forms to labels.
    #[arg(long)]
    pub synonyms: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub schema: SchemaArgs,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value = "lowest-index")]
    pub tie_break: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub weights_out: Option<PathBuf>,
    /// Also dump the dense annotation matrix as CSV (small inputs only).
    #[arg(long)]
    pub matrix_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
}

/// A failed command: message for standard error plus exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn env(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::Provider { .. } => 1,
            Error::Input(_) | Error::Conflict { .. } | Error::Parse { .. } => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Extract(a) => cmd_extract(&a),
        Command::Aggregate(a) => cmd_aggregate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
    }
}

fn resolve_schema(args: &SchemaArgs) -> Result<AttributeSchema, Failure> {
    let from_file = args.schema.as_deref().map(io::read_schema).transpose()?;
    let attribute = match (&args.attribute, &from_file) {
        (Some(a), Some(s)) if a != s.name() => {
            eprintln!(
                "warning: --attribute `{a}` overrides `{}` from the schema file",
                s.name()
            );
            a.clone()
        }
        (Some(a), _) => a.clone(),
        (None, Some(s)) => s.name().to_string(),
        (None, None) => return Err(Failure::input("--attribute or --schema is required")),
    };
    match (&args.labels, from_file) {
        (Some(inline), file) => {
            let schema = AttributeSchema::from_csv_labels(attribute, inline)?;
            if let Some(file) = file {
                if file.labels() != schema.labels() {
                    eprintln!("warning: --labels overrides the labels in the schema file");
                }
            }
            Ok(schema)
        }
        (None, Some(file)) => Ok(AttributeSchema::new(attribute, file.labels().to_vec())?),
        (None, None) => Err(Failure::input("--labels or --schema is required")),
    }
}

fn read_workers(path: &Path) -> Result<Vec<WorkerProfile>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::input(format!("{}: invalid worker spec: {e}", path.display())))
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let schema = match (&args.schema.attribute, &args.schema.schema) {
        (None, None) => resolve_schema(&SchemaArgs {
            attribute: Some("label".into()),
            labels: args.schema.labels.clone(),
            schema: None,
        })?,
        _ => resolve_schema(&args.schema)?,
    };
    let workers = read_workers(&args.workers)?;
    let config = SimulationConfig::new(args.items, schema, workers, args.seed)?;
    let truth = generate_ground_truth(&config);
    let matrix = simulate_annotations(&config, &truth)?;
    let records = matrix.to_records();
    io::write_annotations(&args.out, &records)?;
    io::write_predictions(&args.truth_out, &config.item_ids(), &truth, &config.schema)?;
    eprintln!(
        "simulated {} annotations from {} workers over {} items",
        records.len(),
        config.workers.len(),
        config.n_items
    );
    Ok(())
}

pub fn cmd_aggregate(args: &AggregateArgs) -> Result<(), Failure> {
    let schema = resolve_schema(&args.schema)?;
    let tie_break: TieBreak = args.tie_break.parse()?;
    let config = EnsembleConfig {
        max_iterations: args.max_iter,
        weight_tolerance: args.tol,
        tie_break,
    };
    config.validate()?;

    let records = io::read_annotations(&args.input)?;
    if records.is_empty() {
        return Err(Failure::env(format!(
            "no annotations in {}",
            args.input.display()
        )));
    }
    let total = records.len();
    let records: Vec<_> = records
        .into_iter()
        .filter(|r| r.attribute == schema.name())
        .collect();
    if records.is_empty() {
        return Err(Failure::env(format!(
            "no annotations for attribute `{}` in {}",
            schema.name(),
            args.input.display()
        )));
    }
    if records.len() < total {
        eprintln!(
            "skipped {} annotations for other attributes",
            total - records.len()
        );
    }

    let matrix = build_matrix(&schema, &records)?;
    if let Some(path) = &args.matrix_csv {
        io::write_dense_csv(path, &matrix)?;
    }
    let state = run_ensemble(&matrix, &config)?;
    io::write_predictions(&args.out, matrix.item_ids(), &state.predictions, &schema)?;
    if let Some(path) = &args.weights_out {
        io::write_weights(path, &WeightsReport::from_state(&matrix, &state))?;
    }
    eprintln!(
        "iterations_run={} converged={}",
        state.iterations_run, state.converged
    );
    Ok(())
}

fn index_predictions(
    records: Vec<PredictionRecord>,
    path: &Path,
) -> Result<HashMap<String, PredictionRecord>, Failure> {
    let mut map = HashMap::with_capacity(records.len());
    for r in records {
        if let Some(prev) = map.insert(r.item_id.clone(), r) {
            return Err(Failure::input(format!(
                "{}: duplicate item_id `{}`",
                path.display(),
                prev.item_id
            )));
        }
    }
    Ok(map)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), Failure> {
    let accuracy = evaluate_files(&args.predictions, &args.truth)?;
    println!("{accuracy:.4}");
    Ok(())
}

/// Accuracy of the predictions file against the truth file; both must cover
/// exactly the same items.
pub fn evaluate_files(predictions: &Path, truth: &Path) -> Result<f64, Failure> {
    let truth_records = io::read_predictions(truth)?;
    if truth_records.is_empty() {
        return Err(Failure::input(format!(
            "{}: no truth labels",
            truth.display()
        )));
    }
    let preds = index_predictions(io::read_predictions(predictions)?, predictions)?;
    if preds.len() != truth_records.len() {
        return Err(Failure::input(format!(
            "item ids differ: {} predictions vs {} truth labels",
            preds.len(),
            truth_records.len()
        )));
    }
    let mut correct = 0usize;
    let mut seen = HashMap::with_capacity(truth_records.len());
    for t in &truth_records {
        if seen.insert(t.item_id.as_str(), ()).is_some() {
            return Err(Failure::input(format!(
                "{}: duplicate item_id `{}`",
                truth.display(),
                t.item_id
            )));
        }
        let Some(expected) = &t.label else {
            return Err(Failure::input(format!(
                "{}: item `{}` has no truth label",
                truth.display(),
                t.item_id
            )));
        };
        let Some(p) = preds.get(&t.item_id) else {
            return Err(Failure::input(format!(
                "item `{}` is missing from {}",
                t.item_id,
                predictions.display()
            )));
        };
        if p.attribute != t.attribute {
            return Err(Failure::input(format!(
                "item `{}`: attribute `{}` vs `{}`",
                t.item_id, p.attribute, t.attribute
            )));
        }
        if p.label.as_deref().map(normalize) == Some(normalize(expected)) {
            correct += 1;
        }
    }
    Ok(correct as f64 / truth_records.len() as f64)
}

pub fn cmd_extract(args: &ExtractArgs) -> Result<(), Failure> {
    let schema = resolve_schema(&args.schema)?;
    let products = io::read_jsonl(&args.products)?;
    let specs = read_providers(&args.providers)?;
    let template = match &args.template {
        Some(path) => PromptTemplate::from_file(path)?,
        None => PromptTemplate::default(),
    };
    let synonyms = match &args.synonyms {
        Some(path) => SynonymMap::from_file(path, &schema)?,
        None => SynonymMap::default(),
    };
    let providers = specs
        .iter()
        .map(|s| s.build())
        .collect::<Result<Vec<_>, _>>()?;

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::env(format!("cannot start async runtime: {e}")))?;
    let outcome = runtime.block_on(extract_labels(
        &products,
        &schema,
        &providers,
        &template,
        &synonyms,
        args.max_in_flight,
    ))?;

    for (provider, failed) in &outcome.failures {
        eprintln!("{provider}: {failed}/{} requests failed", products.len());
    }
    if outcome.failures.values().all(|&f| f == products.len()) {
        return Err(Failure::env("no providers reachable"));
    }
    io::write_annotations(&args.out, &outcome.records)?;
    Ok(())
}
