//! `chienn` command-line pipelines: convert, order, generate, train, eval, verify.
//!
//! Exit codes: 0 success, 1 runtime failure (including failed properties),
//! 2 unreadable or invalid input, 3 a neighbor parallel to its reference bond.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use chienn::chienn::{ChiennError, LayerStack, StackConfig};
use chienn::datagen::{
    flatten_pairs, from_jsonl, gen_ranking_pairs_with, gen_tetrahedral, to_jsonl, DatagenError, Label, RankingConfig,
    SyntheticSample, DEFAULT_DELTA,
};
use chienn::edgegraph::to_edge_graph;
use chienn::molgraph::{mirror, parse_sdf_records, MolError, MolecularGraph};
use chienn::ordering::{all_orders, format_orders, OrderingError, ParallelPolicy};
use chienn::seeding::{derive_seed, substream};
use chienn::train::{
    evaluate, examples_from_samples, metrics_jsonl, train_model_with, Dataset, Example, Task, TrainConfig, TrainError,
};
use chienn::verify::{run_matching, Scale};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Serialize)]
#[command(name = "chienn", version, about = "Chirality-aware message passing on molecular edge graphs")]
struct Cli {
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for config.json and command outputs.
    #[arg(long, global = true, default_value = "chienn-out")]
    out: PathBuf,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    #[serde(flatten)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "lowercase", tag = "command")]
enum Command {
    /// Parse an SDF file and write one edge-graph JSON object per record.
    Convert(ConvertArgs),
    /// Print the cyclic neighbor order of every edge-graph node.
    Order(OrderArgs),
    /// Write a synthetic chiral dataset as JSONL.
    Generate(GenerateArgs),
    /// Train a stack on a JSONL dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a JSONL dataset.
    Eval(EvalArgs),
    /// Run every randomized property suite.
    Verify(VerifyArgs),
}

#[derive(Args, Serialize)]
struct ConvertArgs {
    /// SDF file, or a JSONL dataset.
    input: PathBuf,
}

#[derive(Args, Serialize)]
struct OrderArgs {
    /// SDF file, or a JSONL dataset.
    input: PathBuf,
    /// Reflect every molecule through the yz-plane first.
    #[arg(long)]
    mirror: bool,
    /// Append neighbors parallel to the bond instead of failing.
    #[arg(long)]
    permissive_ordering: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum DatasetKind {
    /// Tetrahedral centers with R/S class labels.
    Rs,
    /// Enantiomer pairs with real targets `f_achiral + s·δ`.
    Pairs,
}

#[derive(Args, Serialize)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value = "rs")]
    kind: DatasetKind,
    /// Number of samples; pair datasets need an even count.
    #[arg(long, default_value_t = 4000)]
    count: usize,
    /// Chiral effect size for pair datasets.
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum TaskArg {
    Classification,
    Regression,
    Ranking,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Classification => Task::Classification,
            TaskArg::Regression => Task::Regression,
            TaskArg::Ranking => Task::Ranking,
        }
    }
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// JSONL dataset from `generate`.
    dataset: PathBuf,
    /// Defaults to classification for class labels and ranking for real targets.
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    /// Window arity of the order-sensitive message.
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 3)]
    layers: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Defaults to min(10, epochs / 10).
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 5.0)]
    clip_norm: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Drop the residual connection around each layer.
    #[arg(long)]
    no_residual: bool,
    /// Drop the per-node layer norm after each layer.
    #[arg(long)]
    no_layer_norm: bool,
    #[arg(long)]
    permissive_ordering: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SplitArg {
    All,
    Train,
    Valid,
    Test,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// checkpoint.json written by `train`.
    checkpoint: PathBuf,
    dataset: PathBuf,
    /// Evaluate one split of the 7:1:2 partition made with `--seed`.
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    permissive_ordering: bool,
}

#[derive(Args, Serialize)]
struct VerifyArgs {
    /// About a tenth of the full trial counts.
    #[arg(long)]
    quick: bool,
    /// Only suites whose name contains this string.
    #[arg(long)]
    filter: Option<String>,
}

/// Failure carrying its process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = classify(&error);
        Self { code, error }
    }
}

fn classify(error: &anyhow::Error) -> u8 {
    for cause in error.chain() {
        let ordering = cause
            .downcast_ref::<OrderingError>()
            .or_else(|| match cause.downcast_ref::<ChiennError>() {
                Some(ChiennError::Ordering(e)) => Some(e),
                _ => None,
            })
            .or_else(|| match cause.downcast_ref::<TrainError>() {
                Some(TrainError::Chienn(ChiennError::Ordering(e))) => Some(e),
                _ => None,
            });
        if let Some(OrderingError::ParallelNeighbor { .. } | OrderingError::ParallelProjection) = ordering {
            return 3;
        }
        if cause.is::<InputError>() || cause.is::<MolError>() || cause.is::<DatagenError>() {
            return 2;
        }
        if let Some(ChiennError::Checkpoint(_)) = cause.downcast_ref::<ChiennError>() {
            return 2;
        }
    }
    1
}

#[derive(Debug)]
struct InputError(String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input_error(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(InputError(msg.into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.verbose { "info" } else { "warn" }))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: &Cli) -> Result<u8, Failure> {
    dispatch(cli).map_err(Failure::from)
}

fn dispatch(cli: &Cli) -> Result<u8> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    match &cli.command {
        Command::Train(a) => return train(cli, a),
        Command::Eval(a) => return eval(cli, a),
        _ => write_config(cli, serde_json::to_value(cli)?)?,
    }
    match &cli.command {
        Command::Convert(a) => convert(cli, a),
        Command::Order(a) => order(cli, a),
        Command::Generate(a) => generate(cli, a),
        Command::Verify(a) => verify(cli, a),
        Command::Train(_) | Command::Eval(_) => unreachable!(),
    }
}

fn write_config(cli: &Cli, value: serde_json::Value) -> Result<()> {
    write_file(&cli.out.join("config.json"), &(serde_json::to_string_pretty(&value)? + "\n"))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_input(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path)
        .map_err(|e| input_error(format!("cannot read {}: {e}", path.display())))?;
    if text.trim().is_empty() {
        return Err(input_error(format!("{} is empty", path.display())));
    }
    Ok(text)
}

/// Records of an SDF file or a JSONL dataset; JSONL is recognized by a
/// leading `{`. Unparsable records come back as errors in place.
fn load_graphs(path: &Path) -> Result<Vec<Result<MolecularGraph, String>>> {
    let text = read_input(path)?;
    if text.trim_start().starts_with('{') {
        let samples = from_jsonl(&text).with_context(|| format!("reading dataset {}", path.display()))?;
        return Ok(samples.into_iter().map(|s| Ok(s.graph)).collect());
    }
    Ok(parse_sdf_records(&text).into_iter().map(|r| r.map_err(|e| e.to_string())).collect())
}

/// Reports every failed record on stderr; errors if any failed.
fn require_all(records: Vec<Result<MolecularGraph, String>>) -> Result<Vec<MolecularGraph>> {
    let mut graphs = Vec::with_capacity(records.len());
    let mut failed = 0;
    for (i, r) in records.into_iter().enumerate() {
        match r {
            Ok(g) => graphs.push(g),
            Err(e) => {
                eprintln!("record {i}: {e}");
                failed += 1;
            }
        }
    }
    if failed > 0 {
        return Err(input_error(format!("{failed} record(s) failed to parse")));
    }
    Ok(graphs)
}

fn convert(cli: &Cli, a: &ConvertArgs) -> Result<u8> {
    let records = load_graphs(&a.input)?;
    let mut lines = String::new();
    let mut failed = 0;
    for (i, r) in records.iter().enumerate() {
        match r {
            Ok(g) => {
                let mut v = to_edge_graph(g).to_json();
                v["name"] = serde_json::Value::String(g.name().to_string());
                lines.push_str(&serde_json::to_string(&v)?);
                lines.push('\n');
                println!("record {i} ({}): {} edge-graph nodes", g.name(), 2 * g.undirected_bonds().len());
            }
            Err(e) => {
                eprintln!("record {i}: {e}");
                failed += 1;
            }
        }
    }
    write_file(&cli.out.join("edge_graphs.jsonl"), &lines)?;
    if failed > 0 {
        return Err(input_error(format!("{failed} of {} record(s) failed to parse", records.len())));
    }
    Ok(0)
}

fn order(cli: &Cli, a: &OrderArgs) -> Result<u8> {
    let policy = policy(a.permissive_ordering);
    let mut dump = String::new();
    for g in require_all(load_graphs(&a.input)?)? {
        let g = if a.mirror { mirror(&g) } else { g };
        let orders = all_orders(&to_edge_graph(&g), policy).with_context(|| format!("ordering {}", g.name()))?;
        dump.push_str(&format!("# {}\n", g.name()));
        dump.push_str(&format_orders(&orders));
    }
    print!("{dump}");
    write_file(&cli.out.join("orders.txt"), &dump)?;
    Ok(0)
}

fn generate(cli: &Cli, a: &GenerateArgs) -> Result<u8> {
    let data_seed = derive_seed(cli.seed, "data", 0);
    let samples = match a.kind {
        DatasetKind::Rs => gen_tetrahedral(data_seed, a.count)?,
        DatasetKind::Pairs => {
            if a.count % 2 != 0 {
                return Err(input_error(format!("pair datasets need an even count, got {}", a.count)));
            }
            let cfg = RankingConfig {
                delta: a.delta,
                ..RankingConfig::default()
            };
            flatten_pairs(gen_ranking_pairs_with(data_seed, a.count / 2, &cfg)?)
        }
    };
    write_file(&cli.out.join("dataset.jsonl"), &to_jsonl(&samples))?;
    println!("wrote {} samples to {}", samples.len(), cli.out.join("dataset.jsonl").display());
    Ok(0)
}

fn policy(permissive: bool) -> ParallelPolicy {
    if permissive {
        ParallelPolicy::AppendAtEnd
    } else {
        ParallelPolicy::Reject
    }
}

fn load_samples(path: &Path) -> Result<Vec<SyntheticSample>> {
    let samples = from_jsonl(&read_input(path)?).with_context(|| format!("reading dataset {}", path.display()))?;
    if samples.is_empty() {
        return Err(input_error(format!("{} holds no samples", path.display())));
    }
    Ok(samples)
}

fn infer_task(samples: &[SyntheticSample], explicit: Option<TaskArg>) -> Task {
    match (explicit, samples[0].label) {
        (Some(t), _) => t.into(),
        (None, Label::Class(_)) => Task::Classification,
        (None, Label::Value(_)) => Task::Ranking,
    }
}

#[derive(Serialize)]
struct ResolvedTrain<'a> {
    command: &'static str,
    seed: u64,
    out: &'a Path,
    dataset: &'a Path,
    permissive_ordering: bool,
    model: &'a StackConfig,
    train: &'a TrainConfig,
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<u8> {
    let samples = load_samples(&a.dataset)?;
    let task = infer_task(&samples, a.task);
    let model = StackConfig {
        k: a.k,
        hidden: a.hidden,
        hidden_mid: a.hidden,
        layers: a.layers,
        head_hidden: a.hidden,
        outputs: task.outputs(),
        residual: !a.no_residual,
        layer_norm: !a.no_layer_norm,
        ..StackConfig::default()
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        warmup_epochs: a.warmup.unwrap_or((a.epochs / 10).min(10)),
        base_lr: a.lr,
        clip_norm: a.clip_norm,
        batch_size: a.batch_size,
        seed: cli.seed,
        task,
        ..TrainConfig::default()
    };
    let resolved = ResolvedTrain {
        command: "train",
        seed: cli.seed,
        out: &cli.out,
        dataset: &a.dataset,
        permissive_ordering: a.permissive_ordering,
        model: &model,
        train: &cfg,
    };
    write_config(cli, serde_json::to_value(&resolved)?)?;
    cfg.validate()?;

    let examples = examples_from_samples(&samples, policy(a.permissive_ordering))?;
    let input_dim = examples[0].plan.input_dim();
    let data = Dataset::split(examples, cli.seed);
    log::info!(
        "{} train / {} valid / {} test examples",
        data.train.len(),
        data.valid.len(),
        data.test.len()
    );
    let mut stack = LayerStack::init(&mut substream(cli.seed, "init"), model, input_dim)?;
    let report = train_model_with(&mut stack, &data, &cfg, |m| {
        log::info!("epoch {} lr={:.3e} loss={:.5} valid={:?}", m.epoch, m.lr, m.train_loss, m.valid_metric)
    })?;

    write_file(&cli.out.join("checkpoint.json"), &stack.to_json())?;
    write_file(&cli.out.join("metrics.jsonl"), &metrics_jsonl(&report.log))?;
    write_file(&cli.out.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    println!("best epoch {}", report.best_epoch);
    for (name, m) in [("train", Some(&report.train)), ("valid", report.valid.as_ref()), ("test", report.test.as_ref())] {
        if let Some(m) = m {
            println!("{name}: {}", serde_json::to_string(m)?);
        }
    }
    Ok(0)
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<u8> {
    write_config(cli, serde_json::to_value(cli)?)?;
    let text = fs::read_to_string(&a.checkpoint)
        .map_err(|e| input_error(format!("cannot read {}: {e}", a.checkpoint.display())))?;
    let stack = LayerStack::from_json(&text).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let samples = load_samples(&a.dataset)?;
    let task = infer_task(&samples, a.task);
    if task.outputs() != stack.config.outputs {
        bail!(input_error(format!(
            "task {task:?} needs {} outputs but the checkpoint has {}",
            task.outputs(),
            stack.config.outputs
        )));
    }
    let examples = examples_from_samples(&samples, policy(a.permissive_ordering))?;
    let chosen: Vec<Example> = match a.split {
        SplitArg::All => examples,
        split => {
            let data = Dataset::split(examples, cli.seed);
            match split {
                SplitArg::Train => data.train,
                SplitArg::Valid => data.valid,
                _ => data.test,
            }
        }
    };
    if chosen.is_empty() {
        return Err(anyhow!(input_error("the selected split is empty")));
    }
    let cfg = TrainConfig {
        task,
        ..TrainConfig::default()
    };
    let metrics = evaluate(&stack, &chosen, &cfg)?;
    let line = serde_json::to_string(&metrics)?;
    write_file(&cli.out.join("eval.json"), &(line.clone() + "\n"))?;
    println!("{line}");
    Ok(0)
}

fn verify(cli: &Cli, a: &VerifyArgs) -> Result<u8> {
    let scale = if a.quick { Scale::Quick } else { Scale::Full };
    let filter = a.filter.clone().unwrap_or_default();
    let report = run_matching(cli.seed, scale, |name| name.contains(&filter));
    if report.results.is_empty() {
        return Err(input_error(format!("no suite matches {filter:?}")));
    }
    let text = report.to_text();
    print!("{text}");
    write_file(&cli.out.join("verify.txt"), &text)?;
    write_file(&cli.out.join("verify.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(if report.all_passed() { 0 } else { 1 })
}
