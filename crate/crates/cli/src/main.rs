//! `planlens`: generate workloads, train and evaluate cost models, explain
//! predictions, benchmark explainers and serve the HTTP API.

mod bench;

use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use planlens_core::explain::Algorithm;
use planlens_core::features::FeatureSchema;
use planlens_core::metrics::quantile;
use planlens_core::model::{CostModel, Hyperparams, ModelError, DEFAULT_HIDDEN_WIDTH};
use planlens_core::plan::parse_plan;
use planlens_core::settings::{analyze, AnalysisError, ExplainSettings};
use planlens_core::train::{evaluate, train, TrainConfig};
use planlens_core::workload::{generate_workload, Complexity, Workload, WorkloadError};

#[derive(Parser)]
#[command(
    name = "planlens",
    version,
    about = "Learned cost model debugging toolkit"
)]
struct Cli {
    /// Suppress progress output on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic workload directory.
    Gen(GenArgs),
    /// Train a cost model on a workload.
    Train(TrainArgs),
    /// Report median and p95 Q-error of a model on a workload.
    Eval(EvalArgs),
    /// Explain one plan's prediction and print JSON.
    Explain(ExplainArgs),
    /// Run every explainer on every plan and write metrics as CSV.
    BenchExplainers(BenchArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    min_joins: u32,
    #[arg(long, default_value_t = 3)]
    max_joins: u32,
    /// Number of tables in the synthetic schema.
    #[arg(long, default_value_t = 8)]
    tables: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    workload: PathBuf,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.2)]
    validation_fraction: f64,
    #[arg(long, default_value_t = DEFAULT_HIDDEN_WIDTH)]
    hidden_width: usize,
    /// Model file to write; training history goes next to it as `<stem>.history.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    workload: PathBuf,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    /// Plan document (JSON).
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    algorithm: String,
    /// Explainer setting as KEY=VALUE (steps, lr, lambda_sparsity, lambda_entropy, seed, k_fraction).
    #[arg(long = "config", value_name = "KEY=VALUE")]
    config: Vec<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    workload: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "config", value_name = "KEY=VALUE")]
    config: Vec<String>,
    /// Only the plans the model held out for validation.
    #[arg(long)]
    held_out: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "PLANLENS_WORKLOADS")]
    workloads: PathBuf,
    #[arg(long, env = "PLANLENS_MODELS")]
    models: PathBuf,
    #[arg(long, env = "PLANLENS_LISTEN", default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    #[arg(long, env = "PLANLENS_CACHE_SIZE", default_value_t = planlens_service::DEFAULT_CACHE_SIZE)]
    cache_size: usize,
}

/// Failure classes, each with its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Usage = 1,
    Data = 2,
    Numerical = 3,
}

#[derive(Debug)]
struct Failure {
    kind: Kind,
    error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

trait Classify<T> {
    fn kind(self, kind: Kind) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn kind(self, kind: Kind) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            kind,
            error: e.into(),
        })
    }
}

fn model_kind(e: &ModelError) -> Kind {
    match e {
        _ if e.is_numerical() => Kind::Numerical,
        ModelError::Parameter(_) => Kind::Usage,
        _ => Kind::Data,
    }
}

fn workload_kind(e: &WorkloadError) -> Kind {
    match e {
        WorkloadError::Parameter(_) => Kind::Usage,
        _ => Kind::Data,
    }
}

fn analysis_kind(e: &AnalysisError) -> Kind {
    if e.is_numerical() {
        Kind::Numerical
    } else {
        Kind::Data
    }
}

fn load_workload(dir: &Path) -> Result<Workload, Failure> {
    Workload::load(dir).map_err(|e| Failure {
        kind: Kind::Data,
        error: anyhow::Error::new(e).context(format!("loading workload {}", dir.display())),
    })
}

fn load_model(path: &Path) -> Result<CostModel, Failure> {
    CostModel::load(path).map_err(|e| Failure {
        kind: Kind::Data,
        error: anyhow::Error::new(e).context(format!("loading model {}", path.display())),
    })
}

fn parse_algorithm(name: &str) -> Result<Algorithm, Failure> {
    name.parse::<Algorithm>().kind(Kind::Usage)
}

fn parse_settings(pairs: &[String]) -> Result<ExplainSettings, Failure> {
    ExplainSettings::from_pairs(pairs).kind(Kind::Usage)
}

struct Progress {
    quiet: bool,
}

impl Progress {
    fn say(&self, msg: impl fmt::Display) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }
}

fn history_path(model: &Path) -> PathBuf {
    let stem = model
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model");
    model.with_file_name(format!("{stem}.history.json"))
}

fn cmd_gen(args: GenArgs, progress: &Progress) -> Result<(), Failure> {
    let complexity = Complexity {
        min_joins: args.min_joins,
        max_joins: args.max_joins,
        tables: args.tables,
    };
    let workload = generate_workload(args.seed, args.count, complexity).map_err(|e| Failure {
        kind: workload_kind(&e),
        error: e.into(),
    })?;
    workload
        .save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))
        .kind(Kind::Data)?;
    progress.say(format_args!(
        "wrote {} plans of workload {} to {}",
        workload.plans.len(),
        workload.workload_id,
        args.out.display()
    ));
    Ok(())
}

fn cmd_train(args: TrainArgs, progress: &Progress) -> Result<(), Failure> {
    let workload = load_workload(&args.workload)?;
    let model = CostModel::new(
        Hyperparams {
            hidden_width: args.hidden_width,
            init_seed: args.seed,
        },
        FeatureSchema::default(),
    )
    .map_err(|e| Failure {
        kind: model_kind(&e),
        error: e.into(),
    })?;
    let config = TrainConfig {
        epochs: args.epochs,
        learning_rate: args.lr,
        batch_size: args.batch_size,
        validation_fraction: args.validation_fraction,
        seed: args.seed,
    };
    progress.say(format_args!(
        "training on {} plans ({} parameters, seed {})",
        workload.plans.len(),
        model.parameter_count(),
        args.seed
    ));
    let trained = train(
        &model,
        &workload.plans,
        &workload.workload_id,
        &config,
        |m| {
            progress.say(format_args!(
                "epoch {:>4}  loss {:.5}  val median q {:.3}  val p95 q {:.3}",
                m.epoch, m.train_loss, m.validation_median_q_error, m.validation_p95_q_error
            ))
        },
    )
    .map_err(|e| Failure {
        kind: model_kind(&e),
        error: e.into(),
    })?;
    trained
        .save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))
        .kind(Kind::Data)?;
    let history = trained
        .training()
        .map(|t| t.history.clone())
        .unwrap_or_default();
    let hpath = history_path(&args.out);
    let mut text = serde_json::to_string_pretty(&history).expect("history serializes");
    text.push('\n');
    std::fs::write(&hpath, text)
        .with_context(|| format!("writing {}", hpath.display()))
        .kind(Kind::Data)?;
    if let Some(meta) = trained.training() {
        progress.say(format_args!(
            "best epoch {} written to {}",
            meta.best_epoch,
            args.out.display()
        ));
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let model = load_model(&args.model)?;
    let workload = load_workload(&args.workload)?;
    let q = evaluate(&model, &workload.plans).map_err(|e| Failure {
        kind: model_kind(&e),
        error: e.into(),
    })?;
    let mut rows = vec![("all", q.clone())];
    if let Some(meta) = model
        .training()
        .filter(|m| m.workload_id == workload.workload_id)
    {
        let held: std::collections::HashSet<&str> = meta
            .validation_plan_ids
            .iter()
            .map(String::as_str)
            .collect();
        let held_q: Vec<f64> = workload
            .plans
            .iter()
            .zip(&q)
            .filter(|(p, _)| held.contains(p.plan_id()))
            .map(|(_, q)| *q)
            .collect();
        rows.push(("held-out", held_q));
    }
    println!(
        "{:<10} {:>6} {:>10} {:>10}",
        "split", "plans", "median_q", "p95_q"
    );
    for (name, qs) in rows {
        println!(
            "{:<10} {:>6} {:>10.4} {:>10.4}",
            name,
            qs.len(),
            quantile(&qs, 0.5),
            quantile(&qs, 0.95)
        );
    }
    Ok(())
}

fn cmd_explain(args: ExplainArgs) -> Result<(), Failure> {
    let algorithm = parse_algorithm(&args.algorithm)?;
    let settings = parse_settings(&args.config)?;
    let model = load_model(&args.model)?;
    let text = std::fs::read_to_string(&args.plan)
        .with_context(|| format!("reading {}", args.plan.display()))
        .kind(Kind::Data)?;
    let plan = parse_plan(&text)
        .with_context(|| format!("parsing {}", args.plan.display()))
        .kind(Kind::Data)?;
    let resolved = settings
        .resolve(plan.plan_id(), algorithm)
        .kind(Kind::Usage)?;
    let analysis = analyze(&model, &plan, algorithm, &resolved).map_err(|e| Failure {
        kind: analysis_kind(&e),
        error: e.into(),
    })?;
    println!(
        "{}",
        serde_json::to_string_pretty(&analysis).expect("analysis serializes")
    );
    Ok(())
}

fn cmd_serve(args: ServeArgs, progress: &Progress) -> Result<(), Failure> {
    let runtime = tokio::runtime::Runtime::new().kind(Kind::Data)?;
    let config = planlens_service::ServiceConfig {
        listen: args.listen,
        workload_dir: args.workloads,
        model_dir: args.models,
        cache_size: args.cache_size,
    };
    runtime
        .block_on(planlens_service::serve(config, |addr| {
            progress.say(format_args!("listening on http://{addr}"))
        }))
        .kind(Kind::Data)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let progress = Progress { quiet: cli.quiet };
    match cli.command {
        Command::Gen(a) => cmd_gen(a, &progress),
        Command::Train(a) => cmd_train(a, &progress),
        Command::Eval(a) => cmd_eval(a),
        Command::Explain(a) => cmd_explain(a),
        Command::BenchExplainers(a) => bench::run(a, &progress),
        Command::Serve(a) => cmd_serve(a, &progress),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(Kind::Usage as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.kind as u8)
        }
    }
}
