//! `learnkt` command-line runner.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 data, 3 model,
//! 4 client/transport.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use learnkt_core::{Error, ErrorKind};

mod commands;
mod settings;

use settings::ConfigFile;

#[derive(Parser, Debug)]
#[command(name = "learnkt", version, about = "Learner performance prediction: fit, cross-validate, tune and simulate")]
struct Cli {
    /// key = value file mirroring the long flags; flags win on conflict.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Size of the global worker pool (default: number of cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Root seed; every module seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for report.json, report.txt and model files.
    #[arg(long, global = true)]
    outdir: Option<PathBuf>,
    /// Repeat for more log detail (logs go to stderr).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Interaction CSV (learner_id, question_id, attempt, obs); repeatable.
    #[arg(long)]
    pub data: Vec<PathBuf>,
    /// Lesson metadata JSON, paired with --data by position.
    #[arg(long)]
    pub meta: Vec<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// One of bkt, pfa, sparfa, tensor, gbt, llm, llm-gbt.
    #[arg(long)]
    pub model: Option<String>,
    /// Model config override as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ClientArgs {
    /// Use the offline heuristic client instead of a network endpoint.
    #[arg(long)]
    pub mock: bool,
    /// Chat-completions URL.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Model name sent to the endpoint.
    #[arg(long = "api-model")]
    pub api_model: Option<String>,
    /// Environment variable holding the API token.
    #[arg(long = "token-env")]
    pub token_env: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Request timeout in seconds.
    #[arg(long)]
    pub timeout: Option<u64>,
    #[arg(long)]
    pub retries: Option<u32>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate input files and write a normalized copy.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Print counts and per-question correct rates.
    Summarize {
        #[command(flatten)]
        data: DataArgs,
    },
    /// k-fold cross-validation; --model takes a comma list.
    Cv {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        k: Option<usize>,
        /// Repeated LLM runs per fold.
        #[arg(long)]
        repeats: Option<usize>,
        #[command(flatten)]
        client: ClientArgs,
    },
    /// Fit on all labeled rows and write the model JSON.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        client: ClientArgs,
    },
    /// Fit on --data and predict --queries (default: unlabeled rows of --data).
    Predict {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[command(flatten)]
        client: ClientArgs,
    },
    /// Hyperparameter search for GBT (grid) or LLM-GBT (client proposals).
    Tune {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// `default` or a file of `key = v1,v2` lines.
        #[arg(long)]
        grid: Option<String>,
        /// Replace one grid axis, key=v1,v2; repeatable.
        #[arg(long = "grid-set", value_name = "KEY=VALUES")]
        grid_set: Vec<String>,
        #[arg(long)]
        k: Option<usize>,
        /// Proposals to evaluate in llm-gbt mode.
        #[arg(long)]
        budget: Option<usize>,
        #[command(flatten)]
        client: ClientArgs,
    },
    /// Generate a synthetic lesson with a ground-truth sidecar.
    Simulate {
        /// bkt-process, low-rank-matrix or low-rank-tensor.
        #[arg(long)]
        generator: Option<String>,
        /// learners x questions x attempts, e.g. 66x8x9.
        #[arg(long)]
        shape: Option<String>,
        #[arg(long)]
        rank: Option<usize>,
        /// Factor scale for the low-rank generators.
        #[arg(long)]
        scale: Option<f64>,
        /// random or orthogonal.
        #[arg(long)]
        factors: Option<String>,
        /// full or until-correct.
        #[arg(long)]
        policy: Option<String>,
        /// p_init,p_learn,p_slip,p_guess.
        #[arg(long = "bkt-params")]
        bkt_params: Option<String>,
        /// Share of records written without an outcome.
        #[arg(long)]
        holdout: Option<f64>,
        #[arg(long = "lesson-name")]
        lesson_name: Option<String>,
    },
    /// Cross-validated LLM runs with repeat statistics.
    LlmRun {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        /// Test rows per request.
        #[arg(long = "chunk-size")]
        chunk_size: Option<usize>,
        /// Repeats in flight at once.
        #[arg(long)]
        concurrency: Option<usize>,
        #[command(flatten)]
        client: ClientArgs,
    },
    /// Merge report.json files into one table.
    Report {
        #[arg(long)]
        inputs: Vec<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Model => 3,
        ErrorKind::Client => 4,
    }
}

fn run(cli: Cli) -> learnkt_core::Result<()> {
    let cfg = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    if let Some(n) = cfg.pick(cli.workers, "workers")? {
        if n == 0 {
            return Err(Error::Config("--workers must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    }
    let ctx = commands::Ctx {
        seed: cfg.pick(cli.seed, "seed")?.unwrap_or(0),
        outdir: cfg.pick(cli.outdir, "outdir")?.unwrap_or_else(|| PathBuf::from("out")),
        cfg,
    };
    match cli.command {
        Command::Ingest { data } => commands::ingest(&ctx, data),
        Command::Summarize { data } => commands::summarize(&ctx, data),
        Command::Cv {
            data,
            model,
            k,
            repeats,
            client,
        } => commands::cv(&ctx, data, model, k, repeats, client),
        Command::Fit { data, model, client } => commands::fit(&ctx, data, model, client),
        Command::Predict {
            data,
            model,
            queries,
            client,
        } => commands::predict(&ctx, data, model, queries, client),
        Command::Tune {
            data,
            model,
            grid,
            grid_set,
            k,
            budget,
            client,
        } => commands::tune(&ctx, data, model, grid, grid_set, k, budget, client),
        Command::Simulate {
            generator,
            shape,
            rank,
            scale,
            factors,
            policy,
            bkt_params,
            holdout,
            lesson_name,
        } => commands::simulate(
            &ctx,
            commands::SimArgs {
                generator,
                shape,
                rank,
                scale,
                factors,
                policy,
                bkt_params,
                holdout,
                lesson_name,
            },
        ),
        Command::LlmRun {
            data,
            model,
            k,
            repeats,
            chunk_size,
            concurrency,
            client,
        } => commands::llm_run(&ctx, data, model, k, repeats, chunk_size, concurrency, client),
        Command::Report { inputs } => commands::report(&ctx, inputs),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("LEARNKT_LOG")
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
