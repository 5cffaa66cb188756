use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Parser, Subcommand};

use trackstar::Preset;
use trackstar_cli::artifacts::{Store, CACHE_ENV};
use trackstar_cli::commands::{self, Outcome};
use trackstar_cli::session::TailPatchQuery;
use trackstar_cli::{load_config, service};

#[derive(Parser)]
#[command(name = "trackstar", version, about = "Gradient-based training data attribution on a synthetic fact-tracing benchmark")]
#[command(after_help = format!("Artifacts live in the directory named by {CACHE_ENV} (default .trackstar)."))]
struct Cli {
    /// TOML run configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Rebuild artifacts even if current ones exist.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for the benchmark, model init, projection and evaluation sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic facts and corpus.
    GenData,
    /// Train the model on the corpus.
    Train,
    /// Project corpus gradients and estimate the Hessian approximations.
    EstimateHessian,
    /// Build one feature index per configured preset.
    BuildIndex,
    /// Evaluate every preset plus BM25 and random baselines.
    Eval {
        /// Print line-delimited JSON instead of the table.
        #[arg(long)]
        jsonl: bool,
    },
    /// Run all stages from gen-data through eval.
    Run,
    /// Retrieve proponents for queries in a JSONL file ({"prompt", "target"?, "id"?}).
    Retrieve {
        #[arg(long)]
        query_file: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Defaults to the first of serve.presets.
        #[arg(long)]
        preset: Option<Preset>,
        /// Output file (default stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure the target probability change after one step on a passage.
    Tailpatch {
        #[arg(long)]
        prompt: String,
        /// Defaults to the model's greedy prediction.
        #[arg(long)]
        target: Option<String>,
        #[arg(long = "example-id", required = true)]
        example_ids: Vec<u64>,
        /// Override the base learning rate.
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Serve the JSON API.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        host: Option<String>,
    },
    /// Print the effective configuration as TOML.
    Config,
}

fn report(stage: &str, outcome: Outcome) {
    match outcome {
        Outcome::Built => eprintln!("{stage}: done"),
        Outcome::UpToDate => eprintln!("{stage}: up to date (use --force to rebuild)"),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring thread pool")?;
    }
    let mut cfg = load_config(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    let store = Store::from_env();
    let force = cli.force;
    match cli.command {
        Command::GenData => report("gen-data", commands::gen_data(&store, &cfg, force)?),
        Command::Train => report("train", commands::train(&store, &cfg, force)?),
        Command::EstimateHessian => report("estimate-hessian", commands::estimate_hessian(&store, &cfg, force)?),
        Command::BuildIndex => report("build-index", commands::build_index(&store, &cfg, force)?),
        Command::Eval { jsonl } => {
            let (outcome, r) = commands::eval(&store, &cfg, force)?;
            report("eval", outcome);
            print!("{}", if jsonl { r.to_jsonl()? } else { r.to_table() });
        }
        Command::Run => {
            let r = commands::run_all(&store, &cfg, force)?;
            print!("{}", r.to_table());
        }
        Command::Retrieve { query_file, k, preset, out } => {
            let file = File::open(&query_file).with_context(|| format!("opening {}", query_file.display()))?;
            let queries = commands::read_query_lines(BufReader::new(file))?;
            let preset = preset.unwrap_or(cfg.serve.presets[0]);
            let rows = commands::retrieve(&store, &cfg, preset, &queries, k)?;
            match out {
                Some(p) => {
                    let mut w = BufWriter::new(File::create(&p)?);
                    commands::write_jsonl(&mut w, &rows)?;
                    w.flush()?;
                }
                None => commands::write_jsonl(io::stdout().lock(), &rows)?,
            }
        }
        Command::Tailpatch { prompt, target, example_ids, learning_rate } => {
            let rows = commands::tailpatch(&store, &cfg, TailPatchQuery { prompt, target }, &example_ids, learning_rate)?;
            commands::write_jsonl(io::stdout().lock(), &rows)?;
        }
        Command::Serve { port, host } => {
            if let Some(p) = port {
                cfg.serve.port = p;
            }
            if let Some(h) = host {
                cfg.serve.host = h;
            }
            tokio::runtime::Builder::new_multi_thread().enable_all().build()?.block_on(service::serve(store, cfg))?;
        }
        Command::Config => print!("{}", toml::to_string(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
