//! `clusterseq` command-line interface.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clusterseq::{Error, Result};

use commands::Axis;
use config::{Overrides, RunConfig};

/// Cold-start sequential recommendation with meta-learning and clustering.
#[derive(Parser, Debug)]
#[command(name = "clusterseq", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for initialization, sampling, evaluation and generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Episode length K.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Number of clusters M.
    #[arg(long, global = true)]
    clusters: Option<usize>,
    /// Train without the clustering module.
    #[arg(long, global = true)]
    no_clustering: bool,
    #[arg(long, global = true)]
    test_fraction: Option<f64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ingest a `user,item,timestamp` CSV, filter, split and cache it.
    Preprocess {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Meta-train a model on a cached corpus.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Rank each test user's held-out item against sampled negatives.
    Evaluate {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate once per value of one hyperparameter.
    Sweep {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum, ignore_case = true)]
        axis: Axis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Per-user cluster assignments and the cluster-usage histogram.
    InspectClusters {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Ground-truth `user,cluster` file to score agreement against.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Write a planted-cluster synthetic corpus and its labels.
    Generate,
}

const THREADS_VAR: &str = "CLUSTERSEQ_THREADS";

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_VAR} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size thread pool: {e}")))
}

/// Base config: `--config` if given, otherwise the `config.json` written next
/// to the checkpoint by `train`, otherwise defaults.
fn base_config(global: &GlobalArgs, checkpoint: Option<&PathBuf>) -> Result<RunConfig> {
    if let Some(path) = &global.config {
        return RunConfig::load(path);
    }
    if let Some(echo) = checkpoint
        .and_then(|c| c.parent())
        .map(|d| d.join(commands::CONFIG_ECHO))
        .filter(|p| p.is_file())
    {
        let mut cfg = RunConfig::load(&echo)?;
        cfg.out = None;
        return Ok(cfg);
    }
    Ok(RunConfig::default())
}

fn run(cli: Cli) -> Result<String> {
    init_threads()?;
    let g = &cli.global;
    let checkpoint = match &cli.command {
        Command::Evaluate { checkpoint, .. } | Command::InspectClusters { checkpoint, .. } => checkpoint.as_ref(),
        _ => None,
    };
    let mut cfg = base_config(g, checkpoint)?;
    cfg.apply(&Overrides {
        seed: g.seed,
        epochs: g.epochs,
        k: g.k,
        clusters: g.clusters,
        no_clustering: g.no_clustering,
        test_fraction: g.test_fraction,
        out: g.out.clone(),
    });
    let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
        if v.is_some() {
            slot.clone_from(v);
        }
    };
    match &cli.command {
        Command::Preprocess { input } => {
            set(&mut cfg.data, input);
            commands::preprocess_cmd(&cfg)
        }
        Command::Train { corpus } => {
            set(&mut cfg.cache, corpus);
            commands::train_cmd(&cfg)
        }
        Command::Evaluate { corpus, checkpoint } => {
            set(&mut cfg.cache, corpus);
            set(&mut cfg.checkpoint, checkpoint);
            commands::evaluate_cmd(&cfg)
        }
        Command::Sweep { input, axis, values } => {
            set(&mut cfg.data, input);
            commands::sweep_cmd(&cfg, *axis, values)
        }
        Command::InspectClusters {
            corpus,
            checkpoint,
            labels,
        } => {
            set(&mut cfg.cache, corpus);
            set(&mut cfg.checkpoint, checkpoint);
            commands::inspect_cmd(&cfg, labels.as_deref())
        }
        Command::Generate => commands::generate_cmd(&cfg),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[E_USAGE]: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
