//! `mapf-gnn`: generate pools, solve with CBS, train and evaluate the
//! decentralized graph-network planner.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mapf_gnn::datastore::Split;

use commands::{EvalArgs, OracleArgs, PolicyKind};
use config::ConfigFlags;
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "mapf-gnn", version, about = "Decentralized multi-robot path planning with graph neural networks")]
struct Cli {
    #[command(flatten)]
    flags: ConfigFlags,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a pool of seeded random maps.
    GenMaps {
        #[arg(long, default_value = "maps.jsonl")]
        out: PathBuf,
    },
    /// Generate unsolved cases for every map in a map pool.
    GenCases {
        #[arg(long, default_value = "maps.jsonl")]
        map_file: PathBuf,
        #[arg(long, default_value = "cases.jsonl")]
        out: PathBuf,
    },
    /// Solve a case pool with CBS; timeouts and infeasible cases are dropped.
    Expert {
        #[arg(long, default_value = "maps.jsonl")]
        map_file: PathBuf,
        #[arg(long, default_value = "cases.jsonl")]
        case_file: PathBuf,
        #[arg(long, default_value = "solved.jsonl")]
        out: PathBuf,
    },
    /// Full pipeline: maps, cases, expert plans and train/valid/test splits.
    BuildDataset {
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train a policy with online expert aggregation.
    Train {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Roll a policy out on every case of a split and write report.csv and hist.csv.
    Eval {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, value_enum, default_value = "gnn")]
        policy: PolicyKind,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        label: Option<String>,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Roll a policy out on one case and write its trace.
    Rollout {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long = "case")]
        case_id: usize,
        #[arg(long, value_enum, default_value = "gnn")]
        policy: PolicyKind,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "trace.json")]
        out: PathBuf,
    },
    /// Compare CBS against exhaustive joint search on small seeded instances.
    OracleCheck {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 3)]
        max_robots: usize,
        #[arg(long, default_value_t = 4)]
        max_size: usize,
        #[arg(long, default_value_t = 0.2)]
        max_density: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert report, histogram and log CSVs into one long-format table.
    Report {
        #[arg(long = "input", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "long.csv")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = cli.flags.resolve()?;
    if let Some(n) = cli.flags.workers {
        if n == 0 {
            return Err(CliError::Config("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Other(e.to_string()))?;
    }
    match &cli.command {
        Command::GenMaps { out } => commands::gen_maps(&cfg, out),
        Command::GenCases { map_file, out } => commands::gen_cases(&cfg, map_file, out),
        Command::Expert { map_file, case_file, out } => commands::expert(&cfg, map_file, case_file, out),
        Command::BuildDataset { out } => commands::build_dataset(&cfg, out),
        Command::Train { data, out } => commands::train(&cfg, data, out),
        Command::Eval { data, split, policy, model, label, out } => commands::eval(
            &cfg,
            &EvalArgs { data, split: *split, policy: *policy, model: model.as_ref(), label: label.as_deref(), out },
        ),
        Command::Rollout { data, case_id, policy, model, out } => commands::rollout_one(&cfg, data, *case_id, *policy, model.as_ref(), out),
        Command::OracleCheck { instances, max_robots, max_size, max_density, out } => commands::oracle(
            &cfg,
            &OracleArgs { instances: *instances, max_robots: *max_robots, max_size: *max_size, max_density: *max_density },
            out.as_deref(),
        ),
        Command::Report { inputs, out } => commands::report(&cfg, inputs, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Config(e.to_string().lines().next().unwrap_or("invalid arguments").to_string());
            eprintln!("{}", err.to_json_line());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
