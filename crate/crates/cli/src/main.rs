use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fedcarbon::config::{self, ExperimentPlan};
use fedcarbon::report;
use fedcarbon::Strategy;

#[derive(Parser)]
#[command(name = "fedcarbon", version, about = "Carbon-aware federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (seed, strategy, budget) cell of an experiment plan.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Comma-separated seeds, e.g. `0,1,2`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// `start:end:step`, inclusive, e.g. `0:1:0.1`.
        #[arg(long)]
        budget_sweep: Option<String>,
        /// Run a single strategy instead of the configured list.
        #[arg(long)]
        strategy: Option<Strategy>,
    },
    /// Aggregate per-client selection counts from a results directory.
    SelectionCounts {
        /// Directory holding `metrics_*.csv` files.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        num_clients: usize,
        /// Comma-separated ids of corrupted clients.
        #[arg(long, value_delimiter = ',', default_value = "")]
        corrupted: Vec<String>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

fn simulate(
    config_path: PathBuf,
    output: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    budget_sweep: Option<String>,
    strategy: Option<Strategy>,
) -> Result<()> {
    let mut plan = ExperimentPlan::load(&config_path)?;
    plan.apply_env_overrides();
    if let Some(dir) = output {
        plan.output_dir = dir;
    }
    if let Some(seeds) = seeds {
        plan.seeds = seeds;
    }
    if let Some(spec) = budget_sweep {
        plan.budget_sweep = config::parse_sweep(&spec)?;
    }
    if let Some(s) = strategy {
        plan.strategies = vec![s];
    }
    let outcome = report::run_plan(&plan)?;
    for s in &outcome.summaries {
        let budget = s
            .budget_fraction
            .map_or_else(|| "-".to_string(), |f| format!("{f:.2}"));
        println!(
            "{:<11} seed {:<3} budget {:>5}  final acc {:.4}  max acc {:.4} @ {:>3}  emissions {:.1} g",
            s.strategy.name(),
            s.seed,
            budget,
            s.final_accuracy,
            s.max_accuracy,
            s.round_of_max_accuracy,
            s.total_emissions_g
        );
    }
    println!("wrote {}", outcome.summary_path.display());
    println!("wrote {}", outcome.selection_counts_path.display());
    Ok(())
}

fn selection_counts(
    input: PathBuf,
    num_clients: usize,
    corrupted: Vec<String>,
    output: Option<PathBuf>,
) -> Result<()> {
    let corrupted = corrupted
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad client id {s:?}")))
        .collect::<Result<_>>()?;
    let files = report::list_metrics_files(&input)?;
    if files.is_empty() {
        bail!("no metrics files in {}", input.display());
    }
    let table = report::selection_count_report(&files, &corrupted, num_clients)?;
    match output {
        Some(path) => {
            let file = std::fs::File::create(&path)
                .with_context(|| format!("creating {}", path.display()))?;
            table.write_csv(std::io::BufWriter::new(file))?;
        }
        None => table.write_csv(std::io::stdout().lock())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate {
            config,
            output,
            seeds,
            budget_sweep,
            strategy,
        } => simulate(config, output, seeds, budget_sweep, strategy),
        Command::SelectionCounts {
            input,
            num_clients,
            corrupted,
            output,
        } => selection_counts(input, num_clients, corrupted, output),
        Command::DefaultConfig => {
            print!("{}", ExperimentPlan::default().to_toml());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
