use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rmckf::bench::{builtin_problem, run_experiment, write_report, BenchError, Overrides};

#[derive(Parser)]
#[command(
    name = "bench",
    about = "Monte Carlo benchmark for robust correntropy Kalman filters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a benchmark and write rmse.csv, table.csv, sigma.csv and manifest.txt.
    Run(Box<RunArgs>),
    /// Print the parameterization of a built-in problem.
    Describe {
        #[arg(long)]
        problem: String,
    },
}

#[derive(Args)]
struct RunArgs {
    /// problem1 or problem2.
    #[arg(long)]
    problem: Option<String>,
    /// Comma-separated uncertainty values.
    #[arg(long, allow_hyphen_values = true)]
    delta: Option<String>,
    #[arg(long)]
    runs: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Comma-separated subset of kf,rskf,mckf,rmckf-fk,mckf-sk,rmckf-sk.
    #[arg(long)]
    filters: Option<String>,
    /// Bandwidth of the fixed-kernel filters.
    #[arg(long)]
    sigma: Option<String>,
    /// Log-spaced selection grid as lo,hi,count.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long = "sigma-c")]
    sigma_c: Option<String>,
    #[arg(long)]
    mu1: Option<String>,
    #[arg(long)]
    mu2: Option<String>,
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
    /// key=value settings file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> Result<Overrides, BenchError> {
        let mut base = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|source| BenchError::Io {
                    path: path.clone(),
                    source,
                })?;
                Overrides::parse(&text)?
            }
            None => Overrides::default(),
        };
        let mut flags = Overrides::default();
        let pairs = [
            ("problem", &self.problem),
            ("delta", &self.delta),
            ("runs", &self.runs),
            ("steps", &self.steps),
            ("seed", &self.seed),
            ("filters", &self.filters),
            ("sigma", &self.sigma),
            ("grid", &self.grid),
            ("sigma_c", &self.sigma_c),
            ("mu1", &self.mu1),
            ("mu2", &self.mu2),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                flags.set(key, v)?;
            }
        }
        base = base.merge(flags);
        Ok(base)
    }
}

fn run(args: &RunArgs) -> Result<(), BenchError> {
    let overrides = args.overrides()?;
    let problem = overrides.problem.ok_or_else(|| BenchError::Config {
        key: "problem".into(),
        message: "missing (use --problem or a config file)".into(),
    })?;
    let exp = builtin_problem(problem.name(), &overrides)?;
    let report = run_experiment(&exp)?;
    write_report(&report, &args.out)?;
    for row in &report.table {
        println!(
            "delta={} filter={} group={} avg_rmse={:.4}",
            row.delta, row.filter, row.group, row.avg_rmse
        );
    }
    for sweep in &report.sweeps {
        if !sweep.failures.is_empty() {
            println!("delta={} failed_runs={}", sweep.delta, sweep.failures.len());
        }
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Describe { problem } => {
            builtin_problem(problem, &Overrides::default()).map(|exp| print!("{}", exp.describe()))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
