use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctep_cli::{benchmark_cmd, infer_cmd, load_config, simulate, validate_cmd, CliError, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(
    name = "ctep",
    version,
    about = "Continuous-time expectation propagation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML). Without it the built-in
    /// Lotka-Volterra set-up is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, overriding the config's `output`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Single seed for simulate/infer; first replicate seed for benchmark.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Benchmark worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Exit with status 4 if EP does not converge.
    #[arg(long, global = true)]
    require_convergence: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a ground-truth path and noisy observations of it.
    Simulate,
    /// Posterior marginals for observations in a CSV file.
    Infer {
        /// Observations CSV (`t,y1,...,yd`); defaults to `<out>/observations.csv`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Replicated EP vs ADF-S comparison over a list of noise variances.
    Benchmark,
    /// Check the configuration and list the defaults it relies on.
    Validate,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    let exp = cfg.resolve(&Overrides {
        out: cli.out,
        seed: cli.seed,
        workers: cli.workers,
    })?;
    match cli.command {
        Command::Simulate => {
            for o in simulate(&exp)? {
                println!("{}", o.trajectory.display());
                println!("{}", o.observations.display());
            }
        }
        Command::Infer { data } => {
            let data = data.unwrap_or_else(|| exp.output.join("observations.csv"));
            let o = infer_cmd(&exp, &data, cli.require_convergence)?;
            println!("{}", o.marginals.display());
            println!("{}", o.diagnostics.display());
        }
        Command::Benchmark => {
            let o = benchmark_cmd(&exp, cli.require_convergence)?;
            for r in &o.report.rows {
                println!(
                    "variance {:>8} {:<6} rmse_obs {:8.4} rmse_path {:8.4} sweeps {:5.1} converged {:.2} ({} ok, {} failed)",
                    r.variance, r.method, r.rmse_observations, r.rmse_path, r.mean_sweeps, r.converged_fraction, r.replicates, r.failures
                );
            }
            println!("{}", o.csv.display());
            println!("{}", o.json.display());
        }
        Command::Validate => print!("{}", validate_cmd(&exp)),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
