use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use marketgan_cli::{run, Command, RunConfig};

#[derive(Parser)]
#[command(name = "marketgan", version, about = "Simulate, train, evaluate and backtest factor-structured return generators")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Write a simulated market as CSV panels plus its true coefficients.
    Fixture(Common),
    /// Train a generator and write a checkpoint with its logs.
    Train(Common),
    /// Score generated (or bootstrap) paths on the out-of-sample slice.
    Evaluate(Common),
    /// Run the portfolio grid: benchmarks and synthetic-moment models.
    Backtest(Common),
}

#[derive(Args)]
struct Common {
    /// key = value file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["1", "3", "5"])]
    factors: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory holding returns.csv, factors.csv and covariates.csv.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    paths: Option<usize>,
    /// Comma-separated predictive R² levels.
    #[arg(long)]
    r2: Option<String>,
    #[arg(long = "cost-bps")]
    cost_bps: Option<f64>,
    /// Any other setting, as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, String)>, String> {
        let mut o = Vec::new();
        for s in &self.set {
            let (k, v) = s.split_once('=').ok_or_else(|| format!("--set {s}: expected key=value"))?;
            o.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("factors", self.factors.clone());
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        push("data", self.data.as_ref().map(|p| p.display().to_string()));
        push("paths", self.paths.map(|v| v.to_string()));
        push("r2", self.r2.clone());
        push("cost_bps", self.cost_bps.map(|v| v.to_string()));
        Ok(o)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (command, common) = match &cli.command {
        Sub::Fixture(c) => (Command::Fixture, c),
        Sub::Train(c) => (Command::Train, c),
        Sub::Evaluate(c) => (Command::Evaluate, c),
        Sub::Backtest(c) => (Command::Backtest, c),
    };
    let overrides = match common.overrides() {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = RunConfig::resolve(command, common.config.as_deref(), &overrides).and_then(|cfg| run(&cfg));
    match result {
        Ok(outcome) if outcome.success() => ExitCode::SUCCESS,
        Ok(outcome) => {
            for (cell, err) in &outcome.failed {
                eprintln!("cell {cell} failed: {err}");
            }
            eprintln!("{} of {} cells failed", outcome.failed.len(), outcome.cells);
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
