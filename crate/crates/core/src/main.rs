use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use precip_extent::pipeline::{exit_code, Pipeline, Stage};
use precip_extent::Error;

/// Batch pipeline for non-stationary spatial precipitation extremes.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, default_value = "pipeline.toml")]
    config: PathBuf,
    /// Override the root seed of the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    Ingest,
    Covariate,
    Marginal,
    Depfit,
    Project,
    Simulate,
    Report,
    /// Run several stages, or all of them in order.
    Run {
        /// Stage to run; repeatable.
        #[arg(long = "stage")]
        stages: Vec<Stage>,
    },
    /// Print the parsed configuration with all defaults filled in.
    Config,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    let mut pipeline = Pipeline::from_file(&cli.config)?;
    if let Some(seed) = cli.seed {
        let mut cfg = pipeline.config().clone();
        cfg.seed = seed;
        let base = cli.config.parent().map(PathBuf::from).unwrap_or_default();
        pipeline = Pipeline::new(cfg, base)?;
    }
    let stages = match cli.command {
        Command::Ingest => vec![Stage::Ingest],
        Command::Covariate => vec![Stage::Covariate],
        Command::Marginal => vec![Stage::Marginal],
        Command::Depfit => vec![Stage::Depfit],
        Command::Project => vec![Stage::Project],
        Command::Simulate => vec![Stage::Simulate],
        Command::Report => vec![Stage::Report],
        Command::Run { stages } if stages.is_empty() => Stage::ALL.to_vec(),
        Command::Run { stages } => stages,
        Command::Config => {
            print!("{}", pipeline.config().to_toml()?);
            return Ok(());
        }
    };
    let record = pipeline.run(&stages)?;
    for s in record.stages {
        println!("{:<10} {:>8} {:>9.2}s", s.stage.name(), format!("{:?}", s.outcome).to_lowercase(), s.seconds);
    }
    Ok(())
}
