use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;

use iwatsuka_cli::{run_with_threads, write_artifacts, CliError, RunConfig};

/// Band functions, edge currents and inverse reconstructions for Iwatsuka
/// magnetic Hamiltonians.
#[derive(Debug, Parser)]
#[command(name = "iwatsuka", version)]
struct Args {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_path`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for the parallel sweeps.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

fn execute(args: &Args) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| CliError::io(&args.config, e))?;
    let mut config = RunConfig::from_toml(&text)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.threads == 0 {
        return Err(CliError::Config("threads: must be at least 1".into()));
    }
    let base = args.config.parent().unwrap_or(Path::new("."));
    let out_dir = match &args.out {
        Some(dir) => dir.clone(),
        None => base.join(&config.output_path),
    };
    let output = run_with_threads(&config, base, args.threads)?;
    for path in write_artifacts(&out_dir, &output.artifacts)? {
        println!("wrote {}", path.display());
    }
    for line in &output.summary {
        println!("{line}");
    }
    match output.failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    match execute(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
