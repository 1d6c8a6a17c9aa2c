use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ncconv_cli::{bench, eval, gradcheck, load_config, train, verify_theory, CliError, CliResult, Outcome, RunConfig};

#[derive(Parser)]
#[command(name = "ncconv", version, about = "Normalized convolution experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every layer's backward pass.
    Gradcheck(Args),
    /// Gradient identities, output normality probe and gradient-norm trace.
    VerifyTheory(Args),
    /// Train a model; writes metrics, checkpoints and a summary.
    Train(Args),
    /// Evaluate a checkpoint on the validation set.
    Eval(Args),
    /// Time naive, im2col and normalized convolution forward passes.
    Bench(Args),
}

#[derive(clap::Args)]
struct Args {
    /// TOML or JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn setup(args: &Args) -> CliResult<RunConfig> {
    let cfg = load_config(&args.config).map_err(CliError::Usage)?;
    let cfg = cfg.resolve(args.seed, args.out.clone());
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<Outcome> {
    let (args, cmd): (&Args, fn(&RunConfig) -> CliResult<Outcome>) = match &cli.command {
        Command::Gradcheck(a) => (a, gradcheck),
        Command::VerifyTheory(a) => (a, verify_theory),
        Command::Train(a) => (a, train),
        Command::Eval(a) => (a, eval),
        Command::Bench(a) => (a, bench),
    };
    cmd(&setup(args)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(outcome) => ExitCode::from(outcome.exit_code()),
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
