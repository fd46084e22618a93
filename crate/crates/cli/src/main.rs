use std::path::PathBuf;
use std::process::ExitCode;

use chorus_cli::commands::{
    cmd_customize, cmd_evaluate, cmd_experiment, cmd_generate, cmd_pretrain, cmd_probe, cmd_shift, cmd_stream,
};
use chorus_cli::{init_threads, CliError, CliResult, Ctx, RunConfig};
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "chorus", version, about = "Context-aware customization on frozen encoders")]
struct Cli {
    /// TOML run configuration; defaults apply to anything not set.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Directory for inputs and outputs.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Zero timing fields so repeated runs are byte-identical.
    #[arg(long, global = true)]
    canonical_timing: bool,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Verb {
    /// Write the synthetic dataset as JSON lines.
    Generate,
    /// MMD table, tiers and (optionally) the severity index.
    Shift,
    /// Stage one: train encoders on unlabeled source pairs.
    Pretrain,
    /// Stage two: train a head on the labeled budget over frozen encoders.
    Customize,
    /// Per-target metrics of a checkpoint.
    Evaluate,
    /// Streaming inference over a trace, with and without the cache.
    Stream,
    /// The full multi-seed comparison of all methods.
    Experiment,
    /// Linear probe and silhouette of the context embeddings.
    Probe,
}

fn run(cli: &Cli) -> CliResult<Vec<PathBuf>> {
    init_threads(std::env::var("CHORUS_THREADS").ok().as_deref())?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.override_seed(s);
    }
    let mut ctx = Ctx::new(cfg, &cli.out);
    ctx.force = cli.force;
    ctx.canonical = cli.canonical_timing;
    std::fs::create_dir_all(&ctx.out).map_err(|e| CliError::file(&ctx.out, e))?;
    match cli.verb {
        Verb::Generate => cmd_generate(&ctx),
        Verb::Shift => cmd_shift(&ctx),
        Verb::Pretrain => cmd_pretrain(&ctx),
        Verb::Customize => cmd_customize(&ctx),
        Verb::Evaluate => cmd_evaluate(&ctx),
        Verb::Stream => cmd_stream(&ctx),
        Verb::Experiment => cmd_experiment(&ctx),
        Verb::Probe => cmd_probe(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = serde_json::to_string(&e.record()).unwrap_or_else(|_| format!("{{\"error\":{:?}}}", e.to_string()));
            eprintln!("{record}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
