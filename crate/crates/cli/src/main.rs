use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use nmt_adapt::commands::{resolve_out, Command, Ctx};
use nmt_adapt::config::RunConfig;
use nmt_adapt::store::{Lock, RunDir};
use nmt_adapt::{exit_code, ConfigError};

/// Environment override for the output root.
const OUT_ENV: &str = "NMT_ADAPT_OUT";

#[derive(Debug, Parser)]
#[command(name = "nmt-adapt", version, about = "Adapt an En↔HRL translation model to a related low-resource language")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed everywhere.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the environment and the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| ConfigError(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = resolve_out(cli.out.clone(), std::env::var_os(OUT_ENV).map(PathBuf::from), &cfg);
    cfg.out_dir = out.clone();
    let _lock = Lock::acquire(&out)?;
    let dir = RunDir::open(&out, cfg.seed, &cfg.to_toml(), cli.quiet)?;
    let mut ctx = Ctx { cfg, dir };
    ctx.run(&cli.command)?;
    ctx.dir.save()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp_secs().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
