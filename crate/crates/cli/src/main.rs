//! `sls`: synthesis, simulation, certification, and demos for system level
//! controllers.
//!
//! Exit codes: 0 success, 1 runtime error, 2 configuration or usage error,
//! 3 infeasible synthesis or containment, 4 certification failure.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sls_core::{Norm, SlsError};

use commands::Verdict;
use config::{config_error, ConfigError, LoadedConfig};
use output::{config_hash, OutDir};

const DEMO_CARTPOLE: &str = include_str!("../configs/demo_cartpole.toml");
const DEMO_ANTIWINDUP: &str = include_str!("../configs/demo_antiwindup.toml");

#[derive(Parser)]
#[command(
    name = "sls",
    version,
    about = "System level synthesis for nonlinear and saturated loops"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration. Optional for the demos.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Overrides every norm choice in the configuration: 1, 2 or inf.
    #[arg(long, global = true)]
    p_norm: Option<Norm>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Synthesize an FIR closed-loop map and write its kernels.
    Synthesize,
    /// Close the loop and write the trace.
    Simulate,
    /// Estimate the residual gain and check the small-gain bound.
    Certify,
    /// Cart-pole swing-up tracking with a tilted start.
    DemoCartpole,
    /// Saturated loop with the open-loop anti-windup level.
    DemoAntiwindup,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synthesize => "synthesize",
            Command::Simulate => "simulate",
            Command::Certify => "certify",
            Command::DemoCartpole => "demo-cartpole",
            Command::DemoAntiwindup => "demo-antiwindup",
        }
    }

    fn builtin(self) -> Option<&'static str> {
        match self {
            Command::DemoCartpole => Some(DEMO_CARTPOLE),
            Command::DemoAntiwindup => Some(DEMO_ANTIWINDUP),
            _ => None,
        }
    }
}

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_NOT_CERTIFIED: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if let Some(SlsError::Infeasible { .. } | SlsError::Containment(_)) = cause.downcast_ref::<SlsError>() {
            return EXIT_INFEASIBLE;
        }
    }
    EXIT_RUNTIME
}

fn run(cli: &Cli) -> anyhow::Result<Verdict> {
    let loaded = match (&cli.config, cli.command.builtin()) {
        (Some(path), _) => LoadedConfig::from_file(path)?,
        (None, Some(text)) => LoadedConfig::from_text(text, &format!("builtin:{}", cli.command.name()))?,
        (None, None) => return Err(config_error(format!("{} requires --config", cli.command.name()))),
    };
    let mut cfg = loaded.config;
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    if let Some(p) = cli.p_norm {
        cfg.p_norms = vec![p];
        cfg.certify.norm = p;
        if let Some(aw) = &mut cfg.antiwindup {
            aw.norm = p;
        }
    }
    let overrides = format!(
        "seed={};p_norm={}",
        cfg.seed.map_or("none".to_string(), |s| s.to_string()),
        cli.p_norm.map_or("none".to_string(), |p| p.to_string())
    );
    let hash = config_hash(&loaded.text, &overrides);
    let mut out = OutDir::create(&cli.out_dir)?;
    let verdict = match cli.command {
        Command::Synthesize => commands::synthesize_cmd(&cfg, &mut out)?,
        Command::Simulate => commands::simulate_cmd(&cfg, &mut out)?,
        Command::Certify => commands::certify_cmd(&cfg, &mut out)?,
        Command::DemoCartpole => commands::demo_cartpole_cmd(&cfg, &mut out)?,
        Command::DemoAntiwindup => commands::demo_antiwindup_cmd(&cfg, &mut out)?,
    };
    out.finish(cli.command.name(), &loaded.source, &hash, cfg.seed)?;
    Ok(verdict)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Verdict::Success) => ExitCode::SUCCESS,
        Ok(Verdict::NotCertified) => {
            eprintln!("sls: not certified");
            ExitCode::from(EXIT_NOT_CERTIFIED)
        }
        Err(err) => {
            eprintln!("sls: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
