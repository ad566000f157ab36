//! Command-line front end: configuration, datasets and run artifacts.

pub mod artifacts;
pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::domain::RewardScheme;
use crate::error::{Error, Result};
use crate::gateway::GenerateOptions;

pub use commands::Session;
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "coplanner",
    version,
    about = "Train and evaluate a strategy-planning agent for LLM reasoning"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackendArg {
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RewardArg {
    Pm1,
    ZeroOne,
}

/// Flags shared by every command; each one overrides the config key of the
/// same name.
#[derive(Debug, Default, Args)]
pub struct CommonArgs {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendArg>,
    /// Mock scenario file (JSON).
    #[arg(long, global = true)]
    pub scenario: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// pick-strategy, pick-strategy-no-hint, pick-hint or pick-hint-no-strategy.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    #[arg(long, global = true, value_enum)]
    pub reward_scheme: Option<RewardArg>,
    /// Arbitrary `section.key=value` config override (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a generated mock scenario.
    GenWorld {
        #[arg(long)]
        output: PathBuf,
        /// Also write train.jsonl and test.jsonl into this directory.
        #[arg(long)]
        export_problems: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        train_per_class: usize,
        #[arg(long, default_value_t = 10)]
        test_per_class: usize,
        #[arg(long, default_value_t = 1)]
        required_len: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
    },
    /// Random-policy trajectories, BC pairs and the difficulty table.
    CollectBc,
    /// Behavior-cloning initialization of the policy.
    TrainBc,
    /// PPO fine-tuning.
    TrainPpo {
        /// Train on every problem instead of the curriculum-filtered set.
        #[arg(long)]
        no_filter: bool,
        /// Start from a fresh policy instead of the BC checkpoint.
        #[arg(long)]
        from_scratch: bool,
        /// Continue from the PPO checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate planners and prompt baselines.
    Eval {
        /// Comma-separated policy names.
        #[arg(long, value_delimiter = ',')]
        policy: Vec<String>,
        /// Comma-separated reasoning-round budgets.
        #[arg(long, value_delimiter = ',')]
        rounds: Vec<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// train, val or test.
        #[arg(long)]
        split: Option<String>,
    },
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

/// Config overrides implied by the command line, in `key=value` form.
pub fn overrides(cli: &Cli) -> Vec<String> {
    let c = &cli.common;
    let mut out = Vec::new();
    if let Some(seed) = c.seed {
        out.push(format!("seed={seed}"));
    }
    if let Some(b) = c.backend {
        let kind = match b {
            BackendArg::Mock => "mock",
            BackendArg::Http => "http",
        };
        out.push(format!("backend.kind={}", toml_string(kind)));
    }
    if let Some(p) = &c.scenario {
        out.push(format!(
            "backend.scenario={}",
            toml_string(&p.to_string_lossy())
        ));
    }
    if let Some(p) = &c.out {
        out.push(format!("out={}", toml_string(&p.to_string_lossy())));
    }
    if let Some(m) = &c.mode {
        out.push(format!("mode={}", toml_string(m)));
    }
    if let Some(r) = c.reward_scheme {
        let scheme = match r {
            RewardArg::Pm1 => RewardScheme::Pm1,
            RewardArg::ZeroOne => RewardScheme::ZeroOne,
        };
        out.push(format!(
            "episode.reward={}",
            toml_string(&scheme.to_string())
        ));
    }
    match &cli.command {
        Command::TrainPpo {
            no_filter,
            from_scratch,
            ..
        } => {
            if *no_filter {
                out.push("filter.enabled=false".into());
            }
            if *from_scratch {
                out.push("training.from_scratch=true".into());
            }
        }
        Command::Eval {
            policy,
            rounds,
            checkpoint,
            split,
        } => {
            if !policy.is_empty() {
                let names: Vec<String> = policy.iter().map(|p| toml_string(p.trim())).collect();
                out.push(format!("eval.policies=[{}]", names.join(", ")));
            }
            if !rounds.is_empty() {
                let r: Vec<String> = rounds.iter().map(|r| r.to_string()).collect();
                out.push(format!("eval.rounds=[{}]", r.join(", ")));
            }
            if let Some(p) = checkpoint {
                out.push(format!(
                    "eval.checkpoint={}",
                    toml_string(&p.to_string_lossy())
                ));
            }
            if let Some(s) = split {
                out.push(format!("eval.split={}", toml_string(s)));
            }
        }
        _ => {}
    }
    out.extend(c.set.iter().cloned());
    out
}

/// Resolves the effective configuration: file (or defaults), then flags.
pub fn resolve_config(cli: &Cli) -> Result<(RunConfig, Vec<String>)> {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let ov = overrides(cli);
    for o in &ov {
        cfg.set(o)?;
    }
    cfg.validate()?;
    Ok((cfg, ov))
}

pub fn execute(cli: Cli) -> Result<()> {
    if let Command::GenWorld {
        output,
        export_problems,
        classes,
        train_per_class,
        test_per_class,
        required_len,
        dim,
    } = &cli.command
    {
        let opts = GenerateOptions {
            num_classes: *classes,
            train_per_class: *train_per_class,
            test_per_class: *test_per_class,
            required_len: *required_len,
            dim: *dim,
            seed: cli.common.seed.unwrap_or(0),
        };
        commands::gen_world(&opts, output, export_problems.as_deref())?;
        return Ok(());
    }
    let (cfg, ov) = resolve_config(&cli)?;
    let session = Session::open(cfg, ov)?;
    match cli.command {
        Command::CollectBc => commands::collect_bc(&session),
        Command::TrainBc => commands::train_bc_cmd(&session),
        Command::TrainPpo { resume, .. } => commands::train_ppo_cmd(&session, resume),
        Command::Eval { .. } => commands::eval_cmd(&session).map(|_| ()),
        Command::GenWorld { .. } => unreachable!("handled above"),
    }
}

/// Exit status for an error: 2 for configuration and usage problems, 1 for
/// everything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse { .. } => 2,
        _ => 1,
    }
}

/// Parses `args` and runs the command, returning the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
