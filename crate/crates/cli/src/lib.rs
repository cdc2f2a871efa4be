//! Command-line front end: configuration resolution and the `train`, `eval`,
//! `predict`, `sweep` and `fixtures` commands.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{cmd_eval, cmd_fixtures, cmd_predict, cmd_sweep, cmd_train, OutDir};
pub use config::{resolve, Override, RunConfig};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "maskclip", version, about = "Detect and localize generated image content")]
pub struct Cli {
    /// TOML config file merged over the preset defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Shorthand for `--set out=DIR`.
    #[arg(long, global = true)]
    pub out: Option<String>,
    /// `key=value` override, e.g. `training.learning_rate=1e-3` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from scratch on `data.train_manifest`.
    Train,
    /// Evaluate a checkpoint on `data.eval_manifest` (or `--manifest`).
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score one image; prints p_fake and writes mask PNGs.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        /// Base name of the mask files inside the output directory.
        #[arg(long)]
        name: Option<String>,
    },
    /// Blur and JPEG robustness sweep of a checkpoint.
    Sweep {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write a synthetic dataset and manifest into the output directory.
    Fixtures {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: u32,
    },
}

impl Cli {
    pub fn overrides(&self) -> CliResult<Vec<Override>> {
        let mut out = self.set.iter().map(|s| Override::parse(s)).collect::<CliResult<Vec<_>>>()?;
        if let Some(seed) = self.seed {
            let seed = i64::try_from(seed).map_err(|_| CliError::Usage(format!("seed {seed} too large")))?;
            out.push(Override {
                key: "seed".into(),
                value: toml::Value::Integer(seed),
            });
        }
        if let Some(dir) = &self.out {
            out.push(Override {
                key: "out".into(),
                value: toml::Value::String(dir.clone()),
            });
        }
        Ok(out)
    }
}

fn checkpoint_or_default(cfg: &RunConfig, given: &Option<PathBuf>) -> PathBuf {
    given
        .clone()
        .unwrap_or_else(|| cfg.out_dir().join("checkpoints").join("last"))
}

/// Parses arguments and runs one command.
pub fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = resolve(cli.config.as_deref(), &cli.overrides()?)?;
    match &cli.command {
        Command::Train => {
            let log = cmd_train(&cfg)?;
            if let Some(e) = log.epochs.last() {
                log::info!("finished epoch {} with mean loss {:.6}", e.epoch, e.mean.total);
            }
        }
        Command::Eval { checkpoint, manifest } => {
            let report = cmd_eval(&cfg, &checkpoint_or_default(&cfg, checkpoint), manifest.as_deref())?;
            print!("{}", report.to_csv());
        }
        Command::Predict { checkpoint, image, name } => {
            cmd_predict(&cfg, &checkpoint_or_default(&cfg, checkpoint), image, name.as_deref())?;
        }
        Command::Sweep { checkpoint } => {
            cmd_sweep(&cfg, &checkpoint_or_default(&cfg, checkpoint))?;
        }
        Command::Fixtures { n, size } => {
            cmd_fixtures(&OutDir::new(cfg.out_dir())?, *n, *size, cfg.seed)?;
        }
    }
    Ok(())
}

/// Full entry point; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { CliError::Usage(String::new()).exit_code() } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
