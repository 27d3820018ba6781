//! `resnetlab gradcheck|regime|bounds|train|levelset [--config FILE] [--out DIR] [--seed N]`.
//!
//! Each command writes its artifacts plus `config.toml` (the effective
//! configuration) and `manifest.json` into the output directory. Re-running
//! with `--config DIR/config.toml` reproduces the CSV outputs byte for byte.

mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
pub use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "resnetlab", version, about = "Skip/residual-scaled ResNets: gradients, regimes, bounds, level sets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Exact input gradients against finite differences on random models.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Regime constants and critical-point verdict of a saved model.
    Regime {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Cross-check the verdict with a critical-point search.
        #[arg(long)]
        search: bool,
    },
    /// Euler or MLP proximity bounds against measured distances.
    Bounds {
        #[command(flatten)]
        common: Common,
        /// `euler` or `mlp`; overrides the config.
        #[arg(long)]
        kind: Option<String>,
    },
    /// Train models on the 1-D or 2-D datasets.
    Train {
        #[command(flatten)]
        common: Common,
        /// quad1d, circle2d or xor2d; overrides the config.
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Level-set components and figure of a saved model.
    Levelset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        level: Option<f64>,
        #[arg(long)]
        resolution: Option<usize>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Gradcheck { common }
            | Command::Regime { common, .. }
            | Command::Bounds { common, .. }
            | Command::Train { common, .. }
            | Command::Levelset { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Gradcheck { .. } => "gradcheck",
            Command::Regime { .. } => "regime",
            Command::Bounds { .. } => "bounds",
            Command::Train { .. } => "train",
            Command::Levelset { .. } => "levelset",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub artifacts: Vec<String>,
    pub version: String,
}

/// Files written by a command, in write order, relative to the output directory.
#[derive(Debug, Default)]
pub struct Artifacts {
    dir: PathBuf,
    names: Vec<String>,
}

impl Artifacts {
    fn new(dir: &Path) -> Self {
        Artifacts { dir: dir.to_path_buf(), names: Vec::new() }
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        std::fs::write(self.dir.join(name), bytes)?;
        self.names.push(name.to_string());
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

/// Outcome of a command: seeds it consumed and an optional deferred failure
/// reported after all artifacts are on disk.
pub struct Outcome {
    pub seeds: Vec<u64>,
    pub failure: Option<Error>,
}

fn configure_threads() {
    if let Some(n) = std::env::var("RESNETLAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // A second call fails harmlessly when a pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Runs one parsed invocation.
pub fn run(cli: Cli) -> Result<()> {
    configure_threads();
    let common = cli.command.common().clone();
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?.0,
        None => ExperimentConfig::default(),
    };
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    std::fs::create_dir_all(&common.out)?;
    let mut art = Artifacts::new(&common.out);
    let outcome = match &cli.command {
        Command::Gradcheck { .. } => commands::gradcheck(&mut cfg, &mut art)?,
        Command::Regime { model, search, .. } => commands::regime(&mut cfg, model.clone(), *search, &mut art)?,
        Command::Bounds { kind, .. } => commands::bounds(&mut cfg, kind.as_deref(), &mut art)?,
        Command::Train { dataset, .. } => commands::train(&mut cfg, dataset.as_deref(), &mut art)?,
        Command::Levelset { model, level, resolution, .. } => commands::levelset(&mut cfg, model.clone(), *level, *resolution, &mut art)?,
    };
    let text = cfg.to_toml()?;
    art.write("config.toml", text.as_bytes())?;
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        config_sha256: Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect(),
        seeds: outcome.seeds,
        artifacts: art.names.iter().cloned().chain(std::iter::once("manifest.json".to_string())).collect(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    std::fs::write(common.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    match outcome.failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Entry point for the binary: runs and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("resnetlab: {e}");
            e.exit_code()
        }
    }
}
