//! Command-line front end: `tractfuse <stage> [flags]`.
//!
//! Exit codes: 0 success, 1 validation error (bad config, missing upstream artifact, unknown
//! bundle, provenance mismatch), 2 runtime failure.

pub mod config;
pub mod manifest;
pub mod stages;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::agents::Algo;
use crate::error::{Error, Result};
use crate::trackeval::TrackAlgo;
pub use config::{PhantomPreset, Preset, RunConfig};
pub use manifest::{sha256_file, Manifest};
pub use stages::{Ctx, FusionStage, Layout};

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "TRACTFUSE_SEED";

#[derive(Debug, Parser)]
#[command(name = "tractfuse", version, about = "Tract-specific RL tractography with GPT-based policy fusion")]
pub struct Cli {
    /// key = value configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Default schedule set: full or desk.
    #[arg(long, global = true, default_value = "full")]
    pub preset: String,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Proceed despite provenance mismatches.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the phantom.
    Phantom,
    /// Train one RL policy on every bundle of the phantom.
    TrainRl {
        #[arg(long)]
        algo: String,
    },
    /// Harvest trajectories and build the pretraining and finetuning sets.
    Eds,
    /// Pretrain the fused model on the pooled set.
    Pretrain,
    /// Adapt the pretrained model to one bundle.
    Finetune {
        #[arg(long)]
        bundle: String,
    },
    /// Multi-critic finetuning of a bundle model.
    Mcpft {
        #[arg(long)]
        bundle: String,
    },
    /// Track one bundle with an RL policy, an ensemble or the fused model.
    Track {
        #[arg(long)]
        algo: String,
        #[arg(long)]
        bundle: String,
        /// Fused checkpoint to use: mcpft or finetuned.
        #[arg(long, default_value = "mcpft")]
        stage: String,
    },
    /// Post-filter every available tracking and score it against the bundle masks.
    Evaluate,
    /// Collect the scores into one sorted table.
    Report,
    /// Validate the configuration and print it fully resolved.
    Config,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::MissingArtifact(_) | Error::UnknownBundle(_) | Error::Provenance(_) => 1,
        _ => 2,
    }
}

/// Resolve the configuration from flags, file and environment.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), Preset::parse(&cli.preset)?)?;
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v.trim().parse().map_err(|_| Error::Config(vec![format!("{SEED_ENV}: expected a non-negative integer, got {v:?}")]))?;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config(vec!["--threads must be at least 1".into()]));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if let Command::Config = cli.command {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let ctx = Ctx { cfg: &cfg, layout: Layout::new(&cfg.output_dir), force: cli.force };
    crate::binio::write_file(&ctx.layout.resolved_config(), cfg.to_text().as_bytes())?;
    match &cli.command {
        Command::Phantom => stages::phantom(&ctx).map(drop),
        Command::TrainRl { algo } => stages::train_rl(&ctx, Algo::parse(algo)?).map(drop),
        Command::Eds => stages::eds(&ctx).map(drop),
        Command::Pretrain => stages::pretrain_stage(&ctx).map(drop),
        Command::Finetune { bundle } => stages::finetune_stage(&ctx, bundle).map(drop),
        Command::Mcpft { bundle } => stages::mcpft_stage(&ctx, bundle).map(drop),
        Command::Track { algo, bundle, stage } => {
            let stage = match stage.as_str() {
                "mcpft" => FusionStage::Mcpft,
                "finetuned" => FusionStage::Finetuned,
                s => return Err(Error::InvalidArgument(format!("unknown fused stage {s:?} (expected mcpft or finetuned)"))),
            };
            stages::track(&ctx, TrackAlgo::parse(algo)?, bundle, stage).map(drop)
        }
        Command::Evaluate => stages::evaluate(&ctx).map(drop),
        Command::Report => {
            let (_, table) = stages::report(&ctx)?;
            print!("{table}");
            Ok(())
        }
        Command::Config => unreachable!("handled above"),
    }
}

/// Parse `args` (program name first), run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
