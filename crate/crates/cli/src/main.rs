//! Pipeline driver for the multi-source boundless domain-adaptation toy.
//!
//! Stages communicate through files in one run directory:
//! gen -> pretrain -> select -> altinc -> boundless -> eval, plus render for
//! qualitative pictures. `ALTINC_LOG={error,info,debug}` controls logging.

mod commands;
mod config;
mod manifest;
mod rundir;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::{cmd_altinc, cmd_boundless, cmd_eval, cmd_gen, cmd_pretrain, cmd_render, cmd_select};

#[derive(Parser)]
#[command(name = "altinc", about = "multi-source boundless DA segmentation toy pipeline")]
struct Cli {
    /// Run directory holding all stage artifacts.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,

    /// Configuration file (flat key=value). Defaults to the run directory's
    /// echoed config, or built-in defaults for `gen`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the config round budget.
    #[arg(long, global = true)]
    rounds: Option<usize>,

    /// Overrides the config tau fraction.
    #[arg(long, global = true)]
    tau_fraction: Option<f64>,

    /// Overrides the adversarial objective: vanilla or lsgan.
    #[arg(long, global = true)]
    gan: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the multi-domain toy datasets.
    Gen,
    /// Pretrain one single-source DA model pair per source.
    Pretrain,
    /// Compute dissimilarities and select the best source.
    Select,
    /// Run the alternating-incremental training rounds.
    Altinc,
    /// Relabel low-confidence pixels to the open-set class.
    Boundless {
        /// Relabeling rule: confidence `threshold` or the `kl` ablation.
        #[arg(long, default_value = "threshold")]
        method: String,
    },
    /// Evaluate a label dump against the target ground truth.
    Eval {
        /// Directory of img_NNNNN.pgm predictions; defaults to
        /// boundless/labels, else altinc/labels.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Render a label map or probability map as a color PPM.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Palette override, "r,g,b;r,g,b;..." indexed by class id.
        #[arg(long)]
        palette: Option<String>,
    },
}

fn resolve_config(cli: &Cli) -> Result<config::RunConfig> {
    let mut cfg = match (&cli.config, &cli.command) {
        (Some(path), _) => config::load(Some(path))?,
        (None, Command::Gen) => config::RunConfig::default(),
        // Later stages default to the configuration the run was created with.
        (None, _) => rundir::stored_config(&cli.run_dir)?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(rounds) = cli.rounds {
        cfg.max_rounds = rounds;
    }
    if let Some(tau) = cli.tau_fraction {
        cfg.tau_fraction = tau;
    }
    if let Some(gan) = &cli.gan {
        cfg.gan = gan.parse::<altinc_core::losses::GanKind>().map_err(|e| anyhow::anyhow!("{e}"))?;
    }
    cfg.train_config().validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("ALTINC_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let cfg = resolve_config(&cli)?;

    match &cli.command {
        Command::Gen => cmd_gen(&cli.run_dir, &cfg),
        Command::Pretrain => cmd_pretrain(&cli.run_dir, &cfg),
        Command::Select => cmd_select(&cli.run_dir, &cfg),
        Command::Altinc => cmd_altinc(&cli.run_dir, &cfg),
        Command::Boundless { method } => cmd_boundless(&cli.run_dir, &cfg, method.parse()?),
        Command::Eval { labels } => cmd_eval(&cli.run_dir, &cfg, labels.as_deref()),
        Command::Render {
            input,
            output,
            palette,
        } => cmd_render(&cfg, input, output, palette.as_deref()),
    }
}
