//! Command-line driver for the experiment stages.
//!
//! Exit codes: 0 success, 2 configuration error, 3 stale or mismatched
//! inputs, 4 non-finite values during training, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rec4ad::pipeline::{self, ExperimentConfig};
use rec4ad::{Error, Result};

#[derive(Parser)]
#[command(name = "rec4ad", version, about = "Synthetic marketplace experiments for ads CTR debiasing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Data seed for generate/augment, model seed for train/evaluate/ablate.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Existing directory holding all stage outputs.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Restrict train/evaluate to one variant, e.g. REC4AD or REC4AD-no_sabn.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Worker threads for session simulation.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Simulate the marketplace and write the catalog and logs.
    Generate,
    /// Build training and test samples from the logs.
    Augment,
    /// Train checkpoints.
    Train,
    /// Score checkpoints on the uniform test set.
    Evaluate,
    /// Train and evaluate the full model and its ablations.
    Ablate,
    /// Compare all reports against the base model.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::Generate | Command::Augment => cfg.data_seed = seed,
            _ => cfg.seeds = vec![seed],
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot configure {n} threads: {e}")))?;
    }
    let cfg = load_config(cli)?;
    let out = cli.out_dir.as_path();
    let variant = cli.variant.as_deref();
    if variant.is_some() && !matches!(cli.command, Command::Train | Command::Evaluate) {
        return Err(Error::Config("--variant applies to train and evaluate only".into()));
    }
    let manifest = match cli.command {
        Command::Generate => pipeline::cmd_generate(&cfg, out)?,
        Command::Augment => pipeline::cmd_augment(&cfg, out)?,
        Command::Train => pipeline::cmd_train(&cfg, out, variant)?,
        Command::Evaluate => pipeline::cmd_evaluate(&cfg, out, variant)?,
        Command::Ablate => pipeline::cmd_ablate(&cfg, out)?,
        Command::Report => {
            let (m, table) = pipeline::cmd_report(&cfg, out)?;
            print!("{table}");
            m
        }
    };
    for (label, ms) in &manifest.timings_ms {
        eprintln!("{label}: {:.1}s", *ms as f64 / 1000.0);
    }
    eprintln!("wrote {} file(s); manifest {}/manifests/{}.json", manifest.outputs.len(), out.display(), manifest.stage);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
