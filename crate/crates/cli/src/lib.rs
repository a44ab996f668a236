//! Command-line runner: configuration, the five subcommands and their
//! CSV outputs.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::Options;
pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "resdiff", version, about = "Residual diffusion super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration; defaults apply to missing keys.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides `seed` in the configuration.
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,
    /// Checkpoint (or run) directory to continue training from.
    #[arg(long, global = true, value_name = "PATH")]
    pub resume: Option<PathBuf>,
    /// Validate configuration and inputs without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Overrides `out_dir` in the configuration.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train the initial predictor CNN.
    Pretrain,
    /// Train the residual denoiser on top of a predictor.
    TrainDiffusion,
    /// Draw super-resolved samples from a trained denoiser.
    Sample,
    /// Score sample images against HR references.
    Eval,
    /// Run the component ablation matrix end to end.
    Ablate,
}

impl Cli {
    pub fn resolve_config(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = cli.resolve_config()?;
    if cli.resume.is_some() && !matches!(cli.command, Command::Pretrain | Command::TrainDiffusion | Command::Ablate) {
        return Err(CliError::Config("--resume only applies to pretrain and train-diffusion".into()));
    }
    let opts = Options { resume: cli.resume.clone(), dry_run: cli.dry_run };
    match cli.command {
        Command::Pretrain => {
            if let Some(o) = commands::pretrain(&cfg, &opts)? {
                println!("checkpoint written to {}", o.checkpoint.display());
            }
        }
        Command::TrainDiffusion => {
            if let Some(o) = commands::train_diffusion(&cfg, &opts)? {
                println!("run written to {}", o.run_dir.display());
            }
        }
        Command::Sample => {
            if let Some(o) = commands::sample(&cfg, &opts)? {
                println!("{} images sampled into {}", o.len(), cfg.out_dir.display());
            }
        }
        Command::Eval => {
            if let Some(o) = commands::eval(&cfg, &opts)? {
                if let Some(m) = o.mean {
                    println!("mean PSNR {:.3} dB, SSIM {:.4} over {} images", m.psnr_rgb, m.ssim_luma, o.rows.len());
                }
            }
        }
        Command::Ablate => {
            if let Some(o) = commands::ablate(&cfg, &opts)? {
                for r in &o.rows {
                    println!("{:<40} {:>8.3} dB  {:.4}", r.toggles.label(), r.scores.psnr_rgb, r.scores.ssim_luma);
                }
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { error::EXIT_CONFIG } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
