//! Command-line entry point. Every command resolves the layered config,
//! writes the snapshot to the output directory and then dispatches.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pmae::config::ExperimentConfig;
use pmae::ErrorKind;

#[derive(Parser, Debug)]
#[command(
    name = "pmae",
    version,
    about = "Image manipulation localization with masked-autoencoder supervision"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML file layered over the preset defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// `key=value` override, dotted path or unique leaf name. Repeatable.
    #[arg(long = "override", short = 'o', global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Seed for every random stream (data order, masking, augmentation, init, synthesis).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory; defaults to `output_dir` from the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Log at debug level.
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic tampered dataset and its manifest.
    Synth(commands::SynthArgs),
    /// Masked-autoencoder pre-training of the encoder.
    Pretrain(commands::PretrainArgs),
    /// Two-branch training.
    Train(commands::TrainArgs),
    /// Pixel F1 and AUC on one or more manifests.
    Eval(commands::EvalArgs),
    /// Evaluation under JPEG and blur distortions.
    Robustness(commands::RobustnessArgs),
    /// Probability map, binary mask and overlay for one image.
    Predict(commands::PredictArgs),
    /// Edge and patch edge masks for a ground-truth mask.
    InspectMasks(commands::InspectArgs),
}

impl GlobalArgs {
    /// Overrides in effect, with `--seed` expanded to every seeded section.
    pub fn all_overrides(&self) -> Vec<String> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("train.seed={s}"));
            o.push(format!("pretrain.seed={s}"));
        }
        o
    }

    pub fn resolve(&self) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
        let cfg = ExperimentConfig::resolve(self.config.as_deref(), &self.all_overrides())?;
        let out = self.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        let snap = cfg.write_snapshot(&out)?;
        log::info!("resolved config written to {}", snap.display());
        Ok((cfg, out))
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<pmae::Error>())
        .map(pmae::Error::kind);
    match kind {
        Some(ErrorKind::Config) => 2,
        Some(ErrorKind::Data) => 3,
        Some(ErrorKind::Numerical) => 4,
        Some(ErrorKind::Internal) | None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
