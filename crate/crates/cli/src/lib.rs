//! Argument parsing and dispatch for the `cellsym` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::path::PathBuf;

use cellsym_core::ModelVariant;
use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::{Common, Fold};
use error::{CliError, EXIT_CONFIG, EXIT_USAGE};
use manifest::RunManifest;

/// Default worker-thread count for parallel inference.
pub const THREADS_ENV: &str = "CELLSYM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "cellsym", version, about = "Multimodal cell typing, alignment and clustering on paired embeddings")]
pub struct Command {
    #[command(subcommand)]
    pub action: Action,
}

#[derive(Clone, Debug, Default, Args)]
pub struct CommonArgs {
    /// TOML file with [run], [synth], [fusion], [align] and [cluster] tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `fusion.epochs=5`; bare keys go to this command's table.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Root seed; module seeds not pinned in the config derive from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Unimodal,
    Spatial,
    Dual,
    Multi,
}

impl From<VariantArg> for ModelVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Unimodal => ModelVariant::Unimodal,
            VariantArg::Spatial => ModelVariant::Spatial,
            VariantArg::Dual => ModelVariant::DualModality,
            VariantArg::Multi => ModelVariant::MultiInput,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FoldArg {
    Test,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Action {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train a fusion classifier on the training fold of a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Contrastively align the two modalities and export latents.
    Align {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Score a trained classifier; defaults to the test fold recorded at training time.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        fold: FoldArg,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// k-means, enrichment and PCA export over aligned latents.
    Cluster {
        #[arg(long)]
        latent: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Summarize every run found under a directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
}

impl CommonArgs {
    fn common(&self) -> Common {
        Common {
            config: self.config.clone(),
            overrides: self.overrides.clone(),
            seed: self.seed,
        }
    }
}

pub fn parse_args<I, T>(argv: I) -> Result<Command, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    Command::try_parse_from(argv)
}

pub fn execute(cmd: &Command) -> Result<RunManifest, CliError> {
    match &cmd.action {
        Action::Synth { out, common } => commands::synth(out, &common.common()),
        Action::Train { data, variant, out, common } => {
            commands::train(data, variant.map(Into::into), out, &common.common())
        }
        Action::Align { data, out, common } => commands::align(data, out, &common.common()),
        Action::Eval { model, data, report, fold, common } => {
            let fold = match fold {
                FoldArg::Test => Fold::Test,
                FoldArg::All => Fold::All,
            };
            commands::eval(model, data, report, fold, &common.common())
        }
        Action::Cluster { latent, k, out, common } => commands::cluster(latent, *k, out, &common.common()),
        Action::Report { run_dir, common } => commands::report(run_dir, &common.common()),
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // A pool may already exist when called twice in one process; the first setting stands.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses, runs and reports; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cmd = match parse_args(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("cellsym: {e}");
        return EXIT_CONFIG;
    }
    match execute(&cmd) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("cellsym: {e}");
            e.exit_code()
        }
    }
}
