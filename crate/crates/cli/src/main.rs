//! `rcombat`: simulate control sites, harmonize them, train the outlier
//! detector, run the evaluation sweeps and render reports.

mod commands;
mod config;
mod svg;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "rcombat", version, about = "Outlier-robust ComBat harmonization experiments")]
struct Cli {
    /// TOML config; unspecified keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides `study.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `paths.out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (overrides `run.threads`; 0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the control-site grid: biased and ground-truth CSVs plus a manifest.
    Simulate(SimulateArgs),
    /// Harmonize one site CSV toward the reference.
    Harmonize(HarmonizeArgs),
    /// Train the MLP outlier detector on simulated sites.
    TrainMlp(TrainArgs),
    /// Run the filter comparison on the grid and, optionally, the other sweeps.
    Evaluate(EvaluateArgs),
    /// Render tables and SVG charts from evaluation outputs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Disease ratios (comma separated).
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long)]
    sites_per_ratio: Option<usize>,
    /// Subjects per site.
    #[arg(long)]
    n_subjects: Option<usize>,
}

#[derive(Debug, Args)]
pub struct HarmonizeArgs {
    /// Site CSV to harmonize.
    #[arg(long)]
    site: PathBuf,
    /// Filter name, optionally with a threshold (`mad`, `zs:2.5`, `oracle-hc`, `mlp`).
    #[arg(long, default_value = "none")]
    filter: String,
    /// Reference CSV (overrides `paths.reference`).
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Trained detector, required by the `mlp` filter.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Ground-truth CSV of the same subjects; logs the STD_MAE of the result.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Initialization and shuffling seed (defaults to `study.network.seed`).
    #[arg(long)]
    training_seed: Option<u64>,
    /// Where to write the model (defaults to `paths.model`, then `<out>/model.json`).
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Detector for the `mlp` filter; one is trained when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Filters to compare (comma separated; overrides `study.filters`).
    #[arg(long, value_delimiter = ',')]
    filters: Option<Vec<String>>,
    /// Also run the site-size sweep.
    #[arg(long)]
    size_sweep: bool,
    /// Also run the held-out-site bootstrap.
    #[arg(long)]
    bootstrap: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory holding evaluation outputs (defaults to the output directory).
    #[arg(long)]
    input: Option<PathBuf>,
}

/// Process exit categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitClass {
    Config,
    Data,
    Numerical,
}

impl ExitClass {
    fn code(self) -> u8 {
        match self {
            ExitClass::Config => 2,
            ExitClass::Data => 3,
            ExitClass::Numerical => 4,
        }
    }
}

impl From<robust_combat::ErrorClass> for ExitClass {
    fn from(c: robust_combat::ErrorClass) -> Self {
        match c {
            robust_combat::ErrorClass::Config => ExitClass::Config,
            robust_combat::ErrorClass::Data => ExitClass::Data,
            robust_combat::ErrorClass::Numerical => ExitClass::Numerical,
        }
    }
}

/// An error raised by the front end itself, with its exit category.
#[derive(Debug)]
pub struct CliError {
    class: ExitClass,
    message: String,
}

impl CliError {
    pub fn new(class: ExitClass, message: impl Into<String>) -> Self {
        Self {
            class,
            message: message.into(),
        }
    }

    pub fn wrap(class: ExitClass, e: anyhow::Error) -> anyhow::Error {
        anyhow::Error::new(Self::new(class, format!("{e:#}")))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn classify(e: &anyhow::Error) -> ExitClass {
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<CliError>() {
            return c.class;
        }
        if let Some(c) = cause.downcast_ref::<robust_combat::Error>() {
            return c.class().into();
        }
    }
    ExitClass::Data
}

fn effective_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.study.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.paths.out = out.clone();
    }
    if let Some(t) = cli.threads {
        config.run.threads = t;
    }
    if let Some(Command::Simulate(a)) = &cli.command {
        if let Some(r) = &a.ratios {
            config.study.grid.ratios = r.clone();
        }
        if let Some(n) = a.sites_per_ratio {
            config.study.grid.sites_per_ratio = n;
        }
        if let Some(n) = a.n_subjects {
            config.study.grid.n_subjects = n;
        }
    }
    if let Some(Command::Evaluate(EvaluateArgs { filters: Some(f), .. })) = &cli.command {
        config.study.filters = f.clone();
    }
    Ok(config)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = effective_config(&cli)?;
    if cli.print_config {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(CliError::new(ExitClass::Config, "no command given; see `rcombat --help`").into());
    };
    env_logger::Builder::new()
        .parse_filters(&config.run.log_level)
        .parse_default_env()
        .format_timestamp(None)
        .init();
    if config.run.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.run.threads)
            .build_global()
            .map_err(|e| CliError::new(ExitClass::Config, format!("thread pool: {e}")))?;
    }
    let _lock = config::OutputLock::acquire(&config.paths.out)?;
    match command {
        Command::Simulate(_) => commands::simulate(&config),
        Command::Harmonize(a) => commands::harmonize(&config, a),
        Command::TrainMlp(a) => commands::train_mlp(&config, a),
        Command::Evaluate(a) => commands::evaluate(&config, a),
        Command::Report(a) => commands::report(&config, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(Command::Harmonize(a)) = &cli.command {
        if a.filter.split(':').next() == Some("mlp") && a.model.is_none() && !cli.print_config {
            let from_config = effective_config(&cli).ok().is_some_and(|c| c.model().is_some());
            if !from_config {
                use clap::CommandFactory;
                Cli::command()
                    .error(clap::error::ErrorKind::MissingRequiredArgument, "the `mlp` filter requires --model <MODEL>")
                    .exit();
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify(&e).code())
        }
    }
}
