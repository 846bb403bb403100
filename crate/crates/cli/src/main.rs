//! `flap`: simulate panels, run the projection once, cross-validate a
//! method grid, and rebuild reports from saved scores.

mod commands;
mod config;
mod logging;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flap::evaluation::ComponentScheme;
use flap::ingestion::Layout;
use flap::FlapError;
use log::LevelFilter;
use serde_json::json;

use config::{CovarianceChoice, InputConfig, RunConfig};

#[derive(Parser)]
#[command(name = "flap", version, about = "Forecast linear augmented projection")]
struct Cli {
    /// Worker threads; 0 uses every logical core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[arg(long, global = true, default_value = "info", value_parser = parse_level)]
    log_level: LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate replicate panels from a VAR process.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Forecast, project and report the variance reduction at one origin.
    Flap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        comp: ComponentArgs,
    },
    /// Cross-validate the method grid and rank the methods.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        comp: ComponentArgs,
        #[arg(long)]
        initial_train: Option<usize>,
        #[arg(long)]
        step: Option<usize>,
    },
    /// Rebuild ranks.json and mse_curves.csv from a scores.csv.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimArgs {
    /// CSV panel; replaces any simulation settings.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_parser = parse_layout)]
    layout: Option<Layout>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long = "T")]
    t: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    /// Process JSON to simulate instead of a surrogate.
    #[arg(long)]
    process: Option<PathBuf>,
}

#[derive(Args)]
struct ComponentArgs {
    #[arg(long, value_delimiter = ',', value_parser = parse_scheme)]
    scheme: Option<Vec<ComponentScheme>>,
    #[arg(long, value_delimiter = ',')]
    p: Option<Vec<usize>>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, value_parser = parse_covariance)]
    covariance: Option<CovarianceChoice>,
    #[arg(long)]
    standardize: Option<bool>,
}

fn parse_level(s: &str) -> Result<LevelFilter, String> {
    s.parse().map_err(|_| format!("unknown log level `{s}`"))
}

fn parse_layout(s: &str) -> Result<Layout, String> {
    match s {
        "wide" => Ok(Layout::Wide),
        "long" => Ok(Layout::Long),
        _ => Err(format!("unknown layout `{s}` (wide or long)")),
    }
}

fn parse_scheme(s: &str) -> Result<ComponentScheme, String> {
    ComponentScheme::parse(s).map_err(|e| e.to_string())
}

fn parse_covariance(s: &str) -> Result<CovarianceChoice, String> {
    match s.replace('-', "_").as_str() {
        "per_horizon" => Ok(CovarianceChoice::PerHorizon),
        "proportional" => Ok(CovarianceChoice::Proportional),
        "identity" => Ok(CovarianceChoice::Identity),
        "known" => Ok(CovarianceChoice::Known),
        _ => Err(format!("unknown covariance mode `{s}`")),
    }
}

impl Common {
    fn load(&self) -> flap::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(out) = &self.output {
            cfg.output_dir = Some(out.clone());
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

impl SimArgs {
    fn apply(&self, cfg: &mut RunConfig, force_simulation: bool) {
        if let Some(path) = &self.input {
            cfg.simulation = None;
            cfg.input = Some(InputConfig {
                path: path.clone(),
                layout: self.layout.unwrap_or(Layout::Wide),
            });
        } else if let (Some(layout), Some(input)) = (self.layout, cfg.input.as_mut()) {
            input.layout = layout;
        }
        let any = self.m.is_some()
            || self.order.is_some()
            || self.t.is_some()
            || self.replicates.is_some()
            || self.burn_in.is_some()
            || self.process.is_some();
        if !(any || force_simulation) {
            return;
        }
        if force_simulation {
            cfg.input = None;
        }
        let sim = cfg.simulation_mut();
        if let Some(v) = self.m {
            sim.m = v;
        }
        if let Some(v) = self.order {
            sim.order = v;
        }
        if let Some(v) = self.t {
            sim.t = v;
        }
        if let Some(v) = self.replicates {
            sim.replicates = v;
        }
        if let Some(v) = self.burn_in {
            sim.burn_in = v;
        }
        if let Some(v) = &self.process {
            sim.process = Some(v.clone());
        }
    }
}

impl ComponentArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = &self.scheme {
            cfg.components.schemes = v.clone();
        }
        if let Some(v) = &self.p {
            cfg.components.p = v.clone();
        }
        if let Some(v) = self.horizon {
            cfg.cv.horizon = v;
        }
        if let Some(v) = self.covariance {
            cfg.components.covariance = v;
        }
        if let Some(v) = self.standardize {
            cfg.components.standardize = Some(v);
        }
    }
}

/// Error kind as shown to users and scripts.
pub(crate) fn error_name(e: &FlapError) -> &'static str {
    match e {
        FlapError::Dimension(_) => "DimensionError",
        FlapError::DegenerateSeries { .. } => "DegenerateSeriesError",
        FlapError::IncompatibleTransform(_) => "IncompatibleTransformError",
        FlapError::CovarianceNotPd(_) => "CovarianceNotPdError",
        FlapError::Nesting(_) => "NestingError",
        FlapError::InsufficientData(_) => "InsufficientDataError",
        FlapError::DegenerateResiduals => "DegenerateResidualsError",
        FlapError::Config(_) => "ConfigError",
        FlapError::Stability { .. } => "StabilityError",
        FlapError::DuplicateCell { .. } => "DuplicateCellError",
        FlapError::MissingData(_) => "MissingDataError",
        FlapError::InvalidData(_) => "InvalidDataError",
        FlapError::DegenerateRanks => "DegenerateRanksError",
        FlapError::MethodFailed { .. } => "MethodFailedError",
        FlapError::Numerical(_) => "NumericalError",
        FlapError::Io(_) => "IoError",
        FlapError::Csv(_) => "CsvError",
        FlapError::Json(_) => "JsonError",
    }
}

/// 2 configuration, 3 data, 4 numerical.
fn exit_code(e: &FlapError) -> u8 {
    match e {
        FlapError::Config(_) | FlapError::Stability { .. } | FlapError::Dimension(_) => 2,
        FlapError::InvalidData(_)
        | FlapError::MissingData(_)
        | FlapError::DuplicateCell { .. }
        | FlapError::DegenerateSeries { .. }
        | FlapError::InsufficientData(_)
        | FlapError::Io(_)
        | FlapError::Csv(_)
        | FlapError::Json(_) => 3,
        FlapError::Numerical(_)
        | FlapError::CovarianceNotPd(_)
        | FlapError::DegenerateResiduals
        | FlapError::DegenerateRanks
        | FlapError::MethodFailed { .. }
        | FlapError::Nesting(_)
        | FlapError::IncompatibleTransform(_) => 4,
    }
}

fn run(cli: Cli, threads: usize) -> flap::Result<()> {
    match cli.command {
        Command::Simulate { common, sim } => {
            let mut cfg = common.load()?;
            sim.apply(&mut cfg, true);
            cfg.resolve();
            cfg.validate()?;
            commands::simulate(&cfg, threads)
        }
        Command::Flap { common, sim, comp } => {
            let mut cfg = common.load()?;
            sim.apply(&mut cfg, false);
            comp.apply(&mut cfg);
            cfg.resolve();
            cfg.validate()?;
            commands::flap(&cfg, threads)
        }
        Command::Evaluate {
            common,
            sim,
            comp,
            initial_train,
            step,
        } => {
            let mut cfg = common.load()?;
            sim.apply(&mut cfg, false);
            comp.apply(&mut cfg);
            if initial_train.is_some() {
                cfg.cv.initial_train = initial_train;
            }
            if let Some(s) = step {
                cfg.cv.step = s;
            }
            cfg.resolve();
            cfg.validate()?;
            commands::evaluate(&cfg, threads)
        }
        Command::Report {
            common,
            scores,
            alpha,
            horizons,
        } => {
            let mut cfg = common.load()?;
            if let Some(a) = alpha {
                cfg.report.alpha = a;
            }
            if let Some(h) = horizons {
                cfg.report.horizons = h;
            }
            cfg.validate()?;
            commands::report(&cfg, &scores, threads)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    logging::init(cli.log_level);
    let threads = if cli.threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        cli.threads
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        log::warn!("thread pool: {e}");
    }
    match run(cli, threads) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let name = error_name(&e);
            eprintln!(
                "{}",
                json!({ "level": "error", "error": name, "message": e.to_string(), "exit_code": code })
            );
            ExitCode::from(code)
        }
    }
}
