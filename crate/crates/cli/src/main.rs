//! `netfuse`: fit, cross-validate, predict, model complexity, synthesize,
//! export the proximity graph.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 solver did not converge.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use netfuse::complexity::{ComponentEngine, FusionTolerance, ToleranceMode};
use netfuse::model::ModelKind;

use commands::{EffectsFormat, GraphFormat, McArgs, PredictArgs, SynthArgs};
use config::{RunConfig, TimeUnit};

#[derive(Parser)]
#[command(name = "netfuse", version, about = "Penalized Poisson regression with multilayer network fusion")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one penalty configuration.
    Fit(RunArgs),
    /// Grid search by K-fold cross-validation, then refit on all days.
    Cv {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        grid: GridArgs,
        /// Print the fits the search would run and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Predicted means for a panel from a parameter bundle.
    Predict {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        bundle: PathBuf,
        /// Export combined station effects at this hour (0-based).
        #[arg(long, requires = "effects_day")]
        effects_hour: Option<usize>,
        /// Day of week for the effect export (0 = Monday).
        #[arg(long, requires = "effects_hour")]
        effects_day: Option<usize>,
        #[arg(long, value_enum, default_value = "csv")]
        effects_format: EffectsFormat,
        #[arg(long)]
        effects_out: Option<PathBuf>,
    },
    /// Model complexity of a parameter bundle.
    Mc {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        stations: PathBuf,
        #[arg(long, default_value_t = 1500.0)]
        radius: f64,
        /// Estimates closer than this count as fused.
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long, value_enum, default_value = "absolute")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "union-find")]
        engine: EngineArg,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write intersection-network edges as CSV.
        #[arg(long)]
        edges_out: Option<PathBuf>,
    },
    /// Simulate a clustered panel with a planted fused truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        stations: usize,
        #[arg(long, default_value_t = 14)]
        days: usize,
        #[arg(long, default_value_t = 3)]
        clusters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        capacity: u32,
        /// Scatter of stations around their cluster centre, metres.
        #[arg(long, default_value_t = 300.0)]
        spread: f64,
        /// Distance between cluster centres, metres.
        #[arg(long, default_value_t = 3000.0)]
        separation: f64,
        /// Mean log rate per dock and hour.
        #[arg(long, default_value_t = -2.0, allow_negative_numbers = true)]
        level: f64,
        #[arg(long, default_value_t = 0.5)]
        amplitude: f64,
        #[arg(long, default_value_t = 0.2)]
        rain_prob: f64,
    },
    /// Write the proximity graph as an edge list or GraphML.
    ExportGraph {
        #[arg(long)]
        stations: PathBuf,
        #[arg(long, default_value_t = 1500.0)]
        radius: f64,
        #[arg(long, value_enum, default_value = "csv")]
        format: GraphFormat,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Copy, Clone, ValueEnum)]
enum ModelArg {
    NoInteraction,
    FullInteraction,
}

#[derive(Copy, Clone, ValueEnum)]
enum ModeArg {
    Absolute,
    Relative,
}

#[derive(Copy, Clone, ValueEnum)]
enum EngineArg {
    UnionFind,
    Eigen,
}

impl From<ModeArg> for ToleranceMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Absolute => ToleranceMode::Absolute,
            ModeArg::Relative => ToleranceMode::Relative,
        }
    }
}

impl From<EngineArg> for ComponentEngine {
    fn from(e: EngineArg) -> Self {
        match e {
            EngineArg::UnionFind => ComponentEngine::UnionFind,
            EngineArg::Eigen => ComponentEngine::Eigen,
        }
    }
}

/// Flags mirroring [`RunConfig`]; each one overrides the config file.
#[derive(Args)]
struct RunArgs {
    /// TOML or JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rentals: Option<PathBuf>,
    #[arg(long)]
    stations: Option<PathBuf>,
    #[arg(long)]
    weather: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Proximity radius in metres.
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lambda_n: Option<f64>,
    #[arg(long)]
    lambda_h: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    time_unit: Option<TimeUnit>,
    #[arg(long)]
    time_scale: Option<f64>,
    #[arg(long)]
    drop_days_without_weather: bool,
    /// Worker threads for cross-validation (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    eps_abs: Option<f64>,
    #[arg(long)]
    eps_rel: Option<f64>,
    /// Fusion tolerance for the complexity report.
    #[arg(long)]
    fusion_eps: Option<f64>,
    #[arg(long, value_enum)]
    fusion_mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    engine: Option<EngineArg>,
}

#[derive(Args)]
struct GridArgs {
    /// Comma-separated radii in metres.
    #[arg(long, value_delimiter = ',')]
    grid_radii: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    grid_lambda: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    grid_lambda_n: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    grid_lambda_h: Option<Vec<f64>>,
}

impl RunArgs {
    fn resolve(&self) -> netfuse::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:expr, $flag:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v.into();
                }
            };
        }
        set!(c.rentals, self.rentals.clone().map(Some));
        set!(c.stations, self.stations.clone().map(Some));
        set!(c.weather, self.weather.clone().map(Some));
        set!(c.output_dir, self.out);
        if let Some(m) = self.model {
            c.model = match m {
                ModelArg::NoInteraction => ModelKind::NoInteraction,
                ModelArg::FullInteraction => ModelKind::FullInteraction,
            };
        }
        set!(c.radius_m, self.radius);
        set!(c.penalty.lambda, self.lambda);
        set!(c.penalty.lambda_n, self.lambda_n);
        set!(c.penalty.lambda_h, self.lambda_h);
        set!(c.penalty.rho, self.rho);
        set!(c.folds, self.folds);
        set!(c.seed, self.seed);
        set!(c.time_unit, self.time_unit);
        set!(c.time_scale, self.time_scale);
        c.drop_days_without_weather |= self.drop_days_without_weather;
        set!(c.workers, self.workers);
        set!(c.solver.max_iter, self.max_iter);
        set!(c.solver.eps_abs, self.eps_abs);
        set!(c.solver.eps_rel, self.eps_rel);
        set!(c.fusion.eps, self.fusion_eps);
        if let Some(m) = self.fusion_mode {
            c.fusion.mode = m.into();
        }
        if let Some(e) = self.engine {
            c.engine = e.into();
        }
        Ok(c)
    }
}

impl GridArgs {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(v) = &self.grid_radii {
            c.grid.radii = v.clone();
        }
        if let Some(v) = &self.grid_lambda {
            c.grid.lambda = v.clone();
        }
        if let Some(v) = &self.grid_lambda_n {
            c.grid.lambda_n = v.clone();
        }
        if let Some(v) = &self.grid_lambda_h {
            c.grid.lambda_h = v.clone();
        }
    }
}

fn run(cli: Cli) -> netfuse::Result<bool> {
    match cli.command {
        Command::Fit(run) => commands::fit(&run.resolve()?),
        Command::Cv { run, grid, dry_run } => {
            let mut c = run.resolve()?;
            grid.apply(&mut c);
            commands::cv(&c, dry_run)
        }
        Command::Predict { run, bundle, effects_hour, effects_day, effects_format, effects_out } => {
            let args = PredictArgs { bundle, effects_at: effects_hour.zip(effects_day), effects_format, effects_out };
            commands::predict(&run.resolve()?, &args)
        }
        Command::Mc { bundle, stations, radius, eps, mode, engine, out, edges_out } => commands::mc(&McArgs {
            bundle,
            stations,
            radius_m: radius,
            fusion: FusionTolerance { eps, mode: mode.into() },
            engine: engine.into(),
            out,
            edges_out,
        }),
        Command::Synth {
            out,
            stations,
            days,
            clusters,
            seed,
            capacity,
            spread,
            separation,
            level,
            amplitude,
            rain_prob,
        } => commands::synth(&SynthArgs {
            out,
            stations,
            days,
            clusters,
            seed,
            capacity,
            spread_m: spread,
            separation_m: separation,
            level,
            amplitude,
            rain_prob,
        }),
        Command::ExportGraph { stations, radius, format, out } => {
            commands::export_graph(&stations, radius, format, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("warning: solver did not converge");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
