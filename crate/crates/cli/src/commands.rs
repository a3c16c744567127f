//! Subcommand bodies. Each returns whether the run converged; errors bubble
//! up to `main` and become exit code 1.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use netfuse::admm::{self, SolveReport};
use netfuse::bundle::{read_bundle, write_bundle, BundleMeta};
use netfuse::complexity::{
    intersection_edges, model_complexity, write_intersection_edges, ComponentEngine, FusionTolerance,
};
use netfuse::cv::{grid_search, make_folds, mspr, task_matrix, write_cv_table, CvOptions};
use netfuse::data::{
    clustered_registry, load_panel_with, planted_truth, synth_panel, CalendarDims, LoadOptions, RentalPanel,
    StationRegistry, SynthConfig,
};
use netfuse::graph::{build_proximity, ProximityGraph};
use netfuse::model::{fit_unpenalized, means, neg_loglik, IrlsOptions, ModelKind, ParamDims};
use netfuse::penalty::PenaltyConfig;
use netfuse::projection::build_plan;
use netfuse::{Error, Params, Result};
use serde_json::json;

use crate::config::{RunConfig, TimeUnit};

pub const CONFIG_FILE: &str = "config.json";
pub const PARAMS_DIR: &str = "params";
pub const SOLVE_LOG_FILE: &str = "solve_log.jsonl";
pub const SOLVE_REPORT_FILE: &str = "solve_report.json";
pub const MC_FILE: &str = "mc.json";
pub const CV_TABLE_FILE: &str = "cv_table.csv";
pub const CV_RESULT_FILE: &str = "cv_result.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn load_panel(cfg: &RunConfig) -> Result<RentalPanel> {
    let (rentals, stations, weather) = cfg.input_paths()?;
    let opts = LoadOptions { time_scale: 1.0, drop_days_without_weather: cfg.drop_days_without_weather };
    let panel = load_panel_with(rentals, stations, weather, &opts)?;
    let unit = match cfg.time_unit {
        TimeUnit::Day => 1.0,
        TimeUnit::Span => 1.0 / panel.n_days() as f64,
    };
    Ok(panel.with_time_scale(unit * cfg.time_scale))
}

/// Registry order must match the bundle: the first station is the
/// interaction baseline.
fn check_station_order(meta: &BundleMeta, registry: &StationRegistry) -> Result<()> {
    let ids: Vec<&str> = registry.stations().iter().map(|s| s.id.as_str()).collect();
    if ids.len() != meta.station_ids.len() || ids.iter().zip(&meta.station_ids).any(|(a, b)| a != b) {
        return Err(Error::Dimension("station list does not match the bundle's station order".into()));
    }
    Ok(())
}

struct FitOutcome {
    params: Params,
    report: SolveReport,
}

/// Penalized fit of `panel` on `graph`; progress lines go to `log_path`.
fn fit_panel(
    panel: &RentalPanel,
    graph: &ProximityGraph,
    model: ModelKind,
    penalty: &PenaltyConfig,
    cfg: &RunConfig,
    log_path: &Path,
) -> Result<FitOutcome> {
    let mut log = BufWriter::new(File::create(log_path).map_err(|e| Error::io(log_path, e))?);
    let outcome = match model {
        ModelKind::NoInteraction => {
            let params: Params = fit_unpenalized(panel, ModelKind::NoInteraction, &IrlsOptions::default())?;
            let objective = neg_loglik(&params, panel)?;
            let report = SolveReport {
                iterations: 0,
                primal_residual: 0.0,
                dual_residual: 0.0,
                objective,
                converged: true,
                rho: penalty.rho,
                inner_limit_hits: 0,
            };
            writeln!(log, "{}", json!({ "model": "no_interaction", "objective": objective }))
                .map_err(|e| Error::io(log_path, e))?;
            FitOutcome { params, report }
        }
        ModelKind::FullInteraction => {
            let plan = build_plan::<f64>(graph, ParamDims::of_panel(panel))?;
            let out = admm::solve(panel, &plan, penalty, &cfg.solver, None, Some(&mut log))?;
            FitOutcome { params: out.params, report: out.report }
        }
    };
    log.flush().map_err(|e| Error::io(log_path, e))?;
    Ok(outcome)
}

/// Writes bundle, report and complexity for a finished fit.
fn write_fit_outputs(dir: &Path, panel: &RentalPanel, graph: &ProximityGraph, fit: &FitOutcome, cfg: &RunConfig) -> Result<()> {
    write_bundle(dir.join(PARAMS_DIR), &fit.params, panel.registry())?;
    write_json(&dir.join(SOLVE_REPORT_FILE), &fit.report)?;
    let mc = model_complexity(graph, &fit.params, &cfg.fusion, cfg.engine)?;
    write_json(&dir.join(MC_FILE), &mc)?;
    println!(
        "objective {:.10e}, {} iterations, converged {}, MC {:.6} ({} / {})",
        fit.report.objective, fit.report.iterations, fit.report.converged, mc.mc, mc.numerator, mc.n_free
    );
    Ok(())
}

pub fn fit(cfg: &RunConfig) -> Result<bool> {
    cfg.validate()?;
    let panel = load_panel(cfg)?;
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    write_text(&dir.join(CONFIG_FILE), &cfg.to_json()?)?;
    let graph = build_proximity(panel.registry(), cfg.radius_m)?;
    log::info!("{} stations, {} days, {} graph edges", panel.n_stations(), panel.n_days(), graph.n_edges());
    let fit = fit_panel(&panel, &graph, cfg.model, &cfg.penalty, cfg, &dir.join(SOLVE_LOG_FILE))?;
    write_fit_outputs(dir, &panel, &graph, &fit, cfg)?;
    Ok(fit.report.converged)
}

pub fn cv(cfg: &RunConfig, dry_run: bool) -> Result<bool> {
    cfg.validate()?;
    cfg.grid.validate()?;
    let panel = load_panel(cfg)?;
    let folds = make_folds(&panel, cfg.folds, cfg.seed)?;
    if dry_run {
        let mut out = std::io::stdout().lock();
        let io = |e| Error::io("<stdout>", e);
        writeln!(out, "task,r,lambda,lambda_N,lambda_H,fold,train_days,test_days").map_err(io)?;
        for (i, t) in task_matrix(&cfg.grid, &folds).iter().enumerate() {
            let test = folds.folds[t.fold].len();
            let train = if folds.n_folds() == 1 { test } else { panel.n_days() - test };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                i + 1,
                t.point.radius,
                t.point.lambda,
                t.point.lambda_n,
                t.point.lambda_h,
                t.fold + 1,
                train,
                test
            )
            .map_err(io)?;
        }
        return Ok(true);
    }
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    write_text(&dir.join(CONFIG_FILE), &cfg.to_json()?)?;
    let opts = CvOptions { admm: cfg.solver.clone(), workers: cfg.workers };
    let result = grid_search(&panel, &cfg.grid, &folds, &opts)?;
    write_cv_table(&result, dir.join(CV_TABLE_FILE))?;
    write_json(&dir.join(CV_RESULT_FILE), &result)?;
    let w = result.winner;
    println!(
        "winner r={} lambda={} lambda_N={} lambda_H={} mean MSPR {:.6} (converged on all folds: {})",
        w.radius, w.lambda, w.lambda_n, w.lambda_h, result.winner_mspr, result.winner_converged
    );
    if !result.winner_converged {
        log::warn!("no grid point converged on every fold; winner picked among all points");
    }

    let graph = build_proximity(panel.registry(), w.radius)?;
    let penalty = w.penalty(cfg.penalty.rho);
    let fit = fit_panel(&panel, &graph, ModelKind::FullInteraction, &penalty, cfg, &dir.join(SOLVE_LOG_FILE))?;
    write_fit_outputs(dir, &panel, &graph, &fit, cfg)?;
    Ok(fit.report.converged && result.winner_converged)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EffectsFormat {
    Csv,
    Geojson,
}

pub struct PredictArgs {
    pub bundle: PathBuf,
    /// Hour and day-of-week (0-based, Monday = 0) for the effect export.
    pub effects_at: Option<(usize, usize)>,
    pub effects_format: EffectsFormat,
    pub effects_out: Option<PathBuf>,
}

pub fn predict(cfg: &RunConfig, args: &PredictArgs) -> Result<bool> {
    let (params, meta) = read_bundle(&args.bundle)?;
    let panel = load_panel(cfg)?;
    check_station_order(&meta, panel.registry())?;
    params.check_panel(&panel)?;
    let dir = &cfg.output_dir;
    create_dir(dir)?;

    let mu: Vec<f64> = means(&params, &panel);
    let path = dir.join(PREDICTIONS_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    w.write_record(["station_id", "date", "hour", "mu_hat"]).map_err(|e| Error::csv(&path, e))?;
    for (i, &m) in mu.iter().enumerate() {
        let o = panel.obs(i);
        let day = &panel.days()[o.day];
        let date = day.date.map_or_else(|| day.index.to_string(), |d| d.to_string());
        w.write_record([panel.registry().get(o.station).id.as_str(), &date, &o.hour.to_string(), &m.to_string()])
            .map_err(|e| Error::csv(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let observed = panel.counts_as::<f64>();
    let score = mspr(&observed, &mu)?;
    let total_obs: f64 = observed.iter().sum();
    let total_pred: f64 = mu.iter().sum();
    println!("{} predictions, MSPR {score:.6}, observed total {total_obs}, predicted total {total_pred:.3}", mu.len());

    if let Some((h, d)) = args.effects_at {
        let out = args.effects_out.clone().unwrap_or_else(|| {
            dir.join(match args.effects_format {
                EffectsFormat::Csv => "effects.csv",
                EffectsFormat::Geojson => "effects.geojson",
            })
        });
        write_effects(&params, panel.registry(), h, d, args.effects_format, &out)?;
    }
    Ok(true)
}

/// Combined station effect θ_s + hour + day-of-week terms at one (h, d).
pub fn write_effects(
    params: &Params,
    registry: &StationRegistry,
    h: usize,
    d: usize,
    format: EffectsFormat,
    path: &Path,
) -> Result<()> {
    let dims = params.dims();
    if h >= dims.n_hours || d >= dims.n_days_of_week {
        return Err(Error::Validation(format!(
            "effect export at hour {h}, day {d} outside {} hours and {} days",
            dims.n_hours, dims.n_days_of_week
        )));
    }
    let value = |s: usize| {
        params.theta[s]
            + params.shared_hod(h)
            + params.shared_dow(d)
            + params.hod_interaction(s, h)
            + params.dow_interaction(s, d)
    };
    match format {
        EffectsFormat::Csv => {
            let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
            w.write_record(["station_id", "latitude", "longitude", "hour", "day", "effect"])
                .map_err(|e| Error::csv(path, e))?;
            for (s, st) in registry.stations().iter().enumerate() {
                w.write_record([
                    st.id.clone(),
                    st.latitude.to_string(),
                    st.longitude.to_string(),
                    h.to_string(),
                    d.to_string(),
                    value(s).to_string(),
                ])
                .map_err(|e| Error::csv(path, e))?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
        EffectsFormat::Geojson => {
            let features: Vec<_> = registry
                .stations()
                .iter()
                .enumerate()
                .map(|(s, st)| {
                    json!({
                        "type": "Feature",
                        "geometry": { "type": "Point", "coordinates": [st.longitude, st.latitude] },
                        "properties": { "station_id": st.id, "hour": h, "day": d, "effect": value(s) },
                    })
                })
                .collect();
            write_json(path, &json!({ "type": "FeatureCollection", "features": features }))
        }
    }
}

pub struct McArgs {
    pub bundle: PathBuf,
    pub stations: PathBuf,
    pub radius_m: f64,
    pub fusion: FusionTolerance,
    pub engine: ComponentEngine,
    pub out: Option<PathBuf>,
    pub edges_out: Option<PathBuf>,
}

pub fn mc(args: &McArgs) -> Result<bool> {
    let (params, meta) = read_bundle(&args.bundle)?;
    let registry = StationRegistry::load(&args.stations)?;
    check_station_order(&meta, &registry)?;
    let graph = build_proximity(&registry, args.radius_m)?;
    let report = model_complexity(&graph, &params, &args.fusion, args.engine)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &args.out {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    if let Some(p) = &args.edges_out {
        let edges = intersection_edges(&graph, &params.phi(), &args.fusion);
        write_intersection_edges(&edges, &registry, p)?;
    }
    Ok(true)
}

pub struct SynthArgs {
    pub out: PathBuf,
    pub stations: usize,
    pub days: usize,
    pub clusters: usize,
    pub seed: u64,
    pub capacity: u32,
    pub spread_m: f64,
    pub separation_m: f64,
    pub level: f64,
    pub amplitude: f64,
    pub rain_prob: f64,
}

/// Clustered stations with a planted fused truth and Poisson counts on a
/// 24-hour, 7-day calendar.
pub fn synth(args: &SynthArgs) -> Result<bool> {
    if args.stations == 0 || args.days == 0 || args.clusters == 0 {
        return Err(Error::Validation("stations, days and clusters must be positive".into()));
    }
    let (registry, groups) =
        clustered_registry(args.seed, args.stations, args.clusters, args.spread_m, args.separation_m, args.capacity);
    let dims = CalendarDims::default();
    let truth = planted_truth(args.seed, dims, &groups, args.level, args.amplitude)?;
    let cfg = SynthConfig { n_days: args.days, dims, rain_prob: args.rain_prob, ..Default::default() };
    let registry = Arc::new(registry);
    let panel = synth_panel(args.seed, Arc::clone(&registry), &cfg, &truth)?;
    create_dir(&args.out)?;
    panel.write(args.out.join("rentals.csv"), args.out.join("stations.csv"), args.out.join("weather.csv"))?;
    write_bundle(args.out.join("truth"), &truth, &registry)?;
    println!(
        "{} stations in {} clusters, {} days, {} rentals",
        args.stations,
        args.clusters,
        args.days,
        panel.counts().iter().map(|&c| u64::from(c)).sum::<u64>()
    );
    Ok(true)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum GraphFormat {
    Csv,
    Graphml,
}

pub fn export_graph(stations: &Path, radius_m: f64, format: GraphFormat, out: &Path) -> Result<bool> {
    let registry = StationRegistry::load(stations)?;
    let graph = build_proximity(&registry, radius_m)?;
    match format {
        GraphFormat::Csv => graph.write_edge_list(&registry, out)?,
        GraphFormat::Graphml => write_text(out, &graph.to_graphml(&registry)?)?,
    }
    let (_, n_comp) = graph.components();
    println!("{} stations, {} edges, {} connected components", registry.len(), graph.n_edges(), n_comp);
    Ok(true)
}
