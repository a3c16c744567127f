//! Run configuration: one TOML or JSON document, overridable by flags.

use std::fs;
use std::path::{Path, PathBuf};

use netfuse::admm::AdmmOptions;
use netfuse::complexity::{ComponentEngine, FusionTolerance};
use netfuse::cv::GridSpec;
use netfuse::model::ModelKind;
use netfuse::penalty::PenaltyConfig;
use netfuse::{Error, Result};
use serde::{Deserialize, Serialize};

/// Unit of the trend covariate t(i).
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TimeUnit {
    /// t(i) = day index 0..T-1.
    Day,
    /// t(i) = day index / T, so the trend spans [0, 1).
    Span,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub rentals: Option<PathBuf>,
    pub stations: Option<PathBuf>,
    pub weather: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub model: ModelKind,
    pub radius_m: f64,
    pub penalty: PenaltyConfig,
    pub grid: GridSpec,
    pub folds: usize,
    pub seed: u64,
    pub time_unit: TimeUnit,
    /// Extra factor applied to t(i) after `time_unit`.
    pub time_scale: f64,
    pub drop_days_without_weather: bool,
    /// Worker threads for cross-validation; 0 uses all available cores.
    pub workers: usize,
    pub solver: AdmmOptions,
    pub fusion: FusionTolerance,
    pub engine: ComponentEngine,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            rentals: None,
            stations: None,
            weather: None,
            output_dir: PathBuf::from("out"),
            model: ModelKind::FullInteraction,
            radius_m: 1500.0,
            penalty: PenaltyConfig::default(),
            grid: GridSpec::default(),
            folds: 7,
            seed: 0,
            time_unit: TimeUnit::Day,
            time_scale: 1.0,
            drop_days_without_weather: false,
            workers: 0,
            solver: AdmmOptions::default(),
            fusion: FusionTolerance::default(),
            engine: ComponentEngine::UnionFind,
        }
    }
}

impl RunConfig {
    /// Reads a `.json` file as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        if is_json {
            serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius_m.is_finite() && self.radius_m > 0.0) {
            return Err(Error::Validation(format!("radius_m must be positive, got {}", self.radius_m)));
        }
        if !(self.time_scale.is_finite() && self.time_scale > 0.0) {
            return Err(Error::Validation(format!("time_scale must be positive, got {}", self.time_scale)));
        }
        self.penalty.validate()?;
        self.solver.validate()?;
        self.fusion.validate()
    }

    pub fn input_paths(&self) -> Result<(&Path, &Path, &Path)> {
        Ok((need(&self.rentals, "rentals")?, need(&self.stations, "stations")?, need(&self.weather, "weather")?))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn need<'a>(p: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Validation(format!("missing input path `{name}`")))
}
