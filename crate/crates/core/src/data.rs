//! Station registry, weather covariates and the complete station × day × hour
//! count grid, plus CSV ingestion and synthetic panel generation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::model::ParamState;

const DATE_FORMAT: &str = "%Y-%m-%d";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Station {
    #[serde(rename = "station_id")]
    pub id: String,
    pub latitude: f64,
    pub longitude: f64,
    /// Number of docks; enters the mean as the offset `log(capacity)`.
    pub capacity: u32,
}

/// Ordered set of stations. The first station is the identifiability
/// baseline for the station-specific interaction effects.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StationRegistry {
    stations: Vec<Station>,
    index: HashMap<String, usize>,
}

impl StationRegistry {
    pub fn new(stations: Vec<Station>) -> Result<Self> {
        let mut index = HashMap::with_capacity(stations.len());
        for (i, st) in stations.iter().enumerate() {
            if st.capacity == 0 {
                return Err(Error::Validation(format!("station {} has capacity 0", st.id)));
            }
            if !(-90.0..=90.0).contains(&st.latitude) || !(-180.0..=180.0).contains(&st.longitude) {
                return Err(Error::Validation(format!(
                    "station {} has out-of-range coordinates ({}, {})",
                    st.id, st.latitude, st.longitude
                )));
            }
            if index.insert(st.id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate station id {}", st.id)));
            }
        }
        Ok(Self { stations, index })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut stations = Vec::new();
        for row in rdr.deserialize::<Station>() {
            stations.push(row.map_err(|e| Error::csv(path, e))?);
        }
        Self::new(stations)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for st in &self.stations {
            wtr.serialize(st).map_err(|e| Error::csv(path, e))?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn get(&self, i: usize) -> &Station {
        &self.stations[i]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }
}

/// Daily air-quality category. Index 0 (`VeryBad`) is the baseline level.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AirQuality {
    VeryBad,
    Bad,
    Average,
    Good,
}

impl AirQuality {
    pub const ALL: [AirQuality; 4] =
        [AirQuality::VeryBad, AirQuality::Bad, AirQuality::Average, AirQuality::Good];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AirQuality::VeryBad => "very_bad",
            AirQuality::Bad => "bad",
            AirQuality::Average => "average",
            AirQuality::Good => "good",
        }
    }
}

impl fmt::Display for AirQuality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AirQuality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AirQuality::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Schema(format!("unknown air category {s:?}")))
    }
}

/// One-hot encoding over (very_bad, bad, average, good).
pub fn encode_air(category: AirQuality) -> [u8; 4] {
    let mut v = [0u8; 4];
    v[category.index()] = 1;
    v
}

/// Sizes of the hour-of-day and day-of-week factors.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalendarDims {
    pub n_hours: usize,
    pub n_days_of_week: usize,
}

impl Default for CalendarDims {
    fn default() -> Self {
        Self { n_hours: 24, n_days_of_week: 7 }
    }
}

impl CalendarDims {
    pub fn new(n_hours: usize, n_days_of_week: usize) -> Result<Self> {
        let dims = Self { n_hours, n_days_of_week };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_hours < 2 {
            return Err(Error::Validation(format!("n_hours must be >= 2, got {}", self.n_hours)));
        }
        if self.n_days_of_week < 1 {
            return Err(Error::Validation("n_days_of_week must be >= 1".into()));
        }
        Ok(())
    }
}

/// A calendar day of the panel with its day-level covariates.
#[derive(Clone, Debug, PartialEq)]
pub struct Day {
    pub date: Option<NaiveDate>,
    /// 0 is the baseline level (Monday for real calendars).
    pub day_of_week: usize,
    /// Position in the original calendar, kept when a panel is subset.
    pub index: usize,
    /// Value of the trend covariate t(i) for observations on this day.
    pub time: f64,
    pub rain: bool,
    pub air: AirQuality,
}

/// Position of an observation in the grid.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    pub station: usize,
    pub day: usize,
    pub hour: usize,
}

/// Complete grid of hourly counts, flattened as `(station * n_days + day) * n_hours + hour`.
#[derive(Clone, Debug, PartialEq)]
pub struct RentalPanel {
    registry: Arc<StationRegistry>,
    days: Vec<Day>,
    dims: CalendarDims,
    counts: Vec<u32>,
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// t(i) = day position × `time_scale`.
    pub time_scale: f64,
    /// Silently drop rental rows dated on days absent from the weather file
    /// instead of failing with a missing-covariate error.
    pub drop_days_without_weather: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { time_scale: 1.0, drop_days_without_weather: false }
    }
}

#[derive(Deserialize)]
struct RentalRow {
    station_id: String,
    date: String,
    hour: i64,
    count: i64,
}

#[derive(Serialize)]
struct RentalRowOut<'a> {
    station_id: &'a str,
    date: String,
    hour: usize,
    count: u32,
}

#[derive(Serialize, Deserialize)]
struct WeatherRow {
    date: String,
    rain: u8,
    air: AirQuality,
}

fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), DATE_FORMAT)
        .map_err(|e| Error::Schema(format!("bad date {s:?}: {e}")))
}

/// Loads the three input files with default options.
pub fn load_panel(
    rentals_path: impl AsRef<Path>,
    stations_path: impl AsRef<Path>,
    weather_path: impl AsRef<Path>,
) -> Result<RentalPanel> {
    load_panel_with(rentals_path, stations_path, weather_path, &LoadOptions::default())
}

pub fn load_panel_with(
    rentals_path: impl AsRef<Path>,
    stations_path: impl AsRef<Path>,
    weather_path: impl AsRef<Path>,
    opts: &LoadOptions,
) -> Result<RentalPanel> {
    let registry = Arc::new(StationRegistry::load(stations_path)?);
    if registry.is_empty() {
        return Err(Error::Schema("station registry is empty".into()));
    }

    let weather_path = weather_path.as_ref();
    let mut weather: BTreeMap<NaiveDate, (bool, AirQuality)> = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(weather_path).map_err(|e| Error::csv(weather_path, e))?;
    for row in rdr.deserialize::<WeatherRow>() {
        let row = row.map_err(|e| Error::csv(weather_path, e))?;
        let date = parse_date(&row.date)?;
        let rain = match row.rain {
            0 => false,
            1 => true,
            other => return Err(Error::Schema(format!("rain flag must be 0 or 1, got {other}"))),
        };
        if weather.insert(date, (rain, row.air)).is_some() {
            return Err(Error::Schema(format!("duplicate weather row for {date}")));
        }
    }
    if weather.is_empty() {
        return Err(Error::MissingCovariate("weather file has no rows".into()));
    }

    let days: Vec<Day> = weather
        .iter()
        .enumerate()
        .map(|(t, (date, &(rain, air)))| Day {
            date: Some(*date),
            day_of_week: date.weekday().num_days_from_monday() as usize,
            index: t,
            time: t as f64 * opts.time_scale,
            rain,
            air,
        })
        .collect();
    let day_pos: HashMap<NaiveDate, usize> =
        days.iter().enumerate().map(|(t, d)| (d.date.unwrap(), t)).collect();

    let dims = CalendarDims::default();
    let n_days = days.len();
    let mut counts = vec![0u32; registry.len() * n_days * dims.n_hours];

    let rentals_path = rentals_path.as_ref();
    let mut rdr = csv::Reader::from_path(rentals_path).map_err(|e| Error::csv(rentals_path, e))?;
    for row in rdr.deserialize::<RentalRow>() {
        let row = row.map_err(|e| Error::csv(rentals_path, e))?;
        let s = registry
            .position(&row.station_id)
            .ok_or_else(|| Error::Schema(format!("unknown station {:?} in rentals", row.station_id)))?;
        let date = parse_date(&row.date)?;
        let Some(&t) = day_pos.get(&date) else {
            if opts.drop_days_without_weather {
                continue;
            }
            return Err(Error::MissingCovariate(format!("no weather row for {date}")));
        };
        if !(0..dims.n_hours as i64).contains(&row.hour) {
            return Err(Error::Schema(format!("hour {} out of range 0-23", row.hour)));
        }
        if row.count < 0 {
            return Err(Error::Validation(format!(
                "negative count {} for station {} on {date} hour {}",
                row.count, row.station_id, row.hour
            )));
        }
        let i = (s * n_days + t) * dims.n_hours + row.hour as usize;
        // repeated keys accumulate
        counts[i] = counts[i]
            .checked_add(u32::try_from(row.count).map_err(|_| Error::Validation("count overflow".into()))?)
            .ok_or_else(|| Error::Validation("count overflow".into()))?;
    }

    RentalPanel::new(registry, days, dims, counts)
}

impl RentalPanel {
    pub fn new(
        registry: Arc<StationRegistry>,
        days: Vec<Day>,
        dims: CalendarDims,
        counts: Vec<u32>,
    ) -> Result<Self> {
        dims.validate()?;
        if registry.is_empty() {
            return Err(Error::Validation("panel needs at least one station".into()));
        }
        if days.is_empty() {
            return Err(Error::Validation("panel needs at least one day".into()));
        }
        let expected = registry.len() * days.len() * dims.n_hours;
        if counts.len() != expected {
            return Err(Error::Dimension(format!(
                "count grid has {} cells, expected {expected}",
                counts.len()
            )));
        }
        if let Some(d) = days.iter().find(|d| d.day_of_week >= dims.n_days_of_week) {
            return Err(Error::Validation(format!(
                "day-of-week index {} outside 0..{}",
                d.day_of_week, dims.n_days_of_week
            )));
        }
        Ok(Self { registry, days, dims, counts })
    }

    pub fn registry(&self) -> &StationRegistry {
        &self.registry
    }

    pub fn registry_arc(&self) -> Arc<StationRegistry> {
        Arc::clone(&self.registry)
    }

    pub fn days(&self) -> &[Day] {
        &self.days
    }

    pub fn dims(&self) -> CalendarDims {
        self.dims
    }

    pub fn n_stations(&self) -> usize {
        self.registry.len()
    }

    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    pub fn n_hours(&self) -> usize {
        self.dims.n_hours
    }

    pub fn n_obs(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    #[inline]
    pub fn index(&self, station: usize, day: usize, hour: usize) -> usize {
        (station * self.days.len() + day) * self.dims.n_hours + hour
    }

    #[inline]
    pub fn count(&self, station: usize, day: usize, hour: usize) -> u32 {
        self.counts[self.index(station, day, hour)]
    }

    #[inline]
    pub fn obs(&self, i: usize) -> Observation {
        let h = self.dims.n_hours;
        let t = self.days.len();
        Observation { station: i / (t * h), day: (i / h) % t, hour: i % h }
    }

    /// log(capacity) per station.
    pub fn log_offsets<F: Float>(&self) -> Vec<F> {
        self.registry.stations().iter().map(|s| F::cst(f64::from(s.capacity).ln())).collect()
    }

    /// Counts as floating point, in observation order.
    pub fn counts_as<F: Float>(&self) -> Vec<F> {
        self.counts.iter().map(|&c| F::cst(f64::from(c))).collect()
    }

    /// Sub-panel restricted to the given days (positions into `self.days()`),
    /// keeping each day's calendar index and trend value.
    pub fn select_days(&self, days: &[usize]) -> Result<Self> {
        if days.iter().any(|&t| t >= self.days.len()) {
            return Err(Error::Dimension("day position out of range".into()));
        }
        let h = self.dims.n_hours;
        let mut counts = Vec::with_capacity(self.n_stations() * days.len() * h);
        for s in 0..self.n_stations() {
            for &t in days {
                let start = self.index(s, t, 0);
                counts.extend_from_slice(&self.counts[start..start + h]);
            }
        }
        let sub_days = days.iter().map(|&t| self.days[t].clone()).collect();
        Self::new(Arc::clone(&self.registry), sub_days, self.dims, counts)
    }

    /// Recomputes t(i) as calendar index × `scale`.
    pub fn with_time_scale(mut self, scale: f64) -> Self {
        for d in &mut self.days {
            d.time = d.index as f64 * scale;
        }
        self
    }

    /// Same grid with different counts (e.g. a fresh draw).
    pub fn with_counts(&self, counts: Vec<u32>) -> Result<Self> {
        Self::new(Arc::clone(&self.registry), self.days.clone(), self.dims, counts)
    }

    /// Writes the three CSV inputs; zero cells are omitted from the rentals file.
    pub fn write(
        &self,
        rentals_path: impl AsRef<Path>,
        stations_path: impl AsRef<Path>,
        weather_path: impl AsRef<Path>,
    ) -> Result<()> {
        if self.dims != CalendarDims::default() {
            return Err(Error::Validation("only 24-hour, 7-day panels can be written".into()));
        }
        let dates: Vec<NaiveDate> = self
            .days
            .iter()
            .map(|d| d.date.ok_or_else(|| Error::Validation("panel day without a calendar date".into())))
            .collect::<Result<_>>()?;

        self.registry.write(stations_path)?;

        let weather_path = weather_path.as_ref();
        let mut wtr = csv::Writer::from_path(weather_path).map_err(|e| Error::csv(weather_path, e))?;
        for (d, date) in self.days.iter().zip(&dates) {
            let row = WeatherRow { date: date.format(DATE_FORMAT).to_string(), rain: d.rain as u8, air: d.air };
            wtr.serialize(row).map_err(|e| Error::csv(weather_path, e))?;
        }
        wtr.flush().map_err(|e| Error::io(weather_path, e))?;

        let rentals_path = rentals_path.as_ref();
        let mut wtr = csv::Writer::from_path(rentals_path).map_err(|e| Error::csv(rentals_path, e))?;
        // header must exist even if every count is zero
        wtr.write_record(["station_id", "date", "hour", "count"]).map_err(|e| Error::csv(rentals_path, e))?;
        for (s, st) in self.registry.stations().iter().enumerate() {
            for (t, date) in dates.iter().enumerate() {
                for h in 0..self.dims.n_hours {
                    let c = self.count(s, t, h);
                    if c > 0 {
                        let row = RentalRowOut {
                            station_id: &st.id,
                            date: date.format(DATE_FORMAT).to_string(),
                            hour: h,
                            count: c,
                        };
                        wtr.write_record([
                            row.station_id.to_string(),
                            row.date,
                            row.hour.to_string(),
                            row.count.to_string(),
                        ])
                        .map_err(|e| Error::csv(rentals_path, e))?;
                    }
                }
            }
        }
        wtr.flush().map_err(|e| Error::io(rentals_path, e))
    }
}

/// Calendar and weather settings for synthetic panels.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n_days: usize,
    pub dims: CalendarDims,
    /// When set (and dims are 24/7), days are consecutive dates from here and
    /// the day of week follows the date; otherwise day `t` has level `t mod |D|`.
    pub start_date: Option<NaiveDate>,
    pub rain_prob: f64,
    pub time_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_days: 14,
            dims: CalendarDims::default(),
            start_date: NaiveDate::from_ymd_opt(2019, 4, 1),
            rain_prob: 0.2,
            time_scale: 1.0,
        }
    }
}

/// Deterministic calendar with random rain and air quality.
pub fn synth_days(seed: u64, cfg: &SynthConfig) -> Vec<Day> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da75);
    let use_dates = cfg.start_date.is_some() && cfg.dims == CalendarDims::default();
    (0..cfg.n_days)
        .map(|t| {
            let date = if use_dates { cfg.start_date.map(|d| d + chrono::Days::new(t as u64)) } else { None };
            let day_of_week = match date {
                Some(d) => d.weekday().num_days_from_monday() as usize,
                None => t % cfg.dims.n_days_of_week,
            };
            let rain = rng.random_bool(cfg.rain_prob.clamp(0.0, 1.0));
            let air = AirQuality::ALL[rng.random_range(0..4)];
            Day { date, day_of_week, index: t, time: t as f64 * cfg.time_scale, rain, air }
        })
        .collect()
}

/// Random registry of `n` stations scattered over a few kilometres.
pub fn synth_registry(seed: u64, n: usize, extent_m: f64, capacity: u32) -> StationRegistry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x57a7_1045);
    let (lat0, lon0) = (37.55_f64, 126.98_f64);
    let m_per_deg_lat = 111_195.0;
    let m_per_deg_lon = m_per_deg_lat * lat0.to_radians().cos();
    let stations = (0..n)
        .map(|i| Station {
            id: format!("ST-{:03}", i + 1),
            latitude: lat0 + rng.random_range(0.0..extent_m) / m_per_deg_lat,
            longitude: lon0 + rng.random_range(0.0..extent_m) / m_per_deg_lon,
            capacity,
        })
        .collect();
    StationRegistry::new(stations).expect("synthetic registry is valid")
}

/// Registry of `n` stations in `n_clusters` groups. Group centres lie on a
/// line `separation_m` apart; members scatter within `spread_m` of their
/// centre. Station `i` belongs to group `i % n_clusters`.
pub fn clustered_registry(
    seed: u64,
    n: usize,
    n_clusters: usize,
    spread_m: f64,
    separation_m: f64,
    capacity: u32,
) -> (StationRegistry, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc105_7e25);
    let k = n_clusters.max(1);
    let (lat0, lon0) = (37.55_f64, 126.98_f64);
    let m_per_deg_lat = 111_195.0;
    let m_per_deg_lon = m_per_deg_lat * lat0.to_radians().cos();
    let groups: Vec<usize> = (0..n).map(|i| i % k).collect();
    let stations = groups
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let north = rng.random_range(-spread_m..=spread_m);
            let east = c as f64 * separation_m + rng.random_range(-spread_m..=spread_m);
            Station {
                id: format!("ST-{:03}", i + 1),
                latitude: lat0 + north / m_per_deg_lat,
                longitude: lon0 + east / m_per_deg_lon,
                capacity,
            }
        })
        .collect();
    (StationRegistry::new(stations).expect("synthetic registry is valid"), groups)
}

/// Parameters whose station profiles are shared within each group.
/// Hourly profiles are constant over pairs of adjacent hours, with values
/// `level ± amplitude`; day-of-week profiles deviate from the hour-0 value by
/// at most `amplitude / 2`.
pub fn planted_truth(seed: u64, dims: CalendarDims, groups: &[usize], level: f64, amplitude: f64) -> Result<ParamState<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a17_0e55);
    let k = groups.iter().copied().max().map_or(0, |m| m + 1);
    let (h_n, d_n) = (dims.n_hours, dims.n_days_of_week);
    let mut hod_profiles = Vec::with_capacity(k);
    let mut dow_profiles = Vec::with_capacity(k);
    for _ in 0..k {
        let blocks: Vec<f64> = (0..h_n.div_ceil(2)).map(|_| level + amplitude * rng.random_range(-1.0..1.0)).collect();
        let hod: Vec<f64> = (0..h_n).map(|h| blocks[h / 2]).collect();
        let dow: Vec<f64> =
            (0..d_n).map(|d| if d == 0 { hod[0] } else { hod[0] + 0.5 * amplitude * rng.random_range(-1.0..1.0) }).collect();
        hod_profiles.push(hod);
        dow_profiles.push(dow);
    }
    let s_n = groups.len();
    let phi = crate::model::PhiView {
        hod: ndarray::Array2::from_shape_fn((s_n, h_n), |(s, h)| hod_profiles[groups[s]][h]),
        dow: ndarray::Array2::from_shape_fn((s_n, d_n), |(s, d)| dow_profiles[groups[s]][d]),
    };
    let effects = crate::model::CovariateEffects { alpha: 0.0, rain: -0.3, air: [0.05, 0.1, 0.15] };
    ParamState::from_phi(&phi, effects)
}

/// Draws Poisson counts with means from `truth` on a synthetic calendar.
pub fn synth_panel<F: Float>(
    seed: u64,
    registry: Arc<StationRegistry>,
    cfg: &SynthConfig,
    truth: &ParamState<F>,
) -> Result<RentalPanel> {
    let days = synth_days(seed, cfg);
    let n = registry.len() * days.len() * cfg.dims.n_hours;
    let skeleton = RentalPanel::new(registry, days, cfg.dims, vec![0; n])?;
    resample_counts(seed, &skeleton, truth)
}

/// Fresh Poisson draw on the grid of `panel` with means from `truth`.
pub fn resample_counts<F: Float>(seed: u64, panel: &RentalPanel, truth: &ParamState<F>) -> Result<RentalPanel> {
    truth.check_panel(panel)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = crate::model::means(truth, panel);
    let counts = mu
        .iter()
        .map(|&m| {
            let m = m.as_f64();
            if m <= 0.0 {
                return Ok(0);
            }
            let dist = Poisson::new(m).map_err(|e| Error::Numerical(format!("Poisson({m}): {e}")))?;
            Ok(dist.sample(&mut rng) as u32)
        })
        .collect::<Result<Vec<u32>>>()?;
    panel.with_counts(counts)
}
