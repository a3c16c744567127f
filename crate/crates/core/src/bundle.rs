//! Parameter bundles: a directory with one CSV per parameter block plus
//! `dims.json`. Numbers are written in shortest round-trip form, so reading
//! a bundle back gives bit-identical values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AirQuality, StationRegistry};
use crate::error::{Error, Result};
use crate::model::{ParamDims, ParamState};

pub const DIMS_FILE: &str = "dims.json";
pub const EFFECTS_FILE: &str = "effects.csv";
pub const HOD_FILE: &str = "hod.csv";
pub const DOW_FILE: &str = "dow.csv";
pub const THETA_FILE: &str = "theta.csv";
pub const HOD_STATION_FILE: &str = "hod_station.csv";
pub const DOW_STATION_FILE: &str = "dow_station.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub n_stations: usize,
    pub n_hours: usize,
    pub n_days_of_week: usize,
    /// Station ids in model order; the first is the interaction baseline.
    pub station_ids: Vec<String>,
}

impl BundleMeta {
    pub fn dims(&self) -> ParamDims {
        ParamDims::new(self.n_stations, self.n_hours, self.n_days_of_week)
    }
}

fn effect_names() -> [String; 5] {
    let air = |a: AirQuality| format!("air_{}", a.as_str());
    ["alpha".into(), "rain".into(), air(AirQuality::Bad), air(AirQuality::Average), air(AirQuality::Good)]
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(header).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `params` into `dir` (created if missing).
pub fn write_bundle(dir: impl AsRef<Path>, params: &ParamState<f64>, registry: &StationRegistry) -> Result<()> {
    let dir = dir.as_ref();
    params.validate()?;
    let dims = params.dims();
    if registry.len() != dims.n_stations {
        return Err(Error::Dimension(format!("{} stations in registry, {} in parameters", registry.len(), dims.n_stations)));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ids: Vec<String> = registry.stations().iter().map(|s| s.id.clone()).collect();
    let meta = BundleMeta {
        n_stations: dims.n_stations,
        n_hours: dims.n_hours,
        n_days_of_week: dims.n_days_of_week,
        station_ids: ids.clone(),
    };
    let json = serde_json::to_string_pretty(&meta)? + "\n";
    let p = dir.join(DIMS_FILE);
    fs::write(&p, json).map_err(|e| Error::io(&p, e))?;

    let names = effect_names();
    write_rows(
        &dir.join(EFFECTS_FILE),
        &["name", "value"],
        names.iter().zip(params.effects.to_array()).map(|(n, v)| vec![n.clone(), v.to_string()]),
    )?;
    write_rows(
        &dir.join(HOD_FILE),
        &["hour", "value"],
        params.hod.iter().enumerate().map(|(h, v)| vec![(h + 1).to_string(), v.to_string()]),
    )?;
    write_rows(
        &dir.join(DOW_FILE),
        &["day", "value"],
        params.dow.iter().enumerate().map(|(d, v)| vec![(d + 1).to_string(), v.to_string()]),
    )?;
    write_rows(
        &dir.join(THETA_FILE),
        &["station_id", "value"],
        params.theta.iter().zip(&ids).map(|(v, id)| vec![id.clone(), v.to_string()]),
    )?;
    let long = |m: &ndarray::Array2<f64>| -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        for (r, row) in m.rows().into_iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                rows.push(vec![ids[r + 1].clone(), (c + 1).to_string(), v.to_string()]);
            }
        }
        rows
    };
    write_rows(&dir.join(HOD_STATION_FILE), &["station_id", "hour", "value"], long(&params.hod_station))?;
    write_rows(&dir.join(DOW_STATION_FILE), &["station_id", "day", "value"], long(&params.dow_station))?;
    Ok(())
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let got = r.headers().map_err(|e| Error::csv(path, e))?.clone();
    if got.iter().collect::<Vec<_>>() != header {
        return Err(Error::Schema(format!("{}: expected header {header:?}, found {got:?}", path.display())));
    }
    r.records().map(|rec| rec.map_err(|e| Error::csv(path, e))).collect()
}

fn parse<T: std::str::FromStr>(path: &Path, field: &str) -> Result<T> {
    field.trim().parse().map_err(|_| Error::Schema(format!("{}: cannot parse {field:?}", path.display())))
}

/// Reads a bundle written by [`write_bundle`].
pub fn read_bundle(dir: impl AsRef<Path>) -> Result<(ParamState<f64>, BundleMeta)> {
    let dir = dir.as_ref();
    let p = dir.join(DIMS_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let meta: BundleMeta = serde_json::from_str(&text)?;
    let dims = meta.dims();
    if meta.station_ids.len() != dims.n_stations || dims.n_stations == 0 || dims.n_hours < 2 || dims.n_days_of_week == 0 {
        return Err(Error::Schema(format!("{}: inconsistent dimensions", p.display())));
    }
    let mut params = ParamState::<f64>::zeros(dims);
    let pos = |path: &Path, id: &str| -> Result<usize> {
        meta.station_ids
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| Error::Schema(format!("{}: unknown station {id:?}", path.display())))
    };
    let index = |path: &Path, field: &str, upper: usize| -> Result<usize> {
        let k: usize = parse(path, field)?;
        if k == 0 || k >= upper {
            return Err(Error::Schema(format!("{}: level {k} outside 1..{}", path.display(), upper - 1)));
        }
        Ok(k - 1)
    };

    let path = dir.join(EFFECTS_FILE);
    let names = effect_names();
    let mut eff = [0.0; 5];
    let mut seen = [false; 5];
    for rec in read_rows(&path, &["name", "value"])? {
        let k = names
            .iter()
            .position(|n| n == &rec[0])
            .ok_or_else(|| Error::Schema(format!("{}: unknown effect {:?}", path.display(), &rec[0])))?;
        eff[k] = parse(&path, &rec[1])?;
        seen[k] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Schema(format!("{}: missing effects", path.display())));
    }
    params.effects = crate::model::CovariateEffects::from_slice(&eff);

    let fill_vec = |file: &str, key: &str, target: &mut ndarray::Array1<f64>, upper: usize| -> Result<()> {
        let path = dir.join(file);
        let rows = read_rows(&path, &[key, "value"])?;
        if rows.len() != upper - 1 {
            return Err(Error::Schema(format!("{}: expected {} rows, found {}", path.display(), upper - 1, rows.len())));
        }
        for rec in rows {
            target[index(&path, &rec[0], upper)?] = parse(&path, &rec[1])?;
        }
        Ok(())
    };
    fill_vec(HOD_FILE, "hour", &mut params.hod, dims.n_hours)?;
    fill_vec(DOW_FILE, "day", &mut params.dow, dims.n_days_of_week)?;

    let path = dir.join(THETA_FILE);
    let rows = read_rows(&path, &["station_id", "value"])?;
    if rows.len() != dims.n_stations {
        return Err(Error::Schema(format!("{}: expected {} rows", path.display(), dims.n_stations)));
    }
    for rec in rows {
        params.theta[pos(&path, &rec[0])?] = parse(&path, &rec[1])?;
    }

    for (file, key, target, upper) in [
        (HOD_STATION_FILE, "hour", &mut params.hod_station, dims.n_hours),
        (DOW_STATION_FILE, "day", &mut params.dow_station, dims.n_days_of_week),
    ] {
        let path = dir.join(file);
        let rows = read_rows(&path, &["station_id", key, "value"])?;
        if rows.len() != target.len() {
            return Err(Error::Schema(format!("{}: expected {} rows, found {}", path.display(), target.len(), rows.len())));
        }
        for rec in rows {
            let s = pos(&path, &rec[0])?;
            if s == 0 {
                return Err(Error::Schema(format!("{}: baseline station carries no interactions", path.display())));
            }
            target[[s - 1, index(&path, &rec[1], upper)?]] = parse(&path, &rec[2])?;
        }
    }
    params.validate()?;
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_registry;

    #[test]
    fn round_trip_is_exact() {
        let reg = synth_registry(3, 4, 1000.0, 7);
        let dims = ParamDims::new(4, 5, 3);
        let v: Vec<f64> = (0..dims.n_free()).map(|j| (j as f64 * 0.7313).sin() / 3.0).collect();
        let p = ParamState::from_flat(dims, &v).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), &p, &reg).unwrap();
        let (q, meta) = read_bundle(dir.path()).unwrap();
        assert_eq!(p, q);
        assert_eq!(meta.station_ids[0], reg.get(0).id);
    }
}
