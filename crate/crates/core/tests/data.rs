mod common;

use std::fs;
use std::path::Path;
use std::sync::Arc;

use netfuse::data::{
    load_panel, load_panel_with, synth_panel, synth_registry, LoadOptions, StationRegistry, SynthConfig,
};
use netfuse::model::{ParamDims, ParamState};
use netfuse::Error;

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

const STATIONS: &str = "station_id,latitude,longitude,capacity\nA,37.50,127.00,10\nB,37.51,127.01,12\n";
const WEATHER: &str = "date,rain,air\n2019-04-01,0,good\n2019-04-02,1,bad\n";

#[test]
fn written_panel_loads_back_identically() {
    let dims = ParamDims::new(4, 24, 7);
    let truth = {
        let mut p = ParamState::zeros(dims);
        p.theta.fill(-1.0);
        p
    };
    let reg = Arc::new(synth_registry(3, 4, 1500.0, 9));
    let panel = synth_panel(3, reg, &SynthConfig { n_days: 10, ..Default::default() }, &truth).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (r, s, w) = (dir.path().join("r.csv"), dir.path().join("s.csv"), dir.path().join("w.csv"));
    panel.write(&r, &s, &w).unwrap();
    let back = load_panel(&r, &s, &w).unwrap();
    assert_eq!(back.counts(), panel.counts());
    assert_eq!(back.days(), panel.days());
    assert_eq!(back.registry(), panel.registry());
}

#[test]
fn duplicate_rental_rows_are_summed() {
    let dir = tempfile::tempdir().unwrap();
    let (r, s, w) = (dir.path().join("r.csv"), dir.path().join("s.csv"), dir.path().join("w.csv"));
    write(&s, STATIONS);
    write(&w, WEATHER);
    write(&r, "station_id,date,hour,count\nB,2019-04-02,8,3\nB,2019-04-02,8,4\nA,2019-04-01,0,1\n");
    let panel = load_panel(&r, &s, &w).unwrap();
    assert_eq!(panel.count(1, 1, 8), 7);
    assert_eq!(panel.count(0, 0, 0), 1);
    assert_eq!(panel.counts().iter().map(|&c| c as u64).sum::<u64>(), 8);
    // 2019-04-01 is a Monday, the baseline level.
    assert_eq!(panel.days()[0].day_of_week, 0);
    assert_eq!(panel.days()[1].day_of_week, 1);
    assert!(panel.days()[1].rain);
}

#[test]
fn rental_day_without_weather_is_an_error_unless_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let (r, s, w) = (dir.path().join("r.csv"), dir.path().join("s.csv"), dir.path().join("w.csv"));
    write(&s, STATIONS);
    write(&w, WEATHER);
    write(&r, "station_id,date,hour,count\nA,2019-04-01,3,2\nA,2019-04-05,3,9\n");
    assert!(matches!(load_panel(&r, &s, &w), Err(Error::MissingCovariate(_))));
    let opts = LoadOptions { drop_days_without_weather: true, ..Default::default() };
    let panel = load_panel_with(&r, &s, &w, &opts).unwrap();
    assert_eq!(panel.n_days(), 2);
    assert_eq!(panel.counts().iter().sum::<u32>(), 2);
}

#[test]
fn malformed_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (r, s, w) = (dir.path().join("r.csv"), dir.path().join("s.csv"), dir.path().join("w.csv"));
    write(&s, STATIONS);
    write(&w, WEATHER);
    for bad in [
        "station_id,date,hour,count\nZ,2019-04-01,3,2\n",
        "station_id,date,hour,count\nA,2019-04-01,24,2\n",
        "station_id,date,hour,count\nA,01/04/2019,3,2\n",
        "station_id,date,hour,count\nA,2019-04-01,3,-1\n",
    ] {
        write(&r, bad);
        assert!(load_panel(&r, &s, &w).is_err(), "accepted {bad:?}");
    }
    write(&r, "station_id,date,hour,count\n");
    write(&w, "date,rain,air\n2019-04-01,2,good\n");
    assert!(load_panel(&r, &s, &w).is_err());
    write(&w, "date,rain,air\n2019-04-01,0,excellent\n");
    assert!(load_panel(&r, &s, &w).is_err());
    assert!(load_panel(dir.path().join("missing.csv"), &s, &w).is_err());
}

#[test]
fn registry_round_trip_and_duplicate_ids() {
    let dir = tempfile::tempdir().unwrap();
    let reg = synth_registry(5, 7, 3000.0, 11);
    let path = dir.path().join("s.csv");
    reg.write(&path).unwrap();
    assert_eq!(StationRegistry::load(&path).unwrap(), reg);
    write(&path, "station_id,latitude,longitude,capacity\nA,37.5,127.0,10\nA,37.6,127.0,10\n");
    assert!(StationRegistry::load(&path).is_err());
}

#[test]
fn select_days_keeps_trend_and_counts() {
    let dims = ParamDims::new(3, 4, 2);
    let panel = common::small_panel(8, dims, 9, 10, 0.0, 0.3);
    let sub = panel.select_days(&[2, 5, 7]).unwrap();
    assert_eq!(sub.n_days(), 3);
    for s in 0..3 {
        for (k, &t) in [2, 5, 7].iter().enumerate() {
            assert_eq!(sub.days()[k].time, panel.days()[t].time);
            for h in 0..4 {
                assert_eq!(sub.count(s, k, h), panel.count(s, t, h));
            }
        }
    }
    assert!(panel.select_days(&[9]).is_err());
}
