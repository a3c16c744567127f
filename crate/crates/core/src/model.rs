//! Poisson log-linear model with station, hour-of-day, day-of-week and
//! station × calendar interaction effects.
//!
//! For observation i at station s, day t and hour h the mean is
//!
//! ```text
//! mu_i = C_s * exp(theta_s + alpha*t + b_rain*rain + <b_air, air> + hod_h + dow_d + hod_{s,h} + dow_{s,d})
//! ```
//!
//! Baseline levels (hour 0, day-of-week 0, air category 0, and every
//! interaction of the first station) are structural zeros and are not stored.

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{Day, RentalPanel};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::linalg;

/// Bound on the log-mean; keeps `exp` finite for any iterate.
pub const ETA_CLAMP: f64 = 40.0;
/// Floor on fitted means inside IRLS.
pub const MU_FLOOR: f64 = 1e-10;

/// Number of covariate effects: trend, rain and three non-baseline air levels.
pub const N_EFFECTS: usize = 5;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamDims {
    pub n_stations: usize,
    pub n_hours: usize,
    pub n_days_of_week: usize,
}

impl ParamDims {
    pub fn new(n_stations: usize, n_hours: usize, n_days_of_week: usize) -> Self {
        Self { n_stations, n_hours, n_days_of_week }
    }

    pub fn of_panel(panel: &RentalPanel) -> Self {
        let d = panel.dims();
        Self::new(panel.n_stations(), d.n_hours, d.n_days_of_week)
    }

    /// Non-baseline hours.
    pub fn hod_free(&self) -> usize {
        self.n_hours - 1
    }

    /// Non-baseline days of week.
    pub fn dow_free(&self) -> usize {
        self.n_days_of_week - 1
    }

    /// Unpenalized parameters shared by all stations (34 for 24 hours and 7 days).
    pub fn n_shared(&self) -> usize {
        N_EFFECTS + self.hod_free() + self.dow_free()
    }

    /// Station-specific interactions per non-baseline station.
    pub fn n_interactions_per_station(&self) -> usize {
        self.hod_free() + self.dow_free()
    }

    pub fn n_free(&self) -> usize {
        self.n_shared() + self.n_stations + (self.n_stations - 1) * self.n_interactions_per_station()
    }

    // Flat layout: effects | hod | dow | theta | hod_station | dow_station.
    pub fn off_hod(&self) -> usize {
        N_EFFECTS
    }

    pub fn off_dow(&self) -> usize {
        N_EFFECTS + self.hod_free()
    }

    pub fn off_theta(&self) -> usize {
        self.n_shared()
    }

    pub fn off_hod_station(&self) -> usize {
        self.n_shared() + self.n_stations
    }

    pub fn off_dow_station(&self) -> usize {
        self.off_hod_station() + (self.n_stations - 1) * self.hod_free()
    }

    /// Flat index of the interaction `hod_{s,h}`; `None` for baselines.
    pub fn hod_station_col(&self, s: usize, h: usize) -> Option<usize> {
        (s > 0 && h > 0).then(|| self.off_hod_station() + (s - 1) * self.hod_free() + h - 1)
    }

    pub fn dow_station_col(&self, s: usize, d: usize) -> Option<usize> {
        (s > 0 && d > 0).then(|| self.off_dow_station() + (s - 1) * self.dow_free() + d - 1)
    }

    /// True for flat indices of station-specific interactions.
    pub fn is_interaction(&self, col: usize) -> bool {
        col >= self.off_hod_station()
    }

    fn validate(&self) -> Result<()> {
        if self.n_stations == 0 || self.n_hours < 2 || self.n_days_of_week == 0 {
            return Err(Error::Dimension(format!("invalid parameter dims {self:?}")));
        }
        Ok(())
    }
}

/// Trend, rain and air-quality coefficients.
#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CovariateEffects<F> {
    pub alpha: F,
    pub rain: F,
    /// Effects of bad, average and good air relative to very bad.
    pub air: [F; 3],
}

impl<F: Float> CovariateEffects<F> {
    pub fn to_array(&self) -> [F; N_EFFECTS] {
        [self.alpha, self.rain, self.air[0], self.air[1], self.air[2]]
    }

    pub fn from_slice(v: &[F]) -> Self {
        Self { alpha: v[0], rain: v[1], air: [v[2], v[3], v[4]] }
    }

    /// Day-level part of the linear predictor.
    #[inline]
    pub fn day_effect(&self, day: &Day) -> F {
        let mut e = self.alpha * F::cst(day.time);
        if day.rain {
            e += self.rain;
        }
        let a = day.air.index();
        if a > 0 {
            e += self.air[a - 1];
        }
        e
    }
}

/// Free parameters of the full-interaction model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamState<F> {
    /// Station intercepts, length S.
    pub theta: Array1<F>,
    /// Shared hour effects for hours 1..H.
    pub hod: Array1<F>,
    /// Shared day-of-week effects for levels 1..D.
    pub dow: Array1<F>,
    /// Hour interactions for stations 1..S (row `s - 1`), hours 1..H.
    pub hod_station: Array2<F>,
    /// Day-of-week interactions for stations 1..S, levels 1..D.
    pub dow_station: Array2<F>,
    pub effects: CovariateEffects<F>,
}

/// Station-level hourly and daily profiles implied by a parameter state.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiView<F> {
    /// S × H; column 0 equals `theta`.
    pub hod: Array2<F>,
    /// S × D; column 0 equals `theta`.
    pub dow: Array2<F>,
}

impl<F: Float> ParamState<F> {
    pub fn zeros(dims: ParamDims) -> Self {
        let s = dims.n_stations;
        Self {
            theta: Array1::zeros(s),
            hod: Array1::zeros(dims.hod_free()),
            dow: Array1::zeros(dims.dow_free()),
            hod_station: Array2::zeros((s - 1, dims.hod_free())),
            dow_station: Array2::zeros((s - 1, dims.dow_free())),
            effects: CovariateEffects::default(),
        }
    }

    pub fn dims(&self) -> ParamDims {
        ParamDims::new(self.theta.len(), self.hod.len() + 1, self.dow.len() + 1)
    }

    /// Checks internal block shapes.
    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        d.validate()?;
        let (s1, h1, d1) = (d.n_stations - 1, d.hod_free(), d.dow_free());
        if self.hod_station.dim() != (s1, h1) || self.dow_station.dim() != (s1, d1) {
            return Err(Error::Dimension(format!(
                "interaction blocks {:?}/{:?} do not match dims {d:?}",
                self.hod_station.dim(),
                self.dow_station.dim()
            )));
        }
        Ok(())
    }

    pub fn check_panel(&self, panel: &RentalPanel) -> Result<()> {
        self.validate()?;
        let (mine, theirs) = (self.dims(), ParamDims::of_panel(panel));
        if mine != theirs {
            return Err(Error::Dimension(format!("parameters are {mine:?} but panel is {theirs:?}")));
        }
        Ok(())
    }

    /// Hour interaction with baselines filled in as zero.
    #[inline]
    pub fn hod_interaction(&self, s: usize, h: usize) -> F {
        if s == 0 || h == 0 {
            F::zero()
        } else {
            self.hod_station[[s - 1, h - 1]]
        }
    }

    #[inline]
    pub fn dow_interaction(&self, s: usize, d: usize) -> F {
        if s == 0 || d == 0 {
            F::zero()
        } else {
            self.dow_station[[s - 1, d - 1]]
        }
    }

    #[inline]
    pub fn shared_hod(&self, h: usize) -> F {
        if h == 0 {
            F::zero()
        } else {
            self.hod[h - 1]
        }
    }

    #[inline]
    pub fn shared_dow(&self, d: usize) -> F {
        if d == 0 {
            F::zero()
        } else {
            self.dow[d - 1]
        }
    }

    /// Linear predictor without the capacity offset.
    #[inline]
    pub fn eta(&self, s: usize, day: &Day, h: usize) -> F {
        let d = day.day_of_week;
        self.theta[s]
            + self.effects.day_effect(day)
            + self.shared_hod(h)
            + self.shared_dow(d)
            + self.hod_interaction(s, h)
            + self.dow_interaction(s, d)
    }

    pub fn phi(&self) -> PhiView<F> {
        let d = self.dims();
        let mut hod = Array2::zeros((d.n_stations, d.n_hours));
        let mut dow = Array2::zeros((d.n_stations, d.n_days_of_week));
        for s in 0..d.n_stations {
            for h in 0..d.n_hours {
                hod[[s, h]] = self.theta[s] + self.shared_hod(h) + self.hod_interaction(s, h);
            }
            for k in 0..d.n_days_of_week {
                dow[[s, k]] = self.theta[s] + self.shared_dow(k) + self.dow_interaction(s, k);
            }
        }
        PhiView { hod, dow }
    }

    /// Inverse of [`ParamState::phi`]: the first station fixes the shared effects.
    pub fn from_phi(phi: &PhiView<F>, effects: CovariateEffects<F>) -> Result<Self> {
        let (s, h) = phi.hod.dim();
        let (s2, d) = phi.dow.dim();
        if s != s2 || s == 0 || h < 2 || d == 0 {
            return Err(Error::Dimension("inconsistent profile shapes".into()));
        }
        if phi.hod.column(0) != phi.dow.column(0) {
            return Err(Error::Validation("hour-0 and day-0 profiles must both equal theta".into()));
        }
        let mut p = Self::zeros(ParamDims::new(s, h, d));
        p.effects = effects;
        p.theta.assign(&phi.hod.column(0));
        for j in 1..h {
            p.hod[j - 1] = phi.hod[[0, j]] - p.theta[0];
        }
        for j in 1..d {
            p.dow[j - 1] = phi.dow[[0, j]] - p.theta[0];
        }
        for st in 1..s {
            for j in 1..h {
                p.hod_station[[st - 1, j - 1]] = phi.hod[[st, j]] - p.theta[st] - p.hod[j - 1];
            }
            for j in 1..d {
                p.dow_station[[st - 1, j - 1]] = phi.dow[[st, j]] - p.theta[st] - p.dow[j - 1];
            }
        }
        Ok(p)
    }

    pub fn n_free(&self) -> usize {
        self.dims().n_free()
    }

    /// Flat vector in the layout described on [`ParamDims`].
    pub fn to_flat(&self) -> Vec<F> {
        let mut v = Vec::with_capacity(self.n_free());
        v.extend(self.effects.to_array());
        v.extend(self.hod.iter().copied());
        v.extend(self.dow.iter().copied());
        v.extend(self.theta.iter().copied());
        v.extend(self.hod_station.iter().copied());
        v.extend(self.dow_station.iter().copied());
        v
    }

    pub fn from_flat(dims: ParamDims, v: &[F]) -> Result<Self> {
        dims.validate()?;
        if v.len() != dims.n_free() {
            return Err(Error::Dimension(format!("flat vector has {} entries, expected {}", v.len(), dims.n_free())));
        }
        let (s, h1, d1) = (dims.n_stations, dims.hod_free(), dims.dow_free());
        let mut p = Self::zeros(dims);
        p.effects = CovariateEffects::from_slice(&v[..N_EFFECTS]);
        p.hod.assign(&Array1::from(v[dims.off_hod()..dims.off_dow()].to_vec()));
        p.dow.assign(&Array1::from(v[dims.off_dow()..dims.off_theta()].to_vec()));
        p.theta.assign(&Array1::from(v[dims.off_theta()..dims.off_hod_station()].to_vec()));
        let hs = &v[dims.off_hod_station()..dims.off_dow_station()];
        p.hod_station = Array2::from_shape_vec((s - 1, h1), hs.to_vec()).expect("shape checked");
        let ds = &v[dims.off_dow_station()..];
        p.dow_station = Array2::from_shape_vec((s - 1, d1), ds.to_vec()).expect("shape checked");
        Ok(p)
    }

    /// Sum of absolute interaction values (the Lasso term).
    pub fn interaction_l1(&self) -> F {
        self.hod_station.iter().chain(self.dow_station.iter()).map(|v| v.abs()).sum()
    }

    pub fn has_interactions(&self) -> bool {
        self.hod_station.iter().chain(self.dow_station.iter()).any(|v| *v != F::zero())
    }

    /// Same parameters with every interaction set to zero.
    pub fn without_interactions(&self) -> Self {
        let mut p = self.clone();
        p.hod_station.fill(F::zero());
        p.dow_station.fill(F::zero());
        p
    }

    pub fn cast<G: Float>(&self) -> ParamState<G> {
        let c = |x: &F| G::cst(x.as_f64());
        ParamState {
            theta: self.theta.map(c),
            hod: self.hod.map(c),
            dow: self.dow.map(c),
            hod_station: self.hod_station.map(c),
            dow_station: self.dow_station.map(c),
            effects: CovariateEffects::from_slice(&self.effects.to_array().iter().map(c).collect::<Vec<_>>()),
        }
    }
}

/// Consensus layout used by the solver and the projection: every station,
/// including the first, carries interaction rows.
#[derive(Clone, Debug, PartialEq)]
pub struct StationBlocks<F> {
    pub theta: Array1<F>,
    pub hod: Array1<F>,
    pub dow: Array1<F>,
    /// S × (H-1).
    pub hod_station: Array2<F>,
    /// S × (D-1).
    pub dow_station: Array2<F>,
}

impl<F: Float> StationBlocks<F> {
    pub fn zeros(dims: ParamDims) -> Self {
        let s = dims.n_stations;
        Self {
            theta: Array1::zeros(s),
            hod: Array1::zeros(dims.hod_free()),
            dow: Array1::zeros(dims.dow_free()),
            hod_station: Array2::zeros((s, dims.hod_free())),
            dow_station: Array2::zeros((s, dims.dow_free())),
        }
    }

    pub fn dims(&self) -> ParamDims {
        ParamDims::new(self.theta.len(), self.hod.len() + 1, self.dow.len() + 1)
    }

    pub fn from_params(p: &ParamState<F>) -> Self {
        let mut b = Self::zeros(p.dims());
        b.theta.assign(&p.theta);
        b.hod.assign(&p.hod);
        b.dow.assign(&p.dow);
        b.hod_station.slice_mut(s![1.., ..]).assign(&p.hod_station);
        b.dow_station.slice_mut(s![1.., ..]).assign(&p.dow_station);
        b
    }

    /// Drops the first station's interaction rows.
    pub fn to_params(&self, effects: CovariateEffects<F>) -> ParamState<F> {
        ParamState {
            theta: self.theta.clone(),
            hod: self.hod.clone(),
            dow: self.dow.clone(),
            hod_station: self.hod_station.slice(s![1.., ..]).to_owned(),
            dow_station: self.dow_station.slice(s![1.., ..]).to_owned(),
            effects,
        }
    }

    fn parts(&self) -> [&[F]; 5] {
        [
            self.theta.as_slice().expect("standard layout"),
            self.hod.as_slice().expect("standard layout"),
            self.dow.as_slice().expect("standard layout"),
            self.hod_station.as_slice().expect("standard layout"),
            self.dow_station.as_slice().expect("standard layout"),
        ]
    }

    fn parts_mut(&mut self) -> [&mut [F]; 5] {
        [
            self.theta.as_slice_mut().expect("standard layout"),
            self.hod.as_slice_mut().expect("standard layout"),
            self.dow.as_slice_mut().expect("standard layout"),
            self.hod_station.as_slice_mut().expect("standard layout"),
            self.dow_station.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn len(&self) -> usize {
        self.parts().iter().map(|p| p.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &F> {
        let [a, b, c, d, e] = self.parts();
        a.iter().chain(b).chain(c).chain(d).chain(e)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut F> {
        let [a, b, c, d, e] = self.parts_mut();
        a.iter_mut().chain(b.iter_mut()).chain(c.iter_mut()).chain(d.iter_mut()).chain(e.iter_mut())
    }

    /// Flat copy in field order: theta, hod, dow, hod_station, dow_station.
    pub fn to_vec(&self) -> Vec<F> {
        self.iter().copied().collect()
    }

    pub fn from_slice(dims: ParamDims, v: &[F]) -> Result<Self> {
        let mut b = Self::zeros(dims);
        if v.len() != b.len() {
            return Err(Error::Dimension(format!("expected {} entries, got {}", b.len(), v.len())));
        }
        for (x, y) in b.iter_mut().zip(v) {
            *x = *y;
        }
        Ok(b)
    }

    pub fn norm_sq(&self) -> F {
        self.iter().map(|v| *v * *v).sum()
    }

    /// self += a * other
    pub fn axpy(&mut self, a: F, other: &Self) {
        for (x, y) in self.iter_mut().zip(other.iter()) {
            *x += a * *y;
        }
    }

    pub fn scale(&mut self, a: F) {
        for x in self.iter_mut() {
            *x *= a;
        }
    }

    /// ‖self − other‖².
    pub fn dist_sq(&self, other: &Self) -> F {
        self.iter().zip(other.iter()).map(|(a, b)| (*a - *b) * (*a - *b)).sum()
    }

    pub fn phi(&self) -> PhiView<F> {
        let d = self.dims();
        let mut hod = Array2::zeros((d.n_stations, d.n_hours));
        let mut dow = Array2::zeros((d.n_stations, d.n_days_of_week));
        for s in 0..d.n_stations {
            hod[[s, 0]] = self.theta[s];
            dow[[s, 0]] = self.theta[s];
            for h in 1..d.n_hours {
                hod[[s, h]] = self.theta[s] + self.hod[h - 1] + self.hod_station[[s, h - 1]];
            }
            for k in 1..d.n_days_of_week {
                dow[[s, k]] = self.theta[s] + self.dow[k - 1] + self.dow_station[[s, k - 1]];
            }
        }
        PhiView { hod, dow }
    }
}

/// Nonzero design entries of one observation: at most 8 columns.
#[derive(Copy, Clone, Debug)]
pub struct ObsColumns<F> {
    cols: [(usize, F); 8],
    len: usize,
}

impl<F: Float> ObsColumns<F> {
    pub fn new(dims: &ParamDims, s: usize, day: &Day, h: usize, with_interactions: bool) -> Self {
        let mut c = Self { cols: [(0, F::zero()); 8], len: 0 };
        let d = day.day_of_week;
        if day.time != 0.0 {
            c.push(0, F::cst(day.time));
        }
        if day.rain {
            c.push(1, F::one());
        }
        let a = day.air.index();
        if a > 0 {
            c.push(1 + a, F::one());
        }
        if h > 0 {
            c.push(dims.off_hod() + h - 1, F::one());
        }
        if d > 0 {
            c.push(dims.off_dow() + d - 1, F::one());
        }
        c.push(dims.off_theta() + s, F::one());
        if with_interactions {
            if let Some(j) = dims.hod_station_col(s, h) {
                c.push(j, F::one());
            }
            if let Some(j) = dims.dow_station_col(s, d) {
                c.push(j, F::one());
            }
        }
        c
    }

    #[inline]
    fn push(&mut self, col: usize, v: F) {
        self.cols[self.len] = (col, v);
        self.len += 1;
    }

    #[inline]
    pub fn as_slice(&self) -> &[(usize, F)] {
        &self.cols[..self.len]
    }
}

/// Column-compressed design matrix of the full-interaction model, with the
/// capacity offsets and responses in observation order.
#[derive(Clone, Debug)]
pub struct Design<F> {
    pub dims: ParamDims,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<F>,
    pub offset: Vec<F>,
    pub y: Vec<F>,
}

impl<F: Float> Design<F> {
    pub fn new(panel: &RentalPanel) -> Self {
        let dims = ParamDims::of_panel(panel);
        let p = dims.n_free();
        let n = panel.n_obs();
        let offsets = panel.log_offsets::<F>();
        let mut per_col: Vec<Vec<(usize, F)>> = vec![Vec::new(); p];
        let mut offset = Vec::with_capacity(n);
        for i in 0..n {
            let o = panel.obs(i);
            let day = &panel.days()[o.day];
            for &(j, v) in ObsColumns::new(&dims, o.station, day, o.hour, true).as_slice() {
                per_col[j].push((i, v));
            }
            offset.push(offsets[o.station]);
        }
        let mut col_ptr = Vec::with_capacity(p + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for col in per_col {
            for (i, v) in col {
                row_idx.push(i);
                values.push(v);
            }
            col_ptr.push(row_idx.len());
        }
        Self { dims, col_ptr, row_idx, values, offset, y: panel.counts_as() }
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_cols(&self) -> usize {
        self.col_ptr.len() - 1
    }

    #[inline]
    pub fn column(&self, j: usize) -> (&[usize], &[F]) {
        let r = self.col_ptr[j]..self.col_ptr[j + 1];
        (&self.row_idx[r.clone()], &self.values[r])
    }

    /// X·beta (offset excluded).
    pub fn eta(&self, beta: &[F]) -> Vec<F> {
        let mut eta = vec![F::zero(); self.n_obs()];
        for (j, &b) in beta.iter().enumerate() {
            if b == F::zero() {
                continue;
            }
            let (rows, vals) = self.column(j);
            for (&i, &v) in rows.iter().zip(vals) {
                eta[i] += v * b;
            }
        }
        eta
    }

    /// Clamped log-mean including the offset.
    #[inline]
    pub fn log_mu(&self, i: usize, eta: F) -> F {
        let c = F::cst(ETA_CLAMP);
        (self.offset[i] + eta).max(-c).min(c)
    }

    pub fn neg_loglik_at(&self, eta: &[F]) -> F {
        let mut total = F::zero();
        for (i, &e) in eta.iter().enumerate() {
            let lm = self.log_mu(i, e);
            total += lm.exp() - self.y[i] * lm;
        }
        total
    }

    /// Xᵀ(mu − y).
    pub fn gradient_at(&self, eta: &[F]) -> Vec<F> {
        let resid: Vec<F> = eta.iter().enumerate().map(|(i, &e)| self.log_mu(i, e).exp() - self.y[i]).collect();
        (0..self.n_cols())
            .map(|j| {
                let (rows, vals) = self.column(j);
                rows.iter().zip(vals).map(|(&i, &v)| v * resid[i]).sum()
            })
            .collect()
    }
}

fn check_index(panel: &RentalPanel, i: usize) -> Result<()> {
    if i >= panel.n_obs() {
        return Err(Error::Dimension(format!("observation {i} out of range 0..{}", panel.n_obs())));
    }
    Ok(())
}

/// Mean of observation `i`.
pub fn mean<F: Float>(params: &ParamState<F>, panel: &RentalPanel, i: usize) -> Result<F> {
    params.check_panel(panel)?;
    check_index(panel, i)?;
    let o = panel.obs(i);
    let offset = F::cst(f64::from(panel.registry().get(o.station).capacity).ln());
    let c = F::cst(ETA_CLAMP);
    Ok((offset + params.eta(o.station, &panel.days()[o.day], o.hour)).max(-c).min(c).exp())
}

/// Linear predictors (offset excluded) for every observation.
pub fn linear_predictor<F: Float>(params: &ParamState<F>, panel: &RentalPanel) -> Vec<F> {
    let days = panel.days();
    (0..panel.n_obs())
        .map(|i| {
            let o = panel.obs(i);
            params.eta(o.station, &days[o.day], o.hour)
        })
        .collect()
}

/// Clamped log-means including offsets.
pub fn log_means<F: Float>(params: &ParamState<F>, panel: &RentalPanel) -> Vec<F> {
    let offsets = panel.log_offsets::<F>();
    let c = F::cst(ETA_CLAMP);
    linear_predictor(params, panel)
        .into_iter()
        .enumerate()
        .map(|(i, e)| (offsets[panel.obs(i).station] + e).max(-c).min(c))
        .collect()
}

/// Means of every observation. Panics on dimension mismatch; use
/// [`ParamState::check_panel`] first for untrusted input.
pub fn means<F: Float>(params: &ParamState<F>, panel: &RentalPanel) -> Vec<F> {
    log_means(params, panel).into_iter().map(|l| l.exp()).collect()
}

/// Σ mu_i − Σ y_i log mu_i (the log(y!) constant is dropped).
pub fn neg_loglik<F: Float>(params: &ParamState<F>, panel: &RentalPanel) -> Result<F> {
    params.check_panel(panel)?;
    let counts = panel.counts();
    Ok(log_means(params, panel)
        .into_iter()
        .zip(counts)
        .map(|(lm, &y)| lm.exp() - F::cst(f64::from(y)) * lm)
        .sum())
}

/// Gradient of [`neg_loglik`] in the [`ParamState`] layout.
pub fn neg_loglik_gradient<F: Float>(params: &ParamState<F>, panel: &RentalPanel) -> Result<ParamState<F>> {
    params.check_panel(panel)?;
    let dims = params.dims();
    let mut g = vec![F::zero(); dims.n_free()];
    let counts = panel.counts();
    for (i, lm) in log_means(params, panel).into_iter().enumerate() {
        let r = lm.exp() - F::cst(f64::from(counts[i]));
        let o = panel.obs(i);
        for &(j, v) in ObsColumns::<F>::new(&dims, o.station, &panel.days()[o.day], o.hour, true).as_slice() {
            g[j] += v * r;
        }
    }
    ParamState::from_flat(dims, &g)
}

/// IRLS weights `w_i = mu_i` and working responses `z_i = eta_i + y_i / mu_i − 1`,
/// with `eta` excluding the offset and `mu` floored at [`MU_FLOOR`].
pub fn irls_working_set<F: Float>(params: &ParamState<F>, panel: &RentalPanel) -> Result<(Vec<F>, Vec<F>)> {
    params.check_panel(panel)?;
    let eta = linear_predictor(params, panel);
    let lm = log_means(params, panel);
    let floor = F::cst(MU_FLOOR);
    let counts = panel.counts();
    let mut w = Vec::with_capacity(eta.len());
    let mut z = Vec::with_capacity(eta.len());
    for i in 0..eta.len() {
        let mu = lm[i].exp().max(floor);
        w.push(mu);
        z.push(eta[i] + F::cst(f64::from(counts[i])) / mu - F::one());
    }
    Ok((w, z))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Station intercepts plus shared calendar and weather effects.
    NoInteraction,
    /// Adds station × hour and station × day-of-week interactions.
    FullInteraction,
}

#[derive(Clone, Debug)]
pub struct IrlsOptions {
    /// Stop when the Newton decrement falls below `tol · max(1, |nll|)`.
    pub tol: f64,
    pub max_iter: usize,
    /// Added to the Hessian diagonal; keeps empty cells and absent covariate
    /// levels solvable.
    pub ridge: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self { tol: 1e-16, max_iter: 100, ridge: 1e-8 }
    }
}

/// Cold-start values: theta_s = log(mean count / capacity), everything else zero.
pub fn initial_params<F: Float>(panel: &RentalPanel) -> ParamState<F> {
    let dims = ParamDims::of_panel(panel);
    let mut p = ParamState::zeros(dims);
    let per_station = panel.n_days() * panel.n_hours();
    for s in 0..dims.n_stations {
        let start = panel.index(s, 0, 0);
        let total: f64 = panel.counts()[start..start + per_station].iter().map(|&c| f64::from(c)).sum();
        let ybar = (total / per_station as f64).max(0.5 / per_station as f64);
        p.theta[s] = F::cst((ybar / f64::from(panel.registry().get(s).capacity)).ln());
    }
    p
}

/// Maximum-likelihood fit by Newton/IRLS. The Hessian has an arrow structure
/// (each observation touches one station block plus the shared block), which
/// is eliminated station by station.
pub fn fit_unpenalized<F: Float>(panel: &RentalPanel, kind: ModelKind, opts: &IrlsOptions) -> Result<ParamState<F>> {
    let dims = ParamDims::of_panel(panel);
    let with_int = kind == ModelKind::FullInteraction;
    let mut params = initial_params::<F>(panel);
    let mut nll = neg_loglik(&params, panel)?;
    for iter in 0..opts.max_iter {
        let (step, decrement) = newton_step(&params, panel, with_int, opts.ridge)?;
        if decrement <= opts.tol * nll.as_f64().abs().max(1.0) {
            log::debug!("IRLS converged after {iter} iterations, nll {}", nll.as_f64());
            return Ok(params);
        }
        let base = params.to_flat();
        let mut t = F::one();
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<F> = base.iter().zip(&step).map(|(&b, &d)| b + t * d).collect();
            let cand = ParamState::from_flat(dims, &trial)?;
            let cand_nll = neg_loglik(&cand, panel)?;
            if cand_nll <= nll {
                params = cand;
                nll = cand_nll;
                accepted = true;
                break;
            }
            t *= F::cst(0.5);
        }
        if !accepted {
            // no decrease even for tiny steps: at the optimum up to rounding
            return Ok(params);
        }
    }
    Err(Error::NotConverged {
        iterations: opts.max_iter,
        detail: format!("unpenalized IRLS, final nll {}", nll.as_f64()),
    })
}

/// Newton direction in the flat layout and the decrement ½·gᵀH⁻¹g.
fn newton_step<F: Float>(
    params: &ParamState<F>,
    panel: &RentalPanel,
    with_int: bool,
    ridge: f64,
) -> Result<(Vec<F>, f64)> {
    let dims = params.dims();
    let n_sh = dims.n_shared();
    let off_theta = dims.off_theta();
    let s_count = dims.n_stations;
    // local station block: theta, then hour interactions, then day interactions
    let block_len = |s: usize| if with_int && s > 0 { 1 + dims.n_interactions_per_station() } else { 1 };
    let local = |j: usize, s: usize| -> usize {
        if j == off_theta + s {
            0
        } else if j < dims.off_dow_station() {
            1 + (j - dims.off_hod_station()) % dims.hod_free()
        } else {
            1 + dims.hod_free() + (j - dims.off_dow_station()) % dims.dow_free().max(1)
        }
    };

    let mut h00 = Array2::<F>::zeros((n_sh, n_sh));
    let mut g0 = vec![F::zero(); n_sh];
    let mut hss: Vec<Array2<F>> = (0..s_count).map(|s| Array2::zeros((block_len(s), block_len(s)))).collect();
    let mut hs0: Vec<Array2<F>> = (0..s_count).map(|s| Array2::zeros((block_len(s), n_sh))).collect();
    let mut gs: Vec<Vec<F>> = (0..s_count).map(|s| vec![F::zero(); block_len(s)]).collect();

    let lm = log_means(params, panel);
    let counts = panel.counts();
    let days = panel.days();
    let mut shared: Vec<(usize, F)> = Vec::with_capacity(8);
    let mut station: Vec<(usize, F)> = Vec::with_capacity(3);
    for i in 0..panel.n_obs() {
        let o = panel.obs(i);
        let mu = lm[i].exp();
        let r = mu - F::cst(f64::from(counts[i]));
        shared.clear();
        station.clear();
        for &(j, v) in ObsColumns::new(&dims, o.station, &days[o.day], o.hour, with_int).as_slice() {
            if j < n_sh {
                shared.push((j, v));
            } else {
                station.push((local(j, o.station), v));
            }
        }
        let s = o.station;
        for &(a, va) in &shared {
            g0[a] += va * r;
            for &(b, vb) in &shared {
                h00[[a, b]] += mu * va * vb;
            }
        }
        for &(a, va) in &station {
            gs[s][a] += va * r;
            for &(b, vb) in &station {
                hss[s][[a, b]] += mu * va * vb;
            }
            for &(b, vb) in &shared {
                hs0[s][[a, b]] += mu * va * vb;
            }
        }
    }

    let rdg = F::cst(ridge);
    for k in 0..n_sh {
        h00[[k, k]] += rdg;
    }
    // Schur complement onto the shared block
    let mut schur = h00;
    let mut rhs0: Vec<F> = g0.iter().map(|&g| -g).collect();
    let mut factors = Vec::with_capacity(s_count);
    for s in 0..s_count {
        let mut hb = hss[s].clone();
        for k in 0..hb.nrows() {
            hb[[k, k]] += rdg;
        }
        let chol = linalg::cholesky(&hb)?;
        // X = H_s⁻¹ H_s0, y = H_s⁻¹ g_s
        let x = linalg::cholesky_solve_mat(&chol, &hs0[s]);
        let y = linalg::cholesky_solve(&chol, &gs[s]);
        schur = schur - hs0[s].t().dot(&x);
        for a in 0..n_sh {
            let mut acc = F::zero();
            for k in 0..y.len() {
                acc += hs0[s][[k, a]] * y[k];
            }
            rhs0[a] += acc;
        }
        factors.push((chol, y, x));
    }
    let chol0 = linalg::cholesky(&schur)?;
    let d0 = linalg::cholesky_solve(&chol0, &rhs0);

    let mut step = vec![F::zero(); dims.n_free()];
    step[..n_sh].copy_from_slice(&d0);
    for (s, (_, y, x)) in factors.iter().enumerate() {
        // d_s = −y − X d0
        for k in 0..y.len() {
            let mut v = -y[k];
            for a in 0..n_sh {
                v -= x[[k, a]] * d0[a];
            }
            let col = if k == 0 {
                off_theta + s
            } else if k <= dims.hod_free() {
                dims.hod_station_col(s, k).expect("non-baseline station")
            } else {
                dims.dow_station_col(s, k - dims.hod_free()).expect("non-baseline station")
            };
            step[col] = v;
        }
    }
    let mut grad = vec![F::zero(); dims.n_free()];
    grad[..n_sh].copy_from_slice(&g0);
    for (s, g) in gs.iter().enumerate() {
        for (k, &v) in g.iter().enumerate() {
            let col = if k == 0 {
                off_theta + s
            } else if k <= dims.hod_free() {
                dims.hod_station_col(s, k).expect("non-baseline station")
            } else {
                dims.dow_station_col(s, k - dims.hod_free()).expect("non-baseline station")
            };
            grad[col] = v;
        }
    }
    let decrement = -0.5 * grad.iter().zip(&step).map(|(g, d)| (*g * *d).as_f64()).sum::<f64>();
    Ok((step, decrement))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_registry, synth_panel, SynthConfig, CalendarDims};
    use std::sync::Arc;

    fn toy_panel(seed: u64, s: usize, truth_scale: f64) -> (RentalPanel, ParamState<f64>) {
        let cfg = SynthConfig {
            n_days: 6,
            dims: CalendarDims { n_hours: 4, n_days_of_week: 3 },
            start_date: None,
            ..Default::default()
        };
        let reg = Arc::new(synth_registry(seed, s, 2000.0, 4));
        let dims = ParamDims::new(s, 4, 3);
        let flat: Vec<f64> = (0..dims.n_free()).map(|j| truth_scale * ((j * 7919 % 13) as f64 / 13.0 - 0.5)).collect();
        let mut truth = ParamState::from_flat(dims, &flat).unwrap();
        truth.effects.alpha = 0.01;
        let panel = synth_panel(seed, reg, &cfg, &truth).unwrap();
        (panel, truth)
    }

    #[test]
    fn flat_round_trip_and_layout() {
        let dims = ParamDims::new(3, 4, 3);
        assert_eq!(dims.n_free(), 5 + 3 + 2 + 3 + 2 * 5);
        let v: Vec<f64> = (0..dims.n_free()).map(|i| i as f64).collect();
        let p = ParamState::from_flat(dims, &v).unwrap();
        assert_eq!(p.to_flat(), v);
        assert_eq!(p.hod_interaction(1, 1), v[dims.hod_station_col(1, 1).unwrap()]);
        assert_eq!(p.dow_interaction(2, 2), v[dims.dow_station_col(2, 2).unwrap()]);
        assert_eq!(p.hod_interaction(0, 2), 0.0);
    }

    #[test]
    fn default_dims_free_parameter_count() {
        let dims = ParamDims::new(1505, 24, 7);
        assert_eq!(dims.n_shared(), 34);
        assert_eq!(dims.n_free(), 34 + 1505 + 1504 * 29);
        assert_eq!(dims.n_free(), 45_155);
    }

    #[test]
    fn phi_round_trip() {
        let dims = ParamDims::new(4, 5, 3);
        let v: Vec<f64> = (0..dims.n_free()).map(|i| (i as f64 * 0.37).sin()).collect();
        let p = ParamState::from_flat(dims, &v).unwrap();
        let phi = p.phi();
        for s in 0..4 {
            assert_eq!(phi.hod[[s, 0]], p.theta[s]);
            assert_eq!(phi.dow[[s, 0]], p.theta[s]);
        }
        let q = ParamState::from_phi(&phi, p.effects).unwrap();
        for (a, b) in p.to_flat().iter().zip(q.to_flat()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(StationBlocks::from_params(&p).phi(), phi);
    }

    #[test]
    fn mean_zero_params_equals_capacity() {
        let (panel, _) = toy_panel(1, 3, 0.0);
        let p = ParamState::<f64>::zeros(ParamDims::of_panel(&panel));
        for i in [0, 5, panel.n_obs() - 1] {
            assert!((mean(&p, &panel, i).unwrap() - 4.0).abs() < 1e-12);
        }
        assert!(mean(&p, &panel, panel.n_obs()).is_err());
    }

    #[test]
    fn working_set_formula() {
        let (panel, truth) = toy_panel(2, 3, 0.4);
        let (w, z) = irls_working_set(&truth, &panel).unwrap();
        let eta = linear_predictor(&truth, &panel);
        let mu = means(&truth, &panel);
        for i in 0..panel.n_obs() {
            assert!((w[i] - mu[i]).abs() < 1e-12);
            let y = f64::from(panel.counts()[i]);
            assert!((z[i] - (eta[i] + y / mu[i] - 1.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn design_matches_direct_predictor() {
        let (panel, truth) = toy_panel(3, 4, 0.5);
        let design = Design::<f64>::new(&panel);
        let eta = design.eta(&truth.to_flat());
        let direct = linear_predictor(&truth, &panel);
        for (a, b) in eta.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
        let nll = design.neg_loglik_at(&eta);
        assert!((nll - neg_loglik(&truth, &panel).unwrap()).abs() < 1e-9 * nll.abs());
        let g = design.gradient_at(&eta);
        let g2 = neg_loglik_gradient(&truth, &panel).unwrap().to_flat();
        for (a, b) in g.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn unpenalized_fit_satisfies_score_equations() {
        let (panel, _) = toy_panel(4, 3, 0.3);
        let fit = fit_unpenalized::<f64>(&panel, ModelKind::FullInteraction, &IrlsOptions::default()).unwrap();
        let g = neg_loglik_gradient(&fit, &panel).unwrap().to_flat();
        let gmax = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(gmax < 1e-6, "max score {gmax}");

        let no = fit_unpenalized::<f64>(&panel, ModelKind::NoInteraction, &IrlsOptions::default()).unwrap();
        assert!(!no.has_interactions());
        let g = neg_loglik_gradient(&no, &panel).unwrap().to_flat();
        let dims = no.dims();
        for (j, v) in g.iter().enumerate() {
            if !dims.is_interaction(j) {
                assert!(v.abs() < 1e-6, "score {j} = {v}");
            }
        }
    }
}
