//! Day-of-week balanced K-fold cross-validation over penalty grids.

use std::cmp::Ordering;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::{AdmmOptions, AdmmProblem, AdmmState};
use crate::data::RentalPanel;
use crate::error::{Error, Result};
use crate::graph::build_proximity;
use crate::model::{means, ParamDims};
use crate::penalty::PenaltyConfig;
use crate::projection::build_plan;

/// Held-out day positions per fold, each sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn n_folds(&self) -> usize {
        self.folds.len()
    }

    /// Training days of fold `k` (all other folds), sorted.
    pub fn training_days(&self, k: usize) -> Vec<usize> {
        let mut out: Vec<usize> =
            self.folds.iter().enumerate().filter(|(j, _)| *j != k).flat_map(|(_, f)| f.iter().copied()).collect();
        out.sort_unstable();
        out
    }
}

/// Days are grouped by day of week and shuffled within each group; a single
/// round-robin pointer then deals them out across folds, continuing from one
/// group to the next.
pub fn make_folds(panel: &RentalPanel, k: usize, seed: u64) -> Result<FoldPlan> {
    let t = panel.n_days();
    if k == 0 || k > t {
        return Err(Error::Validation(format!("cannot split {t} days into {k} folds")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for d in 0..panel.dims().n_days_of_week {
        let mut group: Vec<usize> = (0..t).filter(|&i| panel.days()[i].day_of_week == d).collect();
        group.shuffle(&mut rng);
        for day in group {
            folds[next % k].push(day);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldPlan { folds })
}

/// Mean squared Pearson residual (1/n) Σ (y − μ)²/μ.
pub fn mspr(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    if observed.len() != predicted.len() {
        return Err(Error::Dimension(format!("{} observations vs {} predictions", observed.len(), predicted.len())));
    }
    if observed.is_empty() {
        return Err(Error::Validation("no observations to score".into()));
    }
    let mut total = 0.0;
    for (y, mu) in observed.iter().zip(predicted) {
        if !(*mu > 0.0) {
            return Err(Error::Numerical(format!("non-positive predicted mean {mu}")));
        }
        total += (y - mu) * (y - mu) / mu;
    }
    Ok(total / observed.len() as f64)
}

/// `n` values equispaced on a log scale from `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) || n == 0 {
        return Err(Error::Validation(format!("invalid log grid {lo}..{hi} with {n} points")));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    /// Proximity radii in meters.
    pub radii: Vec<f64>,
    pub lambda: Vec<f64>,
    pub lambda_n: Vec<f64>,
    pub lambda_h: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        let g = log_grid(1e-2, 1e3, 8).expect("valid default grid");
        Self { radii: vec![1500.0], lambda: g.clone(), lambda_n: g.clone(), lambda_h: g }
    }
}

/// One penalty combination.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub radius: f64,
    pub lambda: f64,
    pub lambda_n: f64,
    pub lambda_h: f64,
}

impl GridPoint {
    pub fn penalty(&self, rho: f64) -> PenaltyConfig {
        PenaltyConfig { lambda: self.lambda, lambda_n: self.lambda_n, lambda_h: self.lambda_h, rho }
    }

    /// Orders by penalty strength: λ_N, then λ_H, then λ, then radius.
    fn strength_cmp(&self, other: &Self) -> Ordering {
        self.lambda_n
            .total_cmp(&other.lambda_n)
            .then(self.lambda_h.total_cmp(&other.lambda_h))
            .then(self.lambda.total_cmp(&other.lambda))
            .then(self.radius.total_cmp(&other.radius))
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let lists = [&self.radii, &self.lambda, &self.lambda_n, &self.lambda_h];
        if lists.iter().any(|l| l.is_empty()) {
            return Err(Error::Validation("every grid list needs at least one value".into()));
        }
        if lists.iter().any(|l| l.iter().any(|v| !(v.is_finite() && *v >= 0.0))) {
            return Err(Error::Validation("grid values must be finite and non-negative".into()));
        }
        if self.radii.iter().any(|r| *r <= 0.0) {
            return Err(Error::Validation("radii must be positive".into()));
        }
        Ok(())
    }

    /// Penalty combinations for one radius, strongest first (the warm-start
    /// path order).
    pub fn points(&self, radius: f64) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &lambda_n in &self.lambda_n {
            for &lambda_h in &self.lambda_h {
                for &lambda in &self.lambda {
                    out.push(GridPoint { radius, lambda, lambda_n, lambda_h });
                }
            }
        }
        out.sort_by(|a, b| b.strength_cmp(a));
        out.dedup();
        out
    }
}

/// One (radius, penalties, fold) fit of the grid search.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvTask {
    pub point: GridPoint,
    pub fold: usize,
}

/// Every fit a grid search performs, in table order.
pub fn task_matrix(grid: &GridSpec, folds: &FoldPlan) -> Vec<CvTask> {
    let mut out = Vec::new();
    for &r in &grid.radii {
        for point in grid.points(r) {
            for fold in 0..folds.n_folds() {
                out.push(CvTask { point, fold });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub fold: usize,
    pub mspr: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointScore {
    pub point: GridPoint,
    pub folds: Vec<FoldScore>,
    pub mean_mspr: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub scores: Vec<PointScore>,
    pub winner: GridPoint,
    pub winner_mspr: f64,
    /// False when no grid point converged on every fold and the winner was
    /// picked among all points.
    pub winner_converged: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub admm: AdmmOptions,
    /// Worker threads for the fold fits; 0 uses the rayon default.
    pub workers: usize,
}

/// Scores every grid point on every fold. Per radius, the proximity graph
/// and projection plan are built once; folds run in parallel and each walks
/// the grid from the strongest penalties down, warm-starting from the
/// previous point.
pub fn grid_search(panel: &RentalPanel, grid: &GridSpec, folds: &FoldPlan, opts: &CvOptions) -> Result<CvResult> {
    grid.validate()?;
    opts.admm.validate()?;
    if folds.n_folds() == 0 || folds.folds.iter().any(|f| f.is_empty()) {
        return Err(Error::Validation("every fold needs at least one day".into()));
    }
    let dims = ParamDims::of_panel(panel);
    let splits: Vec<(RentalPanel, RentalPanel)> = (0..folds.n_folds())
        .map(|k| {
            let train_days = if folds.n_folds() == 1 { folds.folds[0].clone() } else { folds.training_days(k) };
            Ok((panel.select_days(&train_days)?, panel.select_days(&folds.folds[k])?))
        })
        .collect::<Result<_>>()?;

    let run = || -> Result<Vec<PointScore>> {
        let mut all = Vec::new();
        for &radius in &grid.radii {
            let graph = build_proximity(panel.registry(), radius)?;
            let plan = build_plan::<f64>(&graph, dims)?;
            let points = grid.points(radius);
            let per_fold: Vec<Vec<FoldScore>> = splits
                .par_iter()
                .enumerate()
                .map(|(k, (train, test))| score_path(train, test, &plan, &points, k, &opts.admm))
                .collect::<Result<_>>()?;
            for (i, point) in points.iter().enumerate() {
                let fs: Vec<FoldScore> = per_fold.iter().map(|f| f[i].clone()).collect();
                let mean_mspr = fs.iter().map(|f| f.mspr).sum::<f64>() / fs.len() as f64;
                let converged = fs.iter().all(|f| f.converged);
                all.push(PointScore { point: *point, folds: fs, mean_mspr, converged });
            }
        }
        Ok(all)
    };
    let scores = if opts.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .map_err(|e| Error::Validation(format!("cannot start {} workers: {e}", opts.workers)))?;
        pool.install(run)?
    } else {
        run()?
    };

    let (winner, winner_converged) = select_winner(&scores);
    let best = &scores[winner];
    if !winner_converged {
        log::warn!("no grid point converged on every fold; winner picked among all points");
    }
    Ok(CvResult { winner: best.point, winner_mspr: best.mean_mspr, winner_converged, scores })
}

fn score_path(
    train: &RentalPanel,
    test: &RentalPanel,
    plan: &crate::projection::ProjectionPlan<f64>,
    points: &[GridPoint],
    fold: usize,
    opts: &AdmmOptions,
) -> Result<Vec<FoldScore>> {
    let problem = AdmmProblem::new(train, plan)?;
    let observed = test.counts_as::<f64>();
    let mut warm: Option<AdmmState<f64>> = None;
    let mut out = Vec::with_capacity(points.len());
    for point in points {
        let cfg = point.penalty(PenaltyConfig::default().rho);
        let mut fit = problem.solve(&cfg, opts, warm.as_ref(), None)?;
        if !fit.report.converged && warm.is_some() {
            // starting from a more fused neighbour can be slower than a cold start
            let cold = problem.solve(&cfg, opts, None, None)?;
            if cold.report.converged {
                log::debug!("fold {fold}: {point:?} converged only from a cold start");
                let spent = fit.report.iterations;
                fit = cold;
                fit.report.iterations += spent;
            }
        }
        let mu = means(&fit.params, test);
        out.push(FoldScore {
            fold,
            mspr: mspr(&observed, &mu)?,
            converged: fit.report.converged,
            iterations: fit.report.iterations,
        });
        warm = Some(fit.state);
    }
    Ok(out)
}

/// Lowest mean MSPR among points converged on all folds; ties go to the
/// stronger penalty. Falls back to all points when none converged.
fn select_winner(scores: &[PointScore]) -> (usize, bool) {
    let any_converged = scores.iter().any(|s| s.converged);
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if any_converged && !s.converged {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = &scores[b];
                let better = s.mean_mspr < cur.mean_mspr
                    || (s.mean_mspr == cur.mean_mspr && s.point.strength_cmp(&cur.point) == Ordering::Greater);
                Some(if better { i } else { b })
            }
        };
    }
    (best.expect("grid has at least one point"), any_converged)
}

/// CSV with columns r,lambda,lambda_N,lambda_H,fold,mspr,converged: one row
/// per fold followed by an `avg` row per grid point.
pub fn write_cv_table(result: &CvResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["r", "lambda", "lambda_N", "lambda_H", "fold", "mspr", "converged"])
        .map_err(|e| Error::csv(path, e))?;
    for s in &result.scores {
        let p = &s.point;
        let head = [p.radius.to_string(), p.lambda.to_string(), p.lambda_n.to_string(), p.lambda_h.to_string()];
        for f in &s.folds {
            let mut row = head.to_vec();
            row.extend([(f.fold + 1).to_string(), f.mspr.to_string(), f.converged.to_string()]);
            w.write_record(&row).map_err(|e| Error::csv(path, e))?;
        }
        let mut row = head.to_vec();
        row.extend(["avg".to_string(), s.mean_mspr.to_string(), s.converged.to_string()]);
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mspr_examples() {
        assert_eq!(mspr(&[2.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mspr(&[3.0, 1.5], &[3.0, 1.5]).unwrap(), 0.0);
        assert!(mspr(&[1.0], &[0.0]).is_err());
        assert!(mspr(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(1e-2, 1e3, 6).unwrap();
        assert!((g[0] - 1e-2).abs() < 1e-15);
        assert!((g[5] - 1e3).abs() < 1e-9);
        assert!((g[1] - 1e-1).abs() < 1e-12);
    }

    #[test]
    fn points_strongest_first() {
        let grid = GridSpec { radii: vec![500.0], lambda: vec![1.0, 2.0], lambda_n: vec![0.0, 5.0], lambda_h: vec![3.0] };
        let pts = grid.points(500.0);
        assert_eq!(pts.len(), 4);
        assert_eq!((pts[0].lambda_n, pts[0].lambda), (5.0, 2.0));
        assert_eq!((pts[3].lambda_n, pts[3].lambda), (0.0, 1.0));
    }

    #[test]
    fn ties_prefer_stronger_penalty() {
        let mk = |ln: f64, m: f64, c: bool| PointScore {
            point: GridPoint { radius: 1.0, lambda: 1.0, lambda_n: ln, lambda_h: 1.0 },
            folds: vec![],
            mean_mspr: m,
            converged: c,
        };
        assert_eq!(select_winner(&[mk(1.0, 0.5, true), mk(2.0, 0.5, true)]), (1, true));
        assert_eq!(select_winner(&[mk(1.0, 0.4, false), mk(2.0, 0.5, true)]), (1, true));
        assert_eq!(select_winner(&[mk(1.0, 0.4, false), mk(2.0, 0.5, false)]), (0, false));
    }
}
