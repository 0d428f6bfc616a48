//! Penalty paths, the BIC-type criterion and elbow selection of the
//! neighbourhood size `L`.

use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cp::CpModel;
use crate::data::Dataset;
use crate::design::Design;
use crate::error::{Error, Result};
use crate::kernel::{bandwidth_candidates, compute_weights};
use crate::ridge::RidgeConfig;
use crate::solver::{fit_design, FitResult, Initializer, SolverConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub lambda_max: f64,
    pub decay: f64,
    /// Stop once this many fits follow the current BIC minimizer.
    pub patience: usize,
    /// Hard cap on evaluated fits per path.
    pub max_steps: usize,
    /// Start the path at the last all-zero fit instead of at `lambda_max`.
    pub fast_forward: bool,
    pub l_grid: Vec<usize>,
    /// `None` means `C * T`, capped by `min(pC, pT, CT)`.
    pub r_max: Option<usize>,
    pub solver: SolverConfig,
    pub ridge: RidgeConfig,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            lambda_max: 1e5,
            decay: 0.9,
            patience: 5,
            max_steps: 60,
            fast_forward: true,
            l_grid: vec![5, 10, 12, 15, 20, 25, 30, 35, 40, 45, 50, 70],
            r_max: None,
            solver: SolverConfig::default(),
            ridge: RidgeConfig::default(),
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Invalid(format!("decay must lie in (0, 1), got {}", self.decay)));
        }
        if !(self.lambda_max > 0.0) || !self.lambda_max.is_finite() {
            return Err(Error::Invalid("lambda_max must be positive and finite".into()));
        }
        if self.l_grid.is_empty() || self.l_grid.windows(2).any(|w| w[0] >= w[1]) || self.l_grid[0] == 0 {
            return Err(Error::Invalid("L grid must be non-empty, positive and strictly ascending".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Invalid("max_steps must be at least 1".into()));
        }
        if self.r_max == Some(0) {
            return Err(Error::Invalid("r_max must be at least 1".into()));
        }
        self.solver.validate()
    }

    /// The starting rank for a `p × C × T` problem.
    pub fn effective_r_max(&self, p: usize, c: usize, t: usize) -> usize {
        let cap = (p * c).min(p * t).min(c * t).max(1);
        self.r_max.unwrap_or(c * t).min(cap)
    }
}

/// `N* log(SSE / N*) + nu log N*`. A zero loss gives negative infinity.
pub fn bic_criterion(weighted_sse: f64, n_star: usize, nu: usize) -> Result<f64> {
    if n_star == 0 {
        return Err(Error::NoOverlap);
    }
    let n = n_star as f64;
    if weighted_sse <= 0.0 {
        warn!("zero weighted loss: criterion is -inf (suspiciously perfect fit)");
        return Ok(f64::NEG_INFINITY);
    }
    Ok(n * (weighted_sse / n).ln() + nu as f64 * n.ln())
}

/// Weighted mean squared residual `SSE / N*`.
pub fn normalized_loss(weighted_sse: f64, n_star: usize) -> Result<f64> {
    if n_star == 0 {
        return Err(Error::NoOverlap);
    }
    Ok(weighted_sse / n_star as f64)
}

/// `lambda_max * decay^k` for `k = 0..n`, built by repeated multiplication.
pub fn lambda_sequence(lambda_max: f64, decay: f64, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    let mut l = lambda_max;
    for _ in 0..n {
        out.push(l);
        l *= decay;
    }
    out
}

/// Picks the `L` whose point lies farthest below the chord joining the
/// first and last points, after rescaling both axes to `[0, 1]`. Points on
/// or above the chord never win over the first point. Ties go to the
/// smaller `L`.
pub fn elbow_select(points: &[(usize, f64)]) -> Result<usize> {
    if points.len() < 3 {
        return Err(Error::DegenerateCurve(points.len()));
    }
    Ok(points[elbow_index(points)].0)
}

fn elbow_index(points: &[(usize, f64)]) -> usize {
    let scale = |v: f64, lo: f64, hi: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    let (xl, xh) = (points[0].0 as f64, points[points.len() - 1].0 as f64);
    let (yl, yh) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let pts: Vec<(f64, f64)> = points.iter().map(|&(l, v)| (scale(l as f64, xl, xh), scale(v, yl, yh))).collect();
    let (x0, y0) = pts[0];
    let (x1, y1) = pts[pts.len() - 1];
    let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
    let mut best = (0, 0.0);
    for (i, &(x, y)) in pts.iter().enumerate() {
        // positive below the chord, where the knee of a decreasing curve lies
        let d = if len > 0.0 { ((x1 - x0) * (y0 - y) - (x0 - x) * (y1 - y0)) / len } else { 0.0 };
        if d > best.1 + 1e-12 {
            best = (i, d);
        }
    }
    best.0
}

/// One evaluated penalty on a path.
#[derive(Debug, Clone)]
pub struct PathPoint {
    /// Position `k` in `lambda_max * decay^k`.
    pub step: usize,
    pub lambda: f64,
    pub fit: FitResult,
    pub nu: usize,
    pub n_star: usize,
    pub bic: f64,
    pub normalized_loss: f64,
}

impl PathPoint {
    fn new(step: usize, fit: FitResult) -> Result<Self> {
        let nu = fit.model.nonzero_factor_entries();
        let bic = bic_criterion(fit.weighted_sse, fit.n_star, nu)?;
        let normalized_loss = normalized_loss(fit.weighted_sse, fit.n_star)?;
        Ok(PathPoint { step, lambda: fit.lambda, n_star: fit.n_star, nu, bic, normalized_loss, fit })
    }
}

/// Fits a decreasing penalty path for one set of kernel weights.
///
/// Evaluated penalties are `lambda_max * decay^k`. Without fast-forward the
/// path starts at `k = 0`. With it, the path starts at the last grid value
/// whose fit is all zero, located by doubling steps followed by bisection
/// over `k` (this assumes the fits are all zero on one side of a single
/// boundary). Either way, if the first fit is not all zero the penalty is
/// raised (`k` decreased, then `lambda_max` doubled) until it is.
///
/// The path stops after `max_steps` fits, or once `patience` fits follow the
/// BIC minimizer, counting only after the first fit that is not all zero.
pub fn lambda_path(design: &Design, init: &Initializer, cfg: &SelectionConfig) -> Result<Vec<PathPoint>> {
    let solver = SolverConfig {
        r_max: cfg.effective_r_max(design.p, design.n_types, design.n_times),
        ..cfg.solver.clone()
    };
    let annotate = |lambda: f64, e: Error| match e {
        Error::Divergence(it) => Error::Numerical(format!("divergence at lambda {lambda:e}, iteration {it}")),
        Error::Numerical(m) => Error::Numerical(format!("lambda {lambda:e}: {m}")),
        other => other,
    };
    let fit_at = |lambda: f64| fit_design(design, init, lambda, &solver).map_err(|e| annotate(lambda, e));

    let mut lambda_max = cfg.lambda_max;
    let mut grid = lambda_sequence(lambda_max, cfg.decay, 1);
    let grid_at = |grid: &mut Vec<f64>, k: usize| {
        while grid.len() <= k {
            let last = grid[grid.len() - 1];
            grid.push(last * cfg.decay);
        }
        grid[k]
    };
    let mut first = fit_at(grid[0])?;
    while first.rank() > 0 {
        warn!("lambda_max {lambda_max:e} does not give the all-zero fit, doubling");
        lambda_max *= 2.0;
        grid = lambda_sequence(lambda_max, cfg.decay, 1);
        first = fit_at(grid[0])?;
    }
    let mut start = 0usize;
    let mut known_nonzero: Option<(usize, FitResult)> = None;
    if cfg.fast_forward {
        // smallest penalty ratio considered: decay^LIMIT
        const LIMIT: usize = 4096;
        let mut step = 1usize;
        let mut hi = None;
        while start + step <= LIMIT {
            let k = start + step;
            let f = fit_at(grid_at(&mut grid, k))?;
            if f.rank() == 0 {
                start = k;
                first = f;
                step *= 2;
            } else {
                hi = Some((k, f));
                break;
            }
        }
        if let Some((mut k_hi, mut f_hi)) = hi {
            while k_hi - start > 1 {
                let mid = start + (k_hi - start) / 2;
                let f = fit_at(grid_at(&mut grid, mid))?;
                if f.rank() == 0 {
                    start = mid;
                    first = f;
                } else {
                    k_hi = mid;
                    f_hi = f;
                }
            }
            known_nonzero = Some((k_hi, f_hi));
        }
        if start > 0 {
            info!("path starts at step {start}, lambda {:e}", grid[start]);
        }
    }

    let mut path = vec![PathPoint::new(start, first)?];
    let mut best = 0usize;
    let mut seen_nonzero = false;
    let mut k = start;
    while path.len() < cfg.max_steps && !(seen_nonzero && path.len() - 1 - best >= cfg.patience) {
        k += 1;
        let fit = match known_nonzero.take() {
            Some((kk, f)) if kk == k => f,
            _ => fit_at(grid_at(&mut grid, k))?,
        };
        let point = PathPoint::new(k, fit)?;
        seen_nonzero |= point.fit.rank() > 0;
        if point.bic < path[best].bic {
            best = path.len();
        }
        path.push(point);
    }
    Ok(path)
}

/// Index of the smallest BIC on a path; ties go to the larger penalty.
pub fn select_lambda(path: &[PathPoint]) -> usize {
    let mut best = 0;
    for (i, p) in path.iter().enumerate() {
        if p.bic < path[best].bic {
            best = i;
        }
    }
    best
}

/// Everything computed for one neighbourhood size.
#[derive(Debug, Clone)]
pub struct BandwidthFit {
    pub l: usize,
    /// Per-sample bandwidths `H_i(L)`.
    pub bandwidths: Vec<f64>,
    pub n_star: usize,
    pub path: Vec<PathPoint>,
    pub selected: usize,
}

impl BandwidthFit {
    pub fn selected_point(&self) -> &PathPoint {
        &self.path[self.selected]
    }
}

#[derive(Debug, Clone)]
pub struct PathResult {
    /// One entry per `L` with positive overlap, in grid order.
    pub fits: Vec<BandwidthFit>,
    /// `L` values skipped because no weight was positive.
    pub excluded: Vec<usize>,
    /// Index into `fits` of the chosen `L`.
    pub selected: usize,
    /// Final model: dead components removed, normalized and oriented.
    pub model: CpModel,
}

impl PathResult {
    pub fn selected_fit(&self) -> &BandwidthFit {
        &self.fits[self.selected]
    }

    /// `(L, normalized loss at the BIC-selected penalty)` per `L`.
    pub fn elbow_curve(&self) -> Vec<(usize, f64)> {
        self.fits.iter().map(|f| (f.l, f.selected_point().normalized_loss)).collect()
    }

    /// Writes `L,lambda,rank,nu,Nstar,bic,normalized_loss,selected_flag`.
    pub fn write_report(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["L", "lambda", "rank", "nu", "Nstar", "bic", "normalized_loss", "selected_flag"])?;
        for (fi, f) in self.fits.iter().enumerate() {
            for (pi, p) in f.path.iter().enumerate() {
                let flag = fi == self.selected && pi == f.selected;
                w.write_record([
                    f.l.to_string(),
                    p.lambda.to_string(),
                    p.fit.rank().to_string(),
                    p.nu.to_string(),
                    p.n_star.to_string(),
                    p.bic.to_string(),
                    p.normalized_loss.to_string(),
                    u8::from(flag).to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Ridge start, penalty path and BIC choice for one `L`. `Ok(None)` when
/// the bandwidths leave no positive weight.
pub fn fit_bandwidth(dataset: &Dataset, l: usize, bandwidths: Vec<f64>, cfg: &SelectionConfig) -> Result<Option<BandwidthFit>> {
    let weights = compute_weights(dataset, &bandwidths)?;
    let design = match Design::new(dataset, &weights) {
        Ok(d) => d,
        Err(Error::NoOverlap) => return Ok(None),
        Err(e) => return Err(e),
    };
    let init = Initializer::from_design(&design, &cfg.ridge, cfg.solver.als)?;
    let path = lambda_path(&design, &init, cfg)?;
    let selected = select_lambda(&path);
    Ok(Some(BandwidthFit { l, bandwidths, n_star: design.n_star(), path, selected }))
}

/// Runs every `L` of the grid, picks each penalty by BIC and `L` by the
/// elbow rule.
pub fn run_full(dataset: &Dataset, cfg: &SelectionConfig) -> Result<PathResult> {
    cfg.validate()?;
    let table = bandwidth_candidates(dataset, &cfg.l_grid)?;
    let results: Vec<Result<Option<BandwidthFit>>> = (0..cfg.l_grid.len())
        .into_par_iter()
        .map(|i| fit_bandwidth(dataset, cfg.l_grid[i], table.bandwidths(i), cfg))
        .collect();
    let mut fits = Vec::new();
    let mut excluded = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r? {
            Some(f) => fits.push(f),
            None => {
                warn!("L = {}: no positive kernel weight, excluded from the elbow curve", cfg.l_grid[i]);
                excluded.push(cfg.l_grid[i]);
            }
        }
    }
    if fits.is_empty() {
        return Err(Error::NoOverlap);
    }
    let curve: Vec<(usize, f64)> = fits.iter().map(|f| (f.l, f.selected_point().normalized_loss)).collect();
    let selected = if curve.len() < 3 {
        warn!("only {} usable L values, elbow rule not applicable; taking the smallest", curve.len());
        0
    } else {
        elbow_index(&curve)
    };
    let model = fits[selected].selected_point().fit.model.clone();
    Ok(PathResult { fits, excluded, selected, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{plant_outcomes, random_dataset, random_model};

    #[test]
    fn bic_examples() {
        let b = bic_criterion(400.0, 100, 0).unwrap();
        assert!((b - 100.0 * 4f64.ln()).abs() < 1e-12);
        assert!((b - 138.629_436_111_989_06).abs() < 1e-9);
        let b1 = bic_criterion(400.0, 100, 1).unwrap();
        assert!((b1 - b - 100f64.ln()).abs() < 1e-12);
        assert!(bic_criterion(300.0, 100, 3).unwrap() < bic_criterion(400.0, 100, 3).unwrap());
        assert_eq!(bic_criterion(0.0, 10, 0).unwrap(), f64::NEG_INFINITY);
        assert!(matches!(bic_criterion(1.0, 0, 0), Err(Error::NoOverlap)));
    }

    #[test]
    fn normalized_loss_hand_fixture() {
        // weights (1, 3), residuals (2, 0)
        assert_eq!(normalized_loss(1.0 * 4.0 + 3.0 * 0.0, 2).unwrap(), 2.0);
    }

    #[test]
    fn lambda_sequence_is_iterative_product() {
        let s = lambda_sequence(1e5, 0.9, 22);
        assert_eq!(s[0], 1e5);
        assert!((s[21] / 1.094e4 - 1.0).abs() < 5e-4);
        let mut l = 1e5;
        for v in &s {
            assert_eq!(*v, l);
            l *= 0.9;
        }
        let sim = 1e10 * 0.9f64.powi(-30);
        assert!((sim - 2.3590e11).abs() < 1e8);
    }

    #[test]
    fn elbow_examples() {
        let pts: Vec<(usize, f64)> = vec![(1, 10.0), (2, 2.0), (3, 1.9), (4, 1.8), (5, 1.7)];
        assert_eq!(elbow_select(&pts).unwrap(), 2);
        let lin: Vec<(usize, f64)> = (1..=6).map(|l| (l, 10.0 - l as f64)).collect();
        assert_eq!(elbow_select(&lin).unwrap(), 1);
        assert!(matches!(elbow_select(&pts[..2]), Err(Error::DegenerateCurve(2))));
        let scaled: Vec<(usize, f64)> = pts.iter().map(|&(l, v)| (l, 3.0 * v - 7.0)).collect();
        assert_eq!(elbow_select(&scaled).unwrap(), 2);
        // the bump at L = 2 is farther from the chord but lies above it
        let bump: Vec<(usize, f64)> = vec![(1, 10.0), (2, 12.0), (3, 3.0), (4, 2.0), (5, 1.0)];
        assert_eq!(elbow_select(&bump).unwrap(), 3);
        let concave: Vec<(usize, f64)> = vec![(1, 10.0), (2, 9.9), (3, 9.5), (4, 5.0)];
        assert_eq!(elbow_select(&concave).unwrap(), 1);
    }

    #[test]
    fn r_max_default_and_cap() {
        let c = SelectionConfig::default();
        assert_eq!(c.effective_r_max(50, 3, 2), 6);
        assert_eq!(c.effective_r_max(1, 3, 2), 2);
        let c = SelectionConfig { r_max: Some(4), ..c };
        assert_eq!(c.effective_r_max(50, 3, 2), 4);
    }

    #[test]
    fn path_starts_at_zero_fit_and_selects() {
        let mut ds = random_dataset(21, 6, 2, 2, 2, 8, 60);
        let w0 = compute_weights(&ds, &[25.0, 25.0]).unwrap();
        plant_outcomes(&mut ds, &w0, &random_model(4, 6, 2, 2, 1), 0.05, 1);
        let w = compute_weights(&ds, &[25.0, 25.0]).unwrap();
        let design = Design::new(&ds, &w).unwrap();
        let cfg = SelectionConfig { lambda_max: 1e6, l_grid: vec![5], max_steps: 30, ..SelectionConfig::default() };
        let init = Initializer::from_design(&design, &cfg.ridge, cfg.solver.als).unwrap();
        let path = lambda_path(&design, &init, &cfg).unwrap();
        assert_eq!(path[0].fit.rank(), 0);
        assert_eq!(path[0].nu, 0);
        assert!(path.iter().any(|p| p.fit.rank() > 0));
        let mut l = cfg.lambda_max;
        for _ in 0..path[0].step {
            l *= cfg.decay;
        }
        for p in &path {
            assert_eq!(p.lambda, l);
            l *= cfg.decay;
        }
        let best = select_lambda(&path);
        assert!(path.len() - 1 - best <= cfg.patience);

        assert!(path[1].fit.rank() > 0);

        let plain = SelectionConfig { fast_forward: false, max_steps: 3, ..cfg.clone() };
        let p2 = lambda_path(&design, &init, &plain).unwrap();
        assert_eq!(p2[0].lambda, 1e6);
        assert_eq!(p2[0].step, 0);
        assert_eq!(p2.len(), 3);
    }

    #[test]
    fn small_lambda_max_is_doubled() {
        let mut ds = random_dataset(22, 6, 2, 2, 2, 8, 60);
        let w0 = compute_weights(&ds, &[25.0, 25.0]).unwrap();
        plant_outcomes(&mut ds, &w0, &random_model(4, 6, 2, 2, 1), 0.05, 1);
        let design = Design::new(&ds, &w0).unwrap();
        let cfg = SelectionConfig { lambda_max: 1e-6, max_steps: 2, ..SelectionConfig::default() };
        let init = Initializer::from_design(&design, &cfg.ridge, cfg.solver.als).unwrap();
        let path = lambda_path(&design, &init, &cfg).unwrap();
        assert_eq!(path[0].fit.rank(), 0);
        assert!(path[0].lambda > 1e-6);
    }
}
