//! Kernel-weighted ridge regression per (cell type, time) stratum.
//!
//! The resulting dense tensor seeds the CP fit. Each stratum solves
//!
//! ```text
//! (X' W X + lambda I) beta = X' W y
//! ```
//!
//! over the triples whose cell has type `c` in a sample taken at time `t`,
//! with `lambda` picked by K-fold cross-validation. Folds split plaques, not
//! triples, so all triples of one plaque land in the same fold.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cp::Tensor3;
use crate::data::Dataset;
use crate::design::Design;
use crate::error::{Error, Result};
use crate::kernel::KernelWeightSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RidgeConfig {
    /// Candidate penalties as multiples of the mean diagonal of `X' W X`.
    pub relative_grid: Vec<f64>,
    pub folds: usize,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        RidgeConfig {
            relative_grid: log_grid(1e-4, 1e4, 20),
            folds: 5,
        }
    }
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Sufficient statistics `X' W X`, `X' W y` and `y' W y` of a set of triples.
#[derive(Clone)]
struct Normal {
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
    yy: f64,
}

impl Normal {
    fn zeros(p: usize) -> Self {
        Normal {
            gram: DMatrix::zeros(p, p),
            rhs: DVector::zeros(p),
            yy: 0.0,
        }
    }

    fn add(&mut self, x: &[f64], w: f64, y: f64) {
        let p = x.len();
        for a in 0..p {
            let wx = w * x[a];
            if wx == 0.0 {
                continue;
            }
            self.rhs[a] += wx * y;
            for b in a..p {
                self.gram[(a, b)] += wx * x[b];
            }
        }
        self.yy += w * y * y;
    }

    fn symmetrize(&mut self) {
        let p = self.gram.nrows();
        for a in 0..p {
            for b in 0..a {
                self.gram[(a, b)] = self.gram[(b, a)];
            }
        }
    }

    fn minus(&self, other: &Normal) -> Normal {
        Normal {
            gram: &self.gram - &other.gram,
            rhs: &self.rhs - &other.rhs,
            yy: self.yy - other.yy,
        }
    }

    fn solve(&self, lambda: f64) -> Result<DVector<f64>> {
        let p = self.gram.nrows();
        let mut a = self.gram.clone();
        for i in 0..p {
            a[(i, i)] += lambda;
        }
        let chol = a
            .cholesky()
            .ok_or_else(|| Error::Numerical("ridge system is not positive definite".into()))?;
        Ok(chol.solve(&self.rhs))
    }

    /// `sum w (y - x'beta)^2` expressed through the statistics.
    fn sse(&self, beta: &DVector<f64>) -> f64 {
        self.yy - 2.0 * beta.dot(&self.rhs) + (beta.transpose() * &self.gram * beta)[(0, 0)]
    }
}

fn stratum_cells(design: &Design, c: usize, t: usize) -> Vec<usize> {
    design.cells_by_type[c]
        .iter()
        .copied()
        .filter(|&k| design.cell_time[k] == t)
        .collect()
}

fn stratum_normal(design: &Design, cells: &[usize], keep: impl Fn(usize) -> bool) -> Normal {
    let mut n = Normal::zeros(design.p);
    for &k in cells {
        let x = design.cell_x(k);
        for i in design.triples(k) {
            if keep(i) {
                n.add(x, design.weight[i], design.outcome[i]);
            }
        }
    }
    n.symmetrize();
    n
}

/// Exact weighted ridge solution for one stratum at a fixed penalty.
pub fn ridge_fit_slice_design(design: &Design, c: usize, t: usize, lambda: f64) -> Result<Vec<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::Invalid(format!("ridge penalty must be positive, got {lambda}")));
    }
    let cells = stratum_cells(design, c, t);
    if cells.is_empty() {
        return Err(Error::EmptyStratum { cell_type: c, time: t });
    }
    let normal = stratum_normal(design, &cells, |_| true);
    Ok(normal.solve(lambda)?.iter().copied().collect())
}

/// [`ridge_fit_slice_design`] starting from a dataset and its weights.
pub fn ridge_fit_slice(
    dataset: &Dataset,
    weights: &KernelWeightSet,
    c: usize,
    t: usize,
    lambda: f64,
) -> Result<Vec<f64>> {
    ridge_fit_slice_design(&Design::new(dataset, weights)?, c, t, lambda)
}

/// Outcome of the cross-validated fit for one stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumFit {
    pub cell_type: usize,
    pub time: usize,
    /// `None` for an empty stratum.
    pub lambda: Option<f64>,
}

/// Cross-validated ridge over every stratum, assembled into a `p × C × T`
/// tensor. Empty strata give a zero slice.
pub fn ridge_init(design: &Design, config: &RidgeConfig) -> Result<(Tensor3, Vec<StratumFit>)> {
    if config.relative_grid.is_empty() || config.relative_grid.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Invalid("ridge grid must be non-empty and positive".into()));
    }
    if config.folds < 2 {
        return Err(Error::Invalid("ridge cross-validation needs at least 2 folds".into()));
    }
    let p = design.p;
    let mut tensor = Tensor3::zeros(p, design.n_types, design.n_times);
    let mut fits = Vec::new();
    for t in 0..design.n_times {
        for c in 0..design.n_types {
            let cells = stratum_cells(design, c, t);
            if cells.is_empty() {
                warn!("ridge: stratum (cell type {c}, time {t}) is empty, using a zero slice");
                fits.push(StratumFit { cell_type: c, time: t, lambda: None });
                continue;
            }
            let total = stratum_normal(design, &cells, |_| true);
            let scale = (0..p).map(|i| total.gram[(i, i)]).sum::<f64>() / p as f64;
            if !(scale > 0.0) {
                fits.push(StratumFit { cell_type: c, time: t, lambda: None });
                continue;
            }
            let lambda = cross_validate(design, &cells, &total, scale, config)?;
            let beta = total.solve(lambda)?;
            tensor.slice_mut(c, t).copy_from_slice(beta.as_slice());
            fits.push(StratumFit { cell_type: c, time: t, lambda: Some(lambda) });
        }
    }
    Ok((tensor, fits))
}

fn cross_validate(
    design: &Design,
    cells: &[usize],
    total: &Normal,
    scale: f64,
    config: &RidgeConfig,
) -> Result<f64> {
    let mut plaques: Vec<(usize, usize)> = cells
        .iter()
        .flat_map(|&k| design.triples(k).map(|i| design.plaque[i]))
        .collect();
    plaques.sort_unstable();
    plaques.dedup();
    let folds = config.folds.min(plaques.len());
    let grid: Vec<f64> = config.relative_grid.iter().map(|g| g * scale).collect();
    if folds < 2 {
        warn!("ridge: a single plaque in the stratum, skipping cross-validation");
        return Ok(grid[grid.len() / 2]);
    }
    let fold_of = |i: usize| -> usize {
        let pos = plaques.binary_search(&design.plaque[i]).expect("plaque in stratum");
        pos % folds
    };
    let held: Vec<Normal> = (0..folds)
        .map(|f| stratum_normal(design, cells, |i| fold_of(i) == f))
        .collect();
    let mut best = (f64::INFINITY, grid[0]);
    // largest penalty first so ties favour more shrinkage
    for &lambda in grid.iter().rev() {
        let mut err = 0.0;
        for fold in &held {
            let train = total.minus(fold);
            let beta = train.solve(lambda)?;
            err += fold.sse(&beta);
        }
        if err < best.0 {
            best = (err, lambda);
        }
    }
    Ok(best.1)
}
