//! Accuracy metrics against a known coefficient tensor, the paired-LASSO
//! baseline, and per-component summaries of a fitted model.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::cp::{CpModel, Tensor3};
use crate::data::Dataset;
use crate::error::{Error, Result};

fn check_shapes(a: &Tensor3, b: &Tensor3) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("estimate {:?} vs truth {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean over all entries of the squared difference.
pub fn coefficient_mse(estimate: &Tensor3, truth: &Tensor3) -> Result<f64> {
    check_shapes(estimate, truth)?;
    let n = truth.as_slice().len();
    let sse: f64 = estimate.as_slice().iter().zip(truth.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sse / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub auc: f64,
    /// (fpr, tpr), sorted by fpr then tpr, from (0, 0) to (1, 1)
    pub points: Vec<(f64, f64)>,
}

/// Support recovery of `|estimate|` against the nonzero pattern of `truth`.
///
/// An entry counts as selected at threshold `tau` when `|estimate| >= tau`.
/// Thresholds are every distinct `|estimate|` value plus 0 and infinity, so
/// the curve is exact. The area is the trapezoidal integral.
pub fn roc_auc(estimate: &Tensor3, truth: &Tensor3) -> Result<RocCurve> {
    check_shapes(estimate, truth)?;
    let mut entries: Vec<(f64, bool)> =
        estimate.as_slice().iter().zip(truth.as_slice()).map(|(e, t)| (e.abs(), *t != 0.0)).collect();
    let n_pos = entries.iter().filter(|e| e.1).count();
    let n_neg = entries.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedRate);
    }
    entries.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < entries.len() {
        let v = entries[i].0;
        while i < entries.len() && entries[i].0 == v {
            if entries[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    points.push((1.0, 1.0));
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    points.dedup();

    let auc = points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
    Ok(RocCurve { auc, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    pub mse: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse: f64,
    pub auc: f64,
    pub roc: Vec<(f64, f64)>,
    pub comparison: Vec<MethodMetrics>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn evaluate(estimate: &Tensor3, truth: &Tensor3, method: &str) -> Result<EvalReport> {
    let mse = coefficient_mse(estimate, truth)?;
    let roc = roc_auc(estimate, truth)?;
    Ok(EvalReport {
        mse,
        auc: roc.auc,
        roc: roc.points,
        comparison: vec![MethodMetrics { method: method.to_string(), mse, auc: roc.auc }],
    })
}

pub fn write_roc_csv(points: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(e, path))?;
    w.write_record(["fpr", "tpr"])?;
    for (f, t) in points {
        w.write_record([f.to_string(), t.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(e: csv::Error, path: &Path) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Invalid(format!("{}: {other:?}", path.display())),
    }
}

/// One cell of a replicate grid, ready for aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    pub m: usize,
    pub sigma2: f64,
    pub replicate: usize,
    pub method: String,
    pub mse: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    #[serde(rename = "M")]
    pub m: usize,
    pub sigma2: f64,
    pub method: String,
    pub n: usize,
    pub mse_mean: f64,
    pub auc_mean: f64,
}

/// Averages replicates per (M, sigma2, method). Rows follow the order in
/// which each key first appears.
pub fn aggregate_table(rows: &[ReplicateMetrics]) -> Vec<TableRow> {
    let mut out: Vec<TableRow> = Vec::new();
    for r in rows {
        let pos = out.iter().position(|t| t.m == r.m && t.sigma2 == r.sigma2 && t.method == r.method);
        let t = match pos {
            Some(i) => &mut out[i],
            None => {
                out.push(TableRow { m: r.m, sigma2: r.sigma2, method: r.method.clone(), n: 0, mse_mean: 0.0, auc_mean: 0.0 });
                out.last_mut().unwrap()
            }
        };
        t.n += 1;
        t.mse_mean += r.mse;
        t.auc_mean += r.auc;
    }
    for t in &mut out {
        t.mse_mean /= t.n as f64;
        t.auc_mean /= t.n as f64;
    }
    out
}

pub fn write_table_csv(rows: &[TableRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(e, path))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LassoConfig {
    /// Plaque-level cross-validation folds.
    pub folds: usize,
    pub n_lambda: usize,
    /// Smallest penalty on the grid relative to the smallest all-zero one.
    pub lambda_min_ratio: f64,
    /// Fixed penalty on the standardized scale; skips cross-validation.
    pub lambda: Option<f64>,
    /// One regression per (paired cell type, time) when true, otherwise a
    /// single regression whose coefficients fill every slice.
    pub stratified: bool,
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoConfig {
    fn default() -> Self {
        LassoConfig {
            folds: 5,
            n_lambda: 50,
            lambda_min_ratio: 1e-3,
            lambda: None,
            stratified: true,
            tol: 1e-9,
            max_sweeps: 100_000,
        }
    }
}

/// Coordinate descent for `(1/2n)|y - X b|^2 + lambda |b|_1` on centered
/// data. `x` is row-major `n × p`, `col_sq[j] = |X_j|^2 / n`. `b` is the
/// warm start and is overwritten.
pub fn lasso_cd(x: &[f64], y: &[f64], p: usize, lambda: f64, b: &mut [f64], tol: f64, max_sweeps: usize) {
    let n = y.len();
    let col_sq: Vec<f64> = (0..p).map(|j| (0..n).map(|i| x[i * p + j] * x[i * p + j]).sum::<f64>() / n as f64).collect();
    let mut r: Vec<f64> = (0..n).map(|i| y[i] - (0..p).map(|j| x[i * p + j] * b[j]).sum::<f64>()).collect();
    for _ in 0..max_sweeps {
        let mut max_change = 0.0f64;
        for j in 0..p {
            if col_sq[j] == 0.0 {
                b[j] = 0.0;
                continue;
            }
            let rho = (0..n).map(|i| x[i * p + j] * r[i]).sum::<f64>() / n as f64 + col_sq[j] * b[j];
            let new = crate::solver::soft_threshold(rho, lambda) / col_sq[j];
            let d = new - b[j];
            if d != 0.0 {
                for i in 0..n {
                    r[i] -= x[i * p + j] * d;
                }
                b[j] = new;
                max_change = max_change.max(d.abs() * col_sq[j].sqrt());
            }
        }
        if max_change < tol {
            break;
        }
    }
}

/// Standardized design for one regression: centered outcomes and centered,
/// unit-variance columns. Constant columns stay zero.
struct Standardized {
    x: Vec<f64>,
    y: Vec<f64>,
    scale: Vec<f64>,
}

fn standardize(rows: &[&[f64]], y: &[f64], p: usize) -> Standardized {
    let n = rows.len();
    let ybar = y.iter().sum::<f64>() / n as f64;
    let mut x = vec![0.0; n * p];
    let mut scale = vec![0.0; p];
    for j in 0..p {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd > 1e-12 * (1.0 + mean.abs()) {
            scale[j] = sd;
            for i in 0..n {
                x[i * p + j] = (rows[i][j] - mean) / sd;
            }
        }
    }
    Standardized { x, y: y.iter().map(|v| v - ybar).collect(), scale }
}

fn lambda_grid(s: &Standardized, p: usize, cfg: &LassoConfig) -> Vec<f64> {
    let n = s.y.len() as f64;
    let top = (0..p)
        .map(|j| (0..s.y.len()).map(|i| s.x[i * p + j] * s.y[i]).sum::<f64>().abs() / n)
        .fold(0.0f64, f64::max);
    if top == 0.0 {
        return vec![0.0];
    }
    let k = cfg.n_lambda.max(1);
    let ratio = cfg.lambda_min_ratio.powf(1.0 / (k.max(2) - 1) as f64);
    let mut out = vec![top];
    for i in 1..k {
        out.push(out[i - 1] * ratio);
    }
    out
}

/// L1-penalized regression of `y` on `rows` with an intercept. Returns the
/// slopes on the original scale. Fewer than two observations give zeros.
pub fn lasso_regression(rows: &[&[f64]], y: &[f64], p: usize, cfg: &LassoConfig) -> Vec<f64> {
    let n = rows.len();
    if n < 2 {
        return vec![0.0; p];
    }
    let s = standardize(rows, y, p);
    let lambda = match cfg.lambda {
        Some(l) => l,
        None => {
            let grid = lambda_grid(&s, p, cfg);
            let folds = cfg.folds.min(n);
            if folds < 2 {
                *grid.last().unwrap()
            } else {
                let mut err = vec![0.0; grid.len()];
                for f in 0..folds {
                    let train: Vec<usize> = (0..n).filter(|i| i % folds != f).collect();
                    let test: Vec<usize> = (0..n).filter(|i| i % folds == f).collect();
                    let tr_rows: Vec<&[f64]> = train.iter().map(|&i| rows[i]).collect();
                    let tr_y: Vec<f64> = train.iter().map(|&i| y[i]).collect();
                    let st = standardize(&tr_rows, &tr_y, p);
                    let ybar = tr_y.iter().sum::<f64>() / tr_y.len() as f64;
                    let means: Vec<f64> =
                        (0..p).map(|j| tr_rows.iter().map(|r| r[j]).sum::<f64>() / tr_rows.len() as f64).collect();
                    let mut b = vec![0.0; p];
                    for (k, &lam) in grid.iter().enumerate() {
                        lasso_cd(&st.x, &st.y, p, lam, &mut b, cfg.tol, cfg.max_sweeps);
                        for &i in &test {
                            let mut pred = ybar;
                            for j in 0..p {
                                if st.scale[j] > 0.0 {
                                    pred += b[j] * (rows[i][j] - means[j]) / st.scale[j];
                                }
                            }
                            err[k] += (y[i] - pred).powi(2);
                        }
                    }
                }
                // first minimum along the decreasing grid: ties go to the larger penalty
                let mut best = 0;
                for k in 1..grid.len() {
                    if err[k] < err[best] {
                        best = k;
                    }
                }
                grid[best]
            }
        }
    };
    let mut b = vec![0.0; p];
    lasso_cd(&s.x, &s.y, p, lambda, &mut b, cfg.tol, cfg.max_sweeps);
    b.iter().zip(&s.scale).map(|(v, sd)| if *sd > 0.0 { v / sd } else { 0.0 }).collect()
}

/// Nearest cell of every plaque in its own sample, ties to the smaller
/// cell index. `None` for a sample without cells.
pub fn nearest_cells(dataset: &Dataset) -> Vec<Vec<Option<usize>>> {
    dataset
        .samples
        .iter()
        .map(|s| {
            s.plaques
                .iter()
                .map(|pl| {
                    let mut best: Option<(usize, f64)> = None;
                    for (k, c) in s.cells.iter().enumerate() {
                        let d = pl.location.distance(&c.location);
                        if best.is_none_or(|(_, bd)| d < bd) {
                            best = Some((k, d));
                        }
                    }
                    best.map(|b| b.0)
                })
                .collect()
        })
        .collect()
}

/// Baseline that pairs every plaque with its nearest cell and regresses the
/// outcomes on the paired expression.
pub fn paired_lasso(dataset: &Dataset, cfg: &LassoConfig) -> Tensor3 {
    let (p, n_c, n_t) = (dataset.n_genes(), dataset.n_cell_types(), dataset.n_times());
    let pairs = nearest_cells(dataset);
    // (stratum, expression row, outcome)
    let mut obs: Vec<(usize, &[f64], f64)> = Vec::new();
    for (s, sample) in dataset.samples.iter().enumerate() {
        for (j, k) in pairs[s].iter().enumerate() {
            if let Some(k) = *k {
                let st = sample.time_index * n_c + sample.cells[k].cell_type;
                obs.push((st, sample.expression(k), sample.plaques[j].outcome));
            }
        }
    }
    let mut out = Tensor3::zeros(p, n_c, n_t);
    if cfg.stratified {
        for t in 0..n_t {
            for c in 0..n_c {
                let st = t * n_c + c;
                let rows: Vec<&[f64]> = obs.iter().filter(|o| o.0 == st).map(|o| o.1).collect();
                let y: Vec<f64> = obs.iter().filter(|o| o.0 == st).map(|o| o.2).collect();
                if rows.len() < 2 {
                    warn!(
                        "paired lasso: stratum ({}, {}) has {} pairs, slice left at zero",
                        dataset.cell_types[c],
                        dataset.times[t],
                        rows.len()
                    );
                    continue;
                }
                let b = lasso_regression(&rows, &y, p, cfg);
                out.slice_mut(c, t).copy_from_slice(&b);
            }
        }
    } else {
        let rows: Vec<&[f64]> = obs.iter().map(|o| o.1).collect();
        let y: Vec<f64> = obs.iter().map(|o| o.2).collect();
        if rows.len() < 2 {
            warn!("paired lasso: {} pairs, estimate left at zero", rows.len());
            return out;
        }
        let b = lasso_regression(&rows, &y, p, cfg);
        for t in 0..n_t {
            for c in 0..n_c {
                out.slice_mut(c, t).copy_from_slice(&b);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthRow {
    pub cell_type: usize,
    pub time: usize,
    /// Euclidean norm of the slice over genes.
    pub strength: f64,
    pub mean_effect: f64,
}

/// Per-slice strength and mean effect, `t`-major.
pub fn summarize_strength(model: &CpModel) -> Vec<StrengthRow> {
    let [p, n_c, n_t] = model.dims;
    let mut out = Vec::with_capacity(n_c * n_t);
    for t in 0..n_t {
        for c in 0..n_c {
            let s = model.beta_slice(c, t);
            out.push(StrengthRow {
                cell_type: c,
                time: t,
                strength: s.iter().map(|v| v * v).sum::<f64>().sqrt(),
                mean_effect: s.iter().sum::<f64>() / p as f64,
            });
        }
    }
    out
}

fn signed_average(v: &[f64]) -> Option<f64> {
    let abs: f64 = v.iter().map(|x| x.abs()).sum();
    (abs > 0.0).then(|| v.iter().sum::<f64>() / abs)
}

/// Product over the three modes of `sum(q) / sum(|q|)`.
pub fn net_direction(model: &CpModel, r: usize) -> Result<f64> {
    let c = model
        .components
        .get(r)
        .ok_or_else(|| Error::Invalid(format!("component {r} out of range (rank {})", model.rank())))?;
    let mut out = 1.0;
    for mode in [&c.genes, &c.cell_types, &c.times] {
        out *= signed_average(mode).ok_or(Error::UndefinedDirection(r))?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRow {
    /// Position in the model's component list.
    pub component: usize,
    pub weight: f64,
    pub net_direction: Option<f64>,
    /// (index, loading) by decreasing |loading|
    pub genes: Vec<(usize, f64)>,
    pub cell_types: Vec<(usize, f64)>,
    pub times: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    /// By decreasing weight.
    pub components: Vec<ComponentRow>,
    pub strength: Vec<StrengthRow>,
}

fn top_loadings(v: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i, v[i])).collect()
}

pub fn component_table(model: &CpModel, top_k: usize) -> ComponentSummary {
    let mut components: Vec<ComponentRow> = model
        .components
        .iter()
        .enumerate()
        .map(|(r, c)| ComponentRow {
            component: r,
            weight: c.weight,
            net_direction: net_direction(model, r).ok(),
            genes: top_loadings(&c.genes, top_k),
            cell_types: top_loadings(&c.cell_types, top_k),
            times: top_loadings(&c.times, top_k),
        })
        .collect();
    components.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.component.cmp(&b.component)));
    ComponentSummary { components, strength: summarize_strength(model) }
}

impl ComponentSummary {
    /// Long format: one row per listed loading.
    pub fn write_csv(&self, dataset: &Dataset, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(e, path))?;
        w.write_record(["component", "weight", "net_direction", "mode", "position", "name", "loading"])?;
        let times: Vec<String> = dataset.times.iter().map(|t| t.to_string()).collect();
        for (rank, row) in self.components.iter().enumerate() {
            let nd = row.net_direction.map(|v| format!("{v:.4}")).unwrap_or_default();
            let modes: [(&str, &[(usize, f64)], &[String]); 3] = [
                ("gene", &row.genes, &dataset.genes),
                ("cell_type", &row.cell_types, &dataset.cell_types),
                ("time", &row.times, &times),
            ];
            for (mode, list, names) in modes {
                for (pos, (i, v)) in list.iter().enumerate() {
                    let name = names.get(*i).cloned().unwrap_or_else(|| i.to_string());
                    w.write_record([
                        (rank + 1).to_string(),
                        format!("{:.6}", row.weight),
                        nd.clone(),
                        mode.to_string(),
                        (pos + 1).to_string(),
                        name,
                        format!("{v:.6}"),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_strength_csv(&self, dataset: &Dataset, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(e, path))?;
        w.write_record(["cell_type", "time", "strength", "mean_effect"])?;
        for s in &self.strength {
            w.write_record([
                dataset.cell_types.get(s.cell_type).cloned().unwrap_or_else(|| s.cell_type.to_string()),
                dataset.times.get(s.time).map(|t| t.to_string()).unwrap_or_else(|| s.time.to_string()),
                format!("{:.6}", s.strength),
                format!("{:.6}", s.mean_effect),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
