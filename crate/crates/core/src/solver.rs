//! Blocked coordinate descent for the penalized CP regression.
//!
//! The objective is
//!
//! ```text
//! F = 1/2 sum K (y - x'beta_{c,t})^2 + lambda / (R p) sum_r |q1_r|_1
//! ```
//!
//! Every update is an exact one-dimensional minimization, so `F` never
//! increases within a block. The residual information the updates need is
//! kept in two incrementally maintained forms: per stratum, the weighted
//! cross-product `g_{c,t} = sum K x R`, updated after every coordinate; and
//! per active cell, the linear predictor `x'beta` from which the triple
//! residuals `R = y - x'beta` follow. The predictors are brought up to date
//! by adding `x'(beta_new - beta_old)` whenever residuals are read. Both are
//! rebuilt from scratch periodically and after every rank drop.

use std::path::Path;
use std::sync::Mutex;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::cp::{cp_als_fit, renormalize_component, AlsConfig, CpModel, Tensor3};
use crate::data::Dataset;
use crate::design::Design;
use crate::error::{Error, Result};
use crate::kernel::KernelWeightSet;
use crate::ridge::{ridge_init, RidgeConfig};

/// `sign(u) * max(|u| - tau, 0)`.
pub fn soft_threshold(u: f64, tau: f64) -> f64 {
    if u > tau {
        u - tau
    } else if u < -tau {
        u + tau
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub r_max: usize,
    pub max_outer_iters: usize,
    /// Rank dropping is active for outer iterations `1..=rank_drop_window`.
    pub rank_drop_window: usize,
    pub tol_beta: f64,
    pub tol_factor: f64,
    pub rel_weight: f64,
    pub q1_inf: f64,
    /// Rebuild the maintained residuals every this many outer iterations.
    pub refresh_period: usize,
    pub als: AlsConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            r_max: 1,
            max_outer_iters: 5000,
            rank_drop_window: 500,
            tol_beta: 1e-6,
            tol_factor: 1e-4,
            rel_weight: 1e-5,
            q1_inf: 0.99,
            refresh_period: 50,
            als: AlsConfig::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r_max == 0 {
            return Err(Error::Invalid("r_max must be at least 1".into()));
        }
        let tols = [self.tol_beta, self.tol_factor, self.rel_weight, self.q1_inf];
        if tols.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Invalid("solver tolerances must be positive".into()));
        }
        if self.refresh_period == 0 {
            return Err(Error::Invalid("refresh_period must be at least 1".into()));
        }
        Ok(())
    }
}

/// Result of comparing two consecutive iterates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Convergence {
    pub converged: bool,
    /// max over slices of `|dbeta|_inf^2 / |beta_old|_inf^2`
    pub beta_change: f64,
    /// max over components and modes of `|q_new - q_old|_2`
    pub factor_change: f64,
}

/// Both stopping criteria: the relative squared sup-norm change of every
/// coefficient slice below `tol_beta`, and every factor vector moving by at
/// most `tol_factor`. Models of different rank never compare as converged.
pub fn check_convergence(old: &CpModel, new: &CpModel, tol_beta: f64, tol_factor: f64) -> Convergence {
    if old.rank() != new.rank() || old.dims != new.dims {
        return Convergence { converged: false, beta_change: f64::INFINITY, factor_change: f64::INFINITY };
    }
    let [_, c_n, t_n] = old.dims;
    let mut beta_change = 0.0f64;
    for t in 0..t_n {
        for c in 0..c_n {
            let (bo, bn) = (old.beta_slice(c, t), new.beta_slice(c, t));
            let den = sup(&bo);
            let num = bo.iter().zip(&bn).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if den == 0.0 {
                if sup(&bn) != 0.0 {
                    beta_change = f64::INFINITY;
                }
                continue;
            }
            beta_change = beta_change.max((num * num) / (den * den));
        }
    }
    let mut factor_change = 0.0f64;
    for (a, b) in old.components.iter().zip(&new.components) {
        for (u, v) in [(&a.genes, &b.genes), (&a.cell_types, &b.cell_types), (&a.times, &b.times)] {
            let d = u.iter().zip(v).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            factor_change = factor_change.max(d);
        }
    }
    Convergence {
        converged: beta_change < tol_beta && factor_change <= tol_factor,
        beta_change,
        factor_change,
    }
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(g: &[f64], v: &[f64], out: &mut [f64]) {
    let p = v.len();
    for (a, o) in out.iter_mut().enumerate() {
        *o = dot(&g[a * p..(a + 1) * p], v);
    }
}

/// Mutable fitting state for one `(lambda, bandwidth)` problem.
#[derive(Debug, Clone)]
pub struct SolverState<'a> {
    design: &'a Design,
    lambda: f64,
    tau: f64,
    model: CpModel,
    /// per stratum, `sum K x R` (length p each, concatenated)
    g: Vec<f64>,
    /// per active cell, the linear predictor as of the last sync
    eta: Vec<f64>,
    /// dense coefficients matching `eta`
    eta_beta: Tensor3,
}

impl<'a> SolverState<'a> {
    pub fn new(design: &'a Design, model: CpModel, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Invalid(format!("penalty must be finite and non-negative, got {lambda}")));
        }
        if model.dims != [design.p, design.n_types, design.n_times] {
            return Err(Error::Shape(format!(
                "model dims {:?} do not match the design ({}, {}, {})",
                model.dims, design.p, design.n_types, design.n_times
            )));
        }
        let mut s = SolverState {
            design,
            lambda,
            tau: 0.0,
            eta_beta: Tensor3::zeros(design.p, design.n_types, design.n_times),
            model,
            g: Vec::new(),
            eta: Vec::new(),
        };
        s.update_tau();
        s.rebuild();
        Ok(s)
    }

    fn update_tau(&mut self) {
        let r = self.model.rank();
        self.tau = if r == 0 { 0.0 } else { self.lambda / (r as f64 * self.design.p as f64) };
    }

    pub fn model(&self) -> &CpModel {
        &self.model
    }

    pub fn into_model(self) -> CpModel {
        self.model
    }

    pub fn rank(&self) -> usize {
        self.model.rank()
    }

    /// Current soft-threshold level `lambda / (R p)`.
    pub fn tau(&self) -> f64 {
        self.tau
    }

    fn scratch_g(&self, beta: &Tensor3) -> Vec<f64> {
        let d = self.design;
        let p = d.p;
        let mut g = d.xy.clone();
        let mut tmp = vec![0.0; p];
        for st in 0..d.n_strata() {
            let (c, t) = (st % d.n_types, st / d.n_types);
            matvec(d.gram(st), beta.slice(c, t), &mut tmp);
            for (x, y) in g[st * p..(st + 1) * p].iter_mut().zip(&tmp) {
                *x -= y;
            }
        }
        g
    }

    fn scratch_eta(&self, beta: &Tensor3) -> Vec<f64> {
        let d = self.design;
        (0..d.n_cells())
            .map(|k| dot(d.cell_x(k), beta.slice(d.cell_type[k], d.cell_time[k])))
            .collect()
    }

    fn rebuild(&mut self) {
        let beta = self.model.to_dense();
        self.g = self.scratch_g(&beta);
        self.eta = self.scratch_eta(&beta);
        self.eta_beta = beta;
    }

    /// Brings the per-cell predictors up to date with the model by adding
    /// `x' (beta_new - beta_old)`.
    pub fn sync_residuals(&mut self) {
        let d = self.design;
        let beta = self.model.to_dense();
        let delta: Vec<f64> = beta.as_slice().iter().zip(self.eta_beta.as_slice()).map(|(a, b)| a - b).collect();
        if delta.iter().any(|v| *v != 0.0) {
            let p = d.p;
            for k in 0..d.n_cells() {
                let st = d.stratum(k);
                self.eta[k] += dot(d.cell_x(k), &delta[st * p..(st + 1) * p]);
            }
        }
        self.eta_beta = beta;
    }

    /// Maintained residuals, one per design triple.
    pub fn residuals(&mut self) -> Vec<f64> {
        self.sync_residuals();
        self.residuals_from(&self.eta)
    }

    /// Residuals recomputed directly from the current model.
    pub fn residuals_from_scratch(&self) -> Vec<f64> {
        self.residuals_from(&self.scratch_eta(&self.model.to_dense()))
    }

    fn residuals_from(&self, eta: &[f64]) -> Vec<f64> {
        let d = self.design;
        let mut out = vec![0.0; d.n_star()];
        for k in 0..d.n_cells() {
            for i in d.triples(k) {
                out[i] = d.outcome[i] - eta[k];
            }
        }
        out
    }

    /// Relative disagreement between maintained and recomputed residuals,
    /// `max |R_kept - R_fresh| / max |R_fresh|` (absolute when all fresh
    /// residuals vanish). Syncs first so only accumulated rounding shows.
    pub fn residual_drift(&mut self) -> f64 {
        let kept = self.residuals();
        let fresh = self.residuals_from_scratch();
        let scale = sup(&fresh);
        let diff = kept.iter().zip(&fresh).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let g_fresh = self.scratch_g(&self.model.to_dense());
        let g_scale = sup(&g_fresh);
        let g_diff = self.g.iter().zip(&g_fresh).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let rel = |d: f64, s: f64| if s > 0.0 { d / s } else { d };
        rel(diff, scale).max(rel(g_diff, g_scale))
    }

    /// Rebuilds the maintained residuals from scratch and returns the drift
    /// they had accumulated.
    pub fn refresh(&mut self) -> f64 {
        let drift = self.residual_drift();
        self.rebuild();
        drift
    }

    /// `sum K R^2` from the stratum statistics.
    pub fn weighted_sse(&self) -> f64 {
        let d = self.design;
        let p = d.p;
        let beta = self.model.to_dense();
        let mut sse = 0.0;
        for st in 0..d.n_strata() {
            let (c, t) = (st % d.n_types, st / d.n_types);
            let b = beta.slice(c, t);
            sse += d.yy[st] - dot(b, d.xy(st)) - dot(b, &self.g[st * p..(st + 1) * p]);
        }
        sse.max(0.0)
    }

    pub fn penalty(&self) -> f64 {
        self.tau * self.model.components.iter().map(|c| c.genes.iter().map(|q| q.abs()).sum::<f64>()).sum::<f64>()
    }

    pub fn objective(&self) -> f64 {
        0.5 * self.weighted_sse() + self.penalty()
    }

    fn st(&self, c: usize, t: usize) -> usize {
        t * self.design.n_types + c
    }

    /// Applies `beta_{c,t} += scale * v` to the stratum cross-product, where
    /// `gv = G_{c,t} v` is already known.
    fn shift_g(&mut self, st: usize, scale: f64, gv: &[f64]) {
        let p = self.design.p;
        for (x, y) in self.g[st * p..(st + 1) * p].iter_mut().zip(gv) {
            *x -= scale * y;
        }
    }

    /// Gene loading `q1[l, r] <- S_tau(a) / b`, or 0 when `b = 0`.
    pub fn update_gene_loading(&mut self, l: usize, r: usize) -> f64 {
        let d = self.design;
        let p = d.p;
        let comp = &self.model.components[r];
        let mut a = 0.0;
        let mut b = 0.0;
        let mut z = vec![0.0; d.n_strata()];
        for t in 0..d.n_times {
            for c in 0..d.n_types {
                let st = self.st(c, t);
                let zc = comp.weight * comp.cell_types[c] * comp.times[t];
                z[st] = zc;
                if zc == 0.0 {
                    continue;
                }
                a += zc * self.g[st * p + l];
                b += zc * zc * d.gram(st)[l * p + l];
            }
        }
        let old = comp.genes[l];
        let new = if b > 0.0 { soft_threshold(a + old * b, self.tau) / b } else { 0.0 };
        let delta = new - old;
        if delta != 0.0 {
            self.model.components[r].genes[l] = new;
            for (st, &zc) in z.iter().enumerate() {
                if zc == 0.0 {
                    continue;
                }
                let col = &d.gram(st)[l * p..(l + 1) * p];
                for (x, y) in self.g[st * p..(st + 1) * p].iter_mut().zip(col) {
                    *x -= zc * delta * y;
                }
            }
        }
        new
    }

    /// `G_{c,t} q1_r` for every stratum.
    fn gene_products(&self, r: usize) -> Vec<Vec<f64>> {
        let d = self.design;
        let q1 = &self.model.components[r].genes;
        (0..d.n_strata())
            .map(|st| {
                let mut v = vec![0.0; d.p];
                matvec(d.gram(st), q1, &mut v);
                v
            })
            .collect()
    }

    /// Shared form of the three unpenalized ratio updates. Each listed
    /// stratum contributes with multiplier `m` so that the coordinate's
    /// working variable there is `m * s`.
    fn ratio_stats(&self, r: usize, strata: &[(usize, f64)], gv: &[Vec<f64>], current: f64) -> (f64, f64) {
        let p = self.design.p;
        let q1 = &self.model.components[r].genes;
        let mut num = 0.0;
        let mut den = 0.0;
        for &(st, m) in strata {
            if m == 0.0 {
                continue;
            }
            let sgs = dot(q1, &gv[st]);
            num += m * dot(q1, &self.g[st * p..(st + 1) * p]) + current * m * m * sgs;
            den += m * m * sgs;
        }
        (num, den)
    }

    fn celltype_with(&mut self, c: usize, r: usize, gv: &[Vec<f64>]) -> f64 {
        let d = self.design;
        let comp = &self.model.components[r];
        let strata: Vec<(usize, f64)> =
            (0..d.n_times).map(|t| (self.st(c, t), comp.weight * comp.times[t])).collect();
        let old = comp.cell_types[c];
        let (num, den) = self.ratio_stats(r, &strata, gv, old);
        if !(den > 0.0) {
            return old;
        }
        let new = num / den;
        let delta = new - old;
        if delta != 0.0 {
            self.model.components[r].cell_types[c] = new;
            for &(st, m) in &strata {
                if m != 0.0 {
                    self.shift_g(st, delta * m, &gv[st]);
                }
            }
        }
        new
    }

    fn time_with(&mut self, t: usize, r: usize, gv: &[Vec<f64>]) -> f64 {
        let d = self.design;
        let comp = &self.model.components[r];
        let strata: Vec<(usize, f64)> =
            (0..d.n_types).map(|c| (self.st(c, t), comp.weight * comp.cell_types[c])).collect();
        let old = comp.times[t];
        let (num, den) = self.ratio_stats(r, &strata, gv, old);
        if !(den > 0.0) {
            return old;
        }
        let new = num / den;
        let delta = new - old;
        if delta != 0.0 {
            self.model.components[r].times[t] = new;
            for &(st, m) in &strata {
                if m != 0.0 {
                    self.shift_g(st, delta * m, &gv[st]);
                }
            }
        }
        new
    }

    fn weight_with(&mut self, r: usize, gv: &[Vec<f64>]) -> f64 {
        let d = self.design;
        let comp = &self.model.components[r];
        let mut strata = Vec::with_capacity(d.n_strata());
        for t in 0..d.n_times {
            for c in 0..d.n_types {
                strata.push((self.st(c, t), comp.cell_types[c] * comp.times[t]));
            }
        }
        let old = comp.weight;
        let (num, den) = self.ratio_stats(r, &strata, gv, old);
        let new = if den > 0.0 { (num / den).max(0.0) } else { 0.0 };
        let delta = new - old;
        if delta != 0.0 {
            self.model.components[r].weight = new;
            for &(st, m) in &strata {
                if m != 0.0 {
                    self.shift_g(st, delta * m, &gv[st]);
                }
            }
        }
        new
    }

    /// Unpenalized weighted least squares for `q2[c, r]`; left unchanged when
    /// its denominator vanishes.
    pub fn update_celltype_loading(&mut self, c: usize, r: usize) -> f64 {
        let gv = self.gene_products(r);
        self.celltype_with(c, r, &gv)
    }

    /// Unpenalized weighted least squares for `q3[t, r]`; left unchanged when
    /// its denominator vanishes.
    pub fn update_time_loading(&mut self, t: usize, r: usize) -> f64 {
        let gv = self.gene_products(r);
        self.time_with(t, r, &gv)
    }

    /// Non-negative least squares for `w_r`; zero when the denominator
    /// vanishes.
    pub fn update_weight(&mut self, r: usize) -> f64 {
        let gv = self.gene_products(r);
        self.weight_with(r, &gv)
    }

    /// Rescales component `r` to unit-norm factors.
    pub fn renormalize(&mut self, r: usize) {
        renormalize_component(&mut self.model.components[r]);
    }

    /// One full block: genes, cell types, times, weight, then renormalize.
    pub fn update_block(&mut self, r: usize) {
        let d = self.design;
        for l in 0..d.p {
            self.update_gene_loading(l, r);
        }
        let gv = self.gene_products(r);
        for c in 0..d.n_types {
            self.celltype_with(c, r, &gv);
        }
        for t in 0..d.n_times {
            self.time_with(t, r, &gv);
        }
        self.weight_with(r, &gv);
        self.renormalize(r);
    }

    /// Removes every component with negligible relative weight, zero weight
    /// or a near one-hot gene factor. Returns the removed indices.
    pub fn prune_ranks(&mut self, rel_weight: f64, q1_inf: f64) -> Vec<usize> {
        let total: f64 = self.model.components.iter().map(|c| c.weight).sum();
        let drop: Vec<usize> = self
            .model
            .components
            .iter()
            .enumerate()
            .filter(|(_, c)| c.weight == 0.0 || c.weight / total < rel_weight || sup(&c.genes) > q1_inf)
            .map(|(r, _)| r)
            .collect();
        if !drop.is_empty() {
            let mut r = 0;
            self.model.components.retain(|_| {
                r += 1;
                !drop.contains(&(r - 1))
            });
            self.update_tau();
            self.rebuild();
        }
        drop
    }
}

/// One row of the objective trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub outer_iter: usize,
    pub rank: usize,
    pub objective: f64,
    pub max_beta_change: f64,
    pub max_factor_change: f64,
}

pub fn write_trace_csv(trace: &[TraceRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["outer_iter", "rank", "objective", "max_beta_change", "max_factor_change"])?;
    for row in trace {
        w.write_record([
            row.outer_iter.to_string(),
            row.rank.to_string(),
            row.objective.to_string(),
            row.max_beta_change.to_string(),
            row.max_factor_change.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub lambda: f64,
    /// Final model: dead components removed, normalized and sign-oriented.
    pub model: CpModel,
    /// Rank the last attempt started from.
    pub r_start: usize,
    /// Outer iterations of the last attempt.
    pub iterations: usize,
    pub converged: bool,
    /// Number of restarts at a lower starting rank.
    pub restarts: usize,
    pub trace: Vec<TraceRow>,
    pub objective: f64,
    /// `sum K (y - x'beta)^2` recomputed from the final model.
    pub weighted_sse: f64,
    pub n_star: usize,
    /// Largest relative residual drift seen at any refresh or at the end.
    pub residual_drift: f64,
}

impl FitResult {
    pub fn rank(&self) -> usize {
        self.model.rank()
    }
}

/// Ridge coefficients plus lazily computed CP-ALS starts for each rank.
#[derive(Debug)]
pub struct Initializer {
    ridge: Tensor3,
    als: AlsConfig,
    cache: Mutex<Vec<Option<CpModel>>>,
}

impl Initializer {
    pub fn new(ridge: Tensor3, als: AlsConfig) -> Self {
        Initializer { ridge, als, cache: Mutex::new(Vec::new()) }
    }

    pub fn from_design(design: &Design, ridge: &RidgeConfig, als: AlsConfig) -> Result<Self> {
        Ok(Self::new(ridge_init(design, ridge)?.0, als))
    }

    pub fn ridge(&self) -> &Tensor3 {
        &self.ridge
    }

    /// The rank-`rank` CP decomposition of the ridge tensor.
    pub fn model(&self, rank: usize) -> Result<CpModel> {
        let mut cache = self.cache.lock().expect("initializer cache poisoned");
        if cache.len() <= rank {
            cache.resize(rank + 1, None);
        }
        if cache[rank].is_none() {
            cache[rank] = Some(cp_als_fit(&self.ridge, rank, &self.als)?);
        }
        Ok(cache[rank].clone().expect("just filled"))
    }
}

struct Attempt {
    model: CpModel,
    iterations: usize,
    converged: bool,
    trace: Vec<TraceRow>,
    objective: f64,
    drift: f64,
}

fn run_attempt(design: &Design, start: CpModel, lambda: f64, cfg: &SolverConfig) -> Result<Attempt> {
    let mut state = SolverState::new(design, start, lambda)?;
    let mut prev = state.model().clone();
    let mut trace = Vec::new();
    let mut drift = 0.0f64;
    let mut converged = false;
    let mut skip_check_until = 0;
    let mut iterations = 0;
    for iter in 1..=cfg.max_outer_iters {
        iterations = iter;
        for r in 0..state.rank() {
            state.update_block(r);
        }
        if iter <= cfg.rank_drop_window {
            let dropped = state.prune_ranks(cfg.rel_weight, cfg.q1_inf);
            if !dropped.is_empty() {
                debug!("iteration {iter}: dropped components {dropped:?}, rank now {}", state.rank());
                skip_check_until = iter + 1;
            }
        }
        if state.rank() == 0 {
            trace.push(TraceRow {
                outer_iter: iter,
                rank: 0,
                objective: state.objective(),
                max_beta_change: f64::INFINITY,
                max_factor_change: f64::INFINITY,
            });
            break;
        }
        if iter % cfg.refresh_period == 0 {
            drift = drift.max(state.refresh());
        }
        let objective = state.objective();
        if !objective.is_finite() {
            return Err(Error::Divergence(iter));
        }
        let check = check_convergence(&prev, state.model(), cfg.tol_beta, cfg.tol_factor);
        trace.push(TraceRow {
            outer_iter: iter,
            rank: state.rank(),
            objective,
            max_beta_change: check.beta_change,
            max_factor_change: check.factor_change,
        });
        if iter > skip_check_until && check.converged {
            converged = true;
            break;
        }
        prev.clone_from(state.model());
    }
    drift = drift.max(state.residual_drift());
    let objective = state.objective();
    Ok(Attempt { model: state.into_model(), iterations, converged, trace, objective, drift })
}

/// Weighted squared error of `model` over all design triples, computed
/// directly from the expression values.
pub fn weighted_sse(design: &Design, model: &CpModel) -> f64 {
    let beta = model.to_dense();
    let mut sse = 0.0;
    for k in 0..design.n_cells() {
        let eta = dot(design.cell_x(k), beta.slice(design.cell_type[k], design.cell_time[k]));
        for i in design.triples(k) {
            let r = design.outcome[i] - eta;
            sse += design.weight[i] * r * r;
        }
    }
    sse
}

/// Runs the coordinate descent from the rank-`r_max` start, restarting one
/// rank lower whenever every component is dropped. Gives the zero model
/// when even rank 1 collapses.
pub fn fit_design(design: &Design, init: &Initializer, lambda: f64, cfg: &SolverConfig) -> Result<FitResult> {
    cfg.validate()?;
    let dims = [design.p, design.n_types, design.n_times];
    let mut restarts = 0;
    let mut r_start = cfg.r_max;
    let mut last = None;
    while r_start >= 1 {
        let start = init.model(r_start)?;
        let attempt = run_attempt(design, start, lambda, cfg)?;
        if attempt.model.rank() > 0 {
            last = Some(attempt);
            break;
        }
        last = Some(attempt);
        if r_start == 1 {
            break;
        }
        restarts += 1;
        r_start -= 1;
    }
    let attempt = last.expect("at least one attempt");
    let mut model = attempt.model.without_dead_components();
    model.renormalize();
    let mut model = model.without_dead_components();
    model.orient_signs();
    if model.rank() == 0 {
        model = CpModel::zero(dims[0], dims[1], dims[2]);
    }
    if !attempt.converged && model.rank() > 0 {
        warn!("lambda {lambda}: no convergence within {} outer iterations", cfg.max_outer_iters);
    }
    Ok(FitResult {
        lambda,
        weighted_sse: weighted_sse(design, &model),
        model,
        r_start,
        iterations: attempt.iterations,
        converged: attempt.converged,
        restarts,
        trace: attempt.trace,
        objective: attempt.objective,
        n_star: design.n_star(),
        residual_drift: attempt.drift,
    })
}

/// Convenience wrapper: builds the design and ridge start, then fits.
pub fn fit(dataset: &Dataset, weights: &KernelWeightSet, lambda: f64, cfg: &SolverConfig) -> Result<FitResult> {
    let design = Design::new(dataset, weights)?;
    let init = Initializer::from_design(&design, &RidgeConfig::default(), cfg.als)?;
    fit_design(&design, &init, lambda, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cp::Component;
    use crate::data::{Cell, Plaque, Point, Sample};
    use crate::kernel::{compute_weights, WeightTriple};
    use crate::testutil::{brute_objective, golden_min, plant_outcomes, random_dataset, random_model};

    /// One plaque and one cell of type 0, joined by a unit weight.
    fn single(x: Vec<f64>, y: f64, n_types: usize) -> (Dataset, KernelWeightSet) {
        let p = x.len();
        let s = Sample::new(
            "s",
            0,
            vec![Plaque { id: "p".into(), location: Point::new(0.0, 0.0), outcome: y }],
            vec![Cell { id: "c".into(), location: Point::new(0.0, 0.0), cell_type: 0 }],
            x,
            p,
        )
        .unwrap();
        let types = (0..n_types).map(|c| format!("T{c}")).collect();
        let ds = Dataset::new(vec![s], (0..p).map(|l| format!("g{l}")).collect(), types, vec![0.0]).unwrap();
        let w = KernelWeightSet {
            triples: vec![WeightTriple { sample: 0, plaque: 0, cell: 0, distance: 0.0, weight: 1.0 }],
            bandwidths: vec![1.0],
        };
        (ds, w)
    }

    fn rank_one(w: f64, q1: Vec<f64>, q2: Vec<f64>, q3: Vec<f64>) -> CpModel {
        let mut m = CpModel::zero(q1.len(), q2.len(), q3.len());
        m.push(Component { weight: w, genes: q1, cell_types: q2, times: q3 }).unwrap();
        m
    }

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(-5.0, 2.0), -3.0);
    }

    #[test]
    fn gene_update_single_triple() {
        let (ds, w) = single(vec![1.0], 2.0, 1);
        let d = Design::new(&ds, &w).unwrap();
        let mut s = SolverState::new(&d, rank_one(1.0, vec![0.0], vec![1.0], vec![1.0]), 0.5).unwrap();
        assert_eq!(s.tau(), 0.5);
        assert!((s.update_gene_loading(0, 0) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn gene_update_zero_curvature() {
        let (ds, w) = single(vec![0.0, 1.0], 2.0, 1);
        let d = Design::new(&ds, &w).unwrap();
        let mut s = SolverState::new(&d, rank_one(1.0, vec![0.7, 0.1], vec![1.0], vec![1.0]), 0.0).unwrap();
        assert_eq!(s.update_gene_loading(0, 0), 0.0);
    }

    #[test]
    fn celltype_update_single_triple() {
        let (ds, w) = single(vec![1.0], 4.0, 2);
        let d = Design::new(&ds, &w).unwrap();
        let mut s = SolverState::new(&d, rank_one(2.0, vec![1.0], vec![0.0, 0.3], vec![1.0]), 0.0).unwrap();
        assert!((s.update_celltype_loading(0, 0) - 2.0).abs() < 1e-15);
        // no cells of type 1
        assert_eq!(s.update_celltype_loading(1, 0), 0.3);
    }

    #[test]
    fn time_update_single_triple() {
        let (ds, w) = single(vec![1.0], 4.0, 1);
        let d = Design::new(&ds, &w).unwrap();
        let mut s = SolverState::new(&d, rank_one(2.0, vec![1.0], vec![1.0], vec![0.0]), 0.0).unwrap();
        assert!((s.update_time_loading(0, 0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn weight_update_examples() {
        let (ds, w) = single(vec![1.0], 3.0, 1);
        let d = Design::new(&ds, &w).unwrap();
        let mut s = SolverState::new(&d, rank_one(0.0, vec![1.0], vec![1.0], vec![1.0]), 0.0).unwrap();
        assert!((s.update_weight(0) - 3.0).abs() < 1e-15);

        let (ds, w) = single(vec![1.0], -0.3, 1);
        let d = Design::new(&ds, &w).unwrap();
        let mut s = SolverState::new(&d, rank_one(1.0, vec![1.0], vec![1.0], vec![1.0]), 0.0).unwrap();
        assert_eq!(s.update_weight(0), 0.0);
    }

    fn fixture(seed: u64) -> (Dataset, KernelWeightSet) {
        let ds = random_dataset(seed, 6, 2, 2, 2, 5, 40);
        let w = compute_weights(&ds, &[25.0, 25.0]).unwrap();
        (ds, w)
    }

    #[test]
    fn updates_match_scalar_oracle() {
        for seed in 0..5 {
            let (ds, w) = fixture(seed);
            let d = Design::new(&ds, &w).unwrap();
            let lambda = 3.0;
            let m = random_model(seed + 100, 6, 2, 2, 2);
            let mut s = SolverState::new(&d, m.clone(), lambda).unwrap();
            let f = |v: f64, set: &dyn Fn(&mut CpModel, f64)| {
                let mut mm = m.clone();
                set(&mut mm, v);
                brute_objective(&ds, &w, &mm, lambda)
            };
            let got = s.update_gene_loading(2, 1);
            let want = golden_min(|v| f(v, &|mm, v| mm.components[1].genes[2] = v), -50.0, 50.0);
            assert!((got - want).abs() < 1e-6, "gene {got} vs {want}");

            let mut s = SolverState::new(&d, m.clone(), lambda).unwrap();
            let got = s.update_celltype_loading(1, 0);
            let want = golden_min(|v| f(v, &|mm, v| mm.components[0].cell_types[1] = v), -50.0, 50.0);
            assert!((got - want).abs() < 1e-6, "cell type {got} vs {want}");

            let mut s = SolverState::new(&d, m.clone(), lambda).unwrap();
            let got = s.update_time_loading(0, 1);
            let want = golden_min(|v| f(v, &|mm, v| mm.components[1].times[0] = v), -50.0, 50.0);
            assert!((got - want).abs() < 1e-6, "time {got} vs {want}");

            let mut s = SolverState::new(&d, m.clone(), lambda).unwrap();
            let got = s.update_weight(0);
            let want = golden_min(|v| f(v, &|mm, v| mm.components[0].weight = v), 0.0, 50.0);
            assert!((got - want).abs() < 1e-6, "weight {got} vs {want}");
        }
    }

    #[test]
    fn objective_matches_brute_force_and_descends() {
        let (ds, w) = fixture(11);
        let d = Design::new(&ds, &w).unwrap();
        let lambda = 2.0;
        let mut s = SolverState::new(&d, random_model(5, 6, 2, 2, 3), lambda).unwrap();
        let mut f = s.objective();
        assert!((f - brute_objective(&ds, &w, s.model(), lambda)).abs() < 1e-9 * (1.0 + f));
        for _ in 0..5 {
            for r in 0..3 {
                for l in 0..6 {
                    s.update_gene_loading(l, r);
                    let g = s.objective();
                    assert!(g <= f + 1e-10 * (1.0 + f.abs()));
                    f = g;
                }
                for c in 0..2 {
                    s.update_celltype_loading(c, r);
                    let g = s.objective();
                    assert!(g <= f + 1e-10 * (1.0 + f.abs()));
                    f = g;
                }
                for t in 0..2 {
                    s.update_time_loading(t, r);
                    let g = s.objective();
                    assert!(g <= f + 1e-10 * (1.0 + f.abs()));
                    f = g;
                }
                s.update_weight(r);
                let g = s.objective();
                assert!(g <= f + 1e-10 * (1.0 + f.abs()));
                s.renormalize(r);
                f = s.objective();
            }
        }
        assert!((f - brute_objective(&ds, &w, s.model(), lambda)).abs() < 1e-9 * (1.0 + f));
        assert!(s.residual_drift() < 1e-10);
    }

    #[test]
    fn prune_examples() {
        let (ds, w) = fixture(2);
        let d = Design::new(&ds, &w).unwrap();
        let mut m = random_model(1, 6, 2, 2, 2);
        m.components[0].weight = 1.0;
        m.components[1].weight = 1e-9;
        let mut s = SolverState::new(&d, m.clone(), 1.0).unwrap();
        assert_eq!(s.tau(), 1.0 / 12.0);
        assert_eq!(s.prune_ranks(1e-5, 0.99), vec![1]);
        assert_eq!(s.rank(), 1);
        assert_eq!(s.tau(), 1.0 / 6.0);

        let mut one_hot = m.clone();
        one_hot.components[1].weight = 1.0;
        one_hot.components[1].genes = vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let mut s = SolverState::new(&d, one_hot, 1.0).unwrap();
        assert_eq!(s.prune_ranks(1e-5, 0.99), vec![1]);

        let mut healthy = m;
        healthy.components[1].weight = 0.5;
        let mut s = SolverState::new(&d, healthy.clone(), 1.0).unwrap();
        assert!(s.prune_ranks(1e-5, 0.99).is_empty());
        assert_eq!(s.model(), &healthy);
    }

    #[test]
    fn convergence_examples() {
        let m = rank_one(1.0, vec![1.0, 0.0], vec![1.0], vec![1.0]);
        assert!(check_convergence(&m, &m, 1e-6, 1e-4).converged);

        let mut moved = m.clone();
        moved.components[0].cell_types[0] += 1e-2;
        let c = check_convergence(&m, &moved, 1e-6, 1e-4);
        assert!(!c.converged && c.factor_change > 1e-4);

        // slice (1, 0) -> (1 + 1e-2, 0): squared ratio 1e-4 fails, factors fixed
        let mut wider = m.clone();
        wider.components[0].weight = 1.0 + 1e-2;
        let c = check_convergence(&m, &wider, 1e-6, 1e-4);
        assert!((c.beta_change - 1e-4).abs() < 1e-12);
        assert!(!c.converged);

        // a relative change of 1e-4 squares to 1e-8, which passes
        let mut tiny = m.clone();
        tiny.components[0].weight = 1.0 + 1e-4;
        assert!(check_convergence(&m, &tiny, 1e-6, 1e-4).converged);

        let zero = rank_one(0.0, vec![1.0, 0.0], vec![1.0], vec![1.0]);
        assert!(!check_convergence(&zero, &m, 1e-6, 1.0).converged);
        assert!(check_convergence(&zero, &zero, 1e-6, 1e-4).converged);
    }

    #[test]
    fn huge_penalty_gives_zero_model() {
        let (ds, w) = fixture(4);
        let cfg = SolverConfig { r_max: 3, ..SolverConfig::default() };
        let fit = fit(&ds, &w, 1e12, &cfg).unwrap();
        assert_eq!(fit.rank(), 0);
        assert_eq!(fit.restarts, 2);
        let wy: f64 = w
            .triples
            .iter()
            .map(|t| t.weight * ds.samples[t.sample].plaques[t.plaque].outcome.powi(2))
            .sum();
        assert!((fit.weighted_sse - wy).abs() < 1e-9 * wy);
    }

    #[test]
    fn fit_is_deterministic_and_consistent() {
        let (mut ds, w) = fixture(9);
        plant_outcomes(&mut ds, &w, &random_model(3, 6, 2, 2, 2), 0.1, 9);
        let cfg = SolverConfig { r_max: 4, ..SolverConfig::default() };
        let a = fit(&ds, &w, 0.01, &cfg).unwrap();
        let b = fit(&ds, &w, 0.01, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.trace, b.trace);
        assert!(a.rank() >= 1 && a.rank() <= 4);
        assert!(a.residual_drift < 1e-8);
        for comp in &a.model.components {
            assert!(comp.weight > 0.0);
            for v in [&comp.genes, &comp.cell_types, &comp.times] {
                assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
            }
        }
        let f = brute_objective(&ds, &w, &a.model, 0.01);
        assert!(f.is_finite());
    }
}
