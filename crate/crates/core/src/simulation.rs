//! Synthetic replicates with a known CP-structured coefficient tensor.
//!
//! Each replicate has one square section per time point. Spots sit on a
//! jittered grid, are split into `C` spatially contiguous groups by k-means,
//! and carry log-normal expression. A balanced, well separated subset of
//! spots becomes the plaques; their outcomes follow the linear model with
//! the plaque's own group and time, plus exponentially correlated noise.
//! The plaque spots are then removed from the predictor cells.
//!
//! By default the log-expression of each gene has a spatially smooth
//! component (a random Fourier feature approximation of a Gaussian-kernel
//! field), so neighbouring cells carry information about the unobserved
//! plaque-site expression. `spatial_share = 0` gives expression that is
//! independent across spots given the group.

use std::f64::consts::PI;

use log::warn;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cp::{Component, CpModel, Tensor3};
use crate::data::{Cell, Dataset, Plaque, Point, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    /// Expected spots per section.
    pub spots_mean: f64,
    pub side_um: f64,
    pub n_groups: usize,
    /// Number of sections, one per time point.
    pub n_times: usize,
    pub p: usize,
    pub active: usize,
    pub true_rank: usize,
    /// Plaques per section.
    pub plaques: usize,
    pub sigma2: f64,
    /// Range of the exponential noise covariance.
    pub phi: f64,
    pub log_mean_sd: f64,
    pub log_sd: f64,
    pub shift_frac: f64,
    pub shift_sd: f64,
    /// Share of log-expression variance that is spatially smooth.
    pub spatial_share: f64,
    pub length_scale_um: f64,
    pub fourier_features: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 1,
            spots_mean: 5000.0,
            side_um: 2000.0,
            n_groups: 3,
            n_times: 2,
            p: 50,
            active: 5,
            true_rank: 4,
            plaques: 100,
            sigma2: 1.0,
            phi: 100.0,
            log_mean_sd: 0.5,
            log_sd: 0.5,
            shift_frac: 0.2,
            shift_sd: 1.0,
            spatial_share: 0.8,
            length_scale_um: 150.0,
            fourier_features: 64,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if self.p == 0 || self.active > self.p {
            return bad("need 0 < p and active <= p");
        }
        if self.n_groups == 0 || self.n_times == 0 || self.true_rank == 0 {
            return bad("n_groups, n_times and true_rank must be positive");
        }
        if self.plaques < self.n_groups {
            return bad("need at least one plaque per group");
        }
        if !(self.phi > 0.0) || !(self.sigma2 >= 0.0) {
            return bad("need phi > 0 and sigma2 >= 0");
        }
        if !(self.spots_mean > 0.0) || !(self.side_um > 0.0) || !(self.length_scale_um > 0.0) {
            return bad("spots_mean, side_um and length_scale_um must be positive");
        }
        if !(0.0..=1.0).contains(&self.spatial_share) || !(0.0..=1.0).contains(&self.shift_frac) {
            return bad("spatial_share and shift_frac must lie in [0, 1]");
        }
        if self.log_sd < 0.0 || self.log_mean_sd < 0.0 || self.shift_sd < 0.0 {
            return bad("standard deviations must be non-negative");
        }
        if self.spatial_share > 0.0 && self.fourier_features == 0 {
            return bad("a spatial component needs fourier_features > 0");
        }
        Ok(())
    }
}

/// Spots of one simulated section before plaques are chosen.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub locations: Vec<Point>,
    pub groups: Vec<usize>,
    /// Row-major `spots × p`.
    pub expression: Vec<f64>,
    pub p: usize,
}

impl Section {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn expression(&self, j: usize) -> &[f64] {
        &self.expression[j * self.p..(j + 1) * self.p]
    }
}

/// Gene-level parameters shared by all sections of a replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneParams {
    pub log_mean: Vec<f64>,
    /// `shift[g * p + l]`, zero for genes without a group effect.
    pub shift: Vec<f64>,
}

pub fn draw_gene_params(cfg: &SimConfig, rng: &mut impl Rng) -> GeneParams {
    let p = cfg.p;
    let log_mean = (0..p).map(|_| cfg.log_mean_sd * rng.sample::<f64, _>(StandardNormal)).collect();
    let n_shift = (cfg.shift_frac * p as f64).round() as usize;
    let mut genes: Vec<usize> = (0..p).collect();
    genes.shuffle(rng);
    let mut shift = vec![0.0; cfg.n_groups * p];
    for &l in &genes[..n_shift] {
        for g in 0..cfg.n_groups {
            shift[g * p + l] = cfg.shift_sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    GeneParams { log_mean, shift }
}

fn jittered_grid(n: usize, side: f64, rng: &mut impl Rng) -> Vec<Point> {
    let g = (n as f64).sqrt().ceil().max(1.0) as usize;
    let step = side / g as f64;
    let mut slots: Vec<usize> = (0..g * g).collect();
    slots.shuffle(rng);
    let mut chosen = slots[..n].to_vec();
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|s| {
            let (i, j) = (s % g, s / g);
            Point::new(
                (i as f64 + 0.5 + rng.random_range(-0.4..0.4)) * step,
                (j as f64 + 0.5 + rng.random_range(-0.4..0.4)) * step,
            )
        })
        .collect()
}

/// k-means++ seeding followed by Lloyd iterations. Returns labels in `0..k`.
pub fn kmeans_groups(points: &[Point], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let mut centers = vec![points[rng.random_range(0..n)]];
    let d2 = |a: &Point, b: &Point| (a.x - b.x).powi(2) + (a.y - b.y).powi(2);
    while centers.len() < k.min(n) {
        let w: Vec<f64> = points
            .iter()
            .map(|pt| centers.iter().map(|c| d2(pt, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = w.iter().sum();
        let mut u = rng.random_range(0.0..1.0) * total;
        let mut pick = n - 1;
        for (i, wi) in w.iter().enumerate() {
            if u < *wi {
                pick = i;
                break;
            }
            u -= wi;
        }
        centers.push(points[pick]);
    }
    let mut labels = vec![usize::MAX; n];
    for _ in 0..200 {
        let mut changed = false;
        for (i, pt) in points.iter().enumerate() {
            let mut best = 0;
            for (c, center) in centers.iter().enumerate() {
                if d2(pt, center) < d2(pt, &centers[best]) {
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![(0.0, 0.0, 0usize); centers.len()];
        for (pt, &l) in points.iter().zip(&labels) {
            sums[l].0 += pt.x;
            sums[l].1 += pt.y;
            sums[l].2 += 1;
        }
        for (c, (sx, sy, m)) in centers.iter_mut().zip(sums) {
            if m > 0 {
                *c = Point::new(sx / m as f64, sy / m as f64);
            }
        }
    }
    labels
}

/// Draws the spots, groups and expression of one section.
pub fn generate_sample(cfg: &SimConfig, genes: &GeneParams, rng: &mut impl Rng) -> Result<Section> {
    let n = Poisson::new(cfg.spots_mean)
        .map_err(|e| Error::Invalid(format!("spot count: {e}")))?
        .sample(rng) as usize;
    let locations = jittered_grid(n, cfg.side_um, rng);
    let groups = kmeans_groups(&locations, cfg.n_groups, rng);
    let p = cfg.p;
    let smooth = cfg.spatial_share.sqrt() * cfg.log_sd;
    let rough = (1.0 - cfg.spatial_share).sqrt() * cfg.log_sd;
    let mut expression = vec![0.0; n * p];
    let m = cfg.fourier_features;
    let omega = Normal::new(0.0, 1.0 / cfg.length_scale_um).expect("positive scale");
    for l in 0..p {
        let mut field = vec![0.0; n];
        if smooth > 0.0 {
            let amp = (2.0 / m as f64).sqrt();
            for _ in 0..m {
                let (wx, wy): (f64, f64) = (omega.sample(rng), omega.sample(rng));
                let phase = rng.random_range(0.0..2.0 * PI);
                let a: f64 = rng.sample(StandardNormal);
                for (f, pt) in field.iter_mut().zip(&locations) {
                    *f += amp * a * (wx * pt.x + wy * pt.y + phase).cos();
                }
            }
        }
        for j in 0..n {
            let e: f64 = rng.sample(StandardNormal);
            let log = genes.log_mean[l] + genes.shift[groups[j] * p + l] + smooth * field[j] + rough * e;
            expression[j * p + l] = log.exp();
        }
    }
    Ok(Section { locations, groups, expression, p })
}

/// Balanced, well separated plaque spots.
///
/// Groups take turns; on its turn a group adds the spot of its own that is
/// farthest from every plaque chosen so far, in any group. Group `g` gets
/// `ceil(M / C)` plaques if `g < M mod C`, else `floor(M / C)`. The first
/// pick of the first group is random.
pub fn select_plaques(section: &Section, n_groups: usize, m: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if m < n_groups {
        return Err(Error::Invalid(format!("{m} plaques cannot cover {n_groups} groups")));
    }
    let quota: Vec<usize> = (0..n_groups).map(|g| m / n_groups + usize::from(g < m % n_groups)).collect();
    let members: Vec<Vec<usize>> =
        (0..n_groups).map(|g| (0..section.len()).filter(|&j| section.groups[j] == g).collect()).collect();
    for g in 0..n_groups {
        if members[g].len() < quota[g] {
            return Err(Error::InfeasibleBalance { group: g, available: members[g].len(), needed: quota[g] });
        }
    }
    let mut nearest = vec![f64::INFINITY; section.len()];
    let mut taken = vec![false; section.len()];
    let mut chosen = Vec::with_capacity(m);
    let mut count = vec![0usize; n_groups];
    'outer: loop {
        let mut progressed = false;
        for g in 0..n_groups {
            if count[g] == quota[g] {
                continue;
            }
            let pick = if chosen.is_empty() {
                members[g][rng.random_range(0..members[g].len())]
            } else {
                let mut best = None::<usize>;
                for &j in &members[g] {
                    if !taken[j] && best.is_none_or(|b| nearest[j] > nearest[b]) {
                        best = Some(j);
                    }
                }
                best.expect("quota checked against group size")
            };
            taken[pick] = true;
            chosen.push(pick);
            let loc = section.locations[pick];
            for (d, pt) in nearest.iter_mut().zip(&section.locations) {
                *d = d.min(loc.distance(pt));
            }
            count[g] += 1;
            progressed = true;
            if chosen.len() == m {
                break 'outer;
            }
        }
        if !progressed {
            break;
        }
    }
    Ok(chosen)
}

/// The true coefficient model: `active` shared nonzero gene rows drawn
/// `N(0, 2^2)`, cell-type loadings `N(5, 2^2)`, time loadings `N(0, 0.5^2)`,
/// unit weights, factors not normalized.
pub fn generate_true_beta(cfg: &SimConfig, rng: &mut impl Rng) -> (CpModel, Tensor3) {
    let (p, c, t) = (cfg.p, cfg.n_groups, cfg.n_times);
    let mut rows: Vec<usize> = (0..p).collect();
    rows.shuffle(rng);
    let mut active = rows[..cfg.active].to_vec();
    active.sort_unstable();
    let q1d = Normal::new(0.0, 2.0).expect("valid");
    let q2d = Normal::new(5.0, 2.0).expect("valid");
    let q3d = Normal::new(0.0, 0.5).expect("valid");
    let mut model = CpModel::zero(p, c, t);
    for _ in 0..cfg.true_rank {
        let mut genes = vec![0.0; p];
        for &l in &active {
            genes[l] = q1d.sample(rng);
        }
        let cell_types = (0..c).map(|_| q2d.sample(rng)).collect();
        let times = (0..t).map(|_| q3d.sample(rng)).collect();
        model.push(Component { weight: 1.0, genes, cell_types, times }).expect("dims match");
    }
    let dense = model.to_dense();
    (model, dense)
}

/// Lower Cholesky factor of `sigma2 * exp(-d / phi)` over `points`, adding
/// diagonal jitter `1e-10, 1e-9, ..., 1e-6` as needed.
pub fn noise_factor(points: &[Point], sigma2: f64, phi: f64) -> Result<DMatrix<f64>> {
    let n = points.len();
    let k = DMatrix::from_fn(n, n, |a, b| sigma2 * (-points[a].distance(&points[b]) / phi).exp());
    let mut jitter = 0.0;
    loop {
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = m.cholesky() {
            if jitter > 0.0 {
                warn!("noise covariance needed diagonal jitter {jitter:e}");
            }
            return Ok(ch.l());
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
        if jitter > 1e-6 * (1.0 + 1e-9) {
            return Err(Error::Numerical("noise covariance is not positive definite".into()));
        }
    }
}

/// Correlated noise `e ~ N(0, sigma2 K)` at `points`.
pub fn draw_noise(points: &[Point], sigma2: f64, phi: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if sigma2 == 0.0 {
        return Ok(vec![0.0; points.len()]);
    }
    let l = noise_factor(points, sigma2, phi)?;
    let z: nalgebra::DVector<f64> = nalgebra::DVector::from_fn(points.len(), |_, _| rng.sample(StandardNormal));
    Ok((l * z).iter().copied().collect())
}

/// Outcomes at the chosen plaque spots: plaque-site expression times the
/// coefficients of the spot's group at time `t`, plus noise. Returns
/// `(outcomes, noise)`.
pub fn generate_outcomes(
    section: &Section,
    plaques: &[usize],
    beta: &Tensor3,
    t: usize,
    sigma2: f64,
    phi: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let points: Vec<Point> = plaques.iter().map(|&j| section.locations[j]).collect();
    let noise = draw_noise(&points, sigma2, phi, rng)?;
    let y = plaques
        .iter()
        .zip(&noise)
        .map(|(&j, e)| {
            let b = beta.slice(section.groups[j], t);
            section.expression(j).iter().zip(b).map(|(x, q)| x * q).sum::<f64>() + e
        })
        .collect();
    Ok((y, noise))
}

/// A replicate and everything needed to score estimates against it.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub dataset: Dataset,
    pub model: CpModel,
    pub beta: Tensor3,
    /// Noise draws per section, in plaque order.
    pub noise: Vec<Vec<f64>>,
    pub config: SimConfig,
}

fn padded(prefix: &str, i: usize, n: usize) -> String {
    let width = n.to_string().len();
    format!("{prefix}{:0width$}", i + 1)
}

/// Generates the `n_times` sections of one replicate from `cfg.seed`.
pub fn generate_replicate(cfg: &SimConfig) -> Result<SimTruth> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (model, beta) = generate_true_beta(cfg, &mut rng);
    let genes = draw_gene_params(cfg, &mut rng);
    let mut samples = Vec::with_capacity(cfg.n_times);
    let mut noises = Vec::with_capacity(cfg.n_times);
    for t in 0..cfg.n_times {
        let section = generate_sample(cfg, &genes, &mut rng)?;
        let plaque_idx = select_plaques(&section, cfg.n_groups, cfg.plaques, &mut rng)?;
        let (y, noise) = generate_outcomes(&section, &plaque_idx, &beta, t, cfg.sigma2, cfg.phi, &mut rng)?;
        let sid = padded("sample", t, cfg.n_times);
        let mut is_plaque = vec![false; section.len()];
        plaque_idx.iter().for_each(|&j| is_plaque[j] = true);
        let plaques = plaque_idx
            .iter()
            .zip(&y)
            .map(|(&j, &outcome)| Plaque {
                id: format!("{sid}_spot{j}"),
                location: section.locations[j],
                outcome,
            })
            .collect();
        let mut cells = Vec::new();
        let mut expr = Vec::new();
        for j in (0..section.len()).filter(|&j| !is_plaque[j]) {
            cells.push(Cell { id: format!("{sid}_spot{j}"), location: section.locations[j], cell_type: section.groups[j] });
            expr.extend_from_slice(section.expression(j));
        }
        samples.push(Sample::new(sid, t, plaques, cells, expr, cfg.p)?);
        noises.push(noise);
    }
    let dataset = Dataset::new(
        samples,
        (0..cfg.p).map(|l| padded("gene", l, cfg.p)).collect(),
        (0..cfg.n_groups).map(|g| padded("group", g, cfg.n_groups)).collect(),
        (0..cfg.n_times).map(|t| (t + 1) as f64).collect(),
    )?;
    Ok(SimTruth { dataset, model, beta, noise: noises, config: cfg.clone() })
}

/// `truth.json` contents. Dense coefficients are listed as `beta[t][c][l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub config: SimConfig,
    pub seed: u64,
    pub dims: [usize; 3],
    pub beta: Vec<Vec<Vec<f64>>>,
    pub w: Vec<f64>,
    /// `p × R`
    pub q1: Vec<Vec<f64>>,
    pub q2: Vec<Vec<f64>>,
    pub q3: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
}

fn by_rows(n: usize, comps: &[Component], f: impl Fn(&Component) -> &Vec<f64>) -> Vec<Vec<f64>> {
    (0..n).map(|i| comps.iter().map(|c| f(c)[i]).collect()).collect()
}

impl TruthFile {
    pub fn from_truth(truth: &SimTruth) -> Self {
        let [p, c, t] = truth.beta.dims();
        let comps = &truth.model.components;
        TruthFile {
            config: truth.config.clone(),
            seed: truth.config.seed,
            dims: [p, c, t],
            beta: (0..t).map(|ti| (0..c).map(|ci| truth.beta.slice(ci, ti).to_vec()).collect()).collect(),
            w: comps.iter().map(|c| c.weight).collect(),
            q1: by_rows(p, comps, |c| &c.genes),
            q2: by_rows(c, comps, |c| &c.cell_types),
            q3: by_rows(t, comps, |c| &c.times),
            noise: truth.noise.clone(),
        }
    }

    pub fn beta_tensor(&self) -> Result<Tensor3> {
        let [p, c, t] = self.dims;
        if self.beta.len() != t || self.beta.iter().any(|s| s.len() != c || s.iter().any(|v| v.len() != p)) {
            return Err(Error::Shape(format!("truth beta does not match dims {:?}", self.dims)));
        }
        Ok(Tensor3::from_fn(p, c, t, |l, ci, ti| self.beta[ti][ci][l]))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
