//! CP-factorized coefficient tensors.
//!
//! The coefficient tensor over genes × cell types × times is written as a sum
//! of rank-one components
//!
//! ```text
//! beta(l, c, t) = sum_r  w_r * q1[l, r] * q2[c, r] * q3[t, r]
//! ```
//!
//! with `w_r >= 0` and, after [`CpModel::renormalize`], unit-norm factor
//! vectors. A model with no components is the zero tensor.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense genes × cell types × times array.
///
/// Stored so that each (cell type, time) slice over genes is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(p: usize, c: usize, t: usize) -> Self {
        Tensor3 {
            dims: [p, c, t],
            data: vec![0.0; p * c * t],
        }
    }

    /// Builds a tensor from a closure over `(l, c, t)`.
    pub fn from_fn(p: usize, c: usize, t: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(p, c, t);
        for ti in 0..t {
            for ci in 0..c {
                for l in 0..p {
                    out.set(l, ci, ti, f(l, ci, ti));
                }
            }
        }
        out
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    fn offset(&self, l: usize, c: usize, t: usize) -> usize {
        (t * self.dims[1] + c) * self.dims[0] + l
    }

    pub fn get(&self, l: usize, c: usize, t: usize) -> f64 {
        self.data[self.offset(l, c, t)]
    }

    pub fn set(&mut self, l: usize, c: usize, t: usize, v: f64) {
        let o = self.offset(l, c, t);
        self.data[o] = v;
    }

    pub fn slice(&self, c: usize, t: usize) -> &[f64] {
        let o = self.offset(0, c, t);
        &self.data[o..o + self.dims[0]]
    }

    pub fn slice_mut(&mut self, c: usize, t: usize) -> &mut [f64] {
        let o = self.offset(0, c, t);
        let p = self.dims[0];
        &mut self.data[o..o + p]
    }

    /// All entries, slice by slice.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// One rank-one term `w * q1 ∘ q2 ∘ q3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub genes: Vec<f64>,
    pub cell_types: Vec<f64>,
    pub times: Vec<f64>,
}

impl Component {
    fn modes(&self) -> [&Vec<f64>; 3] {
        [&self.genes, &self.cell_types, &self.times]
    }
}

/// A rank-R CP model of a `p × C × T` coefficient tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct CpModel {
    pub dims: [usize; 3],
    pub components: Vec<Component>,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl CpModel {
    pub fn zero(p: usize, c: usize, t: usize) -> Self {
        CpModel {
            dims: [p, c, t],
            components: Vec::new(),
        }
    }

    pub fn rank(&self) -> usize {
        self.components.len()
    }

    /// Appends a component after checking its factor lengths.
    pub fn push(&mut self, component: Component) -> Result<()> {
        let [p, c, t] = self.dims;
        if component.genes.len() != p || component.cell_types.len() != c || component.times.len() != t {
            return Err(Error::Shape(format!(
                "component factors of lengths ({}, {}, {}) do not match ({p}, {c}, {t})",
                component.genes.len(),
                component.cell_types.len(),
                component.times.len()
            )));
        }
        self.components.push(component);
        Ok(())
    }

    /// The coefficient vector `beta_{c,t}` over genes.
    pub fn beta_slice(&self, c: usize, t: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dims[0]];
        self.add_slice_into(c, t, &mut out);
        out
    }

    fn add_slice_into(&self, c: usize, t: usize, out: &mut [f64]) {
        for comp in &self.components {
            let scale = comp.weight * comp.cell_types[c] * comp.times[t];
            if scale == 0.0 {
                continue;
            }
            for (o, q) in out.iter_mut().zip(&comp.genes) {
                *o += scale * q;
            }
        }
    }

    /// Reconstructs the full tensor.
    pub fn to_dense(&self) -> Tensor3 {
        let [p, c, t] = self.dims;
        let mut out = Tensor3::zeros(p, c, t);
        for ti in 0..t {
            for ci in 0..c {
                self.add_slice_into(ci, ti, out.slice_mut(ci, ti));
            }
        }
        out
    }

    /// Rescales every factor vector to unit norm and moves the scale into the
    /// weight. A component with an all-zero factor gets weight zero.
    pub fn renormalize(&mut self) {
        for comp in &mut self.components {
            renormalize_component(comp);
        }
    }

    /// Flips signs so each component's largest-magnitude gene loading is
    /// positive, compensating through the time factor. Ties go to the
    /// smallest gene index.
    pub fn orient_signs(&mut self) {
        for comp in &mut self.components {
            let mut top = 0;
            for (l, q) in comp.genes.iter().enumerate() {
                if q.abs() > comp.genes[top].abs() {
                    top = l;
                }
            }
            if comp.genes.get(top).is_some_and(|q| *q < 0.0) {
                comp.genes.iter_mut().for_each(|q| *q = -*q);
                comp.times.iter_mut().for_each(|q| *q = -*q);
            }
        }
    }

    /// Drops components whose weight is exactly zero.
    pub fn without_dead_components(mut self) -> Self {
        self.components.retain(|c| c.weight != 0.0);
        self
    }

    /// Number of factor entries with magnitude above `1e-12`, over all three
    /// modes of all components.
    pub fn nonzero_factor_entries(&self) -> usize {
        self.components
            .iter()
            .flat_map(|c| c.modes())
            .flat_map(|m| m.iter())
            .filter(|v| v.abs() > 1e-12)
            .count()
    }
}

pub(crate) fn renormalize_component(comp: &mut Component) {
    let alphas = [l2(&comp.genes), l2(&comp.cell_types), l2(&comp.times)];
    if alphas.contains(&0.0) {
        comp.weight = 0.0;
        return;
    }
    for (v, a) in [&mut comp.genes, &mut comp.cell_types, &mut comp.times]
        .into_iter()
        .zip(alphas)
    {
        v.iter_mut().for_each(|x| *x /= a);
    }
    comp.weight *= alphas[0] * alphas[1] * alphas[2];
}

/// Settings for [`cp_als_fit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlsConfig {
    pub max_iters: usize,
    /// Stop when the relative reconstruction error changes by less than this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for AlsConfig {
    fn default() -> Self {
        AlsConfig {
            max_iters: 1000,
            tol: 1e-12,
            seed: 0,
        }
    }
}

/// Plain alternating least squares for a rank-`rank` CP model of a dense
/// tensor, started from seeded Gaussian factors.
///
/// The result is renormalized. Components may come out with weight zero;
/// they are kept so the caller sees exactly `rank` components.
pub fn cp_als_fit(tensor: &Tensor3, rank: usize, config: &AlsConfig) -> Result<CpModel> {
    if rank == 0 {
        return Err(Error::Invalid("CP rank must be at least 1".into()));
    }
    if tensor.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("tensor has non-finite entries".into()));
    }
    let [p, c, t] = tensor.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut random = |rows: usize| {
        DMatrix::<f64>::from_fn(rows, rank, |_, _| StandardNormal.sample(&mut rng))
    };
    let mut factors = [random(p), random(c), random(t)];

    let norm = tensor.frobenius_norm();
    if norm > 0.0 {
        let mut prev_err = f64::INFINITY;
        for _ in 0..config.max_iters {
            for mode in 0..3 {
                factors[mode] = als_update(tensor, &factors, mode, rank);
            }
            let err = reconstruction_error(tensor, &factors) / norm;
            if (prev_err - err).abs() < config.tol || err < 1e-15 {
                break;
            }
            prev_err = err;
        }
    }

    let mut model = CpModel::zero(p, c, t);
    for r in 0..rank {
        let col = |m: &DMatrix<f64>| m.column(r).iter().copied().collect::<Vec<_>>();
        let mut comp = Component {
            weight: if norm > 0.0 { 1.0 } else { 0.0 },
            genes: col(&factors[0]),
            cell_types: col(&factors[1]),
            times: col(&factors[2]),
        };
        let w = comp.weight;
        renormalize_component(&mut comp);
        if w == 0.0 {
            // zero tensor: keep unit factors for later use, weight stays 0
            for v in [&mut comp.genes, &mut comp.cell_types, &mut comp.times] {
                let a = l2(v);
                if a > 0.0 {
                    v.iter_mut().for_each(|x| *x /= a);
                }
            }
            comp.weight = 0.0;
        }
        model.components.push(comp);
    }
    Ok(model)
}

fn entry(tensor: &Tensor3, mode: usize, i: usize, j: usize, k: usize) -> f64 {
    // (i, j, k) are indices of (mode, first other mode, second other mode)
    match mode {
        0 => tensor.get(i, j, k),
        1 => tensor.get(j, i, k),
        _ => tensor.get(j, k, i),
    }
}

fn als_update(tensor: &Tensor3, factors: &[DMatrix<f64>; 3], mode: usize, rank: usize) -> DMatrix<f64> {
    let (o1, o2) = match mode {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (a, b) = (&factors[o1], &factors[o2]);
    let n = factors[mode].nrows();
    // matricized tensor times Khatri-Rao product
    let mut mttkrp = DMatrix::<f64>::zeros(n, rank);
    for i in 0..n {
        for j in 0..a.nrows() {
            for k in 0..b.nrows() {
                let x = entry(tensor, mode, i, j, k);
                if x == 0.0 {
                    continue;
                }
                for r in 0..rank {
                    mttkrp[(i, r)] += x * a[(j, r)] * b[(k, r)];
                }
            }
        }
    }
    let gram = (a.transpose() * a).component_mul(&(b.transpose() * b));
    mttkrp * pseudo_inverse(&gram)
}

fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let eps = smax * 1e-13 * m.nrows() as f64;
    svd.pseudo_inverse(eps.max(f64::MIN_POSITIVE))
        .unwrap_or_else(|_| DMatrix::zeros(m.ncols(), m.nrows()))
}

fn reconstruction_error(tensor: &Tensor3, factors: &[DMatrix<f64>; 3]) -> f64 {
    let [p, c, t] = tensor.dims;
    let rank = factors[0].ncols();
    let mut sq = 0.0;
    for ti in 0..t {
        for ci in 0..c {
            for l in 0..p {
                let mut v = 0.0;
                for r in 0..rank {
                    v += factors[0][(l, r)] * factors[1][(ci, r)] * factors[2][(ti, r)];
                }
                let d = tensor.get(l, ci, ti) - v;
                sq += d * d;
            }
        }
    }
    sq.sqrt()
}

/// JSON form of a fitted model, with labels for every mode.
///
/// Factor matrices are stored row-wise: `q1[l][r]`, `q2[c][r]`, `q3[t][r]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub rank: usize,
    pub w: Vec<f64>,
    pub q1: Vec<Vec<f64>>,
    pub q2: Vec<Vec<f64>>,
    pub q3: Vec<Vec<f64>>,
    pub gene_ids: Vec<String>,
    pub cell_type_labels: Vec<String>,
    pub time_values: Vec<f64>,
    pub seed: u64,
}

impl ModelFile {
    pub fn from_model(
        model: &CpModel,
        gene_ids: Vec<String>,
        cell_type_labels: Vec<String>,
        time_values: Vec<f64>,
        seed: u64,
    ) -> Self {
        let rows = |len: usize, pick: &dyn Fn(&Component) -> &Vec<f64>| -> Vec<Vec<f64>> {
            (0..len)
                .map(|i| model.components.iter().map(|c| pick(c)[i]).collect())
                .collect()
        };
        let [p, c, t] = model.dims;
        ModelFile {
            rank: model.rank(),
            w: model.components.iter().map(|c| c.weight).collect(),
            q1: rows(p, &|c| &c.genes),
            q2: rows(c, &|c| &c.cell_types),
            q3: rows(t, &|c| &c.times),
            gene_ids,
            cell_type_labels,
            time_values,
            seed,
        }
    }

    pub fn to_model(&self) -> Result<CpModel> {
        let (p, c, t) = (self.q1.len(), self.q2.len(), self.q3.len());
        let bad = |m: &Vec<Vec<f64>>| m.iter().any(|row| row.len() != self.rank);
        if self.w.len() != self.rank || bad(&self.q1) || bad(&self.q2) || bad(&self.q3) {
            return Err(Error::Shape("model file factor shapes disagree with rank".into()));
        }
        let mut model = CpModel::zero(p, c, t);
        for r in 0..self.rank {
            model.components.push(Component {
                weight: self.w[r],
                genes: self.q1.iter().map(|row| row[r]).collect(),
                cell_types: self.q2.iter().map(|row| row[r]).collect(),
                times: self.q3.iter().map(|row| row[r]).collect(),
            });
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
