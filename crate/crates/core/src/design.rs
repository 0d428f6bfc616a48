//! Flattened regression design for one set of kernel weights.
//!
//! Only cells that carry at least one positive weight enter the fit. Their
//! triples are grouped by cell so that every per-cell quantity (the cell's
//! linear predictor, its share of an update) is computed once and then
//! applied to the cell's run of triples.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::KernelWeightSet;

#[derive(Debug, Clone)]
pub struct Design {
    pub(crate) p: usize,
    pub(crate) n_types: usize,
    pub(crate) n_times: usize,
    /// (sample, cell) of each active cell
    pub(crate) origin: Vec<(usize, usize)>,
    pub(crate) cell_type: Vec<usize>,
    pub(crate) cell_time: Vec<usize>,
    /// cell-major expression, `x[k * p + l]`
    pub(crate) x_by_cell: Vec<f64>,
    /// triples of cell `k` are `ptr[k]..ptr[k + 1]`
    pub(crate) ptr: Vec<usize>,
    pub(crate) weight: Vec<f64>,
    pub(crate) outcome: Vec<f64>,
    /// plaque of each triple as (sample, plaque)
    pub(crate) plaque: Vec<(usize, usize)>,
    /// position of each triple in the source [`KernelWeightSet`]
    pub(crate) source: Vec<usize>,
    /// per cell, sum of its triple weights
    pub(crate) kappa: Vec<f64>,
    /// per cell, sum of weight * outcome over its triples
    pub(crate) kappa_y: Vec<f64>,
    /// per stratum `t * C + c`, the `p × p` matrix `sum K x x'` (row-major)
    pub(crate) gram: Vec<f64>,
    /// per stratum, `sum K y x`
    pub(crate) xy: Vec<f64>,
    /// per stratum, `sum K y^2`
    pub(crate) yy: Vec<f64>,
    pub(crate) cells_by_type: Vec<Vec<usize>>,
    pub(crate) cells_by_time: Vec<Vec<usize>>,
}

impl Design {
    /// Builds the design. Fails with [`Error::NoOverlap`] when no weight is
    /// positive.
    pub fn new(dataset: &Dataset, weights: &KernelWeightSet) -> Result<Self> {
        if weights.positive_count() == 0 {
            return Err(Error::NoOverlap);
        }
        let p = dataset.n_genes();
        let (n_types, n_times) = (dataset.n_cell_types(), dataset.n_times());

        let mut order: Vec<usize> = (0..weights.triples.len()).collect();
        order.sort_by_key(|&i| {
            let t = &weights.triples[i];
            (t.sample, t.cell, t.plaque)
        });

        let mut d = Design {
            p,
            n_types,
            n_times,
            origin: Vec::new(),
            cell_type: Vec::new(),
            cell_time: Vec::new(),
            x_by_cell: Vec::new(),
            ptr: vec![0],
            weight: Vec::with_capacity(order.len()),
            outcome: Vec::with_capacity(order.len()),
            plaque: Vec::with_capacity(order.len()),
            source: Vec::with_capacity(order.len()),
            kappa: Vec::new(),
            kappa_y: Vec::new(),
            gram: vec![0.0; p * p * n_types * n_times],
            xy: vec![0.0; p * n_types * n_times],
            yy: vec![0.0; n_types * n_times],
            cells_by_type: vec![Vec::new(); n_types],
            cells_by_time: vec![Vec::new(); n_times],
        };

        for &i in &order {
            let t = &weights.triples[i];
            if d.origin.last() != Some(&(t.sample, t.cell)) {
                if !d.origin.is_empty() {
                    d.ptr.push(d.weight.len());
                }
                let s = &dataset.samples[t.sample];
                let k = d.origin.len();
                d.origin.push((t.sample, t.cell));
                d.cell_type.push(s.cells[t.cell].cell_type);
                d.cell_time.push(s.time_index);
                d.cells_by_type[s.cells[t.cell].cell_type].push(k);
                d.cells_by_time[s.time_index].push(k);
                d.x_by_cell.extend_from_slice(s.expression(t.cell));
            }
            let y = dataset.samples[t.sample].plaques[t.plaque].outcome;
            d.weight.push(t.weight);
            d.outcome.push(y);
            d.plaque.push((t.sample, t.plaque));
            d.source.push(i);
        }
        d.ptr.push(d.weight.len());

        for k in 0..d.origin.len() {
            let (lo, hi) = (d.ptr[k], d.ptr[k + 1]);
            let kap: f64 = d.weight[lo..hi].iter().sum();
            let ky: f64 = d.weight[lo..hi].iter().zip(&d.outcome[lo..hi]).map(|(w, y)| w * y).sum();
            d.kappa.push(kap);
            d.kappa_y.push(ky);
            let st = d.stratum(k);
            let yy: f64 = d.weight[lo..hi].iter().zip(&d.outcome[lo..hi]).map(|(w, y)| w * y * y).sum();
            d.yy[st] += yy;
            let x = &d.x_by_cell[k * p..(k + 1) * p];
            let g = &mut d.gram[st * p * p..(st + 1) * p * p];
            for a in 0..p {
                let kx = kap * x[a];
                if kx == 0.0 {
                    continue;
                }
                d.xy[st * p + a] += ky * x[a];
                for b in a..p {
                    g[a * p + b] += kx * x[b];
                }
            }
        }
        for st in 0..n_types * n_times {
            let g = &mut d.gram[st * p * p..(st + 1) * p * p];
            for a in 0..p {
                for b in 0..a {
                    g[a * p + b] = g[b * p + a];
                }
            }
        }
        Ok(d)
    }

    pub fn n_genes(&self) -> usize {
        self.p
    }

    pub fn n_cells(&self) -> usize {
        self.origin.len()
    }

    /// N*, the number of stored positive-weight triples.
    pub fn n_star(&self) -> usize {
        self.weight.len()
    }

    pub(crate) fn n_strata(&self) -> usize {
        self.n_types * self.n_times
    }

    /// Stratum index `t * C + c` of active cell `k`.
    pub(crate) fn stratum(&self, k: usize) -> usize {
        self.cell_time[k] * self.n_types + self.cell_type[k]
    }

    pub(crate) fn gram(&self, st: usize) -> &[f64] {
        &self.gram[st * self.p * self.p..(st + 1) * self.p * self.p]
    }

    pub(crate) fn xy(&self, st: usize) -> &[f64] {
        &self.xy[st * self.p..(st + 1) * self.p]
    }

    pub(crate) fn cell_x(&self, k: usize) -> &[f64] {
        &self.x_by_cell[k * self.p..(k + 1) * self.p]
    }

    pub(crate) fn triples(&self, k: usize) -> std::ops::Range<usize> {
        self.ptr[k]..self.ptr[k + 1]
    }

    /// Source index in the [`KernelWeightSet`] of each design triple.
    pub fn source_order(&self) -> &[usize] {
        &self.source
    }

    /// `sum K * y^2` over all triples.
    pub fn weighted_outcome_sq(&self) -> f64 {
        self.weight.iter().zip(&self.outcome).map(|(w, y)| w * y * y).sum()
    }
}
