//! Plaque–cell kernel weights.
//!
//! Every (plaque, cell) pair of a sample gets the Epanechnikov weight of its
//! Euclidean distance under the sample's bandwidth. Pairs at or beyond the
//! bandwidth get weight zero and are not stored, so a [`KernelWeightSet`] is
//! a sparse list of strictly positive triples.

use std::collections::HashMap;
use std::path::Path;

use crate::data::{Dataset, Point};
use crate::error::{Error, Result};

/// Scaled Epanechnikov kernel `0.75 (1 - (d/h)^2)_+ / h`.
///
/// Exactly zero for `d >= h`.
pub fn epanechnikov_weight(d: f64, h: f64) -> Result<f64> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Bandwidth(h));
    }
    Ok(kernel_unchecked(d, h))
}

#[inline]
fn kernel_unchecked(d: f64, h: f64) -> f64 {
    let u = d / h;
    if u >= 1.0 {
        0.0
    } else {
        0.75 * (1.0 - u * u) / h
    }
}

/// One stored plaque–cell pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightTriple {
    pub sample: usize,
    pub plaque: usize,
    pub cell: usize,
    pub distance: f64,
    pub weight: f64,
}

/// Strictly positive kernel weights, ordered by (sample, plaque, cell).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelWeightSet {
    pub triples: Vec<WeightTriple>,
    pub bandwidths: Vec<f64>,
}

impl KernelWeightSet {
    /// N*, the number of strictly positive weights.
    pub fn positive_count(&self) -> usize {
        self.triples.len()
    }

    /// Writes `sample_id,plaque_id,cell_id,distance_um,weight`.
    pub fn write_csv(&self, dataset: &Dataset, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sample_id", "plaque_id", "cell_id", "distance_um", "weight"])?;
        for t in &self.triples {
            let s = &dataset.samples[t.sample];
            w.write_record([
                s.id.as_str(),
                s.plaques[t.plaque].id.as_str(),
                s.cells[t.cell].id.as_str(),
                &t.distance.to_string(),
                &t.weight.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Median over plaques of the distance to the L-th nearest cell, per sample
/// and per candidate L.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthTable {
    pub l_grid: Vec<usize>,
    /// `values[sample][grid index]`
    pub values: Vec<Vec<f64>>,
}

impl BandwidthTable {
    /// Per-sample bandwidths for the grid entry at `index`.
    pub fn bandwidths(&self, index: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[index]).collect()
    }
}

/// Median with the even-count convention of averaging the two middle values.
pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Computes H_i(L) for every sample and every L in `l_grid`.
pub fn bandwidth_candidates(dataset: &Dataset, l_grid: &[usize]) -> Result<BandwidthTable> {
    if l_grid.is_empty() {
        return Err(Error::Invalid("empty L grid".into()));
    }
    let mut values = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let n = s.cells.len();
        if let Some(&l) = l_grid.iter().find(|&&l| l == 0 || l > n) {
            if l == 0 {
                return Err(Error::Invalid("L must be at least 1".into()));
            }
            return Err(Error::InsufficientCells {
                sample: s.id.clone(),
                cells: n,
                l,
            });
        }
        // kth[grid index][plaque]
        let mut kth: Vec<Vec<f64>> = vec![Vec::with_capacity(s.plaques.len()); l_grid.len()];
        let mut dist = vec![0.0; n];
        for pl in &s.plaques {
            for (d, c) in dist.iter_mut().zip(&s.cells) {
                *d = pl.location.distance(&c.location);
            }
            dist.sort_by(f64::total_cmp);
            for (gi, &l) in l_grid.iter().enumerate() {
                kth[gi].push(dist[l - 1]);
            }
        }
        let row: Vec<f64> = kth.iter_mut().map(|v| median(v)).collect();
        if let Some(&bad) = row.iter().find(|h| !(**h > 0.0)) {
            return Err(Error::Bandwidth(bad));
        }
        values.push(row);
    }
    Ok(BandwidthTable {
        l_grid: l_grid.to_vec(),
        values,
    })
}

/// Uniform grid over a sample's cells with square bins of side `h`.
struct CellGrid {
    h: f64,
    bins: HashMap<(i64, i64), Vec<usize>>,
}

impl CellGrid {
    fn new(cells: impl Iterator<Item = Point>, h: f64) -> Self {
        let mut bins: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (k, p) in cells.enumerate() {
            bins.entry(Self::key(p, h)).or_default().push(k);
        }
        CellGrid { h, bins }
    }

    fn key(p: Point, h: f64) -> (i64, i64) {
        ((p.x / h).floor() as i64, (p.y / h).floor() as i64)
    }

    /// Cells in the 3x3 block of bins around `p`, ascending.
    fn candidates(&self, p: Point, out: &mut Vec<usize>) {
        out.clear();
        let (bx, by) = Self::key(p, self.h);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(v) = self.bins.get(&(bx + dx, by + dy)) {
                    out.extend_from_slice(v);
                }
            }
        }
        out.sort_unstable();
    }
}

/// Enumerates all positive-weight (plaque, cell) pairs of every sample.
///
/// Cells are binned on a grid of side `h_i`, so only the 3x3 neighbourhood
/// of a plaque's bin is visited. The output is identical to
/// [`compute_weights_naive`].
pub fn compute_weights(dataset: &Dataset, bandwidths: &[f64]) -> Result<KernelWeightSet> {
    check_bandwidths(dataset, bandwidths)?;
    let mut triples = Vec::new();
    let mut cand = Vec::new();
    for (si, s) in dataset.samples.iter().enumerate() {
        let h = bandwidths[si];
        let grid = CellGrid::new(s.cells.iter().map(|c| c.location), h);
        for (j, pl) in s.plaques.iter().enumerate() {
            grid.candidates(pl.location, &mut cand);
            for &k in &cand {
                let d = pl.location.distance(&s.cells[k].location);
                let w = kernel_unchecked(d, h);
                if w > 0.0 {
                    triples.push(WeightTriple {
                        sample: si,
                        plaque: j,
                        cell: k,
                        distance: d,
                        weight: w,
                    });
                }
            }
        }
    }
    Ok(KernelWeightSet {
        triples,
        bandwidths: bandwidths.to_vec(),
    })
}

/// Double loop over every (plaque, cell) pair. Reference for
/// [`compute_weights`].
pub fn compute_weights_naive(dataset: &Dataset, bandwidths: &[f64]) -> Result<KernelWeightSet> {
    check_bandwidths(dataset, bandwidths)?;
    let mut triples = Vec::new();
    for (si, s) in dataset.samples.iter().enumerate() {
        let h = bandwidths[si];
        for (j, pl) in s.plaques.iter().enumerate() {
            for (k, c) in s.cells.iter().enumerate() {
                let d = pl.location.distance(&c.location);
                let w = kernel_unchecked(d, h);
                if w > 0.0 {
                    triples.push(WeightTriple {
                        sample: si,
                        plaque: j,
                        cell: k,
                        distance: d,
                        weight: w,
                    });
                }
            }
        }
    }
    Ok(KernelWeightSet {
        triples,
        bandwidths: bandwidths.to_vec(),
    })
}

fn check_bandwidths(dataset: &Dataset, bandwidths: &[f64]) -> Result<()> {
    if bandwidths.len() != dataset.samples.len() {
        return Err(Error::Shape(format!(
            "{} bandwidths for {} samples",
            bandwidths.len(),
            dataset.samples.len()
        )));
    }
    if let Some(&h) = bandwidths.iter().find(|h| !(**h > 0.0) || !h.is_finite()) {
        return Err(Error::Bandwidth(h));
    }
    Ok(())
}
