//! Random fixtures and brute-force references shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cp::{Component, CpModel};
use crate::data::{Cell, Dataset, Plaque, Point, Sample};
use crate::kernel::KernelWeightSet;

/// `n_samples` samples over a 100 × 100 square, sample `i` at time
/// `i % n_times`, with uniform expression in [0, 2).
pub fn random_dataset(
    seed: u64,
    p: usize,
    n_types: usize,
    n_times: usize,
    n_samples: usize,
    plaques: usize,
    cells: usize,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = |rng: &mut ChaCha8Rng| Point::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
    let samples = (0..n_samples)
        .map(|i| {
            let pl = (0..plaques)
                .map(|j| Plaque { id: format!("p{j}"), location: point(&mut rng), outcome: rng.random_range(-3.0..3.0) })
                .collect();
            let cl = (0..cells)
                .map(|k| Cell { id: format!("c{k}"), location: point(&mut rng), cell_type: k % n_types })
                .collect();
            let expr = (0..cells * p).map(|_| rng.random_range(0.0..2.0)).collect();
            Sample::new(format!("s{i}"), i % n_times, pl, cl, expr, p).unwrap()
        })
        .collect();
    Dataset::new(
        samples,
        (0..p).map(|l| format!("g{l}")).collect(),
        (0..n_types).map(|c| format!("T{c}")).collect(),
        (0..n_times).map(|t| t as f64).collect(),
    )
    .unwrap()
}

pub fn random_model(seed: u64, p: usize, c: usize, t: usize, rank: usize) -> CpModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = |n: usize, rng: &mut ChaCha8Rng| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let mut m = CpModel::zero(p, c, t);
    for _ in 0..rank {
        let comp = Component {
            weight: rng.random_range(0.1..2.0),
            genes: v(p, &mut rng),
            cell_types: v(c, &mut rng),
            times: v(t, &mut rng),
        };
        m.push(comp).unwrap();
    }
    m.renormalize();
    m
}

/// The penalized objective evaluated triple by triple from the raw inputs.
pub fn brute_objective(ds: &Dataset, w: &KernelWeightSet, m: &CpModel, lambda: f64) -> f64 {
    let mut sse = 0.0;
    for t in &w.triples {
        let s = &ds.samples[t.sample];
        let x = s.expression(t.cell);
        let mut eta = 0.0;
        for comp in &m.components {
            let scale = comp.weight * comp.cell_types[s.cells[t.cell].cell_type] * comp.times[s.time_index];
            for (xl, q) in x.iter().zip(&comp.genes) {
                eta += scale * q * xl;
            }
        }
        let r = s.plaques[t.plaque].outcome - eta;
        sse += t.weight * r * r;
    }
    let r = m.rank();
    let pen = if r == 0 {
        0.0
    } else {
        lambda / (r as f64 * ds.n_genes() as f64)
            * m.components.iter().flat_map(|c| &c.genes).map(|q| q.abs()).sum::<f64>()
    };
    0.5 * sse + pen
}

/// Minimizes a unimodal function on `[lo, hi]` by golden-section search.
pub fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..200 {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

/// Replaces each plaque outcome by the kernel-weighted mean of `x'beta`
/// over its neighbouring cells plus uniform noise of half-width `noise`.
pub fn plant_outcomes(ds: &mut Dataset, w: &KernelWeightSet, m: &CpModel, noise: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = m.to_dense();
    let mut acc = vec![vec![(0.0, 0.0); 0]; ds.samples.len()];
    for (i, s) in ds.samples.iter().enumerate() {
        acc[i] = vec![(0.0, 0.0); s.plaques.len()];
    }
    for t in &w.triples {
        let s = &ds.samples[t.sample];
        let b = beta.slice(s.cells[t.cell].cell_type, s.time_index);
        let eta: f64 = s.expression(t.cell).iter().zip(b).map(|(x, q)| x * q).sum();
        let e = &mut acc[t.sample][t.plaque];
        e.0 += t.weight * eta;
        e.1 += t.weight;
    }
    for (s, a) in ds.samples.iter_mut().zip(&acc) {
        for (pl, (num, den)) in s.plaques.iter_mut().zip(a) {
            let mean = if *den > 0.0 { num / den } else { 0.0 };
            pl.outcome = mean + rng.random_range(-noise..=noise);
        }
    }
}
