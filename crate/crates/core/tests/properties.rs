use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use misaligned_cp::cp::{Component, CpModel, Tensor3};
use misaligned_cp::data::{filter_genes, subset_to_panel, Cell, Dataset, GeneFilter, GenePanel, Plaque, Point, Sample, Stratification};
use misaligned_cp::design::Design;
use misaligned_cp::eval::{coefficient_mse, roc_auc};
use misaligned_cp::kernel::{bandwidth_candidates, compute_weights, compute_weights_naive, KernelWeightSet};
use misaligned_cp::selection::{elbow_select, lambda_sequence};
use misaligned_cp::simulation::{generate_replicate, SimConfig};
use misaligned_cp::solver::weighted_sse;

const P: usize = 4;

/// Two samples, two cell types, two times; sparse nonnegative expression.
fn random_dataset(seed: u64, transform: impl Fn(Point) -> Point) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..2)
        .map(|s| {
            let mut pt = || transform(Point::new(rng.random_range(0.0..200.0), rng.random_range(0.0..200.0)));
            let plaques: Vec<Plaque> = (0..5)
                .map(|j| Plaque { id: format!("p{s}_{j}"), location: pt(), outcome: 0.0 })
                .collect();
            let locs: Vec<Point> = (0..30).map(|_| pt()).collect();
            let cells = locs
                .into_iter()
                .enumerate()
                .map(|(k, location)| Cell { id: format!("c{s}_{k}"), location, cell_type: k % 2 })
                .collect();
            (plaques, cells)
        })
        .collect::<Vec<_>>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let samples = samples
        .into_iter()
        .enumerate()
        .map(|(s, (mut plaques, cells)): (usize, (Vec<Plaque>, Vec<Cell>))| {
            for pl in &mut plaques {
                pl.outcome = rng.random_range(-2.0..2.0);
            }
            let n: usize = cells.len();
            let expr = (0..n * P)
                .map(|_| if rng.random_bool(0.6) { rng.random_range(0.0..3.0) } else { 0.0 })
                .collect();
            Sample::new(format!("s{s}"), s, plaques, cells, expr, P).unwrap()
        })
        .collect();
    Dataset::new(
        samples,
        (0..P).map(|l| format!("g{l}")).collect(),
        vec!["a".into(), "b".into()],
        vec![1.0, 2.0],
    )
    .unwrap()
}

fn random_model(seed: u64, rank: usize) -> CpModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = CpModel::zero(P, 2, 2);
    for _ in 0..rank {
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (genes, cell_types, times) = (v(P), v(2), v(2));
        m.push(Component { weight: rng.random_range(0.1..2.0), genes, cell_types, times }).unwrap();
    }
    m
}

fn pair_map(w: &KernelWeightSet) -> Vec<((usize, usize, usize), f64)> {
    let mut v: Vec<_> = w.triples.iter().map(|t| ((t.sample, t.plaque, t.cell), t.weight)).collect();
    v.sort_by_key(|a| a.0);
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn weights_invariant_under_isometry(seed in 0u64..10_000, angle in 0.0f64..std::f64::consts::TAU, dx in -500.0f64..500.0, dy in -500.0f64..500.0) {
        let (c, s) = (angle.cos(), angle.sin());
        let base = random_dataset(seed, |p| p);
        let moved = random_dataset(seed, |p| Point::new(c * p.x - s * p.y + dx, s * p.x + c * p.y + dy));
        let h = [60.0, 75.0];
        let a = pair_map(&compute_weights(&base, &h).unwrap());
        let b = pair_map(&compute_weights(&moved, &h).unwrap());
        // pairs sitting on the support boundary may flip under rounding
        let strong = |v: &[((usize, usize, usize), f64)]| v.iter().filter(|e| e.1 > 1e-9).cloned().collect::<Vec<_>>();
        let (a, b) = (strong(&a), strong(&b));
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.0, y.0);
            prop_assert!((x.1 - y.1).abs() <= 1e-9 * x.1.max(1e-3));
        }
    }

    #[test]
    fn weights_scale_inversely_with_coordinates(seed in 0u64..10_000, scale in 0.1f64..10.0) {
        let base = random_dataset(seed, |p| p);
        let scaled = random_dataset(seed, |p| Point::new(scale * p.x, scale * p.y));
        let a = pair_map(&compute_weights(&base, &[70.0, 70.0]).unwrap());
        let b = pair_map(&compute_weights(&scaled, &[70.0 * scale, 70.0 * scale]).unwrap());
        let strong = |v: Vec<((usize, usize, usize), f64)>, f: f64| v.into_iter().filter(|e| e.1 * f > 1e-9).collect::<Vec<_>>();
        let (a, b) = (strong(a, 1.0), strong(b, scale));
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.0, y.0);
            prop_assert!((x.1 - scale * y.1).abs() <= 1e-9 * x.1.max(1e-3));
        }
    }

    #[test]
    fn gridded_weights_match_exhaustive_scan(seed in 0u64..10_000, h in 5.0f64..300.0) {
        let ds = random_dataset(seed, |p| p);
        prop_assert_eq!(compute_weights(&ds, &[h, h * 0.7]).unwrap(), compute_weights_naive(&ds, &[h, h * 0.7]).unwrap());
    }

    #[test]
    fn bandwidth_monotone_in_l(seed in 0u64..10_000) {
        let ds = random_dataset(seed, |p| p);
        let grid: Vec<usize> = (1..=30).collect();
        let table = bandwidth_candidates(&ds, &grid).unwrap();
        for row in &table.values {
            prop_assert!(row.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn orient_signs_is_idempotent(seed in 0u64..10_000, rank in 1usize..4) {
        let mut m = random_model(seed, rank);
        m.renormalize();
        m.orient_signs();
        let once = m.clone();
        m.orient_signs();
        prop_assert_eq!(m, once);
    }

    #[test]
    fn stricter_filter_keeps_a_subset(seed in 0u64..10_000, lo in 0.0f64..1.0, gap in 0.0f64..0.5, any in any::<bool>()) {
        let ds = random_dataset(seed, |p| p);
        let stratification = if any { Stratification::Any } else { Stratification::All };
        let f = |t: f64| GeneFilter { min_detect_frac: t.min(1.0), near_radius_um: 80.0, forced_includes: vec![], stratification };
        let loose = filter_genes(&ds, &f(lo)).unwrap();
        let strict = filter_genes(&ds, &f(lo + gap)).unwrap();
        prop_assert!(strict.kept_indices.iter().all(|l| loose.kept_indices.contains(l)));
    }

    #[test]
    fn subsetting_is_idempotent(seed in 0u64..10_000, mask in 1u8..16) {
        let ds = random_dataset(seed, |p| p);
        let kept: Vec<usize> = (0..P).filter(|l| mask & (1 << l) != 0).collect();
        let panel = GenePanel { provenance: vec![misaligned_cp::data::PanelReason::DetectionFilter; kept.len()], kept_indices: kept };
        let once = subset_to_panel(&ds, &panel).unwrap();
        let twice = subset_to_panel(&once, &GenePanel::all(once.n_genes())).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn loss_ignores_triple_order(seed in 0u64..10_000, rank in 0usize..3) {
        let ds = random_dataset(seed, |p| p);
        let w = compute_weights(&ds, &[80.0, 80.0]).unwrap();
        prop_assume!(w.positive_count() > 0);
        let mut shuffled = w.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.triples.len()).rev() {
            shuffled.triples.swap(i, rng.random_range(0..=i));
        }
        let model = random_model(seed + 1, rank);
        let a = weighted_sse(&Design::new(&ds, &w).unwrap(), &model);
        let b = weighted_sse(&Design::new(&ds, &shuffled).unwrap(), &model);
        prop_assert_eq!(w.positive_count(), shuffled.positive_count());
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn elbow_invariant_to_affine_loss_rescaling(ys in prop::collection::vec(0u32..400, 3..10), a_exp in -3i32..4, b in -50i32..50) {
        let pts: Vec<(usize, f64)> = ys.iter().enumerate().map(|(i, &y)| (5 * (i + 1), y as f64 / 8.0)).collect();
        let a = 2f64.powi(a_exp);
        let moved: Vec<(usize, f64)> = pts.iter().map(|&(l, y)| (l, a * y + b as f64)).collect();
        prop_assert_eq!(elbow_select(&pts).unwrap(), elbow_select(&moved).unwrap());
    }

    #[test]
    fn lambda_grid_is_a_running_product(lmax in 1e-3f64..1e12, decay in 0.05f64..0.999, n in 1usize..80) {
        let seq = lambda_sequence(lmax, decay, n);
        prop_assert_eq!(seq.len(), n);
        prop_assert_eq!(seq[0], lmax);
        for k in 1..n {
            prop_assert_eq!(seq[k], seq[k - 1] * decay);
        }
    }

    #[test]
    fn auc_invariant_to_monotone_transform(vals in prop::collection::vec(-40i32..40, 8), truth in prop::collection::vec(any::<bool>(), 8)) {
        let est = Tensor3::from_fn(2, 2, 2, |l, c, t| vals[l * 4 + c * 2 + t] as f64 / 4.0);
        // cube-and-double keeps signs and the order of magnitudes
        let moved = Tensor3::from_fn(2, 2, 2, |l, c, t| { let v = est.get(l, c, t); 2.0 * v * v * v });
        let tr = Tensor3::from_fn(2, 2, 2, |l, c, t| if truth[l * 4 + c * 2 + t] { 1.0 } else { 0.0 });
        let a = roc_auc(&est, &tr).unwrap();
        let b = roc_auc(&moved, &tr).unwrap();
        prop_assert!((a.auc - b.auc).abs() < 1e-12);
        for w in a.points.windows(2) {
            prop_assert!(w[0].0 <= w[1].0 && w[0].1 <= w[1].1);
        }
        prop_assert!((0.0..=1.0).contains(&a.auc));
    }

    #[test]
    fn mse_invariant_to_consistent_permutation(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, c, t) = (5, 3, 2);
        let a: Vec<f64> = (0..p * c * t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..p * c * t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let perm = [2usize, 0, 1];
        let ta = Tensor3::from_fn(p, c, t, |l, cc, tt| a[(l * c + cc) * t + tt]);
        let tb = Tensor3::from_fn(p, c, t, |l, cc, tt| b[(l * c + cc) * t + tt]);
        let pa = Tensor3::from_fn(p, c, t, |l, cc, tt| a[(l * c + perm[cc]) * t + tt]);
        let pb = Tensor3::from_fn(p, c, t, |l, cc, tt| b[(l * c + perm[cc]) * t + tt]);
        let x = coefficient_mse(&ta, &tb).unwrap();
        let y = coefficient_mse(&pa, &pb).unwrap();
        prop_assert!((x - y).abs() <= 1e-14 * x.max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn simulated_plaque_spots_are_not_cells(seed in 0u64..1_000_000) {
        let cfg = SimConfig { spots_mean: 500.0, side_um: 600.0, plaques: 10, p: 8, seed, ..SimConfig::default() };
        let truth = generate_replicate(&cfg).unwrap();
        for s in &truth.dataset.samples {
            for pl in &s.plaques {
                prop_assert!(s.cells.iter().all(|c| c.location != pl.location && c.id != pl.id));
            }
        }
        let active_rows = (0..cfg.p)
            .filter(|&l| (0..truth.beta.dims()[1]).any(|c| (0..truth.beta.dims()[2]).any(|t| truth.beta.get(l, c, t) != 0.0)))
            .count();
        prop_assert_eq!(active_rows, cfg.active);
    }
}
