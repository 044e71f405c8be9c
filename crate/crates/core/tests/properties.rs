use proptest::prelude::*;

use qvar::basis::{
    coarsening_matrix, decompose_scalar, reconstruct_grid, transport_coefficients, SchauderCoefficients,
};
use qvar::partition::{
    analyze_sequence, build_kadic, build_split_example, coarsen, coarsen_by_rule, CoarseningRule, RefiningSequence,
};
use qvar::qv::{ab_weights, covar_from_coefficients, qv_direct, qv_from_coefficients};
use qvar::synthesis::{sample_coefficients, trial_seed, CoefficientLaw, LawKind};

fn random_coefficients(seq: &RefiningSequence, n: usize, seed: u64) -> SchauderCoefficients {
    let mut c = sample_coefficients(&CoefficientLaw::new(LawKind::UniformScaled), seq, n, seed, 1).unwrap();
    c.a0[0] = (seed % 7) as f64 * 0.1;
    c.a1[0] = (seed % 5) as f64 * 0.2 - 0.4;
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_sequences_are_nested_and_balanced(frac in 0.05f64..0.95, depth in 1usize..9) {
        let seq = build_split_example(depth, frac).unwrap();
        for n in 0..depth {
            let map = seq.parent_map(n);
            let (coarse, fine) = (seq.level(n).points(), seq.level(n + 1).points());
            prop_assert_eq!(map[0], 0);
            prop_assert_eq!(*map.last().unwrap(), fine.len() - 1);
            for (k, &p) in map.iter().enumerate() {
                prop_assert_eq!(fine[p].to_bits(), coarse[k].to_bits());
            }
        }
        let rep = analyze_sequence(&seq);
        prop_assert!(rep.refining);
        prop_assert!(rep.mesh.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(rep.balanced_ratios.iter().all(|&r| r >= 1.0));
        for lvl in seq.levels() {
            let avg = seq.horizon() / lvl.num_cells() as f64;
            prop_assert!(lvl.min_step() <= avg * (1.0 + 1e-15) && avg <= lvl.mesh() * (1.0 + 1e-15));
        }
    }

    #[test]
    fn kadic_branching_is_k(k in 2usize..6, depth in 1usize..5) {
        prop_assert_eq!(analyze_sequence(&build_kadic(k, 1.0, depth).unwrap()).branching_bound_m, k);
    }

    #[test]
    fn round_trip_on_split(frac in 0.1f64..0.9, seed in any::<u64>()) {
        let seq = build_split_example(7, frac).unwrap();
        let c = random_coefficients(&seq, 7, seed);
        let x = reconstruct_grid(&c, &seq, 7).unwrap().remove(0);
        let back = decompose_scalar(&x, &seq, 7).unwrap();
        for (u, v) in c.theta.iter().flatten().zip(back.theta.iter().flatten()) {
            prop_assert!((u - v).abs() <= 1e-10 * u.abs().max(1.0));
        }
        let again = reconstruct_grid(&back, &seq, 7).unwrap().remove(0);
        for (u, v) in x.iter().zip(&again) {
            prop_assert!((u - v).abs() <= 1e-10 * u.abs().max(1.0));
        }
    }

    #[test]
    fn qv_curves_agree_and_are_monotone(frac in 0.1f64..0.9, seed in any::<u64>(), n in 1usize..7) {
        let seq = build_split_example(7, frac).unwrap();
        let c = random_coefficients(&seq, 7, seed);
        let x = reconstruct_grid(&c, &seq, 7).unwrap().remove(0);
        let times = seq.level(n).points().to_vec();
        let direct = qv_direct(&x, &seq, 7, n, &times).unwrap();
        let coef = qv_from_coefficients(&c, &ab_weights(&seq, n, n, &times).unwrap()).unwrap();
        prop_assert!(direct.check(1e-10).is_ok());
        prop_assert!(coef.check(1e-10).is_ok());
        for (d, k) in direct.scalar().iter().zip(coef.scalar()) {
            prop_assert!((d - k).abs() <= 1e-8 * d.abs().max(1e-12), "{} vs {}", d, k);
        }
    }

    #[test]
    fn covariation_polarizes(s1 in any::<u64>(), s2 in any::<u64>(), n in 1usize..7) {
        let seq = build_split_example(6, 0.35).unwrap();
        let (x, y) = (random_coefficients(&seq, 6, s1), random_coefficients(&seq, 6, s2));
        let times = seq.level(n.min(6)).points().to_vec();
        let w = ab_weights(&seq, n.min(6), n.min(6), &times).unwrap();
        let cov = covar_from_coefficients(&x, &y, &w).unwrap().scalar();
        let sum = x.combine(1.0, &y, 1.0).unwrap();
        let xs = reconstruct_grid(&sum, &seq, 6).unwrap().remove(0);
        let qs = qv_direct(&xs, &seq, 6, n.min(6), &times).unwrap().scalar();
        let qx = qv_from_coefficients(&x, &w).unwrap().scalar();
        let qy = qv_from_coefficients(&y, &w).unwrap().scalar();
        for i in 0..times.len() {
            prop_assert!((cov[i] - (qs[i] - qx[i] - qy[i]) / 2.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn transport_equals_redecomposition(seed in any::<u64>(), half in any::<bool>()) {
        let dy = build_kadic(2, 1.0, 7).unwrap();
        let rule = if half { CoarseningRule::HalfLevel } else { CoarseningRule::Mod3 };
        let map = coarsen_by_rule(&dy, rule).unwrap();
        let a = coarsening_matrix(&dy, &map, 7).unwrap();
        let eta = random_coefficients(&dy, 7, seed);
        let theta = transport_coefficients(&eta, &a).unwrap();
        let fine = reconstruct_grid(&eta, &dy, 7).unwrap().remove(0);
        let coarse: Vec<f64> = map.keep_indices[7].iter().map(|&i| fine[i]).collect();
        let direct = decompose_scalar(&coarse, &map.sigma, 7).unwrap();
        for (u, v) in theta.theta.iter().flatten().zip(direct.theta.iter().flatten()) {
            prop_assert!((u - v).abs() <= 1e-9);
        }
    }

    #[test]
    fn sampling_is_deterministic(seed in any::<u64>()) {
        let seq = build_split_example(5, 0.4).unwrap();
        for kind in [LawKind::GaussianIid, LawKind::Rademacher, LawKind::UniformScaled] {
            let law = CoefficientLaw::new(kind);
            let a = sample_coefficients(&law, &seq, 5, seed, 2).unwrap();
            let b = sample_coefficients(&law, &seq, 5, seed, 2).unwrap();
            prop_assert_eq!(
                a.theta.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.theta.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}

#[test]
fn identity_coarsening_keeps_every_point() {
    let seq = build_split_example(5, 0.3).unwrap();
    let map = coarsen(&seq, |_, _| true).unwrap();
    assert_eq!(map.sigma, seq);
}

#[test]
fn b_weights_obey_a_fitted_bound() {
    // fit C on levels 1..=3, then hold it fixed through level 10
    for frac in [0.2, 0.3, 0.4] {
        let seq = build_split_example(10, frac).unwrap();
        let ratio = |n: usize| {
            let w = ab_weights(&seq, n, n, &[1.0]).unwrap();
            let gap = seq.level(n).mesh() - seq.level(n).min_step();
            w.pairs
                .iter()
                .map(|(g, o, c)| {
                    let ((m, _), (mp, _)) = (w.pairs.local(g), w.pairs.local(o));
                    w.b(0, g, c).abs() / (gap * (seq.level(m).mesh() / seq.level(mp).mesh()).sqrt())
                })
                .fold(0.0f64, f64::max)
        };
        let c = (1..=3).map(ratio).fold(0.0f64, f64::max);
        for n in 4..=10 {
            assert!(ratio(n) <= c, "fraction {frac} level {n}");
        }
    }
}

#[test]
fn transported_coefficients_stay_standardized() {
    let dy = build_kadic(2, 1.0, 5).unwrap();
    let map = coarsen_by_rule(&dy, CoarseningRule::Mod3).unwrap();
    let a = coarsening_matrix(&dy, &map, 5).unwrap();
    let slots: Vec<(usize, usize)> = a.iter_rows().map(|(j, l, _)| (j, l)).take(6).collect();
    let trials = 10_000;
    for kind in [LawKind::Rademacher, LawKind::GaussianIid] {
        let law = CoefficientLaw::new(kind);
        let mut samples = vec![Vec::with_capacity(trials); slots.len()];
        for i in 0..trials as u64 {
            let eta = sample_coefficients(&law, &dy, 5, trial_seed(99, i), 1).unwrap();
            let theta = transport_coefficients(&eta, &a).unwrap();
            for (s, &(j, l)) in slots.iter().enumerate() {
                samples[s].push(theta.get(j, l, 0));
            }
        }
        let n = trials as f64;
        for (s, xs) in samples.iter().enumerate() {
            let mean = xs.iter().sum::<f64>() / n;
            let m2 = xs.iter().map(|v| v * v).sum::<f64>() / n;
            let m4 = xs.iter().map(|v| v.powi(4)).sum::<f64>() / n;
            assert!(mean.abs() <= 4.0 / n.sqrt(), "slot {s} mean {mean}");
            assert!((m2 - 1.0).abs() <= 4.0 * ((m4 - m2 * m2) / n).sqrt(), "slot {s} variance {m2}");
            for ys in samples.iter().skip(s + 1) {
                let cross: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| x * y).collect();
                let cm = cross.iter().sum::<f64>() / n;
                let csd = (cross.iter().map(|v| (v - cm).powi(2)).sum::<f64>() / n).sqrt();
                assert!(cm.abs() <= 4.0 * csd / n.sqrt() + 1e-12, "slot {s} correlation {cm}");
            }
        }
    }
}
