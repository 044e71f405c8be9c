use serde_json::json;

use super::{ExperimentConfig, RunOutput, Verdict};
use crate::basis::{
    coarsening_matrix, decompose, haar_integral, inner_product, reconstruct_grid, schauder_eval, transport_coefficients,
    SchauderBasis, SchauderCoefficients, SchauderTriple,
};
use crate::error::{QvError, Result};
use crate::partition::{
    analyze_sequence, build_kadic, build_mod3_coarse, build_split_example, coarsen, coarsen_by_rule, CoarseningMap,
    CoarseningRule, RefiningSequence, DEFAULT_SPLIT_FRACTION,
};
use crate::qv::{ab_weights, covar_from_coefficients, identity_report, qv_direct, qv_from_coefficients, transform_residuals};
use crate::synthesis::{
    sample_coefficients, synth_2d, time_change_weights, trial_seed, CoefficientLaw, LawKind, TimeChange,
};

/// Largest level used for the quadratic checks.
const QV_LEVELS: usize = 8;
/// Largest level used for the basis and transform checks.
const BASIS_LEVELS: usize = 6;

struct Suite {
    verdicts: Vec<Verdict>,
}

impl Suite {
    fn at_most(&mut self, name: String, measured: f64, threshold: f64, detail: &str) {
        self.verdicts.push(Verdict::at_most(name, measured, threshold, detail));
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn named_sequences(depth: usize) -> Result<Vec<(&'static str, RefiningSequence)>> {
    Ok(vec![
        ("dyadic", build_kadic(2, 1.0, depth)?),
        ("triadic", build_kadic(3, 1.0, depth.min(5))?),
        ("split", build_split_example(depth, DEFAULT_SPLIT_FRACTION)?),
        ("mod3", build_mod3_coarse(depth)?),
    ])
}

/// Runs the whole invariant suite; `fault` scales every `a` weight in the
/// oracle-equivalence check.
pub fn verify(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let own = cfg.sequence()?;
    if own.try_level(own.depth() + 1).is_ok() {
        return Err(QvError::Argument("level lookup past the depth succeeded".into()));
    }
    let depth = cfg.n.min(QV_LEVELS);
    let mut seqs = named_sequences(depth)?;
    seqs.push(("configured", own.truncate(cfg.n.min(own.depth()))?));
    let law = CoefficientLaw::new(LawKind::GaussianIid);
    let mut s = Suite { verdicts: Vec::new() };

    for (name, seq) in &seqs {
        let rep = analyze_sequence(seq);
        s.at_most(format!("{name}_refining"), if rep.refining { 0.0 } else { 1.0 }, 0.0, "every point persists");
        let worst = rep.mesh.windows(2).filter(|w| w[1] > w[0]).count();
        s.at_most(format!("{name}_mesh_nonincreasing"), worst as f64, 0.0, "levels with a larger mesh");
    }

    for (name, seq) in &seqs {
        let levels = seq.depth().min(BASIS_LEVELS);
        let basis = SchauderBasis::new(seq, levels)?;
        let els: Vec<_> = basis.iter().collect();
        let mut ortho = 0.0f64;
        let mut mean = 0.0f64;
        for (i, a) in els.iter().enumerate() {
            mean = mean.max(haar_integral(&a.triple).abs());
            for (j, b) in els.iter().enumerate().skip(i) {
                let want = if i == j { 1.0 } else { 0.0 };
                ortho = ortho.max((inner_product(&a.triple, &b.triple) - want).abs());
            }
        }
        s.at_most(format!("{name}_orthonormality"), ortho, 1e-10, "max |<psi_a, psi_b> - delta_ab|");
        s.at_most(format!("{name}_zero_mean"), mean, 1e-12, "max |integral of psi|");
    }

    for (name, seq) in &seqs {
        let big_n = seq.depth();
        let mut err = 0.0f64;
        for i in 0..cfg.trials as u64 {
            let c = sample_coefficients(&law, seq, big_n, trial_seed(cfg.seed, i), 1)?;
            let x = reconstruct_grid(&c, seq, big_n)?;
            let back = decompose(&x, seq, big_n)?;
            for (u, v) in c.theta.iter().flatten().zip(back.theta.iter().flatten()) {
                err = err.max(rel(*u, *v).min((u - v).abs()));
            }
            err = err.max((c.a1[0] - back.a1[0]).abs()).max((c.a0[0] - back.a0[0]).abs());
            let again = reconstruct_grid(&back, seq, big_n)?;
            for (u, v) in x[0].iter().zip(&again[0]) {
                err = err.max(rel(*u, *v).min((u - v).abs()));
            }
        }
        s.at_most(format!("{name}_round_trip"), err, 1e-10, "reconstruct then decompose");
    }

    let factor = 1.0 + cfg.fault.unwrap_or(0.0);
    for (name, seq) in &seqs {
        let big_n = seq.depth();
        let paths = (0..cfg.trials as u64)
            .map(|i| {
                let c = sample_coefficients(&law, seq, big_n, trial_seed(cfg.seed ^ 0x5eed, i), 1)?;
                let x = reconstruct_grid(&c, seq, big_n)?.remove(0);
                Ok((c, x))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut err = 0.0f64;
        for n in 1..=big_n {
            let times = seq.level(n).points().to_vec();
            let mut w = ab_weights(seq, n, n, &times)?;
            if factor != 1.0 {
                w.scale_a(factor);
            }
            for (c, x) in &paths {
                let direct = qv_direct(x, seq, big_n, n, &times)?.scalar();
                let coef = qv_from_coefficients(c, &w)?.scalar();
                for (d, k) in direct.iter().zip(&coef) {
                    err = err.max(rel(*d, *k));
                }
            }
        }
        s.at_most(format!("{name}_oracle_equivalence"), err, 1e-8, "relative gap, coefficient vs direct QV");
    }

    for (name, seq) in &seqs {
        let uniform = (1..=seq.depth()).all(|n| seq.level(n).uniform_step().is_some());
        let mut lo_gap = 0.0f64;
        let mut hi_gap = 0.0f64;
        let mut b_max = 0.0f64;
        let mut a_dev = 0.0f64;
        for n in 1..=seq.depth() {
            let w = ab_weights(seq, n, n, &[seq.horizon()])?;
            let (lo, hi) = (seq.level(n).min_step(), seq.level(n).mesh());
            for &a in &w.a[0] {
                lo_gap = lo_gap.max((lo - a) / lo);
                hi_gap = hi_gap.max((a - hi) / hi);
                a_dev = a_dev.max((a - hi).abs());
            }
            b_max = b_max.max(w.delta[0].iter().fold(0.0, |m, d| m.max(d.abs())));
        }
        s.at_most(format!("{name}_a_lower_bound"), lo_gap, 1e-12, "relative shortfall below the smallest cell");
        s.at_most(format!("{name}_a_upper_bound"), hi_gap, 1e-12, "relative excess over the mesh");
        if uniform {
            s.at_most(format!("{name}_b_vanishes"), b_max, 0.0, "uniform levels");
            s.at_most(format!("{name}_a_equals_mesh"), a_dev, 0.0, "uniform levels");
        }
    }

    let times = cfg.eval_times.clone();
    for (name, seq) in &seqs {
        let rep = identity_report(seq, seq.depth(), &times, None, None)?;
        for &t in &times {
            let s1: Vec<f64> = rep.rows.iter().filter(|r| r.t == t).map(|r| r.s1.abs()).collect();
            let rises = s1.windows(2).filter(|w| w[1] > w[0] * (1.0 + 1e-12)).count();
            s.at_most(format!("{name}_identity_sum_a_t{t}"), rises as f64, 0.0, "levels where |sum a - t| grew");
        }
        if *name == "dyadic" {
            let mut worst = 0.0f64;
            for r in rep.rows.iter().filter(|r| r.t == 1.0) {
                worst = worst.max((r.s1 + 2f64.powi(-(r.level as i32))).abs());
            }
            s.at_most("dyadic_sum_a_exact".into(), worst, 0.0, "sum a(1) = (2^n - 1) / 2^n");
        }
    }

    for (name, seq) in &seqs {
        let big_n = seq.depth().min(6);
        let n = big_n.max(1);
        let times = seq.level(n).points().to_vec();
        let w = ab_weights(seq, n, n, &times)?;
        let x = sample_coefficients(&law, seq, big_n, cfg.seed, 1)?;
        let y = sample_coefficients(&law, seq, big_n, cfg.seed + 1, 1)?;
        let cov = covar_from_coefficients(&x, &y, &w)?.scalar();
        let sum = x.combine(1.0, &y, 1.0)?;
        let xs = reconstruct_grid(&sum, seq, big_n)?.remove(0);
        let qs = qv_direct(&xs, seq, big_n, n, &times)?;
        let (qx, qy) = (qv_from_coefficients(&x, &w)?, qv_from_coefficients(&y, &w)?);
        let dev = (0..times.len())
            .map(|i| (cov[i] - (qs.scalar()[i] - qx.scalar()[i] - qy.scalar()[i]) / 2.0).abs())
            .fold(0.0, f64::max);
        s.at_most(format!("{name}_polarization"), dev, 1e-9, "covariation vs halved QV differences");
        let bad = [&qs, &qx, &qy].iter().filter(|c| c.check(1e-10).is_err()).count();
        let both = qv_from_coefficients(&SchauderCoefficients::stack(&[x.clone(), y.clone()])?, &w)?;
        let bad = bad + usize::from(both.check(1e-10).is_err());
        s.at_most(format!("{name}_curve_shape"), bad as f64, 0.0, "curves failing zero start, monotonicity or PSD");
    }

    let dy = build_kadic(2, 1.0, BASIS_LEVELS + 1)?;
    for (label, map) in [
        ("mod3", coarsen_by_rule(&dy, CoarseningRule::Mod3)?),
        ("identity", coarsen(&dy, |_, _| true)?),
    ] {
        let a = coarsening_matrix(&dy, &map, BASIS_LEVELS + 1)?;
        let r = transform_residuals(&a);
        s.at_most(format!("transform_{label}_row_norm"), r.eq1, 1e-8, "max |sum A^2 - 1|");
        s.at_most(format!("transform_{label}_row_orthogonality"), r.eq2, 1e-8, "max |sum A A'|");
    }
    let map = coarsen_by_rule(&dy, CoarseningRule::Mod3)?;
    let a = coarsening_matrix(&dy, &map, dy.depth())?;
    let eta = sample_coefficients(&law, &dy, dy.depth(), cfg.seed, 1)?;
    let theta = transport_coefficients(&eta, &a)?;
    let fine = reconstruct_grid(&eta, &dy, dy.depth())?.remove(0);
    let coarse: Vec<f64> = map.keep_indices[dy.depth()].iter().map(|&i| fine[i]).collect();
    let direct = decompose(&[coarse], &map.sigma, dy.depth())?;
    let dev = theta
        .theta
        .iter()
        .flatten()
        .zip(direct.theta.iter().flatten())
        .fold(0.0f64, |m, (u, v)| m.max((u - v).abs()));
    s.at_most("transport_consistency".into(), dev, 1e-9, "transported vs redecomposed coefficients");
    let keep = vec![vec![0, 1], vec![0, 2], vec![0, 1, 4]];
    let small = build_kadic(2, 1.0, 2)?;
    let map = CoarseningMap::from_keep_indices(&small, keep)?;
    let a = coarsening_matrix(&small, &map, 2)?;
    let st = SchauderTriple::new(0.0, 0.25, 1.0)?;
    let e00 = SchauderTriple::new(0.0, 0.5, 1.0)?;
    let e10 = SchauderTriple::new(0.0, 0.25, 0.5)?;
    let want = [1.0 / 3f64.sqrt(), (2.0f64 / 3.0).sqrt()];
    let got = [a.entry(1, 0, 0, 0), a.entry(1, 0, 1, 0)];
    let recomputed = [inner_product(&st, &e00), inner_product(&st, &e10)];
    let via_tents = [
        st.coefficient(schauder_eval(&e00, 0.0), schauder_eval(&e00, 0.25), schauder_eval(&e00, 1.0)),
        st.coefficient(schauder_eval(&e10, 0.0), schauder_eval(&e10, 0.25), schauder_eval(&e10, 1.0)),
    ];
    let dev = (0..2)
        .map(|i| (got[i] - want[i]).abs().max((recomputed[i] - want[i]).abs()).max((via_tents[i] - want[i]).abs()))
        .fold(0.0, f64::max);
    s.at_most("transform_row_example".into(), dev, 1e-10, "row of the sigma triple (0, 1/4, 1)");

    let rad = CoefficientLaw::new(LawKind::Rademacher);
    let dy_n = build_kadic(2, 1.0, depth)?;
    let w = ab_weights(&dy_n, depth, depth, &[1.0])?;
    let want = 1.0 - 2f64.powi(-(depth as i32));
    let mut worst = 0.0f64;
    for i in 0..cfg.trials.min(20) as u64 {
        let c = sample_coefficients(&rad, &dy_n, depth, trial_seed(cfg.seed, i), 1)?;
        worst = worst.max((qv_from_coefficients(&c, &w)?.scalar()[0] - want).abs());
    }
    s.at_most("rademacher_determinism".into(), worst, 0.0, "QV(1) = (2^n - 1) / 2^n for every seed");

    let schied = CoefficientLaw::new(LawKind::DeterministicSchied);
    let mut worst = 0.0f64;
    for n in (2..=depth).step_by(2) {
        let c = sample_coefficients(&schied, &dy_n, n, 0, 1)?;
        let w = ab_weights(&dy_n, n, n, &[1.0])?;
        let want = 4.0 / 3.0 * (1.0 - 4f64.powi(-((n / 2) as i32)));
        worst = worst.max((qv_from_coefficients(&c, &w)?.scalar()[0] - want).abs());
    }
    s.at_most("alternating_closed_form".into(), worst, 1e-12, "even levels, 4/3 (1 - 4^-N)");

    let w = time_change_weights(&dy_n, &TimeChange::identity(1.0), depth)?;
    let dev = w.iter().flatten().fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
    s.at_most("identity_time_change_weights".into(), dev, 1e-12, "w = 1 for phi = identity");

    let c2 = synth_2d(&dy_n, depth, &rad, &rad, cfg.seed)?;
    let m2 = qv_from_coefficients(&c2, &ab_weights(&dy_n, depth, depth, &[1.0])?)?;
    let dev = (m2.entry(0, 0, 0) - want).abs().max((m2.entry(0, 1, 1) - want).abs());
    s.at_most("two_dim_diagonal".into(), dev, 0.0, "independent Rademacher coordinates");

    let failed: Vec<&str> = s.verdicts.iter().filter(|v| !v.passed).map(|v| v.name.as_str()).collect();
    let summary = json!({ "checks": s.verdicts.len(), "failed": failed });
    Ok(RunOutput {
        experiment: cfg.experiment,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        files: Vec::new(),
        verdicts: s.verdicts,
        summary,
    })
}
