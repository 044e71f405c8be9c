use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use super::output::Table;
use super::{mean_var, ExperimentConfig, RunOutput, Verdict};
use crate::basis::{reconstruct, reconstruct_grid};
use crate::error::{arg_err, Result};
use crate::partition::RefiningSequence;
use crate::qv::{ab_weights, qv_direct};
use crate::sum::csum;
use crate::synthesis::{sample_coefficients, trial_seed, CoefficientLaw, LawKind, TimeChange};

/// Added to every statistical band to absorb rounding in the per-trial sums.
pub const ROUNDING_FLOOR: f64 = 1e-12;

/// Monte Carlo statistics of `[x]_{π^n}(t)` at one level and time.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct LevelStats {
    pub level: usize,
    pub t: f64,
    pub mean: f64,
    pub variance: f64,
    pub se: f64,
    /// Exact finite-level expectation `Σ a w + a_aff Var(x(T)) / T`.
    pub expectation: f64,
    /// Limit value `φ(t)`.
    pub target: f64,
}

fn phi_of(law: &CoefficientLaw) -> TimeChange {
    law.time_change.clone().unwrap_or_else(|| TimeChange::identity(1.0))
}

/// Exact `E [x]_{π^n}(t)` for independent centred coefficients with `E θ² = w`.
pub(crate) fn expected_qv(seq: &RefiningSequence, law: &CoefficientLaw, n: usize, times: &[f64]) -> Result<Vec<f64>> {
    let w = ab_weights(seq, n, n, times)?;
    let phi = phi_of(law);
    let var_w = match &law.time_change {
        Some(tc) => Some(crate::synthesis::time_change_weights(seq, tc, n)?),
        None => None,
    };
    let endpoint_var = match law.kind {
        LawKind::GaussianIid => phi.eval(seq.horizon()),
        _ => 0.0,
    };
    Ok((0..times.len())
        .map(|ti| {
            let mut terms: Vec<f64> = (0..w.pairs.len())
                .map(|g| {
                    let (m, k) = w.pairs.local(g);
                    w.a[ti][g] * var_w.as_ref().map_or(1.0, |vw| vw[m][k])
                })
                .collect();
            terms.push(w.a_affine[ti] * endpoint_var / seq.horizon());
            csum(terms)
        })
        .collect())
}

fn samples_per_trial<F, T>(cfg: &ExperimentConfig, f: F) -> Result<Vec<T>>
where
    F: Fn(u64) -> Result<T> + Sync,
    T: Send,
{
    (0..cfg.trials as u64)
        .into_par_iter()
        .map(|i| f(trial_seed(cfg.seed, i)))
        .collect()
}

fn is_random(law: &CoefficientLaw) -> bool {
    law.kind.declared_moments().is_some()
}

/// Mean, variance and standard error of `[x]_{π^n}(t)` across seeded trials.
pub fn mc_qv(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let seq = cfg.sequence()?;
    let law = cfg.coefficient_law()?;
    let big_n = cfg.n;
    let times = cfg.eval_times.clone();
    let levels = cfg.levels.clone();
    if levels.contains(&0) {
        return arg_err("quadratic variation levels start at 1");
    }
    let per_trial = samples_per_trial(cfg, |seed| {
        let c = sample_coefficients(&law, &seq, big_n, seed, 1)?;
        let x = reconstruct_grid(&c, &seq, big_n)?.remove(0);
        levels
            .iter()
            .map(|&n| Ok(qv_direct(&x, &seq, big_n, n, &times)?.scalar()))
            .collect::<Result<Vec<_>>>()
    })?;
    let phi = phi_of(&law);
    let mut stats = Vec::new();
    for (li, &n) in levels.iter().enumerate() {
        let expect = expected_qv(&seq, &law, n, &times)?;
        for (ti, &t) in times.iter().enumerate() {
            let xs: Vec<f64> = per_trial.iter().map(|tr| tr[li][ti]).collect();
            let (mean, variance) = mean_var(&xs);
            stats.push(LevelStats {
                level: n,
                t,
                mean,
                variance,
                se: (variance / cfg.trials as f64).sqrt(),
                expectation: if is_random(&law) { expect[ti] } else { mean },
                target: phi.eval(t),
            });
        }
    }

    let mut verdicts = Vec::new();
    let deepest = levels.iter().copied().max().unwrap_or(big_n);
    for s in &stats {
        if is_random(&law) {
            verdicts.push(Verdict::at_most(
                format!("mean_vs_expectation_n{}_t{}", s.level, s.t),
                (s.mean - s.expectation).abs(),
                3.0 * s.se + ROUNDING_FLOOR * s.expectation.abs().max(1.0),
                "3 standard errors around the exact finite-level expectation",
            ));
        }
        if s.level == deepest && matches!(law.kind, LawKind::GaussianIid) {
            verdicts.push(Verdict::at_most(
                format!("mean_vs_limit_n{}_t{}", s.level, s.t),
                (s.mean - s.target).abs(),
                3.0 * s.se,
                "3 standard errors around phi(t)",
            ));
        }
    }
    for &t in &times {
        let series: Vec<&LevelStats> = stats.iter().filter(|s| s.t == t && s.level >= 4).collect();
        for w in series.windows(2) {
            if w[1].level == w[0].level + 1 {
                verdicts.push(Verdict::at_most(
                    format!("variance_nonincreasing_n{}_t{}", w[1].level, t),
                    w[1].variance,
                    1.2 * w[0].variance + 1e-15,
                    "20% slack over the previous level",
                ));
            }
        }
    }

    let mut table = Table::new(cfg.metadata(), &["level", "t", "mean", "variance", "se", "expectation", "target"])
        .with_meta("method", "direct")
        .with_meta("law", law.kind.name())
        .with_meta("trials", cfg.trials);
    for s in &stats {
        table.push(vec![s.level as f64, s.t, s.mean, s.variance, s.se, s.expectation, s.target]);
    }
    Ok(RunOutput {
        experiment: cfg.experiment,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        files: vec![("mc_qv.csv".into(), table.to_csv())],
        verdicts,
        summary: json!({ "law": law.kind.name(), "trials": cfg.trials, "stats": stats }),
    })
}

/// Empirical `E[x(s) x(t)]` on the eval grid against `s ∧ t`.
pub fn mc_covariance(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let seq = cfg.sequence()?;
    let law = cfg.coefficient_law()?;
    if law.time_change.is_some() {
        return arg_err("covariance study needs a law with unit weights");
    }
    let grid = cfg.eval_times.clone();
    let big_n = cfg.n;
    let paths = samples_per_trial(cfg, |seed| {
        let c = sample_coefficients(&law, &seq, big_n, seed, 1)?;
        Ok(reconstruct(&c, &seq, &grid, big_n)?.remove(0))
    })?;
    let mut table = Table::new(cfg.metadata(), &["s", "t", "c_hat", "se", "target"])
        .with_meta("law", law.kind.name())
        .with_meta("trials", cfg.trials);
    let mut cells = Vec::new();
    for (i, &s) in grid.iter().enumerate() {
        for (j, &t) in grid.iter().enumerate() {
            let prods: Vec<f64> = paths.iter().map(|p| p[i] * p[j]).collect();
            let (mean, var) = mean_var(&prods);
            let se = (var / cfg.trials as f64).sqrt();
            let target = s.min(t);
            table.push(vec![s, t, mean, se, target]);
            cells.push((s, t, mean, se, target));
        }
    }
    let max_dev = cells.iter().map(|c| (c.2 - c.4).abs()).fold(0.0, f64::max);
    let max_z = cells
        .iter()
        .filter(|c| c.3 > 0.0)
        .map(|c| (c.2 - c.4).abs() / c.3)
        .fold(0.0, f64::max);
    let mut verdicts = Vec::new();
    for c in cells.iter().filter(|c| c.0 == 0.0 || c.1 == 0.0) {
        verdicts.push(Verdict::at_most(format!("zero_at_origin_s{}_t{}", c.0, c.1), c.2.abs(), 0.0, "x(0) = 0"));
    }
    for (s, t) in [(1.0, 1.0), (0.3, 0.7)] {
        if let Some(c) = cells.iter().find(|c| c.0 == s && c.1 == t) {
            verdicts.push(Verdict::at_most(format!("cov_s{s}_t{t}"), (c.2 - c.4).abs(), 3.0 * c.3, "3 standard errors"));
        }
    }
    verdicts.push(Verdict::at_most("max_z_over_grid", max_z, 4.0, "largest |C - s∧t| / SE over all cells"));
    Ok(RunOutput {
        experiment: cfg.experiment,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        files: vec![("mc_cov.csv".into(), table.to_csv())],
        verdicts,
        summary: json!({
            "max_abs_deviation": max_dev,
            "max_z": max_z,
            "cells": cells.iter().map(|c| json!({"s": c.0, "t": c.1, "c_hat": c.2, "se": c.3, "target": c.4})).collect::<Vec<_>>(),
        }),
    })
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct CoarseningLevel {
    pub level: usize,
    pub median_sup_diff: f64,
    pub mean_sup_diff: f64,
    pub max_sup_diff: f64,
    pub mean_qv_pi_at_t: f64,
    pub se_qv_pi_at_t: f64,
    pub mean_qv_sigma_at_t: f64,
    pub se_qv_sigma_at_t: f64,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Quadratic variation of one draw along `π` and along its coarsening `σ`,
/// compared on the `π^n` grid.
pub fn mc_coarsening_invariance(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let seq = cfg.sequence()?;
    let map = cfg.coarsening_of(&seq)?;
    mc_coarsening_with(cfg, &seq, &map)
}

pub(crate) fn mc_coarsening_with(
    cfg: &ExperimentConfig,
    seq: &RefiningSequence,
    map: &crate::partition::CoarseningMap,
) -> Result<RunOutput> {
    if !map.is_coarsening_of(seq) {
        return arg_err("sigma is not a coarsening of pi");
    }
    let law = cfg.coefficient_law()?;
    let big_n = cfg.n;
    let levels = cfg.levels.clone();
    if levels.contains(&0) {
        return arg_err("quadratic variation levels start at 1");
    }
    let horizon = seq.horizon();
    let per_trial = samples_per_trial(cfg, |s| {
        let c = sample_coefficients(&law, seq, big_n, s, 1)?;
        let x = reconstruct_grid(&c, seq, big_n)?.remove(0);
        let xs: Vec<f64> = map.keep_indices[big_n].iter().map(|&i| x[i]).collect();
        levels
            .iter()
            .map(|&n| {
                let times = seq.level(n).points();
                let a = qv_direct(&x, seq, big_n, n, times)?.scalar();
                let b = qv_direct(&xs, &map.sigma, big_n, n, times)?.scalar();
                let sup = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                Ok((sup, *a.last().unwrap(), *b.last().unwrap()))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let trials = cfg.trials as f64;
    let rows: Vec<CoarseningLevel> = levels
        .iter()
        .enumerate()
        .map(|(li, &n)| {
            let sups: Vec<f64> = per_trial.iter().map(|t| t[li].0).collect();
            let (qa, va) = mean_var(&per_trial.iter().map(|t| t[li].1).collect::<Vec<_>>());
            let (qb, vb) = mean_var(&per_trial.iter().map(|t| t[li].2).collect::<Vec<_>>());
            CoarseningLevel {
                level: n,
                median_sup_diff: median(&sups),
                mean_sup_diff: mean_var(&sups).0,
                max_sup_diff: sups.iter().copied().fold(0.0, f64::max),
                mean_qv_pi_at_t: qa,
                se_qv_pi_at_t: (va / trials).sqrt(),
                mean_qv_sigma_at_t: qb,
                se_qv_sigma_at_t: (vb / trials).sqrt(),
            }
        })
        .collect();

    let identity = map.sigma == *seq;
    let mut verdicts = Vec::new();
    if identity {
        let worst = rows.iter().map(|r| r.max_sup_diff).fold(0.0, f64::max);
        verdicts.push(Verdict::at_most("identity_coarsening_zero", worst, 0.0, "sigma = pi"));
    } else if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        if rows.len() > 1 {
            verdicts.push(Verdict::at_most(
                "sup_difference_decays",
                last.median_sup_diff,
                first.median_sup_diff,
                format!("median at level {} vs level {}", last.level, first.level),
            ));
        }
    }
    if matches!(law.kind, LawKind::GaussianIid) {
        if let Some(last) = rows.last() {
            let target = phi_of(&law).eval(horizon);
            verdicts.push(Verdict::at_most("mean_qv_pi_at_T", (last.mean_qv_pi_at_t - target).abs(), 3.0 * last.se_qv_pi_at_t, "3 standard errors"));
            verdicts.push(Verdict::at_most(
                "mean_qv_sigma_at_T",
                (last.mean_qv_sigma_at_t - target).abs(),
                3.0 * last.se_qv_sigma_at_t,
                "3 standard errors",
            ));
        }
    }
    let mut table = Table::new(
        cfg.metadata(),
        &["level", "median_sup_diff", "mean_sup_diff", "max_sup_diff", "mean_qv_pi_T", "se_qv_pi_T", "mean_qv_sigma_T", "se_qv_sigma_T"],
    )
    .with_meta("law", law.kind.name())
    .with_meta("trials", cfg.trials)
    .with_meta("coarsening", format!("{:?}", cfg.coarsening).to_lowercase());
    for r in &rows {
        table.push(vec![
            r.level as f64,
            r.median_sup_diff,
            r.mean_sup_diff,
            r.max_sup_diff,
            r.mean_qv_pi_at_t,
            r.se_qv_pi_at_t,
            r.mean_qv_sigma_at_t,
            r.se_qv_sigma_at_t,
        ]);
    }
    Ok(RunOutput {
        experiment: cfg.experiment,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        files: vec![("mc_coarsen.csv".into(), table.to_csv())],
        verdicts,
        summary: json!({ "law": law.kind.name(), "identity": identity, "levels": rows }),
    })
}
