use serde::Serialize;
use serde_json::json;

use super::output::Table;
use super::{mean_var, ExperimentConfig, RunOutput, Verdict};
use crate::basis::{reconstruct_grid, SchauderCoefficients};
use crate::error::{QvError, Result};
use crate::partition::{analyze_sequence, RefiningSequence};
use crate::synthesis::{sample_coefficients, trial_seed};

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct IncrementRow {
    pub level: usize,
    pub mean_sup: f64,
    pub max_sup: f64,
    pub max_bound: f64,
    pub mesh: f64,
}

/// `sup_t |x^{n+1}(t) - x^n(t)|` for each requested `n`. The difference is
/// linear on every cell of `π^{n+1}`, so the sup is attained on its points.
pub fn level_increments(coeffs: &SchauderCoefficients, seq: &RefiningSequence, levels: &[usize]) -> Result<Vec<f64>> {
    levels
        .iter()
        .map(|&n| {
            let fine = reconstruct_grid(&coeffs.component(0), seq, n + 1)?.remove(0);
            let coarse = reconstruct_grid(&coeffs.component(0), seq, n)?.remove(0);
            let lvl = seq.level(n);
            Ok(seq
                .level(n + 1)
                .points()
                .iter()
                .zip(&fine)
                .map(|(&t, &v)| (v - lvl.interpolate(&coarse, t)).abs())
                .fold(0.0, f64::max))
        })
        .collect()
}

/// `((M - 1) / 2) |π^n|^{1/2} max_k |θ_{n,k}|` with `M` the branching bound.
pub fn increment_bound(coeffs: &SchauderCoefficients, seq: &RefiningSequence, n: usize, branching: usize) -> f64 {
    let max_theta = coeffs.theta[n].iter().fold(0.0f64, |a, v| a.max(v.abs()));
    (branching.saturating_sub(1)) as f64 / 2.0 * seq.level(n).mesh().sqrt() * max_theta
}

/// Decay of the level-to-level increments of synthesized paths.
pub fn increment_sup(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let seq = cfg.sequence()?;
    let law = cfg.coefficient_law()?;
    if let Some(&bad) = cfg.levels.iter().find(|&&l| l + 1 > cfg.n) {
        return Err(QvError::Level {
            requested: bad + 1,
            available: cfg.n,
        });
    }
    let branching = analyze_sequence(&seq).branching_bound_m;
    let trials = if law.kind.declared_moments().is_some() { cfg.trials } else { 1 };
    let per_trial = (0..trials as u64)
        .map(|i| {
            let c = sample_coefficients(&law, &seq, cfg.n, trial_seed(cfg.seed, i), 1)?;
            let h = level_increments(&c, &seq, &cfg.levels)?;
            let b: Vec<f64> = cfg.levels.iter().map(|&n| increment_bound(&c, &seq, n, branching)).collect();
            Ok((h, b))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut worst_ratio = 0.0f64;
    for (li, &n) in cfg.levels.iter().enumerate() {
        let hs: Vec<f64> = per_trial.iter().map(|t| t.0[li]).collect();
        for t in &per_trial {
            if t.1[li] > 0.0 {
                worst_ratio = worst_ratio.max(t.0[li] / t.1[li]);
            } else if t.0[li] > 0.0 {
                worst_ratio = f64::INFINITY;
            }
        }
        rows.push(IncrementRow {
            level: n,
            mean_sup: mean_var(&hs).0,
            max_sup: hs.iter().copied().fold(0.0, f64::max),
            max_bound: per_trial.iter().map(|t| t.1[li]).fold(0.0, f64::max),
            mesh: seq.level(n).mesh(),
        });
    }
    let fit: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.mean_sup > 0.0)
        .map(|r| (r.level as f64, r.mean_sup.ln()))
        .collect();
    let slope = least_squares_slope(&fit);

    let mut verdicts = vec![Verdict::at_most(
        "sup_within_bound",
        worst_ratio,
        1.0 + 1e-12,
        format!("largest ratio of increment to bound, branching {branching}"),
    )];
    if let Some(s) = slope {
        verdicts.push(Verdict::at_most("log_increment_slope_negative", s, 0.0, "least-squares slope of ln H_n in n"));
    }
    let mut table = Table::new(cfg.metadata(), &["level", "mean_sup", "max_sup", "bound", "mesh"])
        .with_meta("law", law.kind.name())
        .with_meta("trials", trials);
    for r in &rows {
        table.push(vec![r.level as f64, r.mean_sup, r.max_sup, r.max_bound, r.mesh]);
    }
    Ok(RunOutput {
        experiment: cfg.experiment,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        files: vec![("increments.csv".into(), table.to_csv())],
        verdicts,
        summary: json!({ "branching": branching, "log_slope": slope, "levels": rows }),
    })
}

fn least_squares_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}
