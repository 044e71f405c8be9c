use serde_json::json;

use super::output::{path_table, Table};
use super::{ExperimentConfig, ExperimentId, RunOutput, Verdict};
use crate::basis::reconstruct_grid;
use crate::error::{QvError, Result};
use crate::qv::{ab_weights, qv_direct, qv_from_coefficients};
use crate::synthesis::{sample_coefficients, LawKind};

/// Below this the cumulative curve counts as exactly linear.
pub const LINEARITY_TOL: f64 = 1e-10;
/// Oracle-equivalence tolerance; the figure-1 curves must differ by 1e3 times this.
pub const ORACLE_TOL: f64 = 1e-8;

/// Path and paired QV curves for one of the four figures.
pub fn run_figure(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let id = cfg.experiment;
    if !id.is_figure() {
        return Err(QvError::Unknown {
            what: "figure",
            name: id.to_string(),
        });
    }
    let seq = cfg.sequence()?;
    let big_n = cfg.n;
    let n = cfg.levels.last().copied().unwrap_or(big_n);
    let law = cfg.coefficient_law()?;
    let coeffs = sample_coefficients(&law, &seq, big_n, cfg.seed, 1)?;
    let x = reconstruct_grid(&coeffs, &seq, big_n)?.remove(0);
    let map = cfg.coarsening_of(&seq)?;
    let xs: Vec<f64> = map.keep_indices[big_n].iter().map(|&i| x[i]).collect();

    let times = seq.level(n).points().to_vec();
    let along_pi = qv_direct(&x, &seq, big_n, n, &times)?.scalar();
    let along_sigma = qv_direct(&xs, &map.sigma, big_n, n, &times)?.scalar();
    let with_reference = matches!(id, ExperimentId::Fig3 | ExperimentId::Fig4);

    let meta = cfg.metadata();
    let path = path_table(seq.level(big_n).points(), std::slice::from_ref(&x), meta.clone()).with_meta("level", big_n);
    let mut header = vec!["t", "qv_pi", "qv_sigma"];
    if with_reference {
        header.push("reference");
    }
    let mut qv = Table::new(meta, &header)
        .with_meta("level", n)
        .with_meta("method", "direct")
        .with_meta("coarsening", format!("{:?}", cfg.coarsening).to_lowercase());
    for (i, &t) in times.iter().enumerate() {
        let mut row = vec![t, along_pi[i], along_sigma[i]];
        if with_reference {
            row.push(t);
        }
        qv.push(row);
    }

    let w = ab_weights(&seq, n, n, &[seq.horizon()])?;
    let coef_end = qv_from_coefficients(&coeffs, &w)?.scalar()[0];
    let direct_end = *along_pi.last().unwrap();
    let sigma_end = *along_sigma.last().unwrap();
    let mut verdicts = vec![Verdict::at_most(
        "coefficient_matches_direct_at_T",
        (coef_end - direct_end).abs() / direct_end.abs().max(1e-300),
        ORACLE_TOL,
        "relative gap between the two QV routes along pi at t = T",
    )];

    let unit_squares = matches!(law.kind, LawKind::Rademacher | LawKind::Custom { .. })
        && coeffs.theta.iter().flatten().all(|v| v * v == 1.0)
        && coeffs.a1[0] == 0.0;
    let mut linearity = None;
    if let (Some(h), true) = (seq.level(n).uniform_step(), unit_squares) {
        let slope = (1.0 - h) / seq.horizon();
        verdicts.push(Verdict::at_most(
            "qv_at_T_equals_slope",
            (coef_end - slope * seq.horizon()).abs(),
            0.0,
            format!("expected {slope} from the a-weight count"),
        ));
        let dev = times
            .iter()
            .zip(&along_pi)
            .map(|(t, v)| (v - slope * t).abs())
            .fold(0.0, f64::max);
        linearity = Some(dev);
        verdicts.push(Verdict::at_most(
            "linear_in_grid",
            dev,
            LINEARITY_TOL,
            "max deviation of the pi curve from slope * t over the level-n grid",
        ));
    }
    if id == ExperimentId::Fig1 {
        verdicts.push(Verdict::above(
            "curves_differ_at_T",
            (direct_end - sigma_end).abs(),
            1e3 * ORACLE_TOL,
            "pi and sigma quadratic variations at t = T",
        ));
    }

    let sidecar = json!({
        "figure": id.as_str(),
        "panels": [
            {"file": format!("{id}_path.csv"), "x": "t", "y": ["x1"], "x_label": "t", "y_label": "x(t)", "series": ["path"]},
            {"file": format!("{id}_qv.csv"), "x": "t",
             "y": if with_reference { vec!["qv_pi", "qv_sigma", "reference"] } else { vec!["qv_pi", "qv_sigma"] },
             "x_label": "t", "y_label": format!("quadratic variation at level {n}"),
             "series": if with_reference {
                 vec![format!("along {}", cfg.sequence.id()), "along coarsening".into(), "y = t".into()]
             } else {
                 vec![format!("along {}", cfg.sequence.id()), "along coarsening".into()]
             }}
        ],
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
    });
    let summary = json!({
        "level": n,
        "qv_pi_at_T": direct_end,
        "qv_sigma_at_T": sigma_end,
        "qv_pi_at_T_coefficient": coef_end,
        "difference_at_T": direct_end - sigma_end,
        "max_linearity_deviation": linearity,
    });
    Ok(RunOutput {
        experiment: id,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        files: vec![
            (format!("{id}_path.csv"), path.to_csv()),
            (format!("{id}_qv.csv"), qv.to_csv()),
            (format!("{id}_plot.json"), serde_json::to_string_pretty(&sidecar)? + "\n"),
        ],
        verdicts,
        summary,
    })
}
