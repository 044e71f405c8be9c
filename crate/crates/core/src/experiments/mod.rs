//! Seeded, reproducible experiment drivers.
//!
//! Every run is described by an [`ExperimentConfig`]; its canonical JSON form
//! is hashed and the hash is stamped into every output file.

mod figures;
mod increments;
mod monte_carlo;
pub mod output;
mod verify;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{arg_err, QvError, Result};
use crate::partition::{
    build_kadic, build_mod3_coarse, build_split_example, coarsen_by_rule, CoarseningMap, CoarseningRule,
    RefiningSequence, SequenceJson, DEFAULT_SPLIT_FRACTION,
};
use crate::synthesis::{CoefficientLaw, LawSpec};

pub use figures::{run_figure, LINEARITY_TOL, ORACLE_TOL};
pub use increments::increment_sup;
pub use monte_carlo::{mc_coarsening_invariance, mc_covariance, mc_qv, LevelStats};
pub use verify::verify;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    Fig1,
    Fig2,
    Fig3,
    Fig4,
    McQv,
    McCov,
    McCoarsen,
    Increments,
    Verify,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 9] = [
        ExperimentId::Fig1,
        ExperimentId::Fig2,
        ExperimentId::Fig3,
        ExperimentId::Fig4,
        ExperimentId::McQv,
        ExperimentId::McCov,
        ExperimentId::McCoarsen,
        ExperimentId::Increments,
        ExperimentId::Verify,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentId::Fig1 => "fig1",
            ExperimentId::Fig2 => "fig2",
            ExperimentId::Fig3 => "fig3",
            ExperimentId::Fig4 => "fig4",
            ExperimentId::McQv => "mc_qv",
            ExperimentId::McCov => "mc_cov",
            ExperimentId::McCoarsen => "mc_coarsen",
            ExperimentId::Increments => "increments",
            ExperimentId::Verify => "verify",
        }
    }

    pub fn is_figure(self) -> bool {
        matches!(self, ExperimentId::Fig1 | ExperimentId::Fig2 | ExperimentId::Fig3 | ExperimentId::Fig4)
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = QvError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|id| id.as_str() == norm)
            .ok_or(QvError::Unknown {
                what: "experiment",
                name: s.into(),
            })
    }
}

/// Which partition sequence an experiment runs on; built with `N` levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SequenceSpec {
    Dyadic,
    Kadic { k: usize },
    Split {
        #[serde(default = "default_fraction")]
        fraction: f64,
    },
    Mod3,
    File { path: String },
}

fn default_fraction() -> f64 {
    DEFAULT_SPLIT_FRACTION
}

impl SequenceSpec {
    pub fn id(&self) -> String {
        match self {
            SequenceSpec::Dyadic => "dyadic".into(),
            SequenceSpec::Kadic { k } => format!("kadic{k}"),
            SequenceSpec::Split { fraction } => format!("split{fraction}"),
            SequenceSpec::Mod3 => "mod3".into(),
            SequenceSpec::File { path } => format!("file:{path}"),
        }
    }

    pub fn build(&self, levels: usize) -> Result<RefiningSequence> {
        match self {
            SequenceSpec::Dyadic => build_kadic(2, 1.0, levels),
            SequenceSpec::Kadic { k } => build_kadic(*k, 1.0, levels),
            SequenceSpec::Split { fraction } => build_split_example(levels, *fraction),
            SequenceSpec::Mod3 => build_mod3_coarse(levels),
            SequenceSpec::File { path } => {
                let text = std::fs::read_to_string(path)?;
                let doc: SequenceJson = serde_json::from_str(&text)?;
                let seq = RefiningSequence::from_json(&doc)?;
                if seq.depth() < levels {
                    return Err(QvError::Level {
                        requested: levels,
                        available: seq.depth(),
                    });
                }
                seq.truncate(levels)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub sequence: SequenceSpec,
    pub law: LawSpec,
    /// Truncation level `N` of the coefficient expansion.
    #[serde(rename = "N")]
    pub n: usize,
    /// Levels `n` at which quadratic variation is evaluated.
    pub levels: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub eval_times: Vec<f64>,
    pub coarsening: CoarseningRule,
    /// Relative perturbation of every `a` weight, for exercising `verify`.
    pub fault: Option<f64>,
    pub out_dir: Option<String>,
}

fn law(kind: &str, weights: Option<&str>) -> LawSpec {
    LawSpec {
        kind: kind.into(),
        seed: 0,
        n: 12,
        weights: weights.map(str::to_string),
        value: None,
    }
}

fn constant_law() -> LawSpec {
    LawSpec {
        value: Some(1.0),
        ..law("custom", None)
    }
}

impl ExperimentConfig {
    /// Defaults matching the figure captions and the Monte Carlo studies.
    pub fn defaults(id: ExperimentId) -> Self {
        let base = Self {
            experiment: id,
            sequence: SequenceSpec::Dyadic,
            law: law("gaussian_iid", None),
            n: 12,
            levels: vec![12],
            trials: 1,
            seed: 20240611,
            eval_times: vec![0.25, 0.5, 1.0],
            coarsening: CoarseningRule::Mod3,
            fault: None,
            out_dir: None,
        };
        match id {
            ExperimentId::Fig1 => Self { law: constant_law(), ..base },
            ExperimentId::Fig2 => Self { law: law("rademacher", None), ..base },
            ExperimentId::Fig3 => Self {
                sequence: SequenceSpec::Split { fraction: DEFAULT_SPLIT_FRACTION },
                law: constant_law(),
                ..base
            },
            ExperimentId::Fig4 => Self {
                sequence: SequenceSpec::Split { fraction: DEFAULT_SPLIT_FRACTION },
                law: law("rademacher", None),
                ..base
            },
            ExperimentId::McQv => Self {
                n: 10,
                levels: (4..=10).collect(),
                trials: 400,
                ..base
            },
            ExperimentId::McCov => Self {
                n: 10,
                levels: vec![10],
                trials: 2000,
                eval_times: vec![0.0, 0.3, 0.5, 0.7, 1.0],
                ..base
            },
            ExperimentId::McCoarsen => Self {
                n: 10,
                levels: (4..=10).collect(),
                trials: 200,
                law: law("rademacher", None),
                ..base
            },
            ExperimentId::Increments => Self {
                n: 12,
                levels: (0..12).collect(),
                trials: 50,
                ..base
            },
            ExperimentId::Verify => Self {
                n: 8,
                levels: (1..=8).collect(),
                trials: 100,
                ..base
            },
        }
    }

    /// Overlays a (possibly partial) JSON object on the defaults of its
    /// experiment, or of `fallback` when the document names none.
    pub fn from_json_overlay(text: &str, fallback: Option<ExperimentId>) -> Result<Self> {
        let doc: serde_json::Value = serde_json::from_str(text)?;
        let obj = doc
            .as_object()
            .ok_or_else(|| QvError::Argument("config must be a JSON object".into()))?;
        let id = match obj.get("experiment").and_then(|v| v.as_str()) {
            Some(s) => s.parse()?,
            None => fallback.ok_or_else(|| QvError::Argument("config names no experiment".into()))?,
        };
        let mut merged = serde_json::to_value(Self::defaults(id))?;
        for (k, v) in obj {
            merged[k] = v.clone();
        }
        let cfg: Self = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, fallback: Option<ExperimentId>) -> Result<Self> {
        Self::from_json_overlay(&std::fs::read_to_string(path)?, fallback)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return arg_err("N must be at least 1");
        }
        if self.trials < 1 {
            return arg_err("trials must be at least 1");
        }
        if let Some(&bad) = self.levels.iter().find(|&&l| l > self.n) {
            return Err(QvError::Level {
                requested: bad,
                available: self.n,
            });
        }
        if self.eval_times.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return arg_err("eval times must lie in [0, 1]");
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form; the
    /// output directory does not enter the hash.
    pub fn hash(&self) -> String {
        content_hash(&Self {
            out_dir: None,
            ..self.clone()
        })
    }

    pub fn sequence(&self) -> Result<RefiningSequence> {
        self.sequence.build(self.n)
    }

    pub fn coefficient_law(&self) -> Result<CoefficientLaw> {
        CoefficientLaw::from_spec(&self.law, 1.0)
    }

    pub(crate) fn coarsening_of(&self, seq: &RefiningSequence) -> Result<CoarseningMap> {
        coarsen_by_rule(seq, self.coarsening)
    }

    /// `# key=value` lines written ahead of every table.
    pub fn metadata(&self) -> Vec<(String, String)> {
        vec![
            ("experiment".into(), self.experiment.to_string()),
            ("sequence".into(), self.sequence.id()),
            ("seed".into(), self.seed.to_string()),
            ("config_hash".into(), self.hash()),
        ]
    }
}

/// One pass/fail check with the measured value and the threshold it was held to.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Verdict {
    /// Passes when `measured <= threshold`.
    pub fn at_most(name: impl Into<String>, measured: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: measured <= threshold,
            measured,
            threshold,
            detail: detail.into(),
        }
    }

    /// Passes when `measured > threshold`.
    pub fn above(name: impl Into<String>, measured: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: measured > threshold,
            measured,
            threshold,
            detail: detail.into(),
        }
    }
}

/// Everything a run produces: output files by name, verdicts and a JSON summary.
#[derive(Clone, Debug, Serialize)]
pub struct RunOutput {
    pub experiment: ExperimentId,
    pub config_hash: String,
    pub seed: u64,
    #[serde(skip)]
    pub files: Vec<(String, String)>,
    pub verdicts: Vec<Verdict>,
    pub summary: serde_json::Value,
}

impl RunOutput {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }

    pub fn report_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        v["passed"] = serde_json::Value::Bool(self.passed());
        v["files"] = self.files.iter().map(|(n, _)| n.clone()).collect();
        serde_json::to_string_pretty(&v).expect("report serializes") + "\n"
    }

    /// Writes every file plus `<id>_report.json` into `dir`; returns the paths.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::with_capacity(self.files.len() + 1);
        for (name, body) in &self.files {
            let p = dir.join(name);
            std::fs::write(&p, body)?;
            paths.push(p);
        }
        let p = dir.join(format!("{}_report.json", self.experiment));
        std::fs::write(&p, self.report_json())?;
        paths.push(p);
        Ok(paths)
    }
}

/// First 16 hex digits of the SHA-256 of a value's JSON form.
pub fn content_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let canon = serde_json::to_string(value).expect("value serializes");
    hex::encode(&Sha256::digest(canon.as_bytes())[..8])
}

/// Runs the experiment named by the config.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    match cfg.experiment {
        id if id.is_figure() => run_figure(cfg),
        ExperimentId::McQv => mc_qv(cfg),
        ExperimentId::McCov => mc_covariance(cfg),
        ExperimentId::McCoarsen => mc_coarsening_invariance(cfg),
        ExperimentId::Increments => increment_sup(cfg),
        ExperimentId::Verify => verify(cfg),
        _ => unreachable!("figure ids handled above"),
    }
}

pub(crate) fn mean_var(xs: &[f64]) -> (f64, f64) {
    use crate::sum::csum;
    let n = xs.len() as f64;
    let mean = csum(xs.iter().copied()) / n;
    let var = if xs.len() > 1 {
        csum(xs.iter().map(|x| (x - mean).powi(2))) / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_hash_stably() {
        for id in ExperimentId::ALL {
            let cfg = ExperimentConfig::defaults(id);
            cfg.validate().unwrap();
            assert_eq!(cfg.hash(), cfg.clone().hash());
            assert_eq!(cfg.hash().len(), 16);
        }
        let a = ExperimentConfig::defaults(ExperimentId::McQv);
        let b = ExperimentConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn overlay_merges_partial_config() {
        let cfg = ExperimentConfig::from_json_overlay(r#"{"experiment":"mc_qv","trials":7}"#, None).unwrap();
        assert_eq!(cfg.trials, 7);
        assert_eq!(cfg.n, 10);
        let cfg = ExperimentConfig::from_json_overlay(r#"{"seed":5}"#, Some(ExperimentId::Fig2)).unwrap();
        assert_eq!(cfg.experiment, ExperimentId::Fig2);
        assert!(ExperimentConfig::from_json_overlay(r#"{"experiment":"fig9"}"#, None).is_err());
        assert!(ExperimentConfig::from_json_overlay(r#"{"experiment":"mc_qv","levels":[11]}"#, None).is_err());
        assert!(ExperimentConfig::from_json_overlay(r#"{"experiment":"mc_qv","trials":0}"#, None).is_err());
        assert!(ExperimentConfig::from_json_overlay(r#"{"experiment":"mc_qv","bogus":1}"#, None).is_err());
    }

    #[test]
    fn ids_parse() {
        assert_eq!("mc-qv".parse::<ExperimentId>().unwrap(), ExperimentId::McQv);
        assert_eq!("fig3".parse::<ExperimentId>().unwrap(), ExperimentId::Fig3);
    }

    #[test]
    fn file_sequences_report_missing_levels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("seq.json");
        let seq = build_kadic(2, 1.0, 3).unwrap();
        std::fs::write(&p, serde_json::to_string(&seq.to_json()).unwrap()).unwrap();
        let spec = SequenceSpec::File { path: p.to_string_lossy().into() };
        assert_eq!(spec.build(3).unwrap(), seq);
        assert!(matches!(spec.build(5), Err(QvError::Level { requested: 5, available: 3 })));
    }
}
