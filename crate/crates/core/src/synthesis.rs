//! Random Schauder coefficients and the paths they generate.
//!
//! Every coefficient is drawn from its own generator keyed by
//! `(seed, level, index, dimension)`, so sampling order and thread count never
//! change the result.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{enumerate_level, reconstruct, SchauderCoefficients};
use crate::error::{arg_err, QvError, Result};
use crate::partition::RefiningSequence;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a list of keys into one 64-bit seed.
pub fn mix_seed(keys: &[u64]) -> u64 {
    keys.iter().fold(0x5151_F00D_u64, |h, &k| splitmix(h ^ splitmix(k)))
}

/// Seed of trial `trial` derived from a base seed.
pub fn trial_seed(seed: u64, trial: u64) -> u64 {
    mix_seed(&[seed, 0x7121A1, trial])
}

const ENDPOINT: u64 = u64::MAX;

/// Generator for one `(level, index, dimension)` slot.
pub fn coefficient_rng(seed: u64, m: u64, k: u64, dim: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, m, k, dim]))
}

/// Increasing function `φ` with `φ(0) = 0`, given by samples and linear interpolation.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeChange {
    times: Vec<f64>,
    values: Vec<f64>,
    /// Recorded only; never enforced.
    pub derivative_bound: Option<f64>,
    label: String,
    exact_power: Option<f64>,
}

impl TimeChange {
    pub fn from_samples(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() || times.len() < 2 {
            return arg_err("time change needs matching times and values (at least two)");
        }
        if times[0] != 0.0 || values[0] != 0.0 {
            return arg_err("time change must start at φ(0) = 0");
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return arg_err("time-change sample times must increase");
        }
        if values.windows(2).any(|w| w[1] < w[0]) {
            return arg_err("time change must be nondecreasing");
        }
        Ok(Self {
            times,
            values,
            derivative_bound: None,
            label: "samples".into(),
            exact_power: None,
        })
    }

    pub fn identity(horizon: f64) -> Self {
        Self {
            times: vec![0.0, horizon],
            values: vec![0.0, horizon],
            derivative_bound: Some(1.0),
            label: "identity".into(),
            exact_power: None,
        }
    }

    /// `φ(t) = t^p` sampled on `samples + 1` uniform times; the triple points
    /// used by the weights are evaluated exactly, not interpolated.
    pub fn power(p: f64, horizon: f64, samples: usize) -> Result<Self> {
        if !(p > 0.0) {
            return arg_err(format!("power must be positive, got {p}"));
        }
        let times: Vec<f64> = (0..=samples.max(1)).map(|i| i as f64 / samples.max(1) as f64 * horizon).collect();
        let values = times.iter().map(|t| t.powf(p)).collect();
        let mut tc = Self::from_samples(times, values)?;
        tc.label = format!("t^{p}");
        tc.exact_power = Some(p);
        Ok(tc)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn eval(&self, t: f64) -> f64 {
        if let Some(p) = self.exact_power {
            return t.powf(p);
        }
        let i = self.times.partition_point(|&s| s <= t);
        if i == 0 {
            return self.values[0];
        }
        if i == self.times.len() {
            return self.values[i - 1];
        }
        let (a, b) = (self.times[i - 1], self.times[i]);
        let lam = (t - a) / (b - a);
        self.values[i - 1] + lam * (self.values[i] - self.values[i - 1])
    }

    /// Parses `"phi:t^p"` or `"identity"`.
    pub fn parse(spec: &str, horizon: f64) -> Result<Self> {
        let spec = spec.trim();
        if spec == "identity" || spec == "phi:t" {
            return Ok(Self::identity(horizon));
        }
        if let Some(p) = spec.strip_prefix("phi:t^") {
            let p: f64 = p
                .parse()
                .map_err(|_| QvError::Argument(format!("bad exponent in time change '{spec}'")))?;
            return Self::power(p, horizon, 1024);
        }
        Err(QvError::Unknown {
            what: "time change",
            name: spec.into(),
        })
    }
}

/// Variance weights `w^{π,φ}_{m,k}` for levels `m < levels`.
pub fn time_change_weights(seq: &RefiningSequence, phi: &TimeChange, levels: usize) -> Result<Vec<Vec<f64>>> {
    (0..levels)
        .map(|m| {
            Ok(enumerate_level(seq, m)?
                .iter()
                .map(|el| {
                    let tr = el.triple;
                    let (l1, l2) = (tr.left(), tr.right());
                    let (p1, p2, p3) = (phi.eval(tr.t1), phi.eval(tr.t2), phi.eval(tr.t3));
                    ((p2 - p1) * l2 * l2 + l1 * l1 * (p3 - p2)) / (l1 * l2 * (l1 + l2))
                })
                .collect())
        })
        .collect()
}

/// Per-slot draw of a custom law.
pub type CustomDraw = Arc<dyn Fn(usize, usize, &mut ChaCha8Rng) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum LawKind {
    GaussianIid,
    Rademacher,
    /// Uniform on `[-√3, √3]`.
    UniformScaled,
    /// `θ_{m,k} = 1 + (-1)^m`.
    DeterministicSchied,
    /// Arbitrary draw `(m, k, rng) -> θ`; `Custom` built from JSON is the
    /// constant law `θ ≡ value`.
    Custom { name: String, draw: CustomDraw },
}

impl fmt::Debug for LawKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl LawKind {
    pub fn name(&self) -> &str {
        match self {
            LawKind::GaussianIid => "gaussian_iid",
            LawKind::Rademacher => "rademacher",
            LawKind::UniformScaled => "uniform_scaled",
            LawKind::DeterministicSchied => "deterministic_schied",
            LawKind::Custom { name, .. } => name,
        }
    }

    pub fn constant(value: f64) -> Self {
        LawKind::Custom {
            name: format!("constant({value})"),
            draw: Arc::new(move |_, _, _| value),
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "gaussian_iid" | "gaussian" => LawKind::GaussianIid,
            "rademacher" => LawKind::Rademacher,
            "uniform_scaled" | "uniform" => LawKind::UniformScaled,
            "deterministic_schied" | "schied" => LawKind::DeterministicSchied,
            other => {
                return Err(QvError::Unknown {
                    what: "law kind",
                    name: other.into(),
                })
            }
        })
    }

    /// `(mean, variance, fourth moment)` of one unit-weight draw, for random laws.
    pub fn declared_moments(&self) -> Option<(f64, f64, f64)> {
        match self {
            LawKind::GaussianIid => Some((0.0, 1.0, 3.0)),
            LawKind::Rademacher => Some((0.0, 1.0, 1.0)),
            LawKind::UniformScaled => Some((0.0, 1.0, 9.0 / 5.0)),
            _ => None,
        }
    }

    fn draw(&self, m: usize, k: usize, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            LawKind::GaussianIid => rng.sample(StandardNormal),
            LawKind::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            LawKind::UniformScaled => rng.random_range(-3f64.sqrt()..=3f64.sqrt()),
            LawKind::DeterministicSchied => {
                if m.is_multiple_of(2) {
                    2.0
                } else {
                    0.0
                }
            }
            LawKind::Custom { draw, .. } => draw(m, k, rng),
        }
    }
}

/// Law of the coefficients together with the optional time change.
#[derive(Clone, Debug)]
pub struct CoefficientLaw {
    pub kind: LawKind,
    pub time_change: Option<TimeChange>,
}

impl CoefficientLaw {
    pub fn new(kind: LawKind) -> Self {
        Self { kind, time_change: None }
    }

    pub fn with_time_change(kind: LawKind, phi: TimeChange) -> Self {
        Self {
            kind,
            time_change: Some(phi),
        }
    }

    pub fn from_spec(spec: &LawSpec, horizon: f64) -> Result<Self> {
        let kind = match (spec.kind.as_str(), spec.value) {
            ("custom" | "constant", Some(v)) => LawKind::constant(v),
            ("custom" | "constant", None) => return arg_err("custom law needs a 'value'"),
            (name, _) => LawKind::from_name(name)?,
        };
        let time_change = spec.weights.as_deref().map(|w| TimeChange::parse(w, horizon)).transpose()?;
        Ok(Self { kind, time_change })
    }
}

/// JSON form: `{"kind": "rademacher", "seed": 123, "N": 12, "weights": "phi:t^2" | null}`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LawSpec {
    pub kind: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "N", default = "default_truncation")]
    pub n: usize,
    #[serde(default)]
    pub weights: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

fn default_truncation() -> usize {
    12
}

/// Draws `θ_{m,k}` for `m < n` and the endpoint values; coordinate `i` of a
/// `d`-dimensional draw uses the generators keyed by dimension `dim_offset + i`.
pub fn sample_coefficients_dims(
    law: &CoefficientLaw,
    seq: &RefiningSequence,
    n: usize,
    seed: u64,
    d: usize,
    dim_offset: u64,
) -> Result<SchauderCoefficients> {
    if n < 1 {
        return arg_err("truncation N must be at least 1");
    }
    let mut c = SchauderCoefficients::zeros(seq, n, d)?;
    let weights = law
        .time_change
        .as_ref()
        .map(|phi| time_change_weights(seq, phi, n))
        .transpose()?;
    let kind = &law.kind;
    c.theta.par_iter_mut().enumerate().for_each(|(m, level)| {
        for (slot, v) in level.iter_mut().enumerate() {
            let (k, i) = (slot / d, slot % d);
            let mut rng = coefficient_rng(seed, m as u64, k as u64, dim_offset + i as u64);
            let scale = weights.as_ref().map_or(1.0, |w| w[m][k].sqrt());
            *v = scale * kind.draw(m, k, &mut rng);
        }
    });
    if let LawKind::GaussianIid = kind {
        let horizon = seq.horizon();
        let var = law.time_change.as_ref().map_or(horizon, |phi| phi.eval(horizon));
        for i in 0..d {
            let mut rng = coefficient_rng(seed, ENDPOINT, 0, dim_offset + i as u64);
            let z: f64 = rng.sample(StandardNormal);
            c.a1[i] = var.sqrt() * z;
        }
    }
    Ok(c)
}

pub fn sample_coefficients(
    law: &CoefficientLaw,
    seq: &RefiningSequence,
    n: usize,
    seed: u64,
    d: usize,
) -> Result<SchauderCoefficients> {
    sample_coefficients_dims(law, seq, n, seed, d, 0)
}

/// A level-`n` Brownian path evaluated on `grid`.
pub fn brownian_path(seq: &RefiningSequence, n: usize, seed: u64, grid: &[f64]) -> Result<Vec<f64>> {
    let c = sample_coefficients(&CoefficientLaw::new(LawKind::GaussianIid), seq, n, seed, 1)?;
    Ok(reconstruct(&c, seq, grid, n)?.remove(0))
}

/// Two coordinates drawn from independent substreams of one seed.
pub fn synth_2d(
    seq: &RefiningSequence,
    n: usize,
    law1: &CoefficientLaw,
    law2: &CoefficientLaw,
    seed: u64,
) -> Result<SchauderCoefficients> {
    let x = sample_coefficients_dims(law1, seq, n, seed, 1, 0)?;
    let y = sample_coefficients_dims(law2, seq, n, seed, 1, 1)?;
    SchauderCoefficients::stack(&[x, y])
}
