//! Quadratic variation and covariation along partition levels.
//!
//! Two independent routes are provided. [`qv_direct`] sums squared stopped
//! increments of the sampled path. [`qv_from_coefficients`] evaluates the
//! quadratic form in the Schauder coefficients whose weights depend only on
//! the partition:
//!
//! `[x]_n(t) = Σ a_e(t) θ_e² + 2 Σ_{pairs} b_{e,o}(t) θ_e θ_o`
//!
//! where a pair couples an inner element `e` with an outer element `o` whose
//! Haar function is constant (`c_{e,o}`) on the support of `e`. With the
//! densities `D_s(t) = Σ_{level-n cells in segment s} Δt_i² / L_s` of the two
//! halves of the triple of `e`,
//!
//! * `a_e = D_2 + (D_1 - D_2) L_2 / (L_1 + L_2)`
//! * `b_{e,o} = c_{e,o} · peak_e · (D_1 - D_2)`.
//!
//! The affine part `a0 + a1 t / T` enters as one extra element with constant
//! Haar function `1/√T` and coefficient `a1/√T`; it is an outer of every element.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::basis::{enumerate_level, level_size, SchauderCoefficients};
use crate::error::{arg_err, QvError, Result};
use crate::partition::{PartitionLevel, RefiningSequence};
use crate::sum::CompensatedSum;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Direct,
    Coefficient,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::Coefficient => "coefficient",
        }
    }
}

/// Cumulative (co)variation at a fixed level; `values[i]` is the row-major
/// `d × d` matrix at `eval_times[i]` (a single entry when `d = 1`).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QvCurve {
    pub eval_times: Vec<f64>,
    pub d: usize,
    pub values: Vec<Vec<f64>>,
    pub level: usize,
    pub method: Method,
}

impl QvCurve {
    /// Entry `(0, 0)` at every time.
    pub fn scalar(&self) -> Vec<f64> {
        self.values.iter().map(|v| v[0]).collect()
    }

    pub fn entry(&self, i: usize, r: usize, c: usize) -> f64 {
        self.values[i][r * self.d + c]
    }

    pub fn last(&self) -> &[f64] {
        self.values.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Checks the value at `t = 0`, PSD of every matrix, and PSD-monotonicity
    /// between consecutive eval times. Returns the first violation found.
    pub fn check(&self, tol: f64) -> std::result::Result<(), String> {
        for (i, &t) in self.eval_times.iter().enumerate() {
            if t == 0.0 && self.values[i].iter().any(|v| v.abs() > tol) {
                return Err("nonzero value at t = 0".into());
            }
            let floor = min_eigenvalue(self.d, &self.values[i]);
            if floor < -tol {
                return Err(format!("not PSD at t = {t}: eigenvalue {floor}"));
            }
            if i > 0 {
                let diff: Vec<f64> = self.values[i].iter().zip(&self.values[i - 1]).map(|(a, b)| a - b).collect();
                let floor = min_eigenvalue(self.d, &diff);
                if floor < -tol {
                    return Err(format!("decreasing at t = {t}: eigenvalue {floor}"));
                }
            }
        }
        Ok(())
    }
}

fn min_eigenvalue(d: usize, flat: &[f64]) -> f64 {
    if d == 1 {
        return flat[0];
    }
    let m = DMatrix::from_row_slice(d, d, flat);
    let sym = (&m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

fn check_levels(seq: &RefiningSequence, big_n: usize, n: usize) -> Result<()> {
    if big_n > seq.depth() {
        return Err(QvError::Level {
            requested: big_n,
            available: seq.depth(),
        });
    }
    if n > big_n {
        return Err(QvError::Level {
            requested: n,
            available: big_n,
        });
    }
    Ok(())
}

/// Values of each column at `t` and at the start of the level-`n` cell holding `t`.
struct StoppedPath<'a> {
    fine: &'a PartitionLevel,
    coarse_idx: Vec<usize>,
    columns: &'a [Vec<f64>],
}

impl StoppedPath<'_> {
    fn at(&self, i: usize, t: f64) -> f64 {
        self.fine.interpolate(&self.columns[i], t)
    }

    fn grid(&self, i: usize, c: usize) -> f64 {
        self.columns[i][self.coarse_idx[c]]
    }
}

/// Level-`n` realized covariation matrix of a `d`-dimensional path sampled on
/// the `π^{big_n}` grid. Off-grid times use the piecewise-linear `x^{big_n}`.
pub fn qv_matrix_direct(
    columns: &[Vec<f64>],
    seq: &RefiningSequence,
    big_n: usize,
    n: usize,
    eval_times: &[f64],
) -> Result<QvCurve> {
    check_levels(seq, big_n, n)?;
    let d = columns.len();
    if d == 0 {
        return arg_err("at least one coordinate required");
    }
    let fine = seq.level(big_n);
    for (i, col) in columns.iter().enumerate() {
        if col.len() != fine.points().len() {
            return arg_err(format!(
                "coordinate {i} has {} samples, level {big_n} has {} points",
                col.len(),
                fine.points().len()
            ));
        }
    }
    check_times(eval_times, seq.horizon())?;
    let coarse = seq.level(n);
    let path = StoppedPath {
        fine,
        coarse_idx: seq.embed(n, big_n),
        columns,
    };
    let cells = coarse.num_cells();
    // prefix[c][r*d+s]: covariation over the first c full cells
    let mut prefix = vec![vec![0.0; d * d]; cells + 1];
    let mut acc = vec![CompensatedSum::new(); d * d];
    for c in 0..cells {
        for r in 0..d {
            let dr = path.grid(r, c + 1) - path.grid(r, c);
            for s in r..d {
                let ds = path.grid(s, c + 1) - path.grid(s, c);
                acc[r * d + s].add(dr * ds);
            }
        }
        for r in 0..d {
            for s in r..d {
                let v = acc[r * d + s].value();
                prefix[c + 1][r * d + s] = v;
                prefix[c + 1][s * d + r] = v;
            }
        }
    }
    let values = eval_times
        .iter()
        .map(|&t| {
            if t >= coarse.horizon() {
                return prefix[cells].clone();
            }
            let c = coarse.locate(t);
            let mut out = prefix[c].clone();
            if t > coarse.points()[c] {
                let inc: Vec<f64> = (0..d).map(|r| path.at(r, t) - path.grid(r, c)).collect();
                for r in 0..d {
                    for s in 0..d {
                        out[r * d + s] += inc[r] * inc[s];
                    }
                }
            }
            out
        })
        .collect();
    Ok(QvCurve {
        eval_times: eval_times.to_vec(),
        d,
        values,
        level: n,
        method: Method::Direct,
    })
}

/// Level-`n` realized quadratic variation of a scalar path on the `π^{big_n}` grid.
pub fn qv_direct(
    samples: &[f64],
    seq: &RefiningSequence,
    big_n: usize,
    n: usize,
    eval_times: &[f64],
) -> Result<QvCurve> {
    qv_matrix_direct(&[samples.to_vec()], seq, big_n, n, eval_times)
}

fn check_times(times: &[f64], horizon: f64) -> Result<()> {
    match times.iter().find(|&&t| !(0.0..=horizon).contains(&t)) {
        Some(t) => arg_err(format!("eval time {t} outside [0, {horizon}]")),
        None => Ok(()),
    }
}

/// Partition-only geometry of one element as seen from level `n`.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    idx: [usize; 3],
    w1: f64,
    peak: f64,
    full: (f64, f64),
}

/// Element pairs with nested supports; `outers[g]` lists `(outer g', c)`
/// for inner element `g` in global order.
#[derive(Clone, Debug)]
pub struct PairStructure {
    offsets: Vec<usize>,
    outers: Vec<Vec<(usize, f64)>>,
}

impl PairStructure {
    pub fn new(seq: &RefiningSequence, levels: usize) -> Result<Self> {
        if levels > seq.depth() {
            return Err(QvError::Level {
                requested: levels,
                available: seq.depth(),
            });
        }
        let mut offsets = vec![0];
        for m in 0..levels {
            offsets.push(offsets[m] + level_size(seq, m));
        }
        let basis: Vec<_> = (0..levels).map(|m| enumerate_level(seq, m)).collect::<Result<_>>()?;
        let cell_parents: Vec<Vec<usize>> = (0..=levels.min(seq.depth()))
            .map(|l| if l == 0 { Vec::new() } else { seq.cell_parents(l) })
            .collect();
        let mut outers = Vec::with_capacity(offsets[levels]);
        for m in 0..levels {
            let pmap = seq.parent_map(m);
            for el in &basis[m] {
                let mut list = Vec::new();
                let (k0, j) = (el.index.parent, el.index.ordinal);
                let dcell = pmap[k0 + 1] - pmap[k0];
                for jj in j + 1..dcell {
                    let k = pmap[k0] - k0 + jj - 1;
                    list.push((offsets[m] + k, basis[m][k].triple.haar_levels().0));
                }
                let mut cell = k0;
                for mp in (0..m).rev() {
                    // `cell` is at level mp + 1; find its host cell at level mp
                    let host = cell_parents[mp + 1][cell];
                    let pm = seq.parent_map(mp);
                    let i = cell - pm[host];
                    let dp = pm[host + 1] - pm[host];
                    for jj in i.max(1)..dp {
                        let k = pm[host] - host + jj - 1;
                        let (h1, h2) = basis[mp][k].triple.haar_levels();
                        list.push((offsets[mp] + k, if i < jj { h1 } else { h2 }));
                    }
                    cell = host;
                }
                outers.push(list);
            }
        }
        Ok(Self { offsets, outers })
    }

    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Global index of `(m, k)`.
    pub fn global(&self, m: usize, k: usize) -> usize {
        self.offsets[m] + k
    }

    /// Inverse of [`PairStructure::global`].
    pub fn local(&self, g: usize) -> (usize, usize) {
        let m = self.offsets.partition_point(|&o| o <= g) - 1;
        (m, g - self.offsets[m])
    }

    pub fn outers(&self, g: usize) -> &[(usize, f64)] {
        &self.outers[g]
    }

    pub fn num_pairs(&self) -> usize {
        self.outers.iter().map(Vec::len).sum()
    }

    /// `(inner, outer, c)` in inner-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.outers
            .iter()
            .enumerate()
            .flat_map(|(g, l)| l.iter().map(move |&(o, c)| (g, o, c)))
    }
}

/// Weights `a` and `b` of the coefficient formula at level `n`, for the
/// elements of levels `m < levels`, at every eval time.
///
/// `b` is stored factorized: `b_{e,o}(t) = c_{e,o} · delta_e(t)`.
#[derive(Clone, Debug)]
pub struct AbWeights {
    pub level: usize,
    pub horizon: f64,
    pub eval_times: Vec<f64>,
    pub pairs: PairStructure,
    /// `a[time][g]`
    pub a: Vec<Vec<f64>>,
    /// `delta[time][g] = peak_g (D_1 - D_2)`
    pub delta: Vec<Vec<f64>>,
    pub a_affine: Vec<f64>,
}

impl AbWeights {
    pub fn levels(&self) -> usize {
        self.pairs.offsets.len() - 1
    }

    pub fn a(&self, time: usize, m: usize, k: usize) -> f64 {
        self.a[time][self.pairs.global(m, k)]
    }

    /// `b` of the pair `(inner g, outer g')` with factor `c`.
    pub fn b(&self, time: usize, inner: usize, c: f64) -> f64 {
        c * self.delta[time][inner]
    }

    /// `b` between element `g` and the affine part.
    pub fn b_affine(&self, time: usize, g: usize) -> f64 {
        self.delta[time][g] / self.horizon.sqrt()
    }

    /// Uniformly scales every `a` entry; used for fault injection in self-checks.
    pub fn scale_a(&mut self, factor: f64) {
        for row in &mut self.a {
            for v in row {
                *v *= factor;
            }
        }
    }
}

/// Level-`n` evaluator of `a`, `delta` and the affine weight.
pub struct WeightEvaluator<'a> {
    level: &'a PartitionLevel,
    prefix: Vec<f64>,
    geometry: Vec<Geometry>,
    total: f64,
}

impl<'a> WeightEvaluator<'a> {
    pub fn new(seq: &'a RefiningSequence, n: usize, levels: usize) -> Result<Self> {
        if n < 1 {
            return arg_err("weights need level n ≥ 1");
        }
        seq.try_level(n)?;
        if levels > n {
            return arg_err(format!("weights need m < n, got levels {levels} for n = {n}"));
        }
        let level = seq.level(n);
        let mut acc = CompensatedSum::new();
        let mut prefix = Vec::with_capacity(level.points().len());
        prefix.push(0.0);
        for c in 0..level.num_cells() {
            let h = level.cell_len(c);
            acc.add(h * h);
            prefix.push(acc.value());
        }
        let mut ev = Self {
            level,
            prefix,
            geometry: Vec::new(),
            total: 0.0,
        };
        ev.total = ev.full_density(0, level.num_cells());
        for m in 0..levels {
            let embed = seq.embed(m + 1, n);
            for el in enumerate_level(seq, m)? {
                let idx = el.grid.map(|g| embed[g]);
                let (l1, l2) = (el.triple.left(), el.triple.right());
                ev.geometry.push(Geometry {
                    idx,
                    w1: l2 / (l1 + l2),
                    peak: el.triple.peak(),
                    full: (ev.full_density(idx[0], idx[1]), ev.full_density(idx[1], idx[2])),
                });
            }
        }
        Ok(ev)
    }

    fn full_density(&self, ia: usize, ib: usize) -> f64 {
        if let Some(h) = self.level.uniform_step() {
            return h;
        }
        let pts = self.level.points();
        let s: CompensatedSum = (ia..ib).map(|c| self.level.cell_len(c).powi(2)).collect();
        s.value() / (pts[ib] - pts[ia])
    }

    fn density(&self, ia: usize, ib: usize, full: f64, t: f64, cell: usize) -> f64 {
        let pts = self.level.points();
        if t >= pts[ib] {
            full
        } else if t <= pts[ia] {
            0.0
        } else {
            let partial = (self.prefix[cell] - self.prefix[ia]) + (t - pts[cell]).powi(2);
            partial / (pts[ib] - pts[ia])
        }
    }

    /// `(a, delta, a_affine)` at time `t`.
    pub fn at(&self, t: f64) -> (Vec<f64>, Vec<f64>, f64) {
        let cell = self.level.locate(t);
        let mut a = Vec::with_capacity(self.geometry.len());
        let mut delta = Vec::with_capacity(self.geometry.len());
        for g in &self.geometry {
            let d1 = self.density(g.idx[0], g.idx[1], g.full.0, t, cell);
            let d2 = self.density(g.idx[1], g.idx[2], g.full.1, t, cell);
            a.push(d2 + (d1 - d2) * g.w1);
            delta.push(g.peak * (d1 - d2));
        }
        let aff = self.density(0, self.level.num_cells(), self.total, t, cell);
        (a, delta, aff)
    }
}

/// Weights at level `n` for all elements of levels `m < levels`.
pub fn ab_weights(seq: &RefiningSequence, n: usize, levels: usize, eval_times: &[f64]) -> Result<AbWeights> {
    check_times(eval_times, seq.horizon())?;
    let ev = WeightEvaluator::new(seq, n, levels)?;
    let pairs = PairStructure::new(seq, levels)?;
    let per_time: Vec<_> = eval_times.par_iter().map(|&t| ev.at(t)).collect();
    let mut a = Vec::with_capacity(per_time.len());
    let mut delta = Vec::with_capacity(per_time.len());
    let mut a_affine = Vec::with_capacity(per_time.len());
    for (x, y, z) in per_time {
        a.push(x);
        delta.push(y);
        a_affine.push(z);
    }
    Ok(AbWeights {
        level: n,
        horizon: seq.horizon(),
        eval_times: eval_times.to_vec(),
        pairs,
        a,
        delta,
        a_affine,
    })
}

/// Per-element coefficients flattened in global order for coordinate `i`.
fn flat_theta(coeffs: &SchauderCoefficients, pairs: &PairStructure, i: usize) -> Vec<f64> {
    (0..pairs.len())
        .map(|g| {
            let (m, k) = pairs.local(g);
            coeffs.get(m, k, i)
        })
        .collect()
}

/// `F_g = Σ_o c_{g,o} θ_o + θ_aff / √T`: everything an inner element couples to.
fn outer_field(theta: &[f64], pairs: &PairStructure, affine: f64, horizon: f64) -> Vec<f64> {
    (0..pairs.len())
        .map(|g| {
            let mut acc: CompensatedSum = pairs.outers(g).iter().map(|&(o, c)| c * theta[o]).collect();
            acc.add(affine / horizon.sqrt());
            acc.value()
        })
        .collect()
}

struct Prepared {
    theta: Vec<Vec<f64>>,
    field: Vec<Vec<f64>>,
    affine: Vec<f64>,
}

fn prepare(coeffs: &SchauderCoefficients, w: &AbWeights) -> Result<Prepared> {
    if coeffs.n < w.levels() {
        return Err(QvError::Truncation(format!(
            "weights cover {} levels, coefficients only {}",
            w.levels(),
            coeffs.n
        )));
    }
    for m in 0..w.levels() {
        if coeffs.level_len(m) != w.pairs.offsets[m + 1] - w.pairs.offsets[m] {
            return Err(QvError::Truncation(format!("level {m} size differs from the weights")));
        }
    }
    let sqrt_t = w.horizon.sqrt();
    let theta: Vec<Vec<f64>> = (0..coeffs.d).map(|i| flat_theta(coeffs, &w.pairs, i)).collect();
    let affine: Vec<f64> = coeffs.a1.iter().map(|a| a / sqrt_t).collect();
    let field = theta
        .iter()
        .zip(&affine)
        .map(|(th, &af)| outer_field(th, &w.pairs, af, w.horizon))
        .collect();
    Ok(Prepared { theta, field, affine })
}

fn bilinear(w: &AbWeights, time: usize, p: &Prepared, x: usize, y: usize) -> f64 {
    let (tx, ty) = (&p.theta[x], &p.theta[y]);
    let (fx, fy) = (&p.field[x], &p.field[y]);
    let a = &w.a[time];
    let delta = &w.delta[time];
    let mut acc = CompensatedSum::new();
    for g in 0..a.len() {
        acc.add(a[g] * (tx[g] * ty[g]));
    }
    acc.add(w.a_affine[time] * (p.affine[x] * p.affine[y]));
    for g in 0..a.len() {
        acc.add(delta[g] * (tx[g] * fy[g] + ty[g] * fx[g]));
    }
    acc.value()
}

/// Quadratic variation (matrix when `d > 1`) from Schauder coefficients.
pub fn qv_from_coefficients(coeffs: &SchauderCoefficients, weights: &AbWeights) -> Result<QvCurve> {
    let p = prepare(coeffs, weights)?;
    let d = coeffs.d;
    let values = (0..weights.eval_times.len())
        .map(|ti| {
            let mut out = vec![0.0; d * d];
            for r in 0..d {
                for s in r..d {
                    let v = bilinear(weights, ti, &p, r, s);
                    out[r * d + s] = v;
                    out[s * d + r] = v;
                }
            }
            out
        })
        .collect();
    Ok(QvCurve {
        eval_times: weights.eval_times.clone(),
        d,
        values,
        level: weights.level,
        method: Method::Coefficient,
    })
}

/// Quadratic covariation of two scalar coefficient sets.
pub fn covar_from_coefficients(x: &SchauderCoefficients, y: &SchauderCoefficients, weights: &AbWeights) -> Result<QvCurve> {
    if x.d != 1 || y.d != 1 || x.n != y.n {
        return arg_err("covariation needs two scalar coefficient sets of equal truncation");
    }
    let stacked = SchauderCoefficients::stack(&[x.clone(), y.clone()])?;
    let m = qv_from_coefficients(&stacked, weights)?;
    Ok(QvCurve {
        values: m.values.iter().map(|v| vec![v[1]]).collect(),
        d: 1,
        ..m
    })
}

/// `Σ |b θ θ'|` over ordered pairs at each eval time (element pairs only).
pub fn b_magnitude(coeffs: &SchauderCoefficients, weights: &AbWeights) -> Result<Vec<f64>> {
    prepare(coeffs, weights)?;
    let theta = flat_theta(coeffs, &weights.pairs, 0);
    Ok((0..weights.eval_times.len())
        .map(|ti| {
            2.0 * weights
                .pairs
                .iter()
                .map(|(g, o, c)| (weights.b(ti, g, c) * theta[g] * theta[o]).abs())
                .collect::<CompensatedSum>()
                .value()
        })
        .collect())
}

/// Identity diagnostics of one level at one time.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct IdentityRow {
    pub level: usize,
    pub t: f64,
    /// `Σ a - t`
    pub s1: f64,
    /// `Σ a²`
    pub s2: f64,
    /// `Σ b²` over ordered pairs
    pub s3: f64,
    pub s1_weighted: Option<f64>,
    pub s2_weighted: Option<f64>,
    pub s3_weighted: Option<f64>,
}

/// Residuals of the transform-matrix identities over the rows of a coarsening.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct TransformResiduals {
    /// `max |Σ A² - 1|`
    pub eq1: f64,
    /// `max |Σ A A'|` over distinct rows
    pub eq2: f64,
    /// `max |Σ A⁴ - 1|`
    pub eq3: f64,
    /// `max |Σ A² A'²|`
    pub eq4: f64,
    /// `max |Σ A³ A'|`
    pub eq6: f64,
    /// `max |Σ A² A' A''|`
    pub eq7: f64,
    /// `max |Σ A A' A'' A'''|`
    pub eq8: f64,
    pub rows: usize,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct IdentityReport {
    pub rows: Vec<IdentityRow>,
    pub transform: Option<TransformResiduals>,
}

/// A time-change weight function for the weighted identities: `w` per global
/// element index and `φ` evaluated at the report times.
pub struct TimeChangeWeights<'a> {
    pub w: &'a [Vec<f64>],
    pub phi: &'a dyn Fn(f64) -> f64,
}

pub fn identity_report(
    seq: &RefiningSequence,
    n_max: usize,
    eval_times: &[f64],
    time_change: Option<&TimeChangeWeights<'_>>,
    transform: Option<&crate::basis::TransformMatrix>,
) -> Result<IdentityReport> {
    let mut rows = Vec::new();
    for n in 1..=n_max {
        let w = ab_weights(seq, n, n, eval_times)?;
        let flat_w: Option<Vec<f64>> = time_change.map(|tc| {
            (0..w.pairs.len())
                .map(|g| {
                    let (m, k) = w.pairs.local(g);
                    tc.w[m][k]
                })
                .collect()
        });
        for (ti, &t) in eval_times.iter().enumerate() {
            let a = &w.a[ti];
            let s1 = csum_iter(a.iter().copied()) - t;
            let s2 = csum_iter(a.iter().map(|v| v * v));
            let s3 = 2.0 * csum_iter(w.pairs.iter().map(|(g, _, c)| w.b(ti, g, c).powi(2)));
            let (s1w, s2w, s3w) = match (&flat_w, time_change) {
                (Some(fw), Some(tc)) => (
                    Some(csum_iter(a.iter().zip(fw).map(|(a, w)| a * w)) - (tc.phi)(t)),
                    Some(csum_iter(a.iter().zip(fw).map(|(a, w)| (a * w).powi(2)))),
                    Some(2.0 * csum_iter(w.pairs.iter().map(|(g, o, c)| w.b(ti, g, c).powi(2) * fw[g] * fw[o]))),
                ),
                _ => (None, None, None),
            };
            rows.push(IdentityRow {
                level: n,
                t,
                s1,
                s2,
                s3,
                s1_weighted: s1w,
                s2_weighted: s2w,
                s3_weighted: s3w,
            });
        }
    }
    Ok(IdentityReport {
        rows,
        transform: transform.map(transform_residuals),
    })
}

fn csum_iter<I: Iterator<Item = f64>>(it: I) -> f64 {
    it.collect::<CompensatedSum>().value()
}

/// Rows considered for the three- and four-row identities.
const HIGHER_ORDER_ROWS: usize = 12;

pub fn transform_residuals(a: &crate::basis::TransformMatrix) -> TransformResiduals {
    use std::collections::HashMap;
    let rows: Vec<HashMap<(usize, usize), f64>> = a
        .iter_rows()
        .map(|(_, _, r)| r.iter().map(|&(m, k, v)| ((m, k), v)).collect())
        .collect();
    let power = |r: &HashMap<(usize, usize), f64>, p: i32| csum_iter(r.values().map(|v| v.powi(p)));
    let mixed = |idx: &[usize], pw: &[i32]| -> f64 {
        let base = &rows[idx[0]];
        csum_iter(base.iter().map(|(key, &v0)| {
            let mut prod = v0.powi(pw[0]);
            for (q, &r) in idx.iter().enumerate().skip(1) {
                prod *= rows[r].get(key).copied().unwrap_or(0.0).powi(pw[q]);
            }
            prod
        }))
    };
    let mut res = TransformResiduals {
        eq1: 0.0,
        eq2: 0.0,
        eq3: 0.0,
        eq4: 0.0,
        eq6: 0.0,
        eq7: 0.0,
        eq8: 0.0,
        rows: rows.len(),
    };
    for (i, r) in rows.iter().enumerate() {
        res.eq1 = res.eq1.max((power(r, 2) - 1.0).abs());
        res.eq3 = res.eq3.max((power(r, 4) - 1.0).abs());
        for j in 0..rows.len() {
            if i == j {
                continue;
            }
            res.eq2 = res.eq2.max(mixed(&[i, j], &[1, 1]).abs());
            res.eq4 = res.eq4.max(mixed(&[i, j], &[2, 2]).abs());
            res.eq6 = res.eq6.max(mixed(&[i, j], &[3, 1]).abs());
        }
    }
    let h = rows.len().min(HIGHER_ORDER_ROWS);
    for i in 0..h {
        for j in 0..h {
            for k in j + 1..h {
                if i != j && i != k {
                    res.eq7 = res.eq7.max(mixed(&[i, j, k], &[2, 1, 1]).abs());
                }
                for l in k + 1..h {
                    if i < j {
                        res.eq8 = res.eq8.max(mixed(&[i, j, k, l], &[1, 1, 1, 1]).abs());
                    }
                }
            }
        }
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{reconstruct_grid, SchauderCoefficients};
    use crate::partition::{build_kadic, build_mod3_coarse, build_split_example, DEFAULT_SPLIT_FRACTION};
    use proptest::prelude::*;

    fn schied(seq: &RefiningSequence, n: usize) -> SchauderCoefficients {
        let mut c = SchauderCoefficients::zeros(seq, n, 1).unwrap();
        for m in 0..n {
            for k in 0..c.level_len(m) {
                c.set(m, k, 0, 1.0 + if m % 2 == 0 { 1.0 } else { -1.0 });
            }
        }
        c
    }

    fn pseudo_random(seq: &RefiningSequence, n: usize, seed: f64) -> SchauderCoefficients {
        let mut c = SchauderCoefficients::zeros(seq, n, 1).unwrap();
        let mut s = seed;
        for m in 0..n {
            for k in 0..c.level_len(m) {
                s = (s * 9.73 + 0.31).fract();
                c.set(m, k, 0, 2.0 * s - 1.0);
            }
        }
        c.a0[0] = 0.2;
        c.a1[0] = s - 0.5;
        c
    }

    #[test]
    fn direct_examples() {
        let dy = build_kadic(2, 1.0, 6).unwrap();
        let pts = dy.level(6).points().to_vec();
        let zero = vec![1.5; pts.len()];
        assert!(qv_direct(&zero, &dy, 6, 4, &[0.3, 1.0]).unwrap().scalar().iter().all(|&v| v == 0.0));
        for n in 1..=6 {
            let q = qv_direct(&pts, &dy, 6, n, &[1.0]).unwrap();
            assert!((q.scalar()[0] - 2f64.powi(-(n as i32))).abs() < 1e-15);
        }
        let c = schied(&dy, 6);
        let x = reconstruct_grid(&c, &dy, 6).unwrap();
        assert!((qv_direct(&x[0], &dy, 6, 2, &[1.0]).unwrap().scalar()[0] - 1.0).abs() < 1e-14);
        assert!(matches!(qv_direct(&pts, &dy, 6, 7, &[1.0]), Err(QvError::Level { .. })));
    }

    #[test]
    fn matrix_examples() {
        let dy = build_kadic(2, 1.0, 5).unwrap();
        let pts = dy.level(5).points().to_vec();
        let neg: Vec<f64> = pts.iter().map(|t| -t).collect();
        let q = qv_matrix_direct(&[pts.clone(), pts.clone()], &dy, 5, 3, &[1.0]).unwrap();
        assert!(q.last().iter().all(|&v| (v - 0.125).abs() < 1e-15));
        let q = qv_matrix_direct(&[pts.clone(), neg], &dy, 5, 3, &[1.0]).unwrap();
        assert!((q.entry(0, 0, 1) + 0.125).abs() < 1e-15);
        let one = qv_matrix_direct(&[pts.clone()], &dy, 5, 3, &[0.3, 1.0]).unwrap();
        assert_eq!(one, qv_direct(&pts, &dy, 5, 3, &[0.3, 1.0]).unwrap());
    }

    #[test]
    fn dyadic_weights_are_exact() {
        let dy = build_kadic(2, 1.0, 8).unwrap();
        for n in 1..=8 {
            let w = ab_weights(&dy, n, n, &[1.0]).unwrap();
            let h = 2f64.powi(-(n as i32));
            assert!(w.a[0].iter().all(|&a| a == h));
            assert!(w.delta[0].iter().all(|&d| d == 0.0));
            let s: f64 = csum_iter(w.a[0].iter().copied());
            assert_eq!(s, (2f64.powi(n as i32) - 1.0) * h);
        }
        let tri = build_kadic(3, 1.0, 4).unwrap();
        let w = ab_weights(&tri, 4, 4, &[1.0]).unwrap();
        assert!(w.a[0].iter().all(|&a| a == 1.0 / 81.0));
        assert!(w.delta[0].iter().all(|&d| d == 0.0));
    }

    #[test]
    fn split_weights_bounded() {
        let seq = build_split_example(8, DEFAULT_SPLIT_FRACTION).unwrap();
        for n in 1..=8 {
            let w = ab_weights(&seq, n, n, &[1.0]).unwrap();
            let (lo, hi) = (seq.level(n).min_step(), seq.level(n).mesh());
            for &a in &w.a[0] {
                assert!(a >= lo * (1.0 - 1e-12) && a <= hi * (1.0 + 1e-12), "n={n} a={a}");
            }
        }
    }

    #[test]
    fn weights_reject_bad_levels() {
        let dy = build_kadic(2, 1.0, 4).unwrap();
        assert!(matches!(ab_weights(&dy, 3, 4, &[1.0]), Err(QvError::Argument(_))));
        assert!(ab_weights(&dy, 0, 0, &[1.0]).is_err());
        assert!(ab_weights(&dy, 5, 5, &[1.0]).is_err());
    }

    #[test]
    fn schied_closed_form() {
        let dy = build_kadic(2, 1.0, 12).unwrap();
        for n in 1..=12usize {
            let c = schied(&dy, n);
            let w = ab_weights(&dy, n, n, &[1.0]).unwrap();
            let v = qv_from_coefficients(&c, &w).unwrap().scalar()[0];
            let big_n = (n / 2) as i32;
            let want = if n % 2 == 0 {
                4.0 / 3.0 * (1.0 - 4f64.powi(-big_n))
            } else {
                8.0 / 3.0 * (1.0 - 4f64.powi(-(big_n + 1)))
            };
            assert!((v - want).abs() <= 1e-12, "n={n}: {v} vs {want}");
        }
    }

    #[test]
    fn coefficient_matches_direct_all_sequences() {
        for seq in [
            build_kadic(2, 1.0, 7).unwrap(),
            build_kadic(3, 1.0, 4).unwrap(),
            build_split_example(7, DEFAULT_SPLIT_FRACTION).unwrap(),
            build_mod3_coarse(7).unwrap(),
        ] {
            let big_n = seq.depth();
            let c = pseudo_random(&seq, big_n, 0.123);
            let x = reconstruct_grid(&c, &seq, big_n).unwrap();
            for n in 1..=big_n {
                let times = seq.level(n).points().to_vec();
                let direct = qv_direct(&x[0], &seq, big_n, n, &times).unwrap();
                let w = ab_weights(&seq, n, n, &times).unwrap();
                let coef = qv_from_coefficients(&c, &w).unwrap();
                for (d, k) in direct.scalar().iter().zip(coef.scalar()) {
                    assert!((d - k).abs() <= 1e-8 * d.abs().max(1e-3), "n={n}: {d} vs {k}");
                }
            }
        }
    }

    #[test]
    fn covariation_polarizes() {
        let seq = build_split_example(6, DEFAULT_SPLIT_FRACTION).unwrap();
        let x = pseudo_random(&seq, 6, 0.41);
        let y = pseudo_random(&seq, 6, 0.77);
        let times = seq.level(5).points().to_vec();
        let w = ab_weights(&seq, 5, 5, &times).unwrap();
        let cov = covar_from_coefficients(&x, &y, &w).unwrap().scalar();
        let rev = covar_from_coefficients(&y, &x, &w).unwrap().scalar();
        let sum = x.combine(1.0, &y, 1.0).unwrap();
        let qs = qv_from_coefficients(&sum, &w).unwrap().scalar();
        let qx = qv_from_coefficients(&x, &w).unwrap().scalar();
        let qy = qv_from_coefficients(&y, &w).unwrap().scalar();
        for i in 0..times.len() {
            assert!((cov[i] - (qs[i] - qx[i] - qy[i]) / 2.0).abs() < 1e-9);
            assert_eq!(cov[i], rev[i]);
        }
        let self_cov = covar_from_coefficients(&x, &x, &w).unwrap().scalar();
        for (a, b) in self_cov.iter().zip(&qx) {
            assert!((a - b).abs() < 1e-12);
        }
        let neg = x.combine(-1.0, &x, 0.0).unwrap();
        let nc = covar_from_coefficients(&x, &neg, &w).unwrap().scalar();
        for (a, b) in nc.iter().zip(&qx) {
            assert!((a + b).abs() < 1e-12);
        }
    }

    #[test]
    fn identities_on_dyadic() {
        let dy = build_kadic(2, 1.0, 8).unwrap();
        let rep = identity_report(&dy, 8, &[1.0], None, None).unwrap();
        for r in &rep.rows {
            assert_eq!(r.s1, -2f64.powi(-(r.level as i32)));
            assert_eq!(r.s3, 0.0);
        }
    }

    #[test]
    fn pair_structure_counts() {
        let dy = build_kadic(2, 1.0, 5).unwrap();
        let p = PairStructure::new(&dy, 5).unwrap();
        for g in 0..p.len() {
            let (m, _) = p.local(g);
            assert_eq!(p.outers(g).len(), m);
        }
        let tri = build_kadic(3, 1.0, 2).unwrap();
        let p = PairStructure::new(&tri, 1).unwrap();
        assert_eq!(p.outers(0).len(), 1);
        assert_eq!(p.outers(1).len(), 0);
    }

    #[test]
    fn curve_check_flags_problems() {
        let c = QvCurve {
            eval_times: vec![0.0, 0.5, 1.0],
            d: 1,
            values: vec![vec![0.0], vec![0.6], vec![0.5]],
            level: 1,
            method: Method::Direct,
        };
        assert!(c.check(1e-10).is_err());
        let m = QvCurve {
            eval_times: vec![1.0],
            d: 2,
            values: vec![vec![1.0, 2.0, 2.0, 1.0]],
            level: 1,
            method: Method::Direct,
        };
        assert!(m.check(1e-10).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn grid_qv_monotone_and_matches(seed in 0.0f64..1.0, frac in 0.2f64..0.8) {
            let seq = build_split_example(5, frac).unwrap();
            let c = pseudo_random(&seq, 5, seed);
            let x = reconstruct_grid(&c, &seq, 5).unwrap();
            let times = seq.level(4).points().to_vec();
            let direct = qv_direct(&x[0], &seq, 5, 4, &times).unwrap();
            prop_assert!(direct.check(1e-12).is_ok());
            let w = ab_weights(&seq, 4, 4, &times).unwrap();
            let coef = qv_from_coefficients(&c, &w).unwrap();
            for (d, k) in direct.scalar().iter().zip(coef.scalar()) {
                prop_assert!((d - k).abs() <= 1e-8 * d.abs().max(1e-3));
            }
        }
    }
}
