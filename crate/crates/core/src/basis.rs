//! Non-uniform Haar basis and Schauder system of a refining sequence.
//!
//! Level `m` contributes one element per new point of `π^{m+1}`. If a level-`m`
//! cell `[A, B]` receives new points `u_1 < ... < u_{d-1}` (with `u_d = B`),
//! the element of ordinal `j` has triple `(A, u_j, u_{j+1})`. Flat indices run
//! lexicographically over (parent cell, ordinal), so the element `(k0, j)` of
//! level `m` has flat index `p(m, k0) - k0 + j - 1`.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, QvError, Result};
use crate::partition::{CoarseningMap, RefiningSequence};
use crate::sum::CompensatedSum;

/// Support triple `t1 < t2 < t3` of a Schauder function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchauderTriple {
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
}

impl SchauderTriple {
    pub fn new(t1: f64, t2: f64, t3: f64) -> Result<Self> {
        if !(t1 < t2 && t2 < t3) {
            return arg_err(format!("triple must be increasing, got ({t1}, {t2}, {t3})"));
        }
        Ok(Self { t1, t2, t3 })
    }

    #[inline]
    pub fn left(&self) -> f64 {
        self.t2 - self.t1
    }

    #[inline]
    pub fn right(&self) -> f64 {
        self.t3 - self.t2
    }

    /// Haar values on `[t1, t2)` and `[t2, t3)`.
    #[inline]
    pub fn haar_levels(&self) -> (f64, f64) {
        let (l1, l2) = (self.left(), self.right());
        let l = self.t3 - self.t1;
        ((l2 / (l1 * l)).sqrt(), -(l1 / (l2 * l)).sqrt())
    }

    /// Tent height at `t2`.
    #[inline]
    pub fn peak(&self) -> f64 {
        let (l1, l2) = (self.left(), self.right());
        (l1 * l2 / (l1 + l2)).sqrt()
    }

    /// Weighted second difference of `x` at the triple: the Schauder
    /// coefficient of `x` for this element.
    #[inline]
    pub fn coefficient(&self, x1: f64, x2: f64, x3: f64) -> f64 {
        let (l1, l2) = (self.left(), self.right());
        ((x2 - x1) * l2 - (x3 - x2) * l1) / (l1 * l2 * (l1 + l2)).sqrt()
    }
}

pub fn haar_eval(tr: &SchauderTriple, t: f64) -> f64 {
    let (h1, h2) = tr.haar_levels();
    if t >= tr.t1 && t < tr.t2 {
        h1
    } else if t >= tr.t2 && t < tr.t3 {
        h2
    } else {
        0.0
    }
}

pub fn schauder_eval(tr: &SchauderTriple, t: f64) -> f64 {
    if t <= tr.t1 || t >= tr.t3 {
        0.0
    } else if t == tr.t2 {
        tr.peak()
    } else if t < tr.t2 {
        tr.peak() * (t - tr.t1) / tr.left()
    } else {
        tr.peak() * (tr.t3 - t) / tr.right()
    }
}

/// `∫ ψ`, in closed form.
pub fn haar_integral(tr: &SchauderTriple) -> f64 {
    let (h1, h2) = tr.haar_levels();
    h1 * tr.left() + h2 * tr.right()
}

/// `∫ ψ_a ψ_b`, summed exactly over the merged breakpoints of both step functions.
pub fn inner_product(a: &SchauderTriple, b: &SchauderTriple) -> f64 {
    if a.t3 <= b.t1 || b.t3 <= a.t1 {
        return 0.0;
    }
    let mut pts = [a.t1, a.t2, a.t3, b.t1, b.t2, b.t3];
    pts.sort_by(f64::total_cmp);
    let mut acc = CompensatedSum::new();
    for w in pts.windows(2) {
        if w[1] > w[0] {
            let mid = w[0] + 0.5 * (w[1] - w[0]);
            acc.add(haar_eval(a, mid) * haar_eval(b, mid) * (w[1] - w[0]));
        }
    }
    acc.value()
}

/// Position of a basis element in the flat enumeration and its provenance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct BasisIndex {
    pub level: usize,
    pub k: usize,
    /// Level-`m` cell that hosts the support.
    pub parent: usize,
    /// New-point ordinal inside the parent cell, starting at 1.
    pub ordinal: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BasisElement {
    pub index: BasisIndex,
    pub triple: SchauderTriple,
    /// Indices of `t1, t2, t3` in level `m + 1`.
    pub grid: [usize; 3],
}

/// Elements of level `m`, built from `π^m` and `π^{m+1}`.
pub fn enumerate_level(seq: &RefiningSequence, m: usize) -> Result<Vec<BasisElement>> {
    if m + 1 > seq.depth() {
        return Err(QvError::Level {
            requested: m + 1,
            available: seq.depth(),
        });
    }
    let map = seq.parent_map(m);
    let fine = seq.level(m + 1).points();
    let mut out = Vec::with_capacity(fine.len() - map.len());
    for k0 in 0..map.len() - 1 {
        let (a, b) = (map[k0], map[k0 + 1]);
        for j in 1..b - a {
            let grid = [a, a + j, a + j + 1];
            out.push(BasisElement {
                index: BasisIndex {
                    level: m,
                    k: out.len(),
                    parent: k0,
                    ordinal: j,
                },
                triple: SchauderTriple {
                    t1: fine[grid[0]],
                    t2: fine[grid[1]],
                    t3: fine[grid[2]],
                },
                grid,
            });
        }
    }
    Ok(out)
}

/// Number of elements at level `m`: `N(π^{m+1}) - N(π^m)`.
pub fn level_size(seq: &RefiningSequence, m: usize) -> usize {
    seq.level(m + 1).num_cells() - seq.level(m).num_cells()
}

/// All elements of levels `0..levels`.
#[derive(Clone, Debug)]
pub struct SchauderBasis {
    levels: Vec<Vec<BasisElement>>,
}

impl SchauderBasis {
    pub fn new(seq: &RefiningSequence, levels: usize) -> Result<Self> {
        let levels = (0..levels)
            .map(|m| enumerate_level(seq, m))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { levels })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, m: usize) -> &[BasisElement] {
        &self.levels[m]
    }

    pub fn element(&self, m: usize, k: usize) -> &BasisElement {
        &self.levels[m][k]
    }

    pub fn len(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &BasisElement> {
        self.levels.iter().flatten()
    }
}

/// Affine part plus per-level detail coefficients, possibly vector valued.
///
/// `theta[m][k * d + i]` is coordinate `i` of `θ_{m,k}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchauderCoefficients {
    pub d: usize,
    pub a0: Vec<f64>,
    pub a1: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
    #[serde(rename = "N")]
    pub n: usize,
}

impl SchauderCoefficients {
    pub fn zeros(seq: &RefiningSequence, n: usize, d: usize) -> Result<Self> {
        if n > seq.depth() {
            return Err(QvError::Level {
                requested: n,
                available: seq.depth(),
            });
        }
        if d == 0 {
            return arg_err("dimension must be at least 1");
        }
        Ok(Self {
            d,
            a0: vec![0.0; d],
            a1: vec![0.0; d],
            theta: (0..n).map(|m| vec![0.0; level_size(seq, m) * d]).collect(),
            n,
        })
    }

    #[inline]
    pub fn get(&self, m: usize, k: usize, i: usize) -> f64 {
        self.theta[m][k * self.d + i]
    }

    #[inline]
    pub fn set(&mut self, m: usize, k: usize, i: usize, v: f64) {
        self.theta[m][k * self.d + i] = v;
    }

    pub fn level_len(&self, m: usize) -> usize {
        self.theta[m].len() / self.d
    }

    /// Coordinate `i` as a scalar coefficient set.
    pub fn component(&self, i: usize) -> Self {
        Self {
            d: 1,
            a0: vec![self.a0[i]],
            a1: vec![self.a1[i]],
            theta: self
                .theta
                .iter()
                .map(|lvl| lvl.iter().skip(i).step_by(self.d).copied().collect())
                .collect(),
            n: self.n,
        }
    }

    /// Stacks scalar coefficient sets into one `d`-dimensional set.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| QvError::Argument("nothing to stack".into()))?;
        if parts.iter().any(|p| p.d != 1 || p.n != first.n || p.theta.iter().map(Vec::len).ne(first.theta.iter().map(Vec::len))) {
            return arg_err("stacked parts must be scalar with matching shapes");
        }
        let d = parts.len();
        let theta = (0..first.n)
            .map(|m| {
                (0..first.theta[m].len())
                    .flat_map(|k| parts.iter().map(move |p| p.theta[m][k]))
                    .collect()
            })
            .collect();
        Ok(Self {
            d,
            a0: parts.iter().map(|p| p.a0[0]).collect(),
            a1: parts.iter().map(|p| p.a1[0]).collect(),
            theta,
            n: first.n,
        })
    }

    /// Componentwise `alpha * self + beta * other`.
    pub fn combine(&self, alpha: f64, other: &Self, beta: f64) -> Result<Self> {
        if self.d != other.d || self.n != other.n {
            return arg_err("coefficient shapes differ");
        }
        let lin = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| alpha * x + beta * y).collect::<Vec<_>>();
        Ok(Self {
            d: self.d,
            a0: lin(&self.a0, &other.a0),
            a1: lin(&self.a1, &other.a1),
            theta: self.theta.iter().zip(&other.theta).map(|(a, b)| lin(a, b)).collect(),
            n: self.n,
        })
    }

    /// Checks that the array lengths match `seq`.
    pub fn check_shape(&self, seq: &RefiningSequence) -> Result<()> {
        if self.n > seq.depth() {
            return Err(QvError::Level {
                requested: self.n,
                available: seq.depth(),
            });
        }
        if self.theta.len() != self.n || self.a0.len() != self.d || self.a1.len() != self.d {
            return Err(QvError::Truncation("coefficient arrays inconsistent with N and d".into()));
        }
        for (m, lvl) in self.theta.iter().enumerate() {
            if lvl.len() != level_size(seq, m) * self.d {
                return Err(QvError::Truncation(format!(
                    "level {m} has {} entries, expected {}",
                    lvl.len(),
                    level_size(seq, m) * self.d
                )));
            }
        }
        Ok(())
    }
}

/// Coefficients of a path given by its values on the `π^N` grid.
///
/// `columns[i]` holds coordinate `i` at every point of level `n`.
pub fn decompose(columns: &[Vec<f64>], seq: &RefiningSequence, n: usize) -> Result<SchauderCoefficients> {
    let level = seq.try_level(n)?;
    let d = columns.len();
    let mut coeffs = SchauderCoefficients::zeros(seq, n, d.max(1))?;
    if d == 0 {
        return arg_err("at least one coordinate required");
    }
    for (i, col) in columns.iter().enumerate() {
        if col.len() != level.points().len() {
            return arg_err(format!(
                "coordinate {i} has {} samples, level {n} has {} points",
                col.len(),
                level.points().len()
            ));
        }
        coeffs.a0[i] = col[0];
        coeffs.a1[i] = col[col.len() - 1] - col[0];
    }
    for m in 0..n {
        let embed = seq.embed(m + 1, n);
        for el in enumerate_level(seq, m)? {
            let [g1, g2, g3] = el.grid.map(|g| embed[g]);
            for (i, col) in columns.iter().enumerate() {
                let th = el.triple.coefficient(col[g1], col[g2], col[g3]);
                coeffs.set(m, el.index.k, i, th);
            }
        }
    }
    Ok(coeffs)
}

pub fn decompose_scalar(samples: &[f64], seq: &RefiningSequence, n: usize) -> Result<SchauderCoefficients> {
    decompose(&[samples.to_vec()], seq, n)
}

/// Values of `x^{up_to}` at every point of level `up_to`, one vector per coordinate.
pub fn reconstruct_grid(coeffs: &SchauderCoefficients, seq: &RefiningSequence, up_to: usize) -> Result<Vec<Vec<f64>>> {
    coeffs.check_shape(seq)?;
    if up_to > coeffs.n {
        return Err(QvError::Truncation(format!(
            "requested level {up_to} beyond truncation {}",
            coeffs.n
        )));
    }
    let mut out = Vec::with_capacity(coeffs.d);
    for i in 0..coeffs.d {
        let mut vals = vec![coeffs.a0[i], coeffs.a0[i] + coeffs.a1[i]];
        for m in 0..up_to {
            let map = seq.parent_map(m);
            let fine = seq.level(m + 1).points();
            let mut next = vec![0.0; fine.len()];
            for k0 in 0..map.len() - 1 {
                let (a, b) = (map[k0], map[k0 + 1]);
                let (xa, xb) = (vals[k0], vals[k0 + 1]);
                let (ta, tb) = (fine[a], fine[b]);
                next[a] = xa;
                let offset = a - k0;
                for q in a + 1..b {
                    let t = fine[q];
                    let mut acc = CompensatedSum::new();
                    acc.add(xa + (xb - xa) * ((t - ta) / (tb - ta)));
                    // elements with ordinal j ≥ q - a are nonzero at u_{q-a}
                    for j in q - a..b - a {
                        let k = offset + j - 1;
                        let tr = SchauderTriple {
                            t1: ta,
                            t2: fine[a + j],
                            t3: fine[a + j + 1],
                        };
                        acc.add(coeffs.get(m, k, i) * schauder_eval(&tr, t));
                    }
                    next[q] = acc.value();
                }
            }
            next[fine.len() - 1] = vals[vals.len() - 1];
            vals = next;
        }
        out.push(vals);
    }
    Ok(out)
}

/// `x^{up_to}(t)` at arbitrary times in `[0, T]`, one vector per coordinate.
pub fn reconstruct(
    coeffs: &SchauderCoefficients,
    seq: &RefiningSequence,
    times: &[f64],
    up_to: usize,
) -> Result<Vec<Vec<f64>>> {
    let grid = reconstruct_grid(coeffs, seq, up_to)?;
    let level = seq.level(up_to);
    let horizon = seq.horizon();
    if let Some(t) = times.iter().find(|&&t| !(0.0..=horizon).contains(&t)) {
        return arg_err(format!("time {t} outside [0, {horizon}]"));
    }
    Ok(grid
        .iter()
        .map(|vals| times.iter().map(|&t| level.interpolate(vals, t)).collect())
        .collect())
}

/// Sparse change of basis from `π` coefficients to coefficients along a coarsening `σ`.
#[derive(Clone, Debug)]
pub struct TransformMatrix {
    /// `rows[j][l]` lists `(m, k, A^{m,k}_{j,l})`.
    rows: Vec<Vec<Vec<(usize, usize, f64)>>>,
}

impl TransformMatrix {
    pub fn levels(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, j: usize, l: usize) -> &[(usize, usize, f64)] {
        &self.rows[j][l]
    }

    pub fn rows_at(&self, j: usize) -> usize {
        self.rows[j].len()
    }

    /// Iterates `(j, l, row)`.
    pub fn iter_rows(&self) -> impl Iterator<Item = (usize, usize, &[(usize, usize, f64)])> {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(j, r)| r.iter().enumerate().map(move |(l, row)| (j, l, row.as_slice())))
    }

    pub fn entry(&self, j: usize, l: usize, m: usize, k: usize) -> f64 {
        self.rows[j][l]
            .iter()
            .find(|&&(mm, kk, _)| mm == m && kk == k)
            .map_or(0.0, |e| e.2)
    }

    /// `Σ_{m,k} A_{r} A_{r'}` for two rows.
    pub fn row_dot(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        let rb = &self.rows[b.0][b.1];
        self.rows[a.0][a.1]
            .iter()
            .filter_map(|&(m, k, v)| rb.iter().find(|e| e.0 == m && e.1 == k).map(|e| v * e.2))
            .collect::<CompensatedSum>()
            .value()
    }

    /// Coordinate-list CSV with header `j,l,m,k,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("j,l,m,k,value\n");
        for (j, l, row) in self.iter_rows() {
            for &(m, k, v) in row {
                out.push_str(&format!("{j},{l},{m},{k},{v:.16e}\n"));
            }
        }
        out
    }
}

/// Entries `A^{m,k}_{j,l}` for every `σ` element with `j < levels`.
///
/// An entry can be nonzero only when some kink of `e_{m,k}` lies strictly
/// inside the `σ` support; all other entries are structurally zero and are
/// not stored. This also excludes every `m > j`.
pub fn coarsening_matrix(pi: &RefiningSequence, map: &CoarseningMap, levels: usize) -> Result<TransformMatrix> {
    if !map.is_coarsening_of(pi) {
        return Err(QvError::Coarsening("map was not built from this sequence".into()));
    }
    if levels > pi.depth() {
        return Err(QvError::Level {
            requested: levels,
            available: pi.depth(),
        });
    }
    let sigma = &map.sigma;
    let basis = SchauderBasis::new(pi, levels)?;
    let mut rows = Vec::with_capacity(levels);
    for j in 0..levels {
        let mut level_rows = Vec::new();
        for s in enumerate_level(sigma, j)? {
            let st = s.triple;
            let mut row = Vec::new();
            for m in 0..=j {
                let coarse = pi.level(m);
                let first = coarse.locate(st.t1);
                let last = coarse.points().partition_point(|&p| p < st.t3).saturating_sub(1);
                let pmap = pi.parent_map(m);
                for cell in first..=last.max(first) {
                    let start = pmap[cell] - cell;
                    let count = pmap[cell + 1] - pmap[cell] - 1;
                    for k in start..start + count {
                        let e = &basis.element(m, k).triple;
                        let kinked = [e.t1, e.t2, e.t3].iter().any(|&u| u > st.t1 && u < st.t3);
                        if !kinked {
                            continue;
                        }
                        let v = st.coefficient(schauder_eval(e, st.t1), schauder_eval(e, st.t2), schauder_eval(e, st.t3));
                        row.push((m, k, v));
                    }
                }
            }
            level_rows.push(row);
        }
        rows.push(level_rows);
    }
    Ok(TransformMatrix { rows })
}

/// Coefficients along `σ`: `θ_{j,l} = Σ A^{m,k}_{j,l} η_{m,k}`; the affine part is shared.
pub fn transport_coefficients(eta: &SchauderCoefficients, a: &TransformMatrix) -> Result<SchauderCoefficients> {
    if a.levels() > eta.n {
        return Err(QvError::Truncation(format!(
            "transform needs coefficients through level {}, have {}",
            a.levels(),
            eta.n
        )));
    }
    let d = eta.d;
    let theta = a
        .rows
        .iter()
        .map(|level_rows| {
            let mut out = vec![0.0; level_rows.len() * d];
            for (l, row) in level_rows.iter().enumerate() {
                for i in 0..d {
                    out[l * d + i] = row
                        .iter()
                        .map(|&(m, k, v)| v * eta.get(m, k, i))
                        .collect::<CompensatedSum>()
                        .value();
                }
            }
            out
        })
        .collect();
    Ok(SchauderCoefficients {
        d,
        a0: eta.a0.clone(),
        a1: eta.a1.clone(),
        theta,
        n: a.levels(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::{build_kadic, build_mod3_coarse, build_split_example, coarsen, mod3_rule, CoarseningMap, DEFAULT_SPLIT_FRACTION};
    use proptest::prelude::*;

    fn tri(a: f64, b: f64, c: f64) -> SchauderTriple {
        SchauderTriple::new(a, b, c).unwrap()
    }

    fn test_sequences(levels: usize) -> Vec<RefiningSequence> {
        vec![
            build_kadic(2, 1.0, levels).unwrap(),
            build_kadic(3, 1.0, levels).unwrap(),
            build_split_example(levels, DEFAULT_SPLIT_FRACTION).unwrap(),
            build_mod3_coarse(levels).unwrap(),
        ]
    }

    /// Direct sum of tents, independent of the hierarchical evaluation.
    fn naive_eval(coeffs: &SchauderCoefficients, seq: &RefiningSequence, t: f64, up_to: usize) -> f64 {
        let mut acc = coeffs.a0[0] + coeffs.a1[0] * t / seq.horizon();
        for m in 0..up_to {
            for el in enumerate_level(seq, m).unwrap() {
                acc += coeffs.get(m, el.index.k, 0) * schauder_eval(&el.triple, t);
            }
        }
        acc
    }

    #[test]
    fn enumeration_examples() {
        let dy = build_kadic(2, 1.0, 3).unwrap();
        let l0 = enumerate_level(&dy, 0).unwrap();
        assert_eq!(l0.len(), 1);
        assert_eq!(l0[0].triple, tri(0.0, 0.5, 1.0));
        let l1 = enumerate_level(&dy, 1).unwrap();
        assert_eq!(l1.iter().map(|e| e.triple).collect::<Vec<_>>(), vec![tri(0.0, 0.25, 0.5), tri(0.5, 0.75, 1.0)]);

        let tr = build_kadic(3, 1.0, 2).unwrap();
        let l0 = enumerate_level(&tr, 0).unwrap();
        let third = 1.0 / 3.0;
        let two_thirds = 2.0 / 3.0;
        assert_eq!(l0[0].triple, tri(0.0, third, two_thirds));
        assert_eq!(l0[1].triple, tri(0.0, two_thirds, 1.0));
        assert_eq!(l0[1].index.ordinal, 2);
        assert!(enumerate_level(&tr, 2).is_err());
    }

    #[test]
    fn level_counts_match() {
        for seq in test_sequences(6) {
            for m in 0..6 {
                assert_eq!(enumerate_level(&seq, m).unwrap().len(), level_size(&seq, m));
            }
        }
    }

    #[test]
    fn haar_and_schauder_values() {
        assert_eq!(haar_eval(&tri(0.0, 0.5, 1.0), 0.1), 1.0);
        assert!((haar_eval(&tri(0.0, 0.25, 1.0), 0.1) - 3f64.sqrt()).abs() < 1e-15);
        assert!((haar_eval(&tri(0.0, 0.25, 1.0), 0.5) + 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(haar_eval(&tri(0.0, 0.25, 1.0), 1.0), 0.0);
        assert_eq!(schauder_eval(&tri(0.0, 0.5, 1.0), 0.5), 0.5);
        assert!((schauder_eval(&tri(0.0, 0.25, 1.0), 0.25) - 3f64.sqrt() / 4.0).abs() < 1e-15);
        let t = tri(0.2, 0.3, 0.9);
        assert_eq!(schauder_eval(&t, 0.2), 0.0);
        assert_eq!(schauder_eval(&t, 0.9), 0.0);
    }

    #[test]
    fn schauder_is_integral_of_haar() {
        let t = tri(0.1, 0.35, 0.5);
        let (h1, _) = t.haar_levels();
        let x = 0.2;
        assert!((schauder_eval(&t, x) - h1 * (x - 0.1)).abs() < 1e-15);
        let x = 0.45;
        assert!((schauder_eval(&t, x) - (h1 * t.left() + t.haar_levels().1 * (x - 0.35))).abs() < 1e-15);
    }

    #[test]
    fn inner_product_examples() {
        assert!((inner_product(&tri(0.0, 0.5, 1.0), &tri(0.0, 0.5, 1.0)) - 1.0).abs() < 1e-15);
        assert_eq!(inner_product(&tri(0.0, 0.25, 0.5), &tri(0.5, 0.75, 1.0)), 0.0);
        let a = tri(0.0, 1.0 / 3.0, 2.0 / 3.0);
        let b = tri(0.0, 2.0 / 3.0, 1.0);
        assert!(inner_product(&a, &b).abs() < 1e-15);
    }

    #[test]
    fn orthonormal_on_test_sequences() {
        for seq in test_sequences(6) {
            let basis = SchauderBasis::new(&seq, 6).unwrap();
            let els: Vec<_> = basis.iter().collect();
            for (i, a) in els.iter().enumerate() {
                assert!(haar_integral(&a.triple).abs() <= 1e-12);
                for (j, b) in els.iter().enumerate() {
                    let ip = inner_product(&a.triple, &b.triple);
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((ip - want).abs() <= 1e-10, "{:?} {:?} {ip}", a.index, b.index);
                }
            }
        }
    }

    #[test]
    fn supports_nested_within_parent() {
        let seq = build_kadic(4, 1.0, 2).unwrap();
        let l = enumerate_level(&seq, 1).unwrap();
        for w in l.windows(2) {
            if w[0].index.parent == w[1].index.parent {
                assert_eq!(w[0].triple.t1, w[1].triple.t1);
                assert!(w[0].triple.t3 <= w[1].triple.t2);
            }
        }
    }

    #[test]
    fn decompose_examples() {
        let dy = build_kadic(2, 1.0, 4).unwrap();
        let lin: Vec<f64> = dy.level(4).points().to_vec();
        let c = decompose_scalar(&lin, &dy, 4).unwrap();
        assert_eq!((c.a0[0], c.a1[0]), (0.0, 1.0));
        assert!(c.theta.iter().flatten().all(|&v| v == 0.0));

        let sq: Vec<f64> = dy.level(4).points().iter().map(|t| t * t).collect();
        assert_eq!(decompose_scalar(&sq, &dy, 4).unwrap().get(0, 0, 0), -0.5);

        let v = 0.7;
        let tr = tri(0.0, 0.25, 1.0);
        assert!((tr.coefficient(0.0, v, 0.0) - v * 4.0 / 3f64.sqrt()).abs() < 1e-15);

        assert!(matches!(decompose_scalar(&[0.0, 1.0], &dy, 4), Err(QvError::Argument(_))));
    }

    #[test]
    fn reconstruct_examples() {
        let dy = build_kadic(2, 1.0, 3).unwrap();
        let mut c = SchauderCoefficients::zeros(&dy, 3, 1).unwrap();
        c.a0[0] = 1.0;
        c.a1[0] = 2.0;
        let ts = [0.0, 0.3, 0.5, 1.0];
        let v = reconstruct(&c, &dy, &ts, 3).unwrap();
        for (t, x) in ts.iter().zip(&v[0]) {
            assert!((x - (1.0 + 2.0 * t)).abs() < 1e-15);
        }
        let mut c = SchauderCoefficients::zeros(&dy, 3, 1).unwrap();
        c.set(0, 0, 0, 1.0);
        let v = reconstruct(&c, &dy, &[0.25, 0.5, 0.75], 3).unwrap();
        assert_eq!(v[0], vec![0.25, 0.5, 0.25]);
    }

    #[test]
    fn reconstruct_matches_naive_sum() {
        for seq in test_sequences(5) {
            let mut c = SchauderCoefficients::zeros(&seq, 5, 1).unwrap();
            let mut s = 1.0f64;
            for m in 0..5 {
                for k in 0..c.level_len(m) {
                    s = (s * 7.31).fract() - 0.5;
                    c.set(m, k, 0, s);
                }
            }
            c.a0[0] = 0.3;
            c.a1[0] = -1.1;
            let ts: Vec<f64> = (0..=97).map(|i| i as f64 / 97.0).collect();
            let fast = reconstruct(&c, &seq, &ts, 5).unwrap();
            for (t, x) in ts.iter().zip(&fast[0]) {
                assert!((x - naive_eval(&c, &seq, *t, 5)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn json_shape() {
        let dy = build_kadic(2, 1.0, 2).unwrap();
        let c = SchauderCoefficients::zeros(&dy, 2, 2).unwrap();
        let v: serde_json::Value = serde_json::to_value(&c).unwrap();
        for key in ["d", "a0", "a1", "theta", "N"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let back: SchauderCoefficients = serde_json::from_value(v).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn transform_examples() {
        let dy = build_kadic(2, 1.0, 5).unwrap();
        let id = coarsen(&dy, |_, _| true).unwrap();
        let a = coarsening_matrix(&dy, &id, 5).unwrap();
        for (j, l, row) in a.iter_rows() {
            assert_eq!(row.len(), 1);
            assert_eq!((row[0].0, row[0].1), (j, l));
            assert!((row[0].2 - 1.0).abs() < 1e-14);
        }

        let keep = vec![vec![0, 1], vec![0, 2], vec![0, 1, 4], vec![0, 2, 8], vec![0, 4, 16], vec![0, 8, 32]];
        let map = CoarseningMap::from_keep_indices(&dy, keep).unwrap();
        let a = coarsening_matrix(&dy, &map, 2).unwrap();
        assert_eq!(a.rows_at(0), 0);
        let row = a.row(1, 0);
        let e00 = tri(0.0, 0.5, 1.0);
        let e10 = tri(0.0, 0.25, 0.5);
        let s = tri(0.0, 0.25, 1.0);
        let oracle = |e: &SchauderTriple| s.coefficient(schauder_eval(e, 0.0), schauder_eval(e, 0.25), schauder_eval(e, 1.0));
        assert!((a.entry(1, 0, 0, 0) - 1.0 / 3f64.sqrt()).abs() < 1e-10);
        assert!((a.entry(1, 0, 1, 0) - (2.0f64 / 3.0).sqrt()).abs() < 1e-10);
        assert!((a.entry(1, 0, 0, 0) - oracle(&e00)).abs() < 1e-15);
        assert!((a.entry(1, 0, 1, 0) - oracle(&e10)).abs() < 1e-15);
        let norm: f64 = row.iter().map(|e| e.2 * e.2).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transport_matches_redecomposition() {
        let dy = build_kadic(2, 1.0, 7).unwrap();
        let m3 = coarsen(&dy, mod3_rule(&dy)).unwrap();
        let a = coarsening_matrix(&dy, &m3, 7).unwrap();
        let mut eta = SchauderCoefficients::zeros(&dy, 7, 1).unwrap();
        let mut s = 0.37f64;
        for m in 0..7 {
            for k in 0..eta.level_len(m) {
                s = (s * 13.7 + 0.1).fract();
                eta.set(m, k, 0, 2.0 * s - 1.0);
            }
        }
        eta.a1[0] = 0.4;
        let theta = transport_coefficients(&eta, &a).unwrap();
        let fine = reconstruct_grid(&eta, &dy, 7).unwrap();
        let coarse: Vec<f64> = m3.keep_indices[7].iter().map(|&i| fine[0][i]).collect();
        let direct = decompose_scalar(&coarse, &m3.sigma, 7).unwrap();
        for m in 0..7 {
            for (x, y) in theta.theta[m].iter().zip(&direct.theta[m]) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        let zero = SchauderCoefficients::zeros(&dy, 7, 1).unwrap();
        assert!(transport_coefficients(&zero, &a).unwrap().theta.iter().flatten().all(|&v| v == 0.0));
        let shallow = SchauderCoefficients::zeros(&dy, 3, 1).unwrap();
        assert!(matches!(transport_coefficients(&shallow, &a), Err(QvError::Truncation(_))));
    }

    #[test]
    fn rows_orthonormal_for_mod3() {
        let dy = build_kadic(2, 1.0, 7).unwrap();
        let m3 = coarsen(&dy, mod3_rule(&dy)).unwrap();
        let a = coarsening_matrix(&dy, &m3, 7).unwrap();
        let idx: Vec<(usize, usize)> = a.iter_rows().map(|(j, l, _)| (j, l)).collect();
        for &r in &idx {
            for &q in &idx {
                let want = if r == q { 1.0 } else { 0.0 };
                assert!((a.row_dot(r, q) - want).abs() < 1e-8);
            }
        }
    }

    proptest! {
        #[test]
        fn round_trip(values in proptest::collection::vec(-10.0f64..10.0, 33)) {
            let dy = build_kadic(2, 1.0, 5).unwrap();
            let c = decompose_scalar(&values, &dy, 5).unwrap();
            let back = reconstruct_grid(&c, &dy, 5).unwrap();
            for (x, y) in values.iter().zip(&back[0]) {
                prop_assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn round_trip_split(values in proptest::collection::vec(-1.0f64..1.0, 17), frac in 0.1f64..0.9) {
            let seq = build_split_example(4, frac).unwrap();
            let c = decompose_scalar(&values, &seq, 4).unwrap();
            let back = reconstruct_grid(&c, &seq, 4).unwrap();
            for (x, y) in values.iter().zip(&back[0]) {
                prop_assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()));
            }
        }
    }
}
