//! Nested interval partitions of `[0, T]`.
//!
//! A [`RefiningSequence`] stores levels `0..=depth`, where level 0 is always
//! the trivial partition `{0, T}`. Refinement is tracked by integer parent
//! maps: `parent_map(n)[k]` is the index in level `n + 1` of the `k`-th point
//! of level `n`. Builders produce those maps by construction and copy parent
//! points bit-for-bit into the child level, so membership never depends on
//! float comparisons.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, QvError, Result};

/// One partition `0 = t_0 < t_1 < ... < t_N = T`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionLevel {
    points: Vec<f64>,
    /// Set when every cell is known to have exactly this length, either by
    /// construction (k-adic grids) or because all differences agree bitwise.
    uniform_step: Option<f64>,
}

impl PartitionLevel {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        validate_points(&points)?;
        let first = points[1] - points[0];
        let uniform = points.windows(2).all(|w| (w[1] - w[0]).to_bits() == first.to_bits());
        Ok(Self {
            points,
            uniform_step: uniform.then_some(first),
        })
    }

    /// A level whose cells all have the exact length `step`, even if the
    /// rounded points do not differ by exactly `step`.
    pub(crate) fn with_uniform_step(points: Vec<f64>, step: f64) -> Result<Self> {
        validate_points(&points)?;
        Ok(Self {
            points,
            uniform_step: Some(step),
        })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn horizon(&self) -> f64 {
        *self.points.last().expect("validated non-empty")
    }

    /// Number of cells, `N(π)`.
    pub fn num_cells(&self) -> usize {
        self.points.len() - 1
    }

    pub fn uniform_step(&self) -> Option<f64> {
        self.uniform_step
    }

    #[inline]
    pub fn cell_len(&self, i: usize) -> f64 {
        match self.uniform_step {
            Some(h) => h,
            None => self.points[i + 1] - self.points[i],
        }
    }

    /// Mesh `|π|`, the largest cell.
    pub fn mesh(&self) -> f64 {
        (0..self.num_cells()).map(|i| self.cell_len(i)).fold(0.0, f64::max)
    }

    /// Smallest cell length.
    pub fn min_step(&self) -> f64 {
        (0..self.num_cells())
            .map(|i| self.cell_len(i))
            .fold(f64::INFINITY, f64::min)
    }

    /// Index of the cell `[t_i, t_{i+1})` containing `t`, clamped to the
    /// first/last cell outside `[0, T)`.
    pub fn locate(&self, t: f64) -> usize {
        let idx = self.points.partition_point(|&p| p <= t);
        idx.saturating_sub(1).min(self.num_cells() - 1)
    }

    /// Piecewise-linear interpolation of `values` (one per point) at `t`.
    pub fn interpolate(&self, values: &[f64], t: f64) -> f64 {
        debug_assert_eq!(values.len(), self.points.len());
        if t <= self.points[0] {
            return values[0];
        }
        if t >= self.horizon() {
            return values[values.len() - 1];
        }
        let i = self.locate(t);
        let (a, b) = (self.points[i], self.points[i + 1]);
        if t == a {
            return values[i];
        }
        let lam = (t - a) / (b - a);
        values[i] + lam * (values[i + 1] - values[i])
    }
}

fn validate_points(points: &[f64]) -> Result<()> {
    if points.len() < 2 {
        return Err(QvError::Partition("a partition needs at least two points".into()));
    }
    if points[0] != 0.0 {
        return Err(QvError::Partition(format!("first point must be 0, got {}", points[0])));
    }
    if !points.iter().all(|p| p.is_finite()) {
        return Err(QvError::Partition("non-finite partition point".into()));
    }
    if let Some(w) = points.windows(2).find(|w| w[1] <= w[0]) {
        return Err(QvError::Partition(format!(
            "points must be strictly increasing ({} then {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

/// A truncated refining sequence `π^0 ⊆ π^1 ⊆ ... ⊆ π^depth` with parent maps.
#[derive(Clone, Debug, PartialEq)]
pub struct RefiningSequence {
    levels: Vec<PartitionLevel>,
    parent_maps: Vec<Vec<usize>>,
}

impl RefiningSequence {
    /// Builds a sequence from explicit levels, reconstructing parent maps by
    /// exact (bitwise) point matching. Level 0 must be `{0, T}`.
    pub fn new(levels: Vec<PartitionLevel>) -> Result<Self> {
        if levels.is_empty() {
            return Err(QvError::Partition("no levels".into()));
        }
        let mut parent_maps = Vec::with_capacity(levels.len() - 1);
        for n in 0..levels.len() - 1 {
            let (coarse, fine) = (levels[n].points(), levels[n + 1].points());
            let mut map = Vec::with_capacity(coarse.len());
            let mut j = 0;
            for (k, &t) in coarse.iter().enumerate() {
                while j < fine.len() && fine[j] < t {
                    j += 1;
                }
                if j == fine.len() || fine[j].to_bits() != t.to_bits() {
                    return Err(QvError::Partition(format!(
                        "point {k} ({t}) of level {n} missing from level {}",
                        n + 1
                    )));
                }
                map.push(j);
            }
            parent_maps.push(map);
        }
        Self::from_parts(levels, parent_maps)
    }

    /// Like [`RefiningSequence::new`] but takes raw point lists; prepends the
    /// trivial level `{0, T}` when the first list is not already trivial.
    pub fn from_points(mut levels: Vec<Vec<f64>>) -> Result<Self> {
        let horizon = match levels.first().and_then(|l| l.last()) {
            Some(&t) => t,
            None => return Err(QvError::Partition("no levels".into())),
        };
        if levels[0].len() != 2 {
            levels.insert(0, vec![0.0, horizon]);
        }
        let levels = levels
            .into_iter()
            .map(PartitionLevel::new)
            .collect::<Result<Vec<_>>>()?;
        Self::new(levels)
    }

    pub(crate) fn from_parts(levels: Vec<PartitionLevel>, parent_maps: Vec<Vec<usize>>) -> Result<Self> {
        let seq = Self { levels, parent_maps };
        seq.validate()?;
        Ok(seq)
    }

    fn validate(&self) -> Result<()> {
        let horizon = self.horizon();
        if !(horizon > 0.0) {
            return Err(QvError::Partition("horizon must be positive".into()));
        }
        if self.levels[0].points().len() != 2 {
            return Err(QvError::Partition("level 0 must be the trivial partition {0, T}".into()));
        }
        if self.parent_maps.len() + 1 != self.levels.len() {
            return Err(QvError::Partition("one parent map per level transition required".into()));
        }
        for (n, level) in self.levels.iter().enumerate() {
            if level.horizon().to_bits() != horizon.to_bits() {
                return Err(QvError::Partition(format!("level {n} does not end at T")));
            }
        }
        for (n, map) in self.parent_maps.iter().enumerate() {
            check_parent_map(&self.levels[n], &self.levels[n + 1], map)
                .map_err(|msg| QvError::Partition(format!("level {n}: {msg}")))?;
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.levels[0].horizon()
    }

    /// Deepest stored level index.
    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, n: usize) -> &PartitionLevel {
        &self.levels[n]
    }

    pub fn try_level(&self, n: usize) -> Result<&PartitionLevel> {
        self.levels.get(n).ok_or(QvError::Level {
            requested: n,
            available: self.depth(),
        })
    }

    pub fn levels(&self) -> &[PartitionLevel] {
        &self.levels
    }

    /// `p(n, ·)`: indices in level `n + 1` of the points of level `n`.
    pub fn parent_map(&self, n: usize) -> &[usize] {
        &self.parent_maps[n]
    }

    /// Composition of parent maps: index in level `to` of every point of level `from`.
    pub fn embed(&self, from: usize, to: usize) -> Vec<usize> {
        assert!(from <= to && to <= self.depth(), "embed({from}, {to}) out of range");
        let mut idx: Vec<usize> = (0..self.levels[from].points().len()).collect();
        for n in from..to {
            let map = &self.parent_maps[n];
            for i in idx.iter_mut() {
                *i = map[*i];
            }
        }
        idx
    }

    /// For level `n ≥ 1`: the level-`(n-1)` cell containing each level-`n` cell.
    pub fn cell_parents(&self, n: usize) -> Vec<usize> {
        assert!(n >= 1 && n <= self.depth());
        let map = &self.parent_maps[n - 1];
        let mut out = Vec::with_capacity(self.levels[n].num_cells());
        for k in 0..map.len() - 1 {
            out.extend(std::iter::repeat_n(k, map[k + 1] - map[k]));
        }
        out
    }

    /// The first `depth + 1` levels.
    pub fn truncate(&self, depth: usize) -> Result<Self> {
        if depth > self.depth() {
            return Err(QvError::Level {
                requested: depth,
                available: self.depth(),
            });
        }
        Ok(Self {
            levels: self.levels[..=depth].to_vec(),
            parent_maps: self.parent_maps[..depth].to_vec(),
        })
    }

    pub fn to_json(&self) -> SequenceJson {
        SequenceJson {
            horizon: self.horizon(),
            levels: self.levels.iter().map(|l| l.points().to_vec()).collect(),
        }
    }

    pub fn from_json(doc: &SequenceJson) -> Result<Self> {
        let seq = Self::from_points(doc.levels.clone())?;
        if seq.horizon().to_bits() != doc.horizon.to_bits() {
            return Err(QvError::Partition(format!(
                "declared T = {} but levels end at {}",
                doc.horizon,
                seq.horizon()
            )));
        }
        Ok(seq)
    }
}

fn check_parent_map(
    coarse: &PartitionLevel,
    fine: &PartitionLevel,
    map: &[usize],
) -> std::result::Result<(), String> {
    if map.len() != coarse.points().len() {
        return Err("parent map length mismatch".into());
    }
    if map[0] != 0 || *map.last().unwrap() != fine.num_cells() {
        return Err("parent map must fix both endpoints".into());
    }
    if map.windows(2).any(|w| w[1] <= w[0]) {
        return Err("parent map must be strictly increasing".into());
    }
    for (k, &j) in map.iter().enumerate() {
        if fine.points().get(j).map(|p| p.to_bits()) != Some(coarse.points()[k].to_bits()) {
            return Err(format!("point {k} is not carried bit-identically into the finer level"));
        }
    }
    Ok(())
}

/// Serialized form: `{"T": number, "levels": [[points...]...]}`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SequenceJson {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub levels: Vec<Vec<f64>>,
}

/// Refines every cell `[a, b]` of each level by the interior points returned
/// by `split(level, a, b)`; parent points are copied unchanged.
pub fn refine_by<F>(horizon: f64, n_levels: usize, mut split: F) -> Result<RefiningSequence>
where
    F: FnMut(usize, f64, f64) -> Vec<f64>,
{
    if !(horizon > 0.0) {
        return arg_err("horizon must be positive");
    }
    let mut levels = vec![PartitionLevel::new(vec![0.0, horizon])?];
    let mut maps = Vec::with_capacity(n_levels);
    for n in 0..n_levels {
        let coarse = levels[n].points();
        let mut points = Vec::with_capacity(coarse.len() * 2);
        let mut map = Vec::with_capacity(coarse.len());
        for w in coarse.windows(2) {
            map.push(points.len());
            points.push(w[0]);
            points.extend(split(n, w[0], w[1]));
        }
        map.push(points.len());
        points.push(coarse[coarse.len() - 1]);
        levels.push(PartitionLevel::new(points)?);
        maps.push(map);
    }
    RefiningSequence::from_parts(levels, maps)
}

/// The k-adic sequence: level `n` has points `jT/k^n`.
pub fn build_kadic(k: usize, horizon: f64, n_levels: usize) -> Result<RefiningSequence> {
    if k < 2 {
        return arg_err(format!("k-adic base must be at least 2, got {k}"));
    }
    if n_levels < 1 {
        return arg_err("at least one level required");
    }
    if !(horizon > 0.0) {
        return arg_err("horizon must be positive");
    }
    let mut levels = Vec::with_capacity(n_levels + 1);
    let mut maps = Vec::with_capacity(n_levels);
    let mut count: u64 = 1;
    for n in 0..=n_levels {
        if n > 0 {
            count = count
                .checked_mul(k as u64)
                .filter(|&c| c <= 1 << 40)
                .ok_or_else(|| QvError::Argument("k-adic level too deep".into()))?;
            maps.push((0..=count / k as u64).map(|j| (j * k as u64) as usize).collect());
        }
        let denom = count as f64;
        // j/k^n is a single correctly rounded division, so the same rational
        // always yields the same float at every level.
        let points = (0..=count).map(|j| (j as f64 / denom) * horizon).collect();
        levels.push(PartitionLevel::with_uniform_step(points, horizon / denom)?);
    }
    RefiningSequence::from_parts(levels, maps)
}

pub const DEFAULT_SPLIT_FRACTION: f64 = 1.0 / 2.5;

/// Every cell `[a, b]` is split once at `a + (b - a) * fraction`.
pub fn build_split_example(n_levels: usize, fraction: f64) -> Result<RefiningSequence> {
    build_split_example_on(1.0, n_levels, fraction)
}

pub fn build_split_example_on(horizon: f64, n_levels: usize, fraction: f64) -> Result<RefiningSequence> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return arg_err(format!("split fraction must lie in (0, 1), got {fraction}"));
    }
    if n_levels < 1 {
        return arg_err("at least one level required");
    }
    if fraction == 0.5 {
        // The midpoint split is the dyadic sequence; reuse its exact grid.
        return build_kadic(2, horizon, n_levels);
    }
    refine_by(horizon, n_levels, |_, a, b| vec![a + (b - a) * fraction])
}

/// Dyadic points `j/2^n` with `j mod 3 ≠ 0`, plus the endpoints.
pub fn build_mod3_coarse(n_levels: usize) -> Result<RefiningSequence> {
    let dyadic = build_kadic(2, 1.0, n_levels)?;
    Ok(coarsen(&dyadic, mod3_rule(&dyadic))?.sigma)
}

/// Keep rule of the mod-3 coarsening of a sequence: index `j` survives when
/// it is an endpoint or `j mod 3 ≠ 0`.
pub fn mod3_rule(seq: &RefiningSequence) -> impl Fn(usize, usize) -> bool + '_ {
    move |n, j| j == 0 || j == seq.level(n).num_cells() || j % 3 != 0
}

/// Path-driven partition: successive first exits of bands of width `2^-n`,
/// resolved on the sampling grid. `T` is appended at the end.
pub fn lebesgue_partition(times: &[f64], values: &[f64], n: u32) -> Result<PartitionLevel> {
    if times.len() != values.len() || times.len() < 2 {
        return arg_err("times and values must have equal length ≥ 2");
    }
    if times[0] != 0.0 {
        return arg_err("sampling grid must start at 0");
    }
    let threshold = 2f64.powi(-(n as i32));
    let horizon = times[times.len() - 1];
    let mut points = vec![0.0];
    let mut reference = values[0];
    for (&t, &x) in times.iter().zip(values).skip(1) {
        if (x - reference).abs() >= threshold {
            points.push(t);
            reference = x;
        }
    }
    if *points.last().unwrap() != horizon {
        points.push(horizon);
    }
    PartitionLevel::new(points)
}

/// Samples `path` on `samples + 1` uniform times in `[0, T]` and builds the
/// Lebesgue partition of level `n`.
pub fn lebesgue_partition_of<F: Fn(f64) -> f64>(
    path: F,
    horizon: f64,
    samples: usize,
    n: u32,
) -> Result<PartitionLevel> {
    if samples < 1 {
        return arg_err("need at least one sampling step");
    }
    let times: Vec<f64> = (0..=samples)
        .map(|i| (i as f64 / samples as f64) * horizon)
        .collect();
    let values: Vec<f64> = times.iter().map(|&t| path(t)).collect();
    lebesgue_partition(&times, &values, n)
}

/// Per-level structural summary of a sequence.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct SequenceReport {
    pub refining: bool,
    /// `max_{n,k} p(n, k+1) - p(n, k)`: the number of finer cells per coarse cell.
    pub branching_bound_m: usize,
    /// `|π^n| / min cell` per level.
    pub balanced_ratios: Vec<f64>,
    /// `|π^n| / |π^{n+1}|` per transition.
    pub complete_ratios: Vec<f64>,
    pub mesh: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn analyze_sequence(seq: &RefiningSequence) -> SequenceReport {
    let refining = (0..seq.depth())
        .all(|n| check_parent_map(seq.level(n), seq.level(n + 1), seq.parent_map(n)).is_ok());
    let branching_bound_m = (0..seq.depth())
        .flat_map(|n| seq.parent_map(n).windows(2).map(|w| w[1] - w[0]).collect::<Vec<_>>())
        .max()
        .unwrap_or(1);
    let mesh: Vec<f64> = seq.levels().iter().map(PartitionLevel::mesh).collect();
    SequenceReport {
        refining,
        branching_bound_m,
        balanced_ratios: seq.levels().iter().map(|l| l.mesh() / l.min_step()).collect(),
        complete_ratios: mesh.windows(2).map(|w| w[0] / w[1]).collect(),
        counts: seq.levels().iter().map(PartitionLevel::num_cells).collect(),
        mesh,
    }
}

/// A coarsening `σ ⊆ π`: per level, the retained indices into `π^n`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseningMap {
    pub keep_indices: Vec<Vec<usize>>,
    pub sigma: RefiningSequence,
}

impl CoarseningMap {
    pub fn from_keep_indices(pi: &RefiningSequence, keep_indices: Vec<Vec<usize>>) -> Result<Self> {
        if keep_indices.len() != pi.depth() + 1 {
            return Err(QvError::Coarsening(format!(
                "need keep indices for {} levels, got {}",
                pi.depth() + 1,
                keep_indices.len()
            )));
        }
        for (n, keep) in keep_indices.iter().enumerate() {
            let last = pi.level(n).num_cells();
            if keep.first() != Some(&0) || keep.last() != Some(&last) {
                return Err(QvError::Coarsening(format!("level {n} must keep both endpoints")));
            }
            if keep.windows(2).any(|w| w[1] <= w[0]) || keep.iter().any(|&j| j > last) {
                return Err(QvError::Coarsening(format!(
                    "level {n} keep indices must be strictly increasing and in range"
                )));
            }
        }
        let mut levels = Vec::with_capacity(keep_indices.len());
        for (n, keep) in keep_indices.iter().enumerate() {
            let pts = pi.level(n).points();
            levels.push(PartitionLevel::new(keep.iter().map(|&j| pts[j]).collect())?);
        }
        let mut maps = Vec::with_capacity(pi.depth());
        for n in 0..pi.depth() {
            let pmap = pi.parent_map(n);
            let next = &keep_indices[n + 1];
            let mut map = Vec::with_capacity(keep_indices[n].len());
            for &j in &keep_indices[n] {
                match next.binary_search(&pmap[j]) {
                    Ok(pos) => map.push(pos),
                    Err(_) => {
                        return Err(QvError::Coarsening(format!(
                            "kept point {j} of level {n} is dropped at level {}",
                            n + 1
                        )))
                    }
                }
            }
            maps.push(map);
        }
        let sigma = RefiningSequence::from_parts(levels, maps).map_err(|e| QvError::Coarsening(e.to_string()))?;
        Ok(Self { keep_indices, sigma })
    }

    /// Whether this map was built from `pi` (its keep indices select exactly
    /// the sigma points out of `pi`).
    pub fn is_coarsening_of(&self, pi: &RefiningSequence) -> bool {
        self.keep_indices.len() == pi.depth() + 1
            && self.keep_indices.iter().enumerate().all(|(n, keep)| {
                let pts = pi.level(n).points();
                let sig = self.sigma.level(n).points();
                keep.len() == sig.len()
                    && keep
                        .iter()
                        .zip(sig)
                        .all(|(&j, s)| pts.get(j).map(|p| p.to_bits()) == Some(s.to_bits()))
            })
    }
}

/// Applies a per-level keep predicate `keep(n, j)` to `seq`.
pub fn coarsen<F: Fn(usize, usize) -> bool>(seq: &RefiningSequence, keep: F) -> Result<CoarseningMap> {
    let keep_indices = (0..=seq.depth())
        .map(|n| (0..seq.level(n).points().len()).filter(|&j| keep(n, j)).collect())
        .collect();
    CoarseningMap::from_keep_indices(seq, keep_indices)
}

/// Coarsening whose level `n` keeps exactly the points of level `source(n)`
/// (which must not exceed `n`).
pub fn coarsen_to_levels<F: Fn(usize) -> usize>(seq: &RefiningSequence, source: F) -> Result<CoarseningMap> {
    let keep_indices = (0..=seq.depth())
        .map(|n| {
            let src = source(n);
            if src > n {
                return Err(QvError::Coarsening(format!("level {n} cannot keep level {src}")));
            }
            Ok(seq.embed(src, n))
        })
        .collect::<Result<Vec<_>>>()?;
    CoarseningMap::from_keep_indices(seq, keep_indices)
}

/// Named coarsening rules used by configuration files.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum CoarseningRule {
    Identity,
    Mod3,
    /// Level `n` keeps the points of level `⌈n/2⌉`.
    HalfLevel,
}

pub fn coarsen_by_rule(seq: &RefiningSequence, rule: CoarseningRule) -> Result<CoarseningMap> {
    match rule {
        CoarseningRule::Identity => coarsen(seq, |_, _| true),
        CoarseningRule::Mod3 => coarsen(seq, mod3_rule(seq)),
        CoarseningRule::HalfLevel => coarsen_to_levels(seq, |n| n.div_ceil(2)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enumerate(k: u64, n: u32) -> Vec<f64> {
        (0..=k.pow(n)).map(|j| j as f64 / k.pow(n) as f64).collect()
    }

    #[test]
    fn kadic_examples() {
        let seq = build_kadic(2, 1.0, 1).unwrap();
        assert_eq!(seq.level(1).points(), &[0.0, 0.5, 1.0]);

        let seq = build_kadic(2, 1.0, 3).unwrap();
        assert_eq!(seq.parent_map(2)[1], 2);
        assert_eq!(seq.level(3).mesh(), 0.125);
        assert_eq!(seq.level(3).num_cells(), 8);
        assert_eq!(seq.level(3).points(), enumerate(2, 3).as_slice());

        let seq = build_kadic(3, 1.0, 2).unwrap();
        assert_eq!(seq.level(2).num_cells(), 9);
        assert_eq!(seq.level(2).points(), enumerate(3, 2).as_slice());
        assert_eq!(seq.level(2).mesh(), 1.0 / 9.0);
        assert_eq!(seq.level(2).min_step(), 1.0 / 9.0);
    }

    #[test]
    fn kadic_rejects_bad_arguments() {
        assert!(matches!(build_kadic(1, 1.0, 3), Err(QvError::Argument(_))));
        assert!(matches!(build_kadic(2, 1.0, 0), Err(QvError::Argument(_))));
        assert!(matches!(build_kadic(2, -1.0, 2), Err(QvError::Argument(_))));
    }

    #[test]
    fn kadic_parent_map_is_multiplication() {
        let seq = build_kadic(3, 2.0, 4).unwrap();
        for n in 0..4 {
            for (j, &p) in seq.parent_map(n).iter().enumerate() {
                assert_eq!(p, 3 * j);
                assert_eq!(seq.level(n + 1).points()[p].to_bits(), seq.level(n).points()[j].to_bits());
            }
        }
    }

    #[test]
    fn split_examples() {
        let seq = build_split_example(1, DEFAULT_SPLIT_FRACTION).unwrap();
        assert_eq!(seq.level(1).points(), &[0.0, 0.4, 1.0]);

        let seq = build_split_example(2, DEFAULT_SPLIT_FRACTION).unwrap();
        let l2 = seq.level(2);
        assert!((l2.mesh() - 0.36).abs() < 1e-15);
        assert!((l2.min_step() - 0.16).abs() < 1e-15);
        assert!((l2.mesh() / l2.min_step() - 2.25).abs() < 1e-12);

        let half = build_split_example(5, 0.5).unwrap();
        assert_eq!(half, build_kadic(2, 1.0, 5).unwrap());
        let report = analyze_sequence(&build_split_example(4, DEFAULT_SPLIT_FRACTION).unwrap());
        assert_eq!(report.branching_bound_m, 2);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        assert!(build_split_example(3, 0.0).is_err());
        assert!(build_split_example(3, 1.0).is_err());
        assert!(build_split_example(3, 1.5).is_err());
    }

    #[test]
    fn mod3_examples() {
        let seq = build_mod3_coarse(3).unwrap();
        assert_eq!(seq.level(2).points(), &[0.0, 0.25, 0.5, 1.0]);
        assert_eq!(
            seq.level(3).points(),
            &[0.0, 0.125, 0.25, 0.5, 0.625, 0.875, 1.0]
        );
        assert!(analyze_sequence(&seq).refining);
        let dyadic = build_kadic(2, 1.0, 3).unwrap();
        for n in 0..=3 {
            for p in seq.level(n).points() {
                assert!(dyadic.level(n).points().contains(p));
            }
        }
    }

    #[test]
    fn lebesgue_examples() {
        let l = lebesgue_partition_of(|t| t, 1.0, 1024, 1).unwrap();
        assert_eq!(l.points(), &[0.0, 0.5, 1.0]);
        let l = lebesgue_partition_of(|_| 0.0, 1.0, 1024, 5).unwrap();
        assert_eq!(l.points(), &[0.0, 1.0]);
        let l = lebesgue_partition_of(|t| t, 1.0, 1024, 2).unwrap();
        assert_eq!(l.points(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn analyze_examples() {
        let r = analyze_sequence(&build_kadic(2, 1.0, 6).unwrap());
        assert!(r.refining);
        assert_eq!(r.branching_bound_m, 2);
        assert!(r.balanced_ratios.iter().all(|&x| x == 1.0));
        assert!(r.complete_ratios.iter().all(|&x| x == 2.0));
        assert_eq!(r.counts, vec![1, 2, 4, 8, 16, 32, 64]);

        let r = analyze_sequence(&build_split_example(6, DEFAULT_SPLIT_FRACTION).unwrap());
        for (n, &ratio) in r.balanced_ratios.iter().enumerate() {
            assert!((ratio / 1.5f64.powi(n as i32) - 1.0).abs() < 1e-12, "level {n}: {ratio}");
        }
        for &c in &r.complete_ratios {
            assert!((c - 1.0 / 0.6).abs() < 1e-12);
        }
        assert_eq!(analyze_sequence(&build_kadic(3, 1.0, 3).unwrap()).branching_bound_m, 3);
    }

    #[test]
    fn coarsen_identity_and_rules() {
        let dyadic = build_kadic(2, 1.0, 6).unwrap();
        let id = coarsen(&dyadic, |_, _| true).unwrap();
        assert_eq!(id.sigma, dyadic);
        assert!(id.is_coarsening_of(&dyadic));

        let m3 = coarsen(&dyadic, mod3_rule(&dyadic)).unwrap();
        assert_eq!(m3.sigma, build_mod3_coarse(6).unwrap());

        let half = coarsen_by_rule(&dyadic, CoarseningRule::HalfLevel).unwrap();
        for n in 0..=6 {
            assert_eq!(half.sigma.level(n).points(), dyadic.level(n.div_ceil(2)).points());
        }
    }

    #[test]
    fn coarsen_rejects_bad_selectors() {
        let dyadic = build_kadic(2, 1.0, 3).unwrap();
        // drops the right endpoint
        let e = coarsen(&dyadic, |n, j| j < dyadic.level(n).num_cells()).unwrap_err();
        assert!(matches!(e, QvError::Coarsening(_)));
        // keeps 1/2 at level 1 but drops it at level 2
        let e = coarsen(&dyadic, |n, j| !(n == 2 && j == 2)).unwrap_err();
        assert!(matches!(e, QvError::Coarsening(_)));
    }

    #[test]
    fn json_round_trip_rebuilds_maps() {
        let seq = build_split_example(4, DEFAULT_SPLIT_FRACTION).unwrap();
        let text = serde_json::to_string(&seq.to_json()).unwrap();
        let back = RefiningSequence::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back.levels().len(), seq.levels().len());
        for n in 0..seq.depth() {
            assert_eq!(back.parent_map(n), seq.parent_map(n));
        }
        // levels given without the trivial level get it prepended
        let doc = SequenceJson { horizon: 1.0, levels: vec![vec![0.0, 0.5, 1.0]] };
        let s = RefiningSequence::from_json(&doc).unwrap();
        assert_eq!(s.depth(), 1);
        let bad = SequenceJson { horizon: 1.0, levels: vec![vec![0.0, 0.5, 1.0], vec![0.0, 0.25, 1.0]] };
        assert!(RefiningSequence::from_json(&bad).is_err());
    }

    #[test]
    fn invalid_levels_rejected() {
        assert!(PartitionLevel::new(vec![0.0]).is_err());
        assert!(PartitionLevel::new(vec![0.1, 1.0]).is_err());
        assert!(PartitionLevel::new(vec![0.0, 0.5, 0.5, 1.0]).is_err());
    }

    #[test]
    fn mesh_bounds_hold() {
        for seq in [
            build_kadic(2, 1.0, 6).unwrap(),
            build_kadic(3, 1.0, 5).unwrap(),
            build_split_example(7, DEFAULT_SPLIT_FRACTION).unwrap(),
            build_mod3_coarse(7).unwrap(),
        ] {
            let r = analyze_sequence(&seq);
            assert!(r.mesh.windows(2).all(|w| w[1] <= w[0]));
            for l in seq.levels() {
                let avg = seq.horizon() / l.num_cells() as f64;
                assert!(l.min_step() <= avg * (1.0 + 1e-12) && avg <= l.mesh() * (1.0 + 1e-12));
            }
        }
    }
}
