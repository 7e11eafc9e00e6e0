//! Support-overlap estimates between labeled point clouds.
//!
//! Class supports are approximated by unions of k-NN balls: each sample
//! `y` of class `j` owns a ball whose radius is the distance to its k-th
//! nearest same-class neighbour. A sample `x` of class `i` lies in the
//! overlap of `i` and `j` when it falls inside the ball of its nearest
//! class-`j` sample. The pairwise overlap is the covered fraction of the
//! pooled samples of both classes, and `tau_hat` is the largest pairwise
//! overlap.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_from, stream};

pub const MIN_PER_CLASS: usize = 20;
pub const DEFAULT_K: usize = 5;

/// Points in `R^dim` stored row-major, one label per point.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub dim: usize,
    pub points: Vec<f64>,
    pub labels: Vec<usize>,
}

impl SampleSet {
    pub fn new(dim: usize, points: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || points.len() != dim * labels.len() {
            return Err(Error::Shape(format!(
                "{} coordinates for {} points of dimension {dim}",
                points.len(),
                labels.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample coordinates".into()));
        }
        Ok(Self { dim, points, labels })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("rows differ in dimension".into()));
        }
        Self::new(dim, rows.concat(), labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// Keeps only the listed coordinates.
    pub fn project(&self, coords: &[usize]) -> Result<Self> {
        if coords.iter().any(|&c| c >= self.dim) {
            return Err(Error::Index(format!("coordinate out of range for dimension {}", self.dim)));
        }
        let points = (0..self.len())
            .flat_map(|i| coords.iter().map(move |&c| (i, c)))
            .map(|(i, c)| self.points[i * self.dim + c])
            .collect();
        Self::new(coords.len(), points, self.labels.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairOverlap {
    pub class_a: usize,
    pub class_b: usize,
    pub overlap: f64,
    pub covered_a: usize,
    pub covered_b: usize,
    pub n_a: usize,
    pub n_b: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapEstimate {
    pub tau_hat: f64,
    pub pairs: Vec<PairOverlap>,
    pub n: usize,
    pub k: usize,
    pub seed: Option<u64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Members of one class sorted by their first coordinate, so that neighbour
/// searches can stop once the gap along that axis alone exceeds the best
/// distance found so far.
struct ClassCloud<'a> {
    points: Vec<&'a [f64]>,
    /// Position of each sorted member in the original sample order.
    order: Vec<usize>,
    keys: Vec<f64>,
    /// Squared k-th nearest same-class neighbour distance per sorted member.
    radius: Vec<f64>,
}

impl<'a> ClassCloud<'a> {
    fn build(points: Vec<&'a [f64]>, k: usize) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| points[a][0].total_cmp(&points[b][0]).then(a.cmp(&b)));
        let points: Vec<&[f64]> = order.iter().map(|&i| points[i]).collect();
        let keys: Vec<f64> = points.iter().map(|p| p[0]).collect();
        let mut cloud = Self { points, order, keys, radius: Vec::new() };
        cloud.radius = (0..cloud.points.len()).into_par_iter().map(|i| cloud.kth_distance(i, k)).collect();
        cloud
    }

    fn kth_distance(&self, i: usize, k: usize) -> f64 {
        let p = self.points[i];
        let mut best: Vec<f64> = Vec::with_capacity(k + 1);
        let visit = |j: usize, best: &mut Vec<f64>| {
            let d = sq_dist(p, self.points[j]);
            if best.len() < k || d < best[k - 1] {
                let at = best.partition_point(|&b| b <= d);
                best.insert(at, d);
                best.truncate(k);
            }
        };
        let (mut lo, mut hi) = (i, i + 1);
        loop {
            let bound = if best.len() == k { best[k - 1] } else { f64::INFINITY };
            let gap_lo = (lo > 0).then(|| (p[0] - self.keys[lo - 1]).powi(2)).filter(|&g| g <= bound);
            let gap_hi = (hi < self.points.len()).then(|| (self.keys[hi] - p[0]).powi(2)).filter(|&g| g <= bound);
            match (gap_lo, gap_hi) {
                (None, None) => break,
                (Some(a), Some(b)) if a <= b => {
                    lo -= 1;
                    visit(lo, &mut best);
                }
                (Some(_), None) => {
                    lo -= 1;
                    visit(lo, &mut best);
                }
                _ => {
                    visit(hi, &mut best);
                    hi += 1;
                }
            }
        }
        best[k - 1]
    }

    /// Whether `x` falls in the ball of its nearest member. Equidistant
    /// members resolve to the earliest one in sample order.
    fn covers(&self, x: &[f64]) -> bool {
        let start = self.keys.partition_point(|&key| key < x[0]);
        let mut best = (f64::INFINITY, usize::MAX, usize::MAX);
        let consider = |j: usize, best: &mut (f64, usize, usize)| {
            let d = sq_dist(x, self.points[j]);
            if (d, self.order[j]) < (best.0, best.1) {
                *best = (d, self.order[j], j);
            }
        };
        for j in start..self.points.len() {
            if (self.keys[j] - x[0]).powi(2) > best.0 {
                break;
            }
            consider(j, &mut best);
        }
        for j in (0..start).rev() {
            if (x[0] - self.keys[j]).powi(2) > best.0 {
                break;
            }
            consider(j, &mut best);
        }
        best.0 <= self.radius[best.2]
    }

    fn count_covered(&self, other: &ClassCloud<'_>) -> usize {
        other.points.par_iter().filter(|x| self.covers(x)).count()
    }
}

/// Estimates the largest pairwise support overlap between classes.
pub fn estimate_tau(samples: &SampleSet, k: usize) -> Result<OverlapEstimate> {
    if k < 3 {
        return Err(Error::Parameter(format!("k must be at least 3, got {k}")));
    }
    let mut groups: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for i in 0..samples.len() {
        groups.entry(samples.labels[i]).or_default().push(samples.point(i));
    }
    if groups.len() < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 classes, got {}", groups.len())));
    }
    if let Some((c, g)) = groups.iter().find(|(_, g)| g.len() < MIN_PER_CLASS) {
        return Err(Error::InsufficientData(format!(
            "class {c} has {} samples, need at least {MIN_PER_CLASS}",
            g.len()
        )));
    }
    if let Some((c, g)) = groups.iter().find(|(_, g)| g.len() <= k) {
        return Err(Error::InsufficientData(format!("class {c} has {} samples, k = {k} needs more", g.len())));
    }
    let classes: Vec<usize> = groups.keys().copied().collect();
    let clouds: Vec<ClassCloud> = groups.into_values().map(|pts| ClassCloud::build(pts, k)).collect();

    let mut pairs = Vec::new();
    for a in 0..clouds.len() {
        for b in a + 1..clouds.len() {
            let covered_a = clouds[b].count_covered(&clouds[a]);
            let covered_b = clouds[a].count_covered(&clouds[b]);
            let (n_a, n_b) = (clouds[a].points.len(), clouds[b].points.len());
            pairs.push(PairOverlap {
                class_a: classes[a],
                class_b: classes[b],
                overlap: (covered_a + covered_b) as f64 / (n_a + n_b) as f64,
                covered_a,
                covered_b,
                n_a,
                n_b,
            });
        }
    }
    let tau_hat = pairs.iter().map(|p| p.overlap).fold(0.0, f64::max);
    Ok(OverlapEstimate { tau_hat, pairs, n: samples.len(), k, seed: None })
}

/// Uniform samples in `[-1, 1]^3`, labeled 1 on or above `z = x^2`.
pub fn surface_samples(n: usize, seed: u64) -> SampleSet {
    let mut rng = rng_from(&[seed, stream::GEOMETRY]);
    let mut points = Vec::with_capacity(3 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let p: [f64; 3] = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
        labels.push(usize::from(p[2] >= p[0] * p[0]));
        points.extend_from_slice(&p);
    }
    SampleSet { dim: 3, points, labels }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceCounterexample {
    /// Overlap in the `(x, z)` plane.
    pub tau_xz: f64,
    /// Overlap after projecting onto the `x` axis.
    pub tau_x: f64,
    pub class1_fraction: f64,
    pub n: usize,
    pub k: usize,
    pub seed: u64,
}

pub const SURFACE_MIN_N: usize = 5000;

/// Separable in `(x, z)`, not separable on `x` alone.
pub fn counterexample_surface(n: usize, k: usize, seed: u64) -> Result<SurfaceCounterexample> {
    if n < SURFACE_MIN_N {
        return Err(Error::InsufficientData(format!("need n >= {SURFACE_MIN_N}, got {n}")));
    }
    let set = surface_samples(n, seed);
    let class1 = set.labels.iter().filter(|&&l| l == 1).count();
    let tau_xz = estimate_tau(&set.project(&[0, 2])?, k)?.tau_hat;
    let tau_x = estimate_tau(&set.project(&[0])?, k)?.tau_hat;
    Ok(SurfaceCounterexample { tau_xz, tau_x, class1_fraction: class1 as f64 / n as f64, n, k, seed })
}

/// Two-class overlap between style features of the labeled and the
/// unlabeled domain. Low values mean the two style distributions occupy
/// measurably different regions.
pub fn disjointness_check(style_l: &[Vec<f64>], style_u: &[Vec<f64>], k: usize) -> Result<f64> {
    let dim = style_l.first().or(style_u.first()).map_or(0, Vec::len);
    if style_l.iter().chain(style_u).any(|r| r.len() != dim) || dim == 0 {
        return Err(Error::Shape("style feature dimensions disagree".into()));
    }
    let rows: Vec<Vec<f64>> = style_l.iter().chain(style_u).cloned().collect();
    let labels = std::iter::repeat(0).take(style_l.len()).chain(std::iter::repeat(1).take(style_u.len())).collect();
    Ok(estimate_tau(&SampleSet::from_rows(&rows, labels)?, k)?.tau_hat)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_1d(n: usize, lo: f64, hi: f64, label: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
        let mut rng = rng_from(&[seed]);
        ((0..n).map(|_| rng.gen_range(lo..hi)).collect(), vec![label; n])
    }

    fn two_intervals(n: usize, a: (f64, f64), b: (f64, f64), seed: u64) -> SampleSet {
        let (mut p, mut l) = uniform_1d(n, a.0, a.1, 0, seed);
        let (q, m) = uniform_1d(n, b.0, b.1, 1, seed + 1);
        p.extend(q);
        l.extend(m);
        SampleSet::new(1, p, l).unwrap()
    }

    #[test]
    fn disjoint_intervals() {
        let est = estimate_tau(&two_intervals(500, (0.0, 1.0), (2.0, 3.0), 1), 5).unwrap();
        assert!(est.tau_hat <= 0.02, "{}", est.tau_hat);
    }

    #[test]
    fn half_overlapping_intervals() {
        let est = estimate_tau(&two_intervals(2000, (0.0, 1.0), (0.5, 1.5), 2), 5).unwrap();
        assert!((0.4..=0.6).contains(&est.tau_hat), "{}", est.tau_hat);
    }

    #[test]
    fn identical_cubes() {
        let mut rng = rng_from(&[3]);
        let points: Vec<f64> = (0..3 * 2000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels = (0..2000).map(|i| i % 2).collect();
        let est = estimate_tau(&SampleSet::new(3, points, labels).unwrap(), 5).unwrap();
        assert!(est.tau_hat >= 0.9, "{}", est.tau_hat);
    }

    /// Exhaustive reference for the pruned neighbour searches.
    fn brute_overlap(set: &SampleSet, k: usize, a: usize, b: usize) -> (usize, usize) {
        let members = |c: usize| -> Vec<&[f64]> { (0..set.len()).filter(|&i| set.labels[i] == c).map(|i| set.point(i)).collect() };
        let (pa, pb) = (members(a), members(b));
        let radius = |pts: &[&[f64]]| -> Vec<f64> {
            (0..pts.len())
                .map(|i| {
                    let mut d: Vec<f64> =
                        (0..pts.len()).filter(|&j| j != i).map(|j| sq_dist(pts[i], pts[j])).collect();
                    d.sort_by(f64::total_cmp);
                    d[k - 1]
                })
                .collect()
        };
        let (ra, rb) = (radius(&pa), radius(&pb));
        let covered = |xs: &[&[f64]], ys: &[&[f64]], r: &[f64]| {
            xs.iter()
                .filter(|x| {
                    let (j, d) = ys
                        .iter()
                        .enumerate()
                        .map(|(j, y)| (j, sq_dist(x, y)))
                        .min_by(|p, q| p.1.total_cmp(&q.1))
                        .unwrap();
                    d <= r[j]
                })
                .count()
        };
        (covered(&pa, &pb, &rb), covered(&pb, &pa, &ra))
    }

    #[test]
    fn pruned_search_matches_exhaustive_reference() {
        for (seed, dim) in [(11u64, 1usize), (12, 2), (13, 3)] {
            let mut rng = rng_from(&[seed]);
            let n = 240;
            // Coarse grid values force exact ties in both coordinates.
            let points: Vec<f64> = (0..n * dim).map(|_| f64::from(rng.gen_range(0..12u8)) / 4.0).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let set = SampleSet::new(dim, points, labels).unwrap();
            for k in [3, 5, 9] {
                let est = estimate_tau(&set, k).unwrap();
                for pair in &est.pairs {
                    let expected = brute_overlap(&set, k, pair.class_a, pair.class_b);
                    assert_eq!((pair.covered_a, pair.covered_b), expected, "dim {dim} k {k}");
                }
            }
        }
    }

    #[test]
    fn preconditions() {
        let small = two_intervals(10, (0.0, 1.0), (2.0, 3.0), 4);
        assert!(matches!(estimate_tau(&small, 5), Err(Error::InsufficientData(_))));
        let ok = two_intervals(30, (0.0, 1.0), (2.0, 3.0), 4);
        assert!(matches!(estimate_tau(&ok, 2), Err(Error::Parameter(_))));
        let one = SampleSet::new(1, vec![0.0; 30], vec![0; 30]).unwrap();
        assert!(matches!(estimate_tau(&one, 5), Err(Error::InsufficientData(_))));
        assert!(matches!(counterexample_surface(100, 5, 0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn tau_hat_is_max_pair() {
        let mut rng = rng_from(&[5]);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (c, lo) in [(0, 0.0), (1, 0.5), (2, 5.0)] {
            for _ in 0..200 {
                pts.push(rng.gen_range(lo..lo + 1.0));
                labels.push(c);
            }
        }
        let est = estimate_tau(&SampleSet::new(1, pts, labels).unwrap(), 5).unwrap();
        assert_eq!(est.pairs.len(), 3);
        let max = est.pairs.iter().map(|p| p.overlap).fold(0.0, f64::max);
        assert_eq!(est.tau_hat, max);
        assert!(est.pairs.iter().find(|p| (p.class_a, p.class_b) == (0, 2)).unwrap().overlap < 0.01);
    }

    #[test]
    fn surface_labels_have_one_third_mass() {
        // P(z >= x^2) = E[(1 - x^2) / 2] = (1 - 1/3) / 2 for x, z ~ U[-1, 1].
        let set = surface_samples(60_000, 7);
        let frac = set.labels.iter().filter(|&&l| l == 1).count() as f64 / set.len() as f64;
        assert!((frac - 1.0 / 3.0).abs() < 0.01, "{frac}");
    }

    #[test]
    fn duplicated_features_overlap_fully() {
        let mut rng = rng_from(&[8]);
        let feats: Vec<Vec<f64>> = (0..200).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        assert!(disjointness_check(&feats, &feats, 5).unwrap() >= 0.9);
        let other: Vec<Vec<f64>> = feats.iter().map(|r| r[..3].to_vec()).collect();
        assert!(matches!(disjointness_check(&feats, &other, 5), Err(Error::Shape(_))));
    }

    #[test]
    fn report_json_fields() {
        let est = estimate_tau(&two_intervals(50, (0.0, 1.0), (2.0, 3.0), 9), 5).unwrap();
        let v = serde_json::to_value(OverlapEstimate { seed: Some(9), ..est }).unwrap();
        for key in ["tau_hat", "pairs", "n", "k", "seed"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
