//! Clustering scores: Hungarian-matched accuracy, NMI and ARI.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts `[r][c]` of rows with true class `r` and predicted cluster `c`.
/// Ids are compacted to `0..k` in order of first appearance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub n: u64,
}

fn compact(ids: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let out = ids
        .iter()
        .map(|&id| {
            let next = map.len();
            *map.entry(id).or_insert(next)
        })
        .collect();
    (out, map.len())
}

impl ContingencyTable {
    pub fn new(y_true: &[usize], y_pred: &[usize]) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::Argument(format!(
                "label lists differ in length: {} vs {}",
                y_true.len(),
                y_pred.len()
            )));
        }
        if y_true.is_empty() {
            return Err(Error::Argument("empty label lists".into()));
        }
        let (t, kt) = compact(y_true);
        let (p, kp) = compact(y_pred);
        let mut counts = vec![vec![0u64; kp]; kt];
        for (&r, &c) in t.iter().zip(&p) {
            counts[r][c] += 1;
        }
        Ok(Self { counts, n: y_true.len() as u64 })
    }

    pub fn k_true(&self) -> usize {
        self.counts.len()
    }

    pub fn k_pred(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    fn col_sums(&self) -> Vec<u64> {
        (0..self.k_pred()).map(|c| self.counts.iter().map(|r| r[c]).sum()).collect()
    }
}

/// Minimum-cost perfect assignment on a square matrix. Returns, for each
/// row, its assigned column. Shortest augmenting paths with potentials.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    // 1-based internals; column 0 is a virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Best one-to-one mapping of predicted clusters onto true classes.
fn matched_count(table: &ContingencyTable) -> u64 {
    let n = table.k_true().max(table.k_pred());
    let count = |r: usize, c: usize| -> u64 {
        if r < table.k_true() && c < table.k_pred() { table.counts[r][c] } else { 0 }
    };
    let cost: Vec<Vec<f64>> = (0..n).map(|r| (0..n).map(|c| -(count(r, c) as f64)).collect()).collect();
    hungarian(&cost).iter().enumerate().map(|(r, &c)| count(r, c)).sum()
}

pub fn cluster_acc(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(y_true, y_pred)?;
    Ok(matched_count(&table) as f64 / table.n as f64)
}

fn entropy(margins: &[u64], n: f64) -> f64 {
    margins
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information over `sqrt(H(y) H(ŷ))`, natural logs.
pub fn nmi(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(y_true, y_pred)?;
    let n = table.n as f64;
    let (rows, cols) = (table.row_sums(), table.col_sums());
    let (ht, hp) = (entropy(&rows, n), entropy(&cols, n));
    if ht == 0.0 && hp == 0.0 {
        return Ok(1.0);
    }
    if ht == 0.0 || hp == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (r, row) in table.counts.iter().enumerate() {
        for (c, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (rows[r] as f64 * cols[c] as f64)).ln();
            }
        }
    }
    Ok((mi / (ht * hp).sqrt()).clamp(0.0, 1.0))
}

fn pairs(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index from the contingency margins.
pub fn ari(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    if y_true.len() < 2 {
        return Err(Error::Argument(format!("ARI needs at least 2 samples, got {}", y_true.len())));
    }
    let table = ContingencyTable::new(y_true, y_pred)?;
    let index: f64 = table.counts.iter().flatten().map(|&c| pairs(c)).sum();
    let a: f64 = table.row_sums().into_iter().map(pairs).sum();
    let b: f64 = table.col_sums().into_iter().map(pairs).sum();
    let total = pairs(table.n);
    let expected = a * b / total;
    let max = 0.5 * (a + b);
    let denom = max - expected;
    if denom == 0.0 {
        let equal = table.k_true() == table.k_pred() && index == a && index == b;
        return Ok(if equal { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}

/// One set of scores, as written to score files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    pub n: usize,
    pub k_true: usize,
    pub k_pred: usize,
}

impl Scores {
    pub fn compute(y_true: &[usize], y_pred: &[usize]) -> Result<Self> {
        let table = ContingencyTable::new(y_true, y_pred)?;
        Ok(Self {
            acc: cluster_acc(y_true, y_pred)?,
            nmi: nmi(y_true, y_pred)?,
            ari: ari(y_true, y_pred)?,
            n: y_true.len(),
            k_true: table.k_true(),
            k_pred: table.k_pred(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_permuted_predictions() {
        let y = [0, 0, 1, 1, 2, 2, 2];
        let perm = [2, 2, 0, 0, 1, 1, 1];
        for pred in [&y, &perm] {
            assert_eq!(cluster_acc(&y, pred).unwrap(), 1.0);
            assert!((nmi(&y, pred).unwrap() - 1.0).abs() < 1e-10);
            assert!((ari(&y, pred).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_prediction() {
        let y = [0, 1, 0, 1, 0, 1];
        let c = [4; 6];
        assert_eq!(nmi(&y, &c).unwrap(), 0.0);
        assert!(ari(&y, &c).unwrap().abs() < 1e-12);
        assert_eq!(cluster_acc(&y, &c).unwrap(), 0.5);
    }

    #[test]
    fn degenerate_cases() {
        assert_eq!(nmi(&[1, 1, 1], &[0, 0, 0]).unwrap(), 1.0);
        assert_eq!(ari(&[1, 1, 1], &[0, 0, 0]).unwrap(), 1.0);
        assert!(matches!(cluster_acc(&[], &[]), Err(Error::Argument(_))));
        assert!(matches!(nmi(&[], &[]), Err(Error::Argument(_))));
        assert!(matches!(ari(&[1], &[1]), Err(Error::Argument(_))));
        assert!(matches!(cluster_acc(&[1, 2], &[1]), Err(Error::Argument(_))));
    }

    #[test]
    fn rectangular_tables() {
        // 3 true classes, 2 clusters: best matching covers two classes.
        let y = [0, 0, 1, 1, 2, 2];
        let p = [0, 0, 1, 1, 1, 1];
        assert!((cluster_acc(&y, &p).unwrap() - 4.0 / 6.0).abs() < 1e-12);
        // 2 true classes, 4 clusters.
        let y = [0, 0, 0, 1, 1, 1];
        let p = [0, 1, 1, 2, 3, 3];
        assert!((cluster_acc(&y, &p).unwrap() - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn hungarian_small_matrix() {
        let cost = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        assert_eq!(hungarian(&cost), vec![1, 0, 2]);
    }

    #[test]
    fn scores_json_fields() {
        let s = Scores::compute(&[0, 1, 1], &[1, 0, 0]).unwrap();
        let v = serde_json::to_value(s).unwrap();
        for key in ["acc", "nmi", "ari", "n", "k_true", "k_pred"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!((s.n, s.k_true, s.k_pred), (3, 2, 2));
    }
}
