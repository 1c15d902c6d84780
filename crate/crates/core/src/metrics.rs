//! Partition comparison: normalized mutual information, Rand index and the
//! representation-by-clustering match grid.

use serde::Serialize;

use crate::error::{Error, Result};

/// Cluster labels in `0..num_clusters` for `N >= 1` items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    labels: Vec<usize>,
    num_clusters: usize,
}

impl Partition {
    pub fn new(labels: Vec<usize>, num_clusters: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Contract("a partition needs at least one item".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_clusters) {
            return Err(Error::Contract(format!("label {bad} outside 0..{num_clusters}")));
        }
        Ok(Self { labels, num_clusters })
    }

    /// Infers the cluster count as `max label + 1`.
    pub fn from_labels(labels: Vec<usize>) -> Result<Self> {
        let t = labels.iter().max().map_or(0, |m| m + 1);
        Self::new(labels, t)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_lengths(a: &Partition, b: &Partition) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim("partition comparison", &[a.len()], &[b.len()]));
    }
    Ok(())
}

struct Contingency {
    table: Vec<Vec<u64>>,
    rows: Vec<u64>,
    cols: Vec<u64>,
    n: u64,
}

fn contingency(a: &Partition, b: &Partition) -> Contingency {
    let mut table = vec![vec![0u64; b.num_clusters]; a.num_clusters];
    for (&x, &y) in a.labels.iter().zip(&b.labels) {
        table[x][y] += 1;
    }
    let rows = table.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..b.num_clusters).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    Contingency {
        table,
        rows,
        cols,
        n: a.len() as u64,
    }
}

/// Sums in sorted order so the result does not depend on label numbering.
fn canonical_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    canonical_sum(
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .collect(),
    )
}

/// `I(a; b) / sqrt(H(a) H(b))` with natural logs. Two zero-entropy
/// partitions score 1; exactly one zero-entropy partition scores 0.
pub fn nmi(a: &Partition, b: &Partition) -> Result<f64> {
    check_lengths(a, b)?;
    let c = contingency(a, b);
    let n = c.n as f64;
    let (ha, hb) = (entropy(&c.rows, n), entropy(&c.cols, n));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mut terms = Vec::new();
    for (i, row) in c.table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                let outer = (c.rows[i] * c.cols[j]) as f64;
                terms.push(nij / n * (n * nij / outer).ln());
            }
        }
    }
    let mi = canonical_sum(terms);
    // identical partitions must score exactly 1 despite round-off in `mi`
    let score = if same_partition(a, b) {
        1.0
    } else {
        mi / (ha * hb).sqrt()
    };
    Ok(score.clamp(0.0, 1.0))
}

/// Whether two labelings induce the same grouping up to label renaming.
fn same_partition(a: &Partition, b: &Partition) -> bool {
    let mut fwd = vec![usize::MAX; a.num_clusters];
    let mut back = vec![usize::MAX; b.num_clusters];
    for (&x, &y) in a.labels.iter().zip(&b.labels) {
        if fwd[x] == usize::MAX && back[y] == usize::MAX {
            fwd[x] = y;
            back[y] = x;
        } else if fwd[x] != y || back[y] != x {
            return false;
        }
    }
    true
}

fn pairs(k: u64) -> u64 {
    k * k.saturating_sub(1) / 2
}

/// Fraction of item pairs on which the two partitions agree.
pub fn rand_index(a: &Partition, b: &Partition) -> Result<f64> {
    check_lengths(a, b)?;
    if a.len() < 2 {
        return Err(Error::Contract("the Rand index needs at least two items".into()));
    }
    let c = contingency(a, b);
    let total = pairs(c.n);
    let both: u64 = c.table.iter().flatten().map(|&v| pairs(v)).sum();
    let in_a: u64 = c.rows.iter().map(|&v| pairs(v)).sum();
    let in_b: u64 = c.cols.iter().map(|&v| pairs(v)).sum();
    // together in both + apart in both
    let agree = both + (total + both - in_a - in_b);
    Ok(agree as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Score {
    pub nmi: f64,
    pub ri: f64,
}

/// Every predicted partition scored against every ground-truth clustering.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchReport {
    /// `grid[k][m]`
    pub grid: Vec<Vec<Score>>,
    /// Best representation (by NMI, lowest index on ties) per truth clustering.
    pub best: Vec<usize>,
}

impl MatchReport {
    /// Each ground-truth clustering is best served by a different representation.
    pub fn is_diagonal(&self) -> bool {
        let mut seen = self.best.clone();
        seen.sort_unstable();
        seen.windows(2).all(|w| w[0] != w[1])
    }

    pub fn best_score(&self, m: usize) -> Score {
        self.grid[self.best[m]][m]
    }
}

pub fn match_report(predicted: &[Partition], truth: &[Partition]) -> Result<MatchReport> {
    let grid = predicted
        .iter()
        .map(|p| {
            truth
                .iter()
                .map(|t| {
                    Ok(Score {
                        nmi: nmi(p, t)?,
                        ri: rand_index(p, t)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let best = (0..truth.len())
        .map(|m| (0..predicted.len()).fold(0, |b, k| if grid[k][m].nmi > grid[b][m].nmi { k } else { b }))
        .collect();
    Ok(MatchReport { grid, best })
}
