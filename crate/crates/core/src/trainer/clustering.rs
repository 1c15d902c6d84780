//! Hard cluster assignment with fixed centers, k-means initialization and
//! the label-change stopping rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// One-hot assignment matrix `S` stored by row index of its single 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Assignments {
    pub labels: Vec<usize>,
    pub num_clusters: usize,
}

impl Assignments {
    pub fn new(labels: Vec<usize>, num_clusters: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_clusters) {
            return Err(Error::Contract(format!("label {bad} outside 0..{num_clusters}")));
        }
        Ok(Self { labels, num_clusters })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn one_hot(&self) -> Tensor {
        let t = self.num_clusters;
        let mut data = vec![0.0; self.labels.len() * t];
        for (i, &l) in self.labels.iter().enumerate() {
            data[i * t + l] = 1.0;
        }
        Tensor::new(&[self.labels.len(), t], data).expect("sized")
    }

    pub fn from_one_hot(s: &Tensor) -> Result<Self> {
        let (n, t) = s.dims2()?;
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let row = s.row(i);
            let ones: Vec<usize> = (0..t).filter(|&j| row[j] == 1.0).collect();
            if ones.len() != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Contract(format!("row {i} of S is not one-hot")));
            }
            labels.push(ones[0]);
        }
        Ok(Self {
            labels,
            num_clusters: t,
        })
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            num_clusters: self.num_clusters,
        }
    }
}

/// Centers and assignments for every representation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterState {
    /// `K` matrices of shape `d_z x T`, one center per column.
    #[serde(skip)]
    pub centers: Vec<Tensor>,
    pub assignments: Vec<Assignments>,
    pub prev_assignments: Option<Vec<Assignments>>,
}

fn sq_dist_to_center(z: &[f64], w: &Tensor, t: usize) -> f64 {
    let cols = w.shape()[1];
    z.iter()
        .enumerate()
        .map(|(j, &zj)| {
            let d = zj - w.data()[j * cols + t];
            d * d
        })
        .sum()
}

fn check_centers(z: &Tensor, w: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, dz) = z.dims2()?;
    let (wd, t) = w.dims2()?;
    if wd != dz || t == 0 {
        return Err(Error::dim("assign", z.shape(), w.shape()));
    }
    Ok((n, dz, t))
}

/// Nearest-center labels; the lowest index wins ties.
pub fn assign(z: &Tensor, w: &Tensor) -> Result<Assignments> {
    let (n, _, t) = check_centers(z, w)?;
    let labels = (0..n)
        .map(|i| {
            let row = z.row(i);
            let mut best = (0, f64::INFINITY);
            for c in 0..t {
                let d = sq_dist_to_center(row, w, c);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect();
    Ok(Assignments {
        labels,
        num_clusters: t,
    })
}

/// `(1/N) sum_i ||z_i - W s_i||^2` for plain tensors.
pub fn cluster_loss_value(z: &Tensor, w: &Tensor, s: &Assignments) -> Result<f64> {
    let (n, _, t) = check_centers(z, w)?;
    if s.len() != n || s.num_clusters != t {
        return Err(Error::dim("cluster_loss", &[n, t], &[s.len(), s.num_clusters]));
    }
    let total: f64 = (0..n).map(|i| sq_dist_to_center(z.row(i), w, s.labels[i])).sum();
    Ok(total / n as f64)
}

/// Tape version: differentiable in `z`, with `W` and `S` as constants.
pub fn cluster_loss(tape: &mut Tape, z: Var, w: &Tensor, s: &Assignments) -> Result<Var> {
    let (n, dz) = match tape.shape(z) {
        [n, d] => (*n, *d),
        other => return Err(Error::dim("cluster_loss", other, &[0, 0])),
    };
    let (wd, t) = w.dims2()?;
    if wd != dz || s.len() != n || s.num_clusters != t {
        return Err(Error::dim("cluster_loss", &[n, dz], w.shape()));
    }
    let cols = w.shape()[1];
    let mut assigned = Vec::with_capacity(n * dz);
    for &l in &s.labels {
        assigned.extend((0..dz).map(|j| w.data()[j * cols + l]));
    }
    let c = tape.constant_from(&[n, dz], assigned)?;
    let diff = tape.sub(z, c)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / n as f64))
}

fn column_major_centers(points: &[Vec<f64>]) -> Tensor {
    let (t, dz) = (points.len(), points[0].len());
    let mut data = vec![0.0; dz * t];
    for (c, p) in points.iter().enumerate() {
        for j in 0..dz {
            data[j * t + c] = p[j];
        }
    }
    Tensor::new(&[dz, t], data).expect("sized")
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Independent k-means++ starts; the lowest within-cluster error wins.
pub const KMEANS_RESTARTS: usize = 10;

/// k-means++ seeding followed by Lloyd iterations, best of
/// [`KMEANS_RESTARTS`] starts (earliest on ties); returns `d_z x T` centers.
pub fn kmeans_init(z: &Tensor, t: usize, seed: u64) -> Result<Tensor> {
    let (n, _) = z.dims2()?;
    if t == 0 || n < t {
        return Err(Error::config(format!("k-means needs N >= T >= 1, got N={n} T={t}")));
    }
    let mut best: Option<(f64, Tensor)> = None;
    for r in 0..KMEANS_RESTARTS {
        let w = kmeans_once(z, t, crate::augment::mix_seed(seed, r as u64))?;
        let err = cluster_loss_value(z, &w, &assign(z, &w)?)?;
        if best.as_ref().is_none_or(|(b, _)| err < *b) {
            best = Some((err, w));
        }
    }
    Ok(best.expect("at least one restart").1)
}

fn kmeans_once(z: &Tensor, t: usize, seed: u64) -> Result<Tensor> {
    let n = z.shape()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<&[f64]> = (0..n).map(|i| z.row(i)).collect();

    let mut chosen = vec![rng.gen_range(0..n)];
    let mut nearest: Vec<f64> = rows.iter().map(|r| sq_dist(r, rows[chosen[0]])).collect();
    while chosen.len() < t {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &d) in nearest.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if u < d {
                        break;
                    }
                    u -= d;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // every point coincides with a center; fall back to unused indices
            let unused: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            unused[rng.gen_range(0..unused.len())]
        };
        chosen.push(next);
        for (i, r) in rows.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(r, rows[next]));
        }
    }

    let mut centers: Vec<Vec<f64>> = chosen.iter().map(|&i| rows[i].to_vec()).collect();
    let mut labels: Vec<usize> = vec![usize::MAX; n];
    for _ in 0..100 {
        let w = column_major_centers(&centers);
        let next = assign(z, &w)?.labels;
        let converged = next == labels;
        labels = next;
        if converged {
            break;
        }
        let dz = centers[0].len();
        let mut sums = vec![vec![0.0; dz]; t];
        let mut counts = vec![0usize; t];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for j in 0..dz {
                sums[l][j] += rows[i][j];
            }
        }
        for c in 0..t {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..t {
            if counts[c] == 0 {
                // re-seed from the point worst served by its current center
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(rows[a], &centers[labels[a]])
                            .total_cmp(&sq_dist(rows[b], &centers[labels[b]]))
                            .then(b.cmp(&a))
                    })
                    .expect("n >= 1");
                centers[c] = rows[far].to_vec();
                counts[labels[far]] -= 1;
                labels[far] = c;
                counts[c] = 1;
            }
        }
    }
    Ok(column_major_centers(&centers))
}

/// Fraction of changed labels over all representations, and whether it is below `delta`.
pub fn stopping_criterion(curr: &[Assignments], prev: &[Assignments], delta: f64) -> Result<(f64, bool)> {
    if curr.len() != prev.len() {
        return Err(Error::dim("stopping_criterion", &[curr.len()], &[prev.len()]));
    }
    let mut changed = 0usize;
    let mut total = 0usize;
    for (c, p) in curr.iter().zip(prev) {
        if c.len() != p.len() || c.num_clusters != p.num_clusters {
            return Err(Error::dim(
                "stopping_criterion",
                &[c.len(), c.num_clusters],
                &[p.len(), p.num_clusters],
            ));
        }
        changed += c.labels.iter().zip(&p.labels).filter(|(a, b)| a != b).count();
        total += c.len();
    }
    if total == 0 {
        return Ok((0.0, true));
    }
    let value = changed as f64 / total as f64;
    Ok((value, value < delta))
}
