use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::FusionError;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
    pub rel_tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { restarts: 10, max_iter: 100, rel_tol: 1e-6 }
    }
}

/// Dense row-major point matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Points {
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn new(dim: usize, data: Vec<f64>) -> Self {
        assert!(dim > 0 && data.len().is_multiple_of(dim), "data length must be a multiple of dim");
        Self { dim, data }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let dim = rows.first().map_or(1, |r| r.as_ref().len());
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(dim, data)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Scales every row to unit L2 norm; zero rows are left unchanged.
    pub fn l2_normalize(&mut self) {
        for row in self.data.chunks_exact_mut(self.dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterAssignment {
    /// Cluster id per point; point 0 is always in cluster 0.
    pub labels: Vec<u8>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the winning restart.
    pub inertia_history: Vec<f64>,
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Two-means clustering: best-inertia result over seeded k-means++ restarts.
pub fn kmeans2(points: &Points, seed: u64, cfg: &KMeansConfig) -> Result<ClusterAssignment, FusionError> {
    let n = points.len();
    if n < 2 {
        return Err(FusionError::TooFewPoints(n));
    }
    let first = points.row(0);
    if (1..n).all(|i| points.row(i) == first) {
        return Err(FusionError::DegenerateInput);
    }
    let mut rng = seed::rng(seed, "kmeans2");
    let mut best: Option<ClusterAssignment> = None;
    for _ in 0..cfg.restarts.max(1) {
        let centers = plus_plus_init(points, &mut rng);
        let run = lloyd(points, centers, cfg);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let mut best = best.expect("at least one restart");
    if best.labels[0] == 1 {
        best.labels.iter_mut().for_each(|l| *l = 1 - *l);
    }
    Ok(best)
}

fn plus_plus_init(points: &Points, rng: &mut seed::Rng) -> [Vec<f64>; 2] {
    let n = points.len();
    let c0 = rng.random_range(0..n);
    let weights: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(c0))).collect();
    let total: f64 = weights.iter().sum();
    let mut target = rng.random::<f64>() * total;
    let mut c1 = n - 1;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 && target < *w {
            c1 = i;
            break;
        }
        target -= w;
    }
    if weights[c1] == 0.0 {
        // rounding walked past the last positive weight
        c1 = weights.iter().rposition(|w| *w > 0.0).expect("non-degenerate input");
    }
    [points.row(c0).to_vec(), points.row(c1).to_vec()]
}

fn assign(points: &Points, centers: &[Vec<f64>; 2], labels: &mut [u8]) -> f64 {
    let mut inertia = 0.0;
    for (i, label) in labels.iter_mut().enumerate() {
        let d0 = sq_dist(points.row(i), &centers[0]);
        let d1 = sq_dist(points.row(i), &centers[1]);
        if d1 < d0 {
            *label = 1;
            inertia += d1;
        } else {
            *label = 0;
            inertia += d0;
        }
    }
    inertia
}

fn lloyd(points: &Points, mut centers: [Vec<f64>; 2], cfg: &KMeansConfig) -> ClusterAssignment {
    let n = points.len();
    let dim = points.dim();
    let mut labels = vec![0u8; n];
    let mut inertia = assign(points, &centers, &mut labels);
    let mut history = vec![inertia];
    for _ in 0..cfg.max_iter {
        let mut sums = [vec![0.0; dim], vec![0.0; dim]];
        let mut counts = [0usize; 2];
        for (i, &l) in labels.iter().enumerate() {
            counts[l as usize] += 1;
            sums[l as usize].iter_mut().zip(points.row(i)).for_each(|(s, v)| *s += v);
        }
        for k in 0..2 {
            if counts[k] > 0 {
                centers[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            } else {
                // empty cluster: move it onto the point farthest from the other centroid
                let other = &centers[1 - k];
                let far = (0..n)
                    .max_by(|&a, &b| sq_dist(points.row(a), other).total_cmp(&sq_dist(points.row(b), other)).then(b.cmp(&a)))
                    .expect("n >= 2");
                centers[k] = points.row(far).to_vec();
            }
        }
        let prev = inertia;
        let prev_labels = labels.clone();
        inertia = assign(points, &centers, &mut labels);
        history.push(inertia);
        if labels == prev_labels || prev - inertia <= cfg.rel_tol * prev {
            break;
        }
    }
    // report inertia against the centroids of the final partition
    let settled = centroid_inertia(points, &labels);
    if settled < inertia {
        inertia = settled;
        history.push(inertia);
    }
    ClusterAssignment { labels, inertia, inertia_history: history }
}

fn centroid_inertia(points: &Points, labels: &[u8]) -> f64 {
    let dim = points.dim();
    let mut sums = [vec![0.0; dim], vec![0.0; dim]];
    let mut counts = [0usize; 2];
    for (i, &l) in labels.iter().enumerate() {
        counts[l as usize] += 1;
        sums[l as usize].iter_mut().zip(points.row(i)).for_each(|(s, v)| *s += v);
    }
    let centers: Vec<Vec<f64>> = (0..2)
        .map(|k| sums[k].iter().map(|s| s / counts[k].max(1) as f64).collect())
        .collect();
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(points.row(i), &centers[l as usize]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn well_separated_pairs() {
        let pts = Points::from_rows(&[[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.1, 10.0]]);
        let a = kmeans2(&pts, 3, &KMeansConfig::default()).unwrap();
        assert_eq!(a.labels, vec![0, 0, 1, 1]);
    }

    #[test]
    fn two_points_each_own_cluster() {
        let pts = Points::from_rows(&[[1.0, 2.0], [3.0, -1.0]]);
        let a = kmeans2(&pts, 0, &KMeansConfig::default()).unwrap();
        assert_eq!(a.labels, vec![0, 1]);
        assert_eq!(a.inertia, 0.0);
    }

    #[test]
    fn identical_points_are_degenerate() {
        let pts = Points::from_rows(&[[1.0], [1.0], [1.0]]);
        assert!(matches!(kmeans2(&pts, 0, &KMeansConfig::default()), Err(FusionError::DegenerateInput)));
        let pts = Points::from_rows(&[[1.0]]);
        assert!(matches!(kmeans2(&pts, 0, &KMeansConfig::default()), Err(FusionError::TooFewPoints(1))));
    }

    #[test]
    fn inertia_matches_assignment() {
        let rows: Vec<[f64; 2]> = (0..12).map(|i| [(i * 7 % 5) as f64, (i * 3 % 4) as f64]).collect();
        let pts = Points::from_rows(&rows);
        let a = kmeans2(&pts, 11, &KMeansConfig::default()).unwrap();
        let mut centroid = [[0.0; 2]; 2];
        let mut count = [0.0; 2];
        for (r, &l) in rows.iter().zip(&a.labels) {
            count[l as usize] += 1.0;
            centroid[l as usize][0] += r[0];
            centroid[l as usize][1] += r[1];
        }
        let mut inertia = 0.0;
        for (r, &l) in rows.iter().zip(&a.labels) {
            let c = [centroid[l as usize][0] / count[l as usize], centroid[l as usize][1] / count[l as usize]];
            inertia += (r[0] - c[0]).powi(2) + (r[1] - c[1]).powi(2);
        }
        assert!((inertia - a.inertia).abs() < 1e-9, "{inertia} vs {}", a.inertia);
    }
}
