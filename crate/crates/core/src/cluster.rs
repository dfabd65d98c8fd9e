//! Spectral clustering of mean trace values and level assignment of clusters.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{jacobi_eigen, SymMatrix, JACOBI_MAX_SWEEPS, JACOBI_TOL};
use crate::rng::Stream;
use crate::sim::{Level, NUM_LEVELS};

pub const N_CLUSTERS: usize = NUM_LEVELS;
pub const DEFAULT_SUBSAMPLE: usize = 1000;
pub const DEFAULT_RESTARTS: usize = 100;
/// Affinity bandwidth as a fraction of the median pairwise distance.
///
/// With the full median, mid-readout relaxations (points strung between the
/// 0 and 1 blobs) dominate the third eigenvector after row normalization and
/// swallow the rare leaked points; anywhere in roughly 0.1–0.5 isolates the
/// leaked blob instead.
pub const DEFAULT_BANDWIDTH_SCALE: f64 = 0.25;
const LLOYD_MAX_ITERS: usize = 300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    /// Subsample size `M` for the dense eigenproblem.
    pub subsample: usize,
    pub restarts: usize,
    /// `σ = bandwidth_scale · median pairwise distance`.
    pub bandwidth_scale: f64,
    pub seed: u64,
}

impl ClusterParams {
    pub fn new(seed: u64) -> Self {
        ClusterParams { subsample: DEFAULT_SUBSAMPLE, restarts: DEFAULT_RESTARTS, bandwidth_scale: DEFAULT_BANDWIDTH_SCALE, seed }
    }
}

/// Result of k-means on real vectors.
#[derive(Clone, Debug)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub objective: f64,
    /// Objective after every Lloyd iteration of the winning restart.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seed(points: &[Vec<f64>], k: usize, rng: &mut Stream) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers = vec![points[rng.below(n as u64) as usize].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut idx = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            rng.below(n as u64) as usize
        };
        centers.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    centers
}

/// Lloyd iterations from the given centers until assignments stop changing.
/// A cluster that empties keeps its previous center.
pub fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> KMeans {
    let dim = points[0].len();
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
    let mut history = Vec::new();
    for _ in 0..LLOYD_MAX_ITERS {
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for (c, (s, &cnt)) in sums.into_iter().zip(&counts).enumerate() {
            if cnt > 0 {
                centers[c] = s.into_iter().map(|x| x / cnt as f64).collect();
            }
        }
        let mut changed = false;
        let mut objective = 0.0;
        for (p, a) in points.iter().zip(assignments.iter_mut()) {
            let (c, d) = nearest(p, &centers);
            objective += d;
            if c != *a {
                *a = c;
                changed = true;
            }
        }
        history.push(objective);
        if !changed {
            break;
        }
    }
    let objective = *history.last().expect("at least one iteration");
    KMeans { assignments, centers, objective, history }
}

/// k-means++ with restarts; restart `r` draws from stream `r` of
/// `subsystem`. The winner minimizes `(objective, restart index)`.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64, subsystem: &str) -> Result<KMeans> {
    if points.len() < k || k == 0 {
        return Err(invalid(format!("k-means needs at least {k} points")));
    }
    if restarts == 0 {
        return Err(invalid("k-means needs at least one restart"));
    }
    let runs: Vec<KMeans> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = Stream::new(seed, subsystem, r as u64);
            lloyd(points, plus_plus_seed(points, k, &mut rng))
        })
        .collect();
    let best = runs
        .into_iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| a.objective.total_cmp(&b.objective).then(i.cmp(j)))
        .map(|(_, run)| run)
        .expect("at least one restart");
    Ok(best)
}

/// Three-way partition of MTV points.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralClustering {
    /// Cluster of every input point.
    pub assignments: Vec<usize>,
    /// Input indices of the subsample, in canonical (sorted-point) order.
    pub subsample: Vec<usize>,
    /// Mean MTV of each cluster's subsample members.
    pub centroids: [Complex64; N_CLUSTERS],
    /// Gaussian affinity bandwidth.
    pub sigma: f64,
    /// Three smallest Laplacian eigenvalues.
    pub eigenvalues: [f64; N_CLUSTERS],
}

fn canonical_order(points: &[Complex64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| {
        let (p, q) = (points[a], points[b]);
        p.re.total_cmp(&q.re).then(p.im.total_cmp(&q.im)).then(a.cmp(&b))
    });
    idx
}

fn count_distinct(points: &[Complex64], order: &[usize]) -> usize {
    let mut n = 0;
    let mut last: Option<Complex64> = None;
    for &i in order {
        if last != Some(points[i]) {
            n += 1;
            last = Some(points[i]);
        }
    }
    n
}

fn nearest_centroid(p: Complex64, centroids: &[Complex64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centroids.iter().enumerate() {
        let d = (p - m).norm_sqr();
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

/// Spectral clustering into three groups.
///
/// Points are first put in a canonical order (sorted by real, then imaginary
/// part) so the partition does not depend on input order. `stream` separates
/// independent clusterings that share a seed (one per qubit).
pub fn spectral_cluster(points: &[Complex64], params: &ClusterParams, stream: u64) -> Result<SpectralClustering> {
    let n = points.len();
    let m = params.subsample;
    if n < N_CLUSTERS || m < N_CLUSTERS || m > n {
        return Err(invalid(format!("need 3 <= M <= #points, got M = {m}, {n} points")));
    }
    if points.iter().any(|p| !p.re.is_finite() || !p.im.is_finite()) {
        return Err(invalid("non-finite MTV point"));
    }
    let order = canonical_order(points);
    if count_distinct(points, &order) < N_CLUSTERS {
        return Err(Error::Data("fewer than 3 distinct points".into()));
    }
    let mut rng = Stream::new(params.seed, "cluster/subsample", stream);
    let mut picks = rng.sample_indices(n, m);
    picks.sort_unstable();
    let subsample: Vec<usize> = picks.iter().map(|&k| order[k]).collect();
    if count_distinct(points, &subsample) < N_CLUSTERS {
        return Err(Error::Data("subsample has fewer than 3 distinct points".into()));
    }
    let sub: Vec<Complex64> = subsample.iter().map(|&i| points[i]).collect();

    let mut dists: Vec<f64> = (0..m)
        .into_par_iter()
        .flat_map_iter(|i| {
            let sub = &sub;
            (i + 1..m).map(move |j| (sub[i] - sub[j]).norm())
        })
        .collect();
    let mid = dists.len() / 2;
    let (_, median, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let sigma = *median * params.bandwidth_scale;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Numeric(format!("affinity bandwidth {sigma} is not positive")));
    }

    let two_s2 = 2.0 * sigma * sigma;
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| (0..m).map(|j| (-(sub[i] - sub[j]).norm_sqr() / two_s2).exp()).collect())
        .collect();
    let inv_sqrt_deg: Vec<f64> = rows.iter().map(|r| 1.0 / r.iter().sum::<f64>().sqrt()).collect();
    let lap = SymMatrix::from_fn(m, |i, j| {
        let norm = inv_sqrt_deg[i] * rows[i][j] * inv_sqrt_deg[j];
        if i == j {
            1.0 - norm
        } else {
            -norm
        }
    });
    drop(rows);
    let eig = jacobi_eigen(&lap, JACOBI_TOL, JACOBI_MAX_SWEEPS).map_err(|e| match e {
        Error::Numeric(msg) => Error::Numeric(format!("{msg}; affinity matrix is pathological")),
        other => other,
    })?;
    let embedding: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let row: Vec<f64> = (0..N_CLUSTERS).map(|k| eig.vectors[k][i]).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.into_iter().map(|x| x / norm).collect()
            } else {
                row
            }
        })
        .collect();
    let km = kmeans(&embedding, N_CLUSTERS, params.restarts, params.seed, &format!("cluster/kmeans/{stream}"))?;

    let mut sums = [Complex64::new(0.0, 0.0); N_CLUSTERS];
    let mut counts = [0usize; N_CLUSTERS];
    for (p, &a) in sub.iter().zip(&km.assignments) {
        sums[a] += p;
        counts[a] += 1;
    }
    if counts.contains(&0) {
        return Err(Error::Data("spectral clustering produced an empty cluster".into()));
    }
    let centroids: [Complex64; N_CLUSTERS] = std::array::from_fn(|c| sums[c] / counts[c] as f64);

    let mut assignments: Vec<usize> = points.par_iter().map(|&p| nearest_centroid(p, &centroids)).collect();
    for (&i, &a) in subsample.iter().zip(&km.assignments) {
        assignments[i] = a;
    }
    Ok(SpectralClustering {
        assignments,
        subsample,
        centroids,
        sigma,
        eigenvalues: std::array::from_fn(|k| eig.values[k]),
    })
}

/// Clustering of one qubit with its cluster → level map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QubitClusterModel {
    pub qubit_index: usize,
    /// Cluster centroids in MTV space, cluster order.
    pub centroids: [Complex64; N_CLUSTERS],
    /// Level of each cluster; a bijection onto {0, 1, 2}.
    pub cluster_level: [Level; N_CLUSTERS],
    pub cluster_sizes: [usize; N_CLUSTERS],
    /// True when majority voting conflicted and centroid matching decided.
    pub used_fallback: bool,
    pub sigma: f64,
    pub subsample: Vec<usize>,
    pub params: ClusterParams,
}

impl QubitClusterModel {
    /// Centroids indexed by level.
    pub fn level_centroids(&self) -> [Complex64; NUM_LEVELS] {
        let mut out = [Complex64::new(0.0, 0.0); NUM_LEVELS];
        for (c, &lvl) in self.cluster_level.iter().enumerate() {
            out[lvl as usize] = self.centroids[c];
        }
        out
    }

    /// Level of a new MTV point by nearest centroid.
    pub fn label(&self, p: Complex64) -> Level {
        self.cluster_level[nearest_centroid(p, &self.centroids)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub qubits: Vec<QubitClusterModel>,
}

const PERMUTATIONS: [[Level; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Name clusters with levels.
///
/// The two largest clusters take the majority preparation of their members
/// (a count tie goes to the level with the larger share of its preparations
/// inside the cluster, then the lower level); the remaining cluster takes
/// the remaining level, which is 2 for computational preparations. If both
/// large clusters claim the same level, clusters are matched to per-level
/// MTV means of the preparations by minimum total distance instead.
pub fn assign_labels(
    qubit_index: usize,
    clustering: &SpectralClustering,
    points: &[Complex64],
    prep: &[Option<Level>],
    params: &ClusterParams,
) -> Result<QubitClusterModel> {
    if points.len() != clustering.assignments.len() || prep.len() != points.len() {
        return Err(invalid("points, preparations and assignments must align"));
    }
    let mut sizes = [0usize; N_CLUSTERS];
    let mut votes = [[0usize; NUM_LEVELS]; N_CLUSTERS];
    let mut level_totals = [0usize; NUM_LEVELS];
    let mut level_sums = [Complex64::new(0.0, 0.0); NUM_LEVELS];
    for ((&a, p), &pt) in clustering.assignments.iter().zip(prep).zip(points) {
        sizes[a] += 1;
        if let Some(l) = *p {
            if l as usize >= NUM_LEVELS {
                return Err(invalid(format!("preparation level {l} outside 0..=2")));
            }
            votes[a][l as usize] += 1;
            level_totals[l as usize] += 1;
            level_sums[l as usize] += pt;
        }
    }
    if sizes.contains(&0) {
        return Err(Error::Data(format!("qubit {qubit_index}: empty cluster")));
    }
    if level_totals[0] == 0 && level_totals[1] == 0 {
        return Err(Error::Data(format!("qubit {qubit_index}: no computational preparations to vote with")));
    }
    // Clusters by descending size, ties by index.
    let mut by_size = [0usize, 1, 2];
    by_size.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let majority = |c: usize| -> Option<Level> {
        let share = |l: usize| {
            if level_totals[l] == 0 {
                0.0
            } else {
                votes[c][l] as f64 / level_totals[l] as f64
            }
        };
        (0..NUM_LEVELS)
            .filter(|&l| votes[c][l] > 0)
            .max_by(|&a, &b| votes[c][a].cmp(&votes[c][b]).then(share(a).total_cmp(&share(b))).then(b.cmp(&a)))
            .map(|l| l as Level)
    };
    let (big_a, big_b, small) = (by_size[0], by_size[1], by_size[2]);
    let mut cluster_level = [0 as Level; N_CLUSTERS];
    let mut used_fallback = false;
    match (majority(big_a), majority(big_b)) {
        (Some(la), Some(lb)) if la != lb => {
            cluster_level[big_a] = la;
            cluster_level[big_b] = lb;
            cluster_level[small] = 3 - la - lb;
        }
        _ => {
            used_fallback = true;
            let means: Vec<Option<Complex64>> = (0..NUM_LEVELS)
                .map(|l| (level_totals[l] > 0).then(|| level_sums[l] / level_totals[l] as f64))
                .collect();
            let best = PERMUTATIONS
                .iter()
                .filter(|perm| means[2].is_some() || perm[small] == 2)
                .map(|perm| {
                    let cost: f64 = (0..N_CLUSTERS)
                        .filter_map(|c| means[perm[c] as usize].map(|m| (clustering.centroids[c] - m).norm()))
                        .sum();
                    (cost, *perm)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .expect("at least one admissible permutation");
            cluster_level = best.1;
        }
    }
    Ok(QubitClusterModel {
        qubit_index,
        centroids: clustering.centroids,
        cluster_level,
        cluster_sizes: sizes,
        used_fallback,
        sigma: clustering.sigma,
        subsample: clustering.subsample.clone(),
        params: params.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(per: usize, centers: &[Complex64], std: f64, seed: u64) -> (Vec<Complex64>, Vec<usize>) {
        let mut rng = Stream::new(seed, "blob-test", 0);
        let mut pts = Vec::new();
        let mut ids = Vec::new();
        for (b, c) in centers.iter().enumerate() {
            for _ in 0..per {
                pts.push(c + Complex64::new(std * rng.normal(), std * rng.normal()));
                ids.push(b);
            }
        }
        (pts, ids)
    }

    fn agreement(a: &[usize], truth: &[usize]) -> f64 {
        let best = PERMUTATIONS
            .iter()
            .map(|perm| a.iter().zip(truth).filter(|(&x, &t)| perm[x] as usize == t).count())
            .max()
            .unwrap();
        best as f64 / a.len() as f64
    }

    #[test]
    fn separated_blobs_are_recovered() {
        let centers = [Complex64::new(0.0, 0.0), Complex64::new(10.0, 0.0), Complex64::new(5.0, 8.66)];
        let (pts, ids) = blobs(100, &centers, 1.0, 3);
        let params = ClusterParams { subsample: 150, restarts: 10, bandwidth_scale: DEFAULT_BANDWIDTH_SCALE, seed: 1 };
        let sc = spectral_cluster(&pts, &params, 0).unwrap();
        assert!(agreement(&sc.assignments, &ids) >= 0.99);
    }

    #[test]
    fn degenerate_inputs() {
        let same = vec![Complex64::new(1.0, 1.0); 10];
        let params = ClusterParams { subsample: 10, restarts: 2, bandwidth_scale: DEFAULT_BANDWIDTH_SCALE, seed: 0 };
        assert!(matches!(spectral_cluster(&same, &params, 0), Err(Error::Data(_))));
        let three = [Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0), Complex64::new(0.0, 5.0)];
        let params = ClusterParams { subsample: 3, restarts: 5, bandwidth_scale: DEFAULT_BANDWIDTH_SCALE, seed: 0 };
        let sc = spectral_cluster(&three, &params, 0).unwrap();
        let mut a = sc.assignments.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2]);
        let params = ClusterParams { subsample: 4, restarts: 5, bandwidth_scale: DEFAULT_BANDWIDTH_SCALE, seed: 0 };
        assert!(spectral_cluster(&three, &params, 0).is_err());
    }

    #[test]
    fn kmeans_objective_never_increases() {
        let centers = [Complex64::new(0.0, 0.0), Complex64::new(2.0, 0.0), Complex64::new(1.0, 1.5)];
        let (pts, _) = blobs(60, &centers, 0.8, 11);
        let vecs: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.re, p.im]).collect();
        for seed in 0..20 {
            let mut rng = Stream::new(seed, "t", 0);
            let run = lloyd(&vecs, plus_plus_seed(&vecs, 3, &mut rng));
            for w in run.history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{:?}", run.history);
            }
        }
    }

    fn fake_clustering(sizes: [usize; 3], centroids: [Complex64; 3]) -> SpectralClustering {
        let assignments = (0..3).flat_map(|c| std::iter::repeat(c).take(sizes[c])).collect();
        SpectralClustering { assignments, subsample: vec![], centroids, sigma: 1.0, eigenvalues: [0.0; 3] }
    }

    #[test]
    fn labels_by_majority_and_size() {
        // Clusters of 900 (prep 1), 950 (prep 0), 20 (mixed).
        let sc = fake_clustering([900, 950, 20], [Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0), Complex64::new(0.0, 1.0)]);
        let prep: Vec<Option<Level>> = (0..1870).map(|i| Some(if i < 900 { 1 } else if i < 1850 { 0 } else { (i % 2) as Level })).collect();
        let pts = vec![Complex64::new(0.0, 0.0); 1870];
        let params = ClusterParams::new(0);
        let m = assign_labels(0, &sc, &pts, &prep, &params).unwrap();
        assert_eq!(m.cluster_level, [1, 0, 2]);
        assert!(!m.used_fallback);
    }

    #[test]
    fn conflict_falls_back_to_centroid_matching() {
        // Both big clusters are mostly prep 0; centroids decide.
        let c = [Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)];
        let sc = fake_clustering([100, 90, 10], c);
        let mut prep = vec![Some(0 as Level); 200];
        let mut pts = vec![c[0]; 200];
        for i in 100..140 {
            prep[i] = Some(1);
            pts[i] = c[1];
        }
        for p in pts.iter_mut().skip(140).take(50) {
            *p = c[0];
        }
        let m = assign_labels(0, &sc, &pts, &prep, &ClusterParams::new(0)).unwrap();
        assert!(m.used_fallback);
        assert_eq!(m.cluster_level, [0, 1, 2]);
    }

    #[test]
    fn empty_cluster_is_an_error() {
        let sc = fake_clustering([5, 0, 3], [Complex64::new(0.0, 0.0); 3]);
        let pts = vec![Complex64::new(0.0, 0.0); 8];
        let prep = vec![Some(0); 8];
        assert!(assign_labels(0, &sc, &pts, &prep, &ClusterParams::new(0)).is_err());
    }
}
