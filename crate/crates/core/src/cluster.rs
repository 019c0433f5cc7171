//! Mini-batch K-means over knowledge states with silhouette-selected K.

use std::collections::BTreeMap;

use log::debug;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::StudentId;
use crate::error::{AcktError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_K_MAX: usize = 16;
pub const SILHOUETTE_CAP: usize = 5000;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansConfig {
    pub batch_size: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            batch_size: 256,
            max_iters: 100,
            tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub iterations: usize,
}

/// Student categories: `K` centroids and each student's nearest centroid.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: BTreeMap<StudentId, usize>,
    pub silhouette_by_k: BTreeMap<usize, f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Sum of squared distances from each point to its labelled centroid.
pub fn objective(points: &[Vec<f64>], centroids: &[Vec<f64>], labels: &[usize]) -> f64 {
    points.iter().zip(labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum()
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let d = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != d) {
        return Err(AcktError::Invalid("points have differing dimensions".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(AcktError::Invalid("points contain non-finite values".into()));
    }
    Ok(d)
}

fn kmeans_pp<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        let c = points[pick].clone();
        for (dist, p) in d2.iter_mut().zip(points) {
            *dist = dist.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Mini-batch K-means with k-means++ seeding. When `batch_size >= N` every
/// iteration is an exact Lloyd step.
pub fn minibatch_kmeans(points: &[Vec<f64>], k: usize, cfg: &KMeansConfig) -> Result<KMeansFit> {
    let n = points.len();
    check_points(points)?;
    if k == 0 || k > n {
        return Err(AcktError::Invalid(format!("cannot fit K={k} clusters to {n} points")));
    }
    if cfg.batch_size == 0 {
        return Err(AcktError::Config("kmeans batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = kmeans_pp(points, k, &mut rng);
    let d = points[0].len();
    let full = cfg.batch_size >= n;
    let mut counts = vec![0usize; k];
    let mut iterations = 0;

    for _ in 0..cfg.max_iters {
        iterations += 1;
        let previous = centroids.clone();
        if full {
            let mut sums = vec![vec![0.0; d]; k];
            let mut members = vec![0usize; k];
            for p in points {
                let c = nearest(p, &centroids);
                members[c] += 1;
                sums[c].iter_mut().zip(p).for_each(|(s, v)| *s += v);
            }
            for (c, (sum, m)) in sums.into_iter().zip(members).enumerate() {
                if m > 0 {
                    centroids[c] = sum.into_iter().map(|s| s / m as f64).collect();
                }
            }
        } else {
            let batch = sample(&mut rng, n, cfg.batch_size).into_vec();
            let labels: Vec<usize> = batch.iter().map(|&i| nearest(&points[i], &centroids)).collect();
            for (&i, &c) in batch.iter().zip(&labels) {
                counts[c] += 1;
                let eta = 1.0 / counts[c] as f64;
                centroids[c]
                    .iter_mut()
                    .zip(&points[i])
                    .for_each(|(m, v)| *m += eta * (v - *m));
            }
        }
        let shift = centroids
            .iter()
            .zip(&previous)
            .map(|(a, b)| euclidean(a, b))
            .fold(0.0, f64::max);
        if shift < cfg.tol {
            break;
        }
    }
    let labels = points.iter().map(|p| nearest(p, &centroids)).collect();
    Ok(KMeansFit {
        centroids,
        labels,
        iterations,
    })
}

/// Pairwise Euclidean distances, row-major `N × N`.
pub fn distance_matrix(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(&points[i], &points[j]);
            out[i * n + j] = d;
            out[j * n + i] = d;
        }
    }
    out
}

/// Mean silhouette over points given a precomputed distance matrix.
pub fn silhouette_from_distances(dist: &[f64], labels: &[usize]) -> Result<f64> {
    let n = labels.len();
    if dist.len() != n * n {
        return Err(AcktError::shape("silhouette", &[dist.len()], &[n, n]));
    }
    if n < 2 {
        return Err(AcktError::Invalid("silhouette needs at least 2 points".into()));
    }
    let mut dense: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        let next = dense.len();
        dense.entry(l).or_insert(next);
    }
    let k = dense.len();
    if k < 2 {
        return Err(AcktError::Invalid("silhouette undefined for a single cluster".into()));
    }
    let ids: Vec<usize> = labels.iter().map(|l| dense[l]).collect();
    let mut sizes = vec![0usize; k];
    for &c in &ids {
        sizes[c] += 1;
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        let own = ids[i];
        if sizes[own] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        let row = &dist[i * n..(i + 1) * n];
        for (&d, &c) in row.iter().zip(&ids) {
            sums[c] += d;
        }
        let alpha = sums[own] / (sizes[own] - 1) as f64;
        let beta = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = alpha.max(beta);
        if denom > 0.0 {
            total += (beta - alpha) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Mean silhouette coefficient; points in singleton clusters contribute 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(AcktError::shape("silhouette", &[points.len()], &[labels.len()]));
    }
    check_points(points)?;
    silhouette_from_distances(&distance_matrix(points), labels)
}

/// Fits K-means for each `K` in `[2, min(k_max, N)]` and keeps the fit with
/// the highest silhouette; ties go to the smaller `K`. Silhouettes use a
/// seeded subsample of [`SILHOUETTE_CAP`] points on larger inputs.
pub fn select_k(students: &[StudentId], points: &[Vec<f64>], k_max: usize, cfg: &KMeansConfig) -> Result<CategoryModel> {
    let n = points.len();
    if students.len() != n {
        return Err(AcktError::shape("select_k", &[students.len()], &[n]));
    }
    if n < 2 {
        return Err(AcktError::Invalid(format!("clustering needs at least 2 students, got {n}")));
    }
    if k_max < 2 {
        return Err(AcktError::Config(format!("k_max must be at least 2, got {k_max}")));
    }
    check_points(points)?;
    let scored: Vec<usize> = if n > SILHOUETTE_CAP {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5113_0000_0001);
        let mut idx = sample(&mut rng, n, SILHOUETTE_CAP).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n).collect()
    };
    let subset: Vec<Vec<f64>> = scored.iter().map(|&i| points[i].clone()).collect();
    let dist = distance_matrix(&subset);

    let mut best: Option<(f64, KMeansFit)> = None;
    let mut silhouette_by_k = BTreeMap::new();
    for k in 2..=k_max.min(n) {
        let fit = minibatch_kmeans(points, k, cfg)?;
        let labels: Vec<usize> = scored.iter().map(|&i| fit.labels[i]).collect();
        let score = match silhouette_from_distances(&dist, &labels) {
            Ok(s) => s,
            Err(e) => {
                debug!("K={k}: {e}");
                continue;
            }
        };
        debug!("K={k}: silhouette {score:.4}");
        silhouette_by_k.insert(k, score);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, fit));
        }
    }
    let (_, fit) = best.ok_or_else(|| AcktError::Data("no K produced two or more non-empty clusters".into()))?;
    Ok(CategoryModel {
        k: fit.centroids.len(),
        assignments: students.iter().copied().zip(fit.labels).collect(),
        centroids: fit.centroids,
        silhouette_by_k,
    })
}

impl CategoryModel {
    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    /// Nearest-centroid category for a knowledge state.
    pub fn assign(&self, state: &[f64]) -> Result<usize> {
        if state.len() != self.dim() {
            return Err(AcktError::shape("assign_category", &[state.len()], &[self.dim()]));
        }
        Ok(nearest(state, &self.centroids))
    }

    pub fn category_of(&self, student: StudentId) -> Option<usize> {
        self.assignments.get(&student).copied()
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k]
    }

    /// Centroids as a `K × d` tensor.
    pub fn centroid_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.centroids).expect("centroids share a dimension")
    }

    /// Checkpoint tensors `category.centroids`, `category.students`,
    /// `category.assignments` and the silhouette table.
    pub fn to_params(&self) -> ParamStore {
        let mut store = ParamStore::new();
        store.insert("category.centroids", self.centroid_tensor());
        let (ids, labels): (Vec<f64>, Vec<f64>) = self
            .assignments
            .iter()
            .map(|(&s, &c)| (s as f64, c as f64))
            .unzip();
        store.insert("category.students", Tensor::vector(ids));
        store.insert("category.assignments", Tensor::vector(labels));
        let (ks, scores): (Vec<f64>, Vec<f64>) = self.silhouette_by_k.iter().map(|(&k, &s)| (k as f64, s)).unzip();
        store.insert("category.silhouette_k", Tensor::vector(ks));
        store.insert("category.silhouette", Tensor::vector(scores));
        store
    }

    pub fn from_params(store: &ParamStore) -> Result<Self> {
        let get = |name: &str| {
            store
                .get(name)
                .ok_or_else(|| AcktError::Checkpoint(format!("missing tensor `{name}`")))
        };
        let c = get("category.centroids")?;
        if c.rank() != 2 || c.rows() == 0 {
            return Err(AcktError::Checkpoint("category.centroids must be a non-empty matrix".into()));
        }
        let centroids: Vec<Vec<f64>> = (0..c.rows()).map(|r| c.row(r).to_vec()).collect();
        let ids = get("category.students")?.data();
        let labels = get("category.assignments")?.data();
        if ids.len() != labels.len() {
            return Err(AcktError::Checkpoint("category students/assignments length mismatch".into()));
        }
        let mut assignments = BTreeMap::new();
        for (&s, &l) in ids.iter().zip(labels) {
            if l < 0.0 || l as usize >= centroids.len() || l.fract() != 0.0 || s < 0.0 || s.fract() != 0.0 {
                return Err(AcktError::Checkpoint(format!("invalid category assignment {s} -> {l}")));
            }
            assignments.insert(s as usize, l as usize);
        }
        let ks = get("category.silhouette_k")?.data();
        let scores = get("category.silhouette")?.data();
        Ok(CategoryModel {
            k: centroids.len(),
            centroids,
            assignments,
            silhouette_by_k: ks.iter().map(|&k| k as usize).zip(scores.iter().copied()).collect(),
        })
    }

    /// Silhouette table as TSV with a `k\tsilhouette` header.
    pub fn silhouette_tsv(&self) -> String {
        let mut out = String::from("k\tsilhouette\n");
        for (k, s) in &self.silhouette_by_k {
            out.push_str(&format!("{k}\t{s:.6}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    pub(crate) fn blobs(k: usize, per: usize, sigma: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for c in 0..k {
            let angle = c as f64 * std::f64::consts::TAU / k as f64;
            let center = [10.0 * angle.cos(), 10.0 * angle.sin()];
            for _ in 0..per {
                points.push(center.iter().map(|&m| m + noise.sample(&mut rng)).collect());
                labels.push(c);
            }
        }
        (points, labels)
    }

    #[test]
    fn silhouette_hand_example() {
        let s = silhouette(&pts(&[0.0, 0.1, 10.0, 10.1]), &[0, 0, 1, 1]).unwrap();
        let exact = ((10.05 - 0.1) / 10.05 + (9.95 - 0.1) / 9.95) / 2.0;
        assert!((s - exact).abs() < 1e-12);
        assert!((s - 0.990).abs() < 5e-4);
        let relabeled = silhouette(&pts(&[0.0, 0.1, 10.0, 10.1]), &[7, 7, 3, 3]).unwrap();
        assert_eq!(s, relabeled);
    }

    #[test]
    fn silhouette_edge_cases() {
        let coincident = silhouette(&pts(&[0.0, 1.0, 0.0, 1.0]), &[0, 0, 1, 1]).unwrap();
        assert!(coincident <= 0.0);
        assert!(silhouette(&pts(&[1.0, 2.0]), &[0, 0]).is_err());
        // Singletons contribute 0: the pair cluster alone scores.
        let s = silhouette(&pts(&[0.0, 1.0, 5.0]), &[0, 0, 1]).unwrap();
        assert!((s - (0.8 + 0.75) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_recovers_repeated_locations() {
        let locs = [[0.0, 0.0], [5.0, 5.0], [-4.0, 6.0]];
        let points: Vec<Vec<f64>> = locs.iter().flat_map(|l| std::iter::repeat_n(l.to_vec(), 50)).collect();
        for batch in [32, 1000] {
            let fit = minibatch_kmeans(&points, 3, &KMeansConfig { batch_size: batch, ..Default::default() }).unwrap();
            assert!(objective(&points, &fit.centroids, &fit.labels) < 1e-8);
            for l in &locs {
                assert!(fit.centroids.iter().any(|c| euclidean(c, l) < 1e-4));
            }
        }
    }

    #[test]
    fn kmeans_single_cluster_is_mean_and_errors() {
        let points = pts(&[1.0, 2.0, 6.0]);
        let fit = minibatch_kmeans(&points, 1, &KMeansConfig { batch_size: 10, ..Default::default() }).unwrap();
        assert!((fit.centroids[0][0] - 3.0).abs() < 1e-12);
        assert!(minibatch_kmeans(&points, 4, &KMeansConfig::default()).is_err());
    }

    #[test]
    fn kmeans_is_deterministic() {
        let (points, _) = blobs(4, 100, 1.0, 9);
        let cfg = KMeansConfig { batch_size: 64, seed: 5, ..Default::default() };
        assert_eq!(minibatch_kmeans(&points, 4, &cfg).unwrap(), minibatch_kmeans(&points, 4, &cfg).unwrap());
    }

    #[test]
    fn select_k_two_blobs() {
        let (points, truth) = blobs(2, 100, 0.1, 1);
        let ids: Vec<usize> = (0..points.len()).collect();
        let m = select_k(&ids, &points, 6, &KMeansConfig::default()).unwrap();
        assert_eq!(m.k, 2);
        assert_eq!(m.silhouette_by_k.len(), 5);
        let best = m.silhouette_by_k.values().cloned().fold(f64::MIN, f64::max);
        assert_eq!(m.silhouette_by_k[&2], best);
        let same = |a: usize, b: usize| m.assignments[&a] == m.assignments[&b];
        assert!((0..200).all(|i| same(i, 0) == (truth[i] == truth[0])));
    }

    #[test]
    fn select_k_scale_covariance() {
        let (points, _) = blobs(3, 40, 0.5, 2);
        let ids: Vec<usize> = (0..points.len()).collect();
        let scaled: Vec<Vec<f64>> = points.iter().map(|p| p.iter().map(|v| v * 4.0).collect()).collect();
        let a = select_k(&ids, &points, 6, &KMeansConfig::default()).unwrap();
        let b = select_k(&ids, &scaled, 6, &KMeansConfig::default()).unwrap();
        assert_eq!(a.k, b.k);
        assert_eq!(a.assignments, b.assignments);
    }

    #[test]
    fn assignment_rules() {
        let m = CategoryModel {
            k: 2,
            centroids: vec![vec![0.0, 0.0], vec![2.0, 0.0]],
            assignments: BTreeMap::new(),
            silhouette_by_k: BTreeMap::new(),
        };
        assert_eq!(m.assign(&[2.0, 0.0]).unwrap(), 1);
        assert_eq!(m.assign(&[1.0, 3.0]).unwrap(), 0);
        assert!(m.assign(&[1.0]).is_err());
    }

    #[test]
    fn params_round_trip() {
        let (points, _) = blobs(3, 20, 0.2, 3);
        let ids: Vec<usize> = (100..160).collect();
        let mut m = select_k(&ids, &points, 4, &KMeansConfig::default()).unwrap();
        let mut store = m.to_params();
        store.round_to_f32();
        let back = CategoryModel::from_params(&store).unwrap();
        m.centroids.iter_mut().flatten().for_each(|v| *v = *v as f32 as f64);
        m.silhouette_by_k.values_mut().for_each(|v| *v = *v as f32 as f64);
        assert_eq!(back, m);
        assert!(m.silhouette_tsv().starts_with("k\tsilhouette\n2\t"));
    }
}
