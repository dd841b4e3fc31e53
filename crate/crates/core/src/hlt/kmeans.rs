use rand::Rng;

use crate::data::{normalize_in_place, DenseMatrix, SparseMatrix};
use crate::error::{Error, Result};
use crate::seed;

/// Row-normalized vectors that can be clustered by cosine similarity.
pub trait ClusterPoints: Sync {
    fn n_points(&self) -> usize;
    fn dim(&self) -> usize;
    /// Dot product of point `i` with a dense vector.
    fn dot(&self, i: usize, dense: &[f32]) -> f32;
    /// Adds point `i` into a dense accumulator.
    fn add_to(&self, i: usize, acc: &mut [f32]);
}

impl ClusterPoints for DenseMatrix {
    fn n_points(&self) -> usize {
        self.n_rows()
    }

    fn dim(&self) -> usize {
        self.n_cols()
    }

    fn dot(&self, i: usize, dense: &[f32]) -> f32 {
        crate::data::dot(self.row(i), dense)
    }

    fn add_to(&self, i: usize, acc: &mut [f32]) {
        for (a, &v) in acc.iter_mut().zip(self.row(i)) {
            *a += v;
        }
    }
}

impl ClusterPoints for SparseMatrix {
    fn n_points(&self) -> usize {
        self.n_rows()
    }

    fn dim(&self) -> usize {
        self.n_cols()
    }

    fn dot(&self, i: usize, dense: &[f32]) -> f32 {
        self.row(i).dot_dense(dense)
    }

    fn add_to(&self, i: usize, acc: &mut [f32]) {
        for (j, v) in self.row(i).iter() {
            acc[j as usize] += v;
        }
    }
}

/// k-means++ seeding with cosine distance `1 - sim`.
fn seed_centroids<P: ClusterPoints, R: Rng>(
    points: &P,
    members: &[usize],
    k: usize,
    rng: &mut R,
) -> Vec<Vec<f32>> {
    let dim = points.dim();
    let n = members.len();
    let centroid_of = |pos: usize| {
        let mut c = vec![0f32; dim];
        points.add_to(members[pos], &mut c);
        normalize_in_place(&mut c);
        c
    };
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![centroid_of(first)];
    let mut min_dist: Vec<f64> = (0..n)
        .map(|p| (1.0 - points.dot(members[p], &centroids[0]) as f64).max(0.0))
        .collect();
    while centroids.len() < k {
        let weights: Vec<f64> = (0..n)
            .map(|p| if chosen[p] { 0.0 } else { min_dist[p] * min_dist[p] })
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (p, &w) in weights.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(p);
                    if u < w {
                        break;
                    }
                    u -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // All remaining points coincide with a centroid; take one uniformly.
            let free: Vec<usize> = (0..n).filter(|&p| !chosen[p]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        let c = centroid_of(pick);
        for p in 0..n {
            let d = (1.0 - points.dot(members[p], &c) as f64).max(0.0);
            if d < min_dist[p] {
                min_dist[p] = d;
            }
        }
        centroids.push(c);
    }
    centroids
}

/// Capacity-constrained assignment: points are placed in descending order of
/// their (best - second best) similarity margin, each into the most similar
/// cluster that still has room. Exactly `n mod k` clusters may reach
/// `ceil(n/k)`; the rest stop at `floor(n/k)`, so sizes differ by at most one.
fn assign_balanced(sims: &[f32], n: usize, k: usize) -> Vec<usize> {
    let lo = n / k;
    let hi = n.div_ceil(k);
    let n_hi = n % k;

    let mut margin = vec![0f32; n];
    for p in 0..n {
        let row = &sims[p * k..(p + 1) * k];
        let (mut best, mut second) = (f32::NEG_INFINITY, f32::NEG_INFINITY);
        for &s in row {
            if s > best {
                second = best;
                best = s;
            } else if s > second {
                second = s;
            }
        }
        margin[p] = if k > 1 { best - second } else { 0.0 };
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| margin[b].total_cmp(&margin[a]).then(a.cmp(&b)));

    let mut sizes = vec![0usize; k];
    let mut full_hi = 0usize;
    let mut assignment = vec![usize::MAX; n];
    let mut prefs: Vec<usize> = (0..k).collect();
    for &p in &order {
        let row = &sims[p * k..(p + 1) * k];
        prefs.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let cap_now = |size: usize, full_hi: usize| {
            if n_hi > 0 && full_hi < n_hi {
                size < hi
            } else {
                size < lo
            }
        };
        let c = *prefs
            .iter()
            .find(|&&c| cap_now(sizes[c], full_hi))
            .expect("total capacity equals the number of points");
        sizes[c] += 1;
        if n_hi > 0 && sizes[c] == hi {
            full_hi += 1;
        }
        assignment[p] = c;
    }
    assignment
}

/// Balanced spherical k-means over the subset `members` of `points`.
///
/// Returns one cluster id in `0..k` per member. Points must be row-normalized.
pub fn balanced_kmeans_subset<P: ClusterPoints>(
    points: &P,
    members: &[usize],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f32,
) -> Result<Vec<usize>> {
    let n = members.len();
    if k == 0 {
        return Err(Error::Config("k-means needs k >= 1".into()));
    }
    if k > n {
        return Err(Error::Config(format!("k-means with k={k} > {n} points")));
    }
    if k == 1 {
        return Ok(vec![0; n]);
    }
    let dim = points.dim();
    let mut rng = seed::rng(seed);
    let mut centroids = seed_centroids(points, members, k, &mut rng);
    let mut sims = vec![0f32; n * k];
    let mut assignment: Vec<usize> = Vec::new();
    for _ in 0..max_iters.max(1) {
        for (p, &i) in members.iter().enumerate() {
            for (c, centroid) in centroids.iter().enumerate() {
                sims[p * k + c] = points.dot(i, centroid);
            }
        }
        let next = assign_balanced(&sims, n, k);
        let unchanged = next == assignment;
        assignment = next;

        let mut updated = vec![vec![0f32; dim]; k];
        for (p, &i) in members.iter().enumerate() {
            points.add_to(i, &mut updated[assignment[p]]);
        }
        let mut shift = 0f32;
        for (c, mut centroid) in updated.into_iter().enumerate() {
            normalize_in_place(&mut centroid);
            let d: f32 = centroid
                .iter()
                .zip(&centroids[c])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f32>()
                .sqrt();
            shift = shift.max(d);
            centroids[c] = centroid;
        }
        if unchanged || shift < tol {
            break;
        }
    }
    Ok(assignment)
}

/// Balanced k-means over all rows of a row-normalized dense matrix.
pub fn balanced_kmeans(
    points: &DenseMatrix,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f32,
) -> Result<Vec<usize>> {
    let members: Vec<usize> = (0..points.n_rows()).collect();
    balanced_kmeans_subset(points, &members, k, seed, max_iters, tol)
}
