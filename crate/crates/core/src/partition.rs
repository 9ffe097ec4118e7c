//! Data partitions: k-means in embedding space, cluster-to-learner matching
//! across re-clusterings, and the fixed random / label-group partitions used
//! as ablations.
//!
//! Cluster ids are zero-based: a partition with `K` clusters uses `0..K`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{squared_distance, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    assignment: Vec<usize>,
    num_clusters: usize,
    centroids: Option<Matrix>,
    pub epoch_created: u64,
}

impl Partition {
    /// Validates that every id is in range and every cluster is non-empty.
    pub fn new(
        assignment: Vec<usize>,
        num_clusters: usize,
        centroids: Option<Matrix>,
        epoch_created: u64,
    ) -> Result<Self> {
        if num_clusters == 0 {
            return Err(Error::config("a partition needs at least one cluster"));
        }
        let mut sizes = vec![0usize; num_clusters];
        for (i, &c) in assignment.iter().enumerate() {
            if c >= num_clusters {
                return Err(Error::data(format!(
                    "sample {i} assigned to cluster {c}, only {num_clusters} exist"
                )));
            }
            sizes[c] += 1;
        }
        if let Some(c) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Degenerate(format!("cluster {c} is empty")));
        }
        if let Some(m) = &centroids {
            if m.rows() != num_clusters {
                return Err(Error::shape(format!(
                    "{} centroids for {num_clusters} clusters",
                    m.rows()
                )));
            }
        }
        Ok(Partition {
            assignment,
            num_clusters,
            centroids,
            epoch_created,
        })
    }

    /// Every sample in cluster 0.
    pub fn single(n: usize, epoch_created: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::data("cannot partition an empty dataset"));
        }
        Partition::new(vec![0; n], 1, None, epoch_created)
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn centroids(&self) -> Option<&Matrix> {
        self.centroids.as_ref()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.num_clusters];
        for &c in &self.assignment {
            s[c] += 1;
        }
        s
    }

    /// Sample indices of each cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clusters];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    /// Renames cluster `j` to `permutation[j]`.
    pub fn relabel(&self, permutation: &[usize]) -> Result<Partition> {
        check_permutation(permutation, self.num_clusters)?;
        let assignment = self.assignment.iter().map(|&c| permutation[c]).collect();
        let centroids = self.centroids.as_ref().map(|m| {
            let mut out = Matrix::zeros(m.rows(), m.cols());
            for (j, &p) in permutation.iter().enumerate() {
                out.row_mut(p).copy_from_slice(m.row(j));
            }
            out
        });
        Partition::new(assignment, self.num_clusters, centroids, self.epoch_created)
    }
}

fn check_permutation(p: &[usize], k: usize) -> Result<()> {
    let mut seen = vec![false; k];
    if p.len() != k {
        return Err(Error::shape(format!("permutation of length {} for {k} clusters", p.len())));
    }
    for &v in p {
        if v >= k || seen[v] {
            return Err(Error::data(format!("{p:?} is not a permutation of 0..{k}")));
        }
        seen[v] = true;
    }
    Ok(())
}

/// Sum of squared distances from each point to its cluster centroid.
pub fn kmeans_objective(points: &Matrix, assignment: &[usize], centroids: &Matrix) -> f64 {
    points
        .iter_rows()
        .zip(assignment)
        .map(|(p, &c)| squared_distance(p, centroids.row(c)))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansRun {
    pub partition: Partition,
    /// Objective after seeding and after every Lloyd iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn nearest(p: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.iter_rows().enumerate() {
        let d = squared_distance(p, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign_all(points: &Matrix, centroids: &Matrix) -> Vec<(usize, f64)> {
    (0..points.rows())
        .into_par_iter()
        .map(|i| nearest(points.row(i), centroids))
        .collect()
}

fn kmeans_pp_seeds(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.rows();
    let mut centroids = Matrix::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = points
        .iter_rows()
        .map(|p| squared_distance(p, points.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            // Rounding can run past the end; take the last positive weight.
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, p) in points.iter_rows().enumerate() {
            d2[i] = d2[i].min(squared_distance(p, points.row(pick)));
        }
    }
    centroids
}

fn update_centroids(points: &Matrix, assignment: &[usize], k: usize) -> Matrix {
    let mut sums = Matrix::zeros(k, points.cols());
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter_rows().zip(assignment) {
        counts[c] += 1;
        for (s, v) in sums.row_mut(c).iter_mut().zip(p) {
            *s += v;
        }
    }
    for (c, &cnt) in counts.iter().enumerate() {
        if cnt > 0 {
            sums.row_mut(c).iter_mut().for_each(|v| *v /= cnt as f64);
        }
    }
    sums
}

/// Moves the farthest point of the largest cluster into each empty one.
fn repair_empty(points: &Matrix, assignment: &mut [usize], centroids: &mut Matrix, k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        for &c in assignment.iter() {
            sizes[c] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut largest = 0;
        for c in 1..k {
            if sizes[c] > sizes[largest] {
                largest = c;
            }
        }
        let mut far = (usize::MAX, -1.0);
        for (i, p) in points.iter_rows().enumerate() {
            if assignment[i] == largest {
                let d = squared_distance(p, centroids.row(largest));
                if d > far.1 {
                    far = (i, d);
                }
            }
        }
        assignment[far.0] = empty;
        centroids.row_mut(empty).copy_from_slice(points.row(far.0));
    }
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iters` is reached. Ties go to the lowest centroid index.
pub fn kmeans_traced(points: &Matrix, k: usize, max_iters: usize, seed: u64) -> Result<KMeansRun> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::config("k-means needs K >= 1"));
    }
    if n < k {
        return Err(Error::data(format!("k-means with K={k} needs at least {k} points, got {n}")));
    }
    if !points.is_finite() {
        return Err(Error::data("k-means input contains non-finite values"));
    }
    if k > 1 && points.iter_rows().all(|p| p == points.row(0)) {
        return Err(Error::Degenerate(format!(
            "all {n} points are identical; cannot form {k} clusters"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_seeds(points, k, &mut rng);
    let mut assignment: Vec<usize> = assign_all(points, &centroids).into_iter().map(|a| a.0).collect();
    repair_empty(points, &mut assignment, &mut centroids, k);
    centroids = update_centroids(points, &assignment, k);
    let mut trace = vec![kmeans_objective(points, &assignment, &centroids)];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        let mut next: Vec<usize> = assign_all(points, &centroids).into_iter().map(|a| a.0).collect();
        repair_empty(points, &mut next, &mut centroids, k);
        if next == assignment {
            converged = true;
            break;
        }
        assignment = next;
        centroids = update_centroids(points, &assignment, k);
        trace.push(kmeans_objective(points, &assignment, &centroids));
    }
    Ok(KMeansRun {
        partition: Partition::new(assignment, k, Some(centroids), 0)?,
        objective_trace: trace,
        iterations,
        converged,
    })
}

pub fn kmeans(points: &Matrix, k: usize, max_iters: usize, seed: u64) -> Result<Partition> {
    kmeans_traced(points, k, max_iters, seed).map(|r| r.partition)
}

/// `iou[(i, j)] = |prev_i ∩ next_j| / |prev_i ∪ next_j|`.
pub fn iou_matrix(prev: &Partition, next: &Partition) -> Result<Matrix> {
    if prev.len() != next.len() {
        return Err(Error::shape(format!(
            "partitions cover {} and {} samples",
            prev.len(),
            next.len()
        )));
    }
    let (kp, kn) = (prev.num_clusters(), next.num_clusters());
    let mut inter = Matrix::zeros(kp, kn);
    for (&a, &b) in prev.assignment().iter().zip(next.assignment()) {
        inter[(a, b)] += 1.0;
    }
    let sp = prev.sizes();
    let sn = next.sizes();
    let mut out = Matrix::zeros(kp, kn);
    for i in 0..kp {
        for j in 0..kn {
            let union = sp[i] as f64 + sn[j] as f64 - inter[(i, j)];
            out[(i, j)] = inter[(i, j)] / union;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentMatch {
    /// `permutation[j]` is the learner that takes new cluster `j`.
    pub permutation: Vec<usize>,
    pub total_iou: f64,
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with potentials, `O(K^3)`). Returns the column assigned to each row.
pub fn solve_assignment(cost: &Matrix) -> Result<Vec<usize>> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(Error::shape(format!(
            "assignment needs a square matrix, got {}x{}",
            n,
            cost.cols()
        )));
    }
    if !cost.is_finite() {
        return Err(Error::data("assignment costs must be finite"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based potentials; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
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
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[owner[j] - 1] = j - 1;
    }
    Ok(row_to_col)
}

/// Binds new clusters (columns) to learners (rows) maximizing total IoU.
pub fn match_learners(iou: &Matrix) -> Result<AssignmentMatch> {
    let k = iou.rows();
    if iou.cols() != k {
        return Err(Error::shape(format!(
            "IoU matrix must be square, got {}x{}",
            k,
            iou.cols()
        )));
    }
    let mut cost = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            cost[(i, j)] = 1.0 - iou[(i, j)];
        }
    }
    let row_to_col = solve_assignment(&cost)?;
    let mut permutation = vec![0; k];
    let mut total_iou = 0.0;
    for (learner, &cluster) in row_to_col.iter().enumerate() {
        permutation[cluster] = learner;
        total_iou += iou[(learner, cluster)];
    }
    Ok(AssignmentMatch {
        permutation,
        total_iou,
    })
}

/// Uniform random assignment with every cluster non-empty.
pub fn random_partition(n: usize, k: usize, seed: u64) -> Result<Partition> {
    if k == 0 || n < k {
        return Err(Error::data(format!("random partition of {n} samples into {k} clusters")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut assignment = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = if pos < k { pos } else { rng.random_range(0..k) };
    }
    Partition::new(assignment, k, None, 0)
}

/// Samples follow their class's group: `group_map[label]` is the cluster.
pub fn label_partition(labels: &[usize], k: usize, group_map: &[usize]) -> Result<Partition> {
    let mut assignment = Vec::with_capacity(labels.len());
    for &l in labels {
        let g = *group_map
            .get(l)
            .ok_or_else(|| Error::data(format!("class {l} has no group")))?;
        if g >= k {
            return Err(Error::data(format!("class {l} mapped to group {g}, K={k}")));
        }
        assignment.push(g);
    }
    Partition::new(assignment, k, None, 0)
}

/// Classes `0..num_classes` cut into `k` contiguous, near-equal groups.
pub fn contiguous_groups(num_classes: usize, k: usize) -> Vec<usize> {
    (0..num_classes).map(|c| c * k / num_classes.max(1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn perms(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in perms(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn separated_blobs_are_recovered_exactly() {
        let mut rows = vec![vec![0.0, 0.0]; 5];
        rows.extend(vec![vec![10.0, 0.0]; 5]);
        let pts = Matrix::from_rows(&rows).unwrap();
        let run = kmeans_traced(&pts, 2, 100, 3).unwrap();
        let a = run.partition.assignment();
        assert!(a[..5].iter().all(|&c| c == a[0]));
        assert!(a[5..].iter().all(|&c| c == a[5]));
        assert_ne!(a[0], a[5]);
        assert_eq!(*run.objective_trace.last().unwrap(), 0.0);
    }

    #[test]
    fn single_cluster_centroid_is_mean() {
        let pts = Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, 5.0]]).unwrap();
        let p = kmeans(&pts, 1, 10, 0).unwrap();
        assert_eq!(p.centroids().unwrap().row(0), &[2.0, 3.0]);
    }

    #[test]
    fn kmeans_errors() {
        let pts = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert!(kmeans(&pts, 3, 10, 0).is_err());
        assert!(matches!(kmeans(&pts, 2, 10, 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn duplicate_points_are_repaired_into_non_empty_clusters() {
        let pts = Matrix::from_rows(&[vec![0.0], vec![0.0], vec![0.0], vec![5.0]]).unwrap();
        let p = kmeans(&pts, 3, 10, 1).unwrap();
        assert!(p.sizes().iter().all(|&s| s > 0));
    }

    #[test]
    fn kmeans_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = Matrix::from_rows(
            &(0..60).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect::<Vec<_>>(),
        )
        .unwrap();
        assert_eq!(kmeans(&pts, 4, 50, 9).unwrap(), kmeans(&pts, 4, 50, 9).unwrap());
    }

    /// Exhaustive optimum over all assignments of a tiny point set.
    fn brute_force_objective(pts: &Matrix, k: usize) -> f64 {
        let n = pts.rows();
        let mut best = f64::INFINITY;
        let mut a = vec![0usize; n];
        loop {
            let mut used = vec![false; k];
            a.iter().for_each(|&c| used[c] = true);
            if used.iter().all(|&u| u) {
                let cents = update_centroids(pts, &a, k);
                best = best.min(kmeans_objective(pts, &a, &cents));
            }
            let mut i = 0;
            loop {
                if i == n {
                    return best;
                }
                a[i] += 1;
                if a[i] < k {
                    break;
                }
                a[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn kmeans_matches_restarts_and_exhaustive_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let pts = Matrix::from_rows(&rows).unwrap();
        let exact = brute_force_objective(&pts, 3);
        let best = (0..200)
            .map(|s| {
                let p = kmeans(&pts, 3, 100, s).unwrap();
                kmeans_objective(&pts, p.assignment(), p.centroids().unwrap())
            })
            .fold(f64::INFINITY, f64::min);
        assert!(best >= exact - 1e-12);
        assert!((best - exact).abs() <= 1e-9, "best {best} exact {exact}");
    }

    #[test]
    fn iou_examples() {
        let p = Partition::new(vec![0, 0, 1, 1], 2, None, 0).unwrap();
        let iou = iou_matrix(&p, &p).unwrap();
        assert_eq!(iou.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
        let swapped = p.relabel(&[1, 0]).unwrap();
        let iou = iou_matrix(&p, &swapped).unwrap();
        assert_eq!(iou.as_slice(), &[0.0, 1.0, 1.0, 0.0]);
        // Half the points change cluster: every entry is 1/3.
        let half = Partition::new(vec![0, 1, 1, 0], 2, None, 0).unwrap();
        let iou = iou_matrix(&p, &half).unwrap();
        assert!(iou.as_slice().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn matching_recovers_inverse_permutation() {
        let prev = Partition::new(vec![0, 1, 2, 3, 0, 1], 4, None, 0).unwrap();
        let pi = [2, 0, 3, 1];
        let next = prev.relabel(&pi).unwrap();
        let m = match_learners(&iou_matrix(&prev, &next).unwrap()).unwrap();
        for (j, &learner) in m.permutation.iter().enumerate() {
            assert_eq!(pi[learner], j);
        }
        assert_eq!(m.total_iou, 4.0);
        assert_eq!(next.relabel(&m.permutation).unwrap().assignment(), prev.assignment());
    }

    #[test]
    fn matching_identity() {
        let m = match_learners(&Matrix::identity(5)).unwrap();
        assert_eq!(m.permutation, vec![0, 1, 2, 3, 4]);
        assert_eq!(m.total_iou, 5.0);
        assert!(match_learners(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn matching_equals_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for k in [4, 6] {
            for _ in 0..100 {
                let mut iou = Matrix::zeros(k, k);
                iou.as_mut_slice().iter_mut().for_each(|v| *v = rng.random::<f64>());
                let got = match_learners(&iou).unwrap();
                let best = perms(k)
                    .into_iter()
                    .map(|p| (0..k).map(|j| iou[(p[j], j)]).sum::<f64>())
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!((got.total_iou - best).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_partition_examples() {
        let p = random_partition(8, 8, 3).unwrap();
        assert_eq!(p.sizes(), vec![1; 8]);
        assert_eq!(random_partition(50, 4, 7).unwrap(), random_partition(50, 4, 7).unwrap());
        let big = random_partition(1000, 8, 11).unwrap();
        let (mean, sd) = (125.0, (1000.0f64 * 0.125 * 0.875).sqrt());
        for s in big.sizes() {
            assert!((s as f64 - mean).abs() <= 3.0 * sd, "size {s}");
        }
    }

    #[test]
    fn label_partition_examples() {
        let labels = [0, 1, 2, 1, 0];
        let p = label_partition(&labels, 3, &[0, 1, 2]).unwrap();
        assert_eq!(p.assignment(), &labels);
        let one = label_partition(&labels, 1, &[0, 0, 0]).unwrap();
        assert_eq!(one.sizes(), vec![5]);
        assert!(label_partition(&labels, 3, &[0, 1]).is_err());
    }

    #[test]
    fn contiguous_groups_cover_all_clusters() {
        assert_eq!(contiguous_groups(8, 4), vec![0, 0, 1, 1, 2, 2, 3, 3]);
        assert_eq!(contiguous_groups(5, 2), vec![0, 0, 0, 1, 1]);
    }
}
