//! K-means over example embeddings and cluster-pure batch schedules.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `max(1, ⌊n / batch⌋)`, never more than `n`.
pub fn choose_k(n_examples: usize, batch_size: usize) -> usize {
    (n_examples / batch_size.max(1)).max(1).min(n_examples.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansOptions {
    pub restarts: usize,
    pub max_iters: usize,
    /// Relative objective improvement below which iteration stops.
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            restarts: 5,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DropPolicy {
    /// Undersized clusters produce one short batch.
    #[default]
    Keep,
    /// Undersized clusters are folded into the cluster with the nearest centroid.
    Merge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPlan {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub objective: f64,
    /// Objective after each assignment step of the winning restart.
    pub history: Vec<f64>,
    pub schedule: Vec<Vec<usize>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, ties going to the lowest cluster id.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Greedy k-means++ seeding from a given first centroid: each step draws
/// `2 + ln k` candidates by D² sampling and keeps the one giving the lowest
/// potential.
fn plus_plus_init<R: Rng>(points: &[Vec<f64>], k: usize, first: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let trials = 2 + (k as f64).ln() as usize;
    let mut centroids = vec![points[first].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let pick = if total <= 0.0 {
                rng.gen_range(0..n)
            } else {
                let mut target = rng.gen::<f64>() * total;
                let mut chosen = n - 1;
                for (i, &d) in dist.iter().enumerate() {
                    if d > 0.0 && target < d {
                        chosen = i;
                        break;
                    }
                    target -= d;
                }
                chosen
            };
            let next: Vec<f64> = dist
                .iter()
                .zip(points)
                .map(|(&d, p)| d.min(sq_dist(p, &points[pick])))
                .collect();
            let potential = next.iter().sum::<f64>();
            if best.as_ref().map_or(true, |b| potential < b.0) {
                best = Some((potential, pick, next));
            }
        }
        let (_, pick, next) = best.unwrap();
        dist = next;
        centroids.push(points[pick].clone());
    }
    centroids
}

struct LloydRun {
    centroids: Vec<Vec<f64>>,
    assignment: Vec<usize>,
    objective: f64,
    history: Vec<f64>,
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, opts: &KMeansOptions) -> LloydRun {
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignment: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    loop {
        let mut next = Vec::with_capacity(points.len());
        let mut dists = Vec::with_capacity(points.len());
        for p in points {
            let (j, d) = nearest(p, &centroids);
            next.push(j);
            dists.push(d);
        }
        let objective: f64 = dists.iter().sum();
        let stable = next == assignment;
        let small_gain = history
            .last()
            .is_some_and(|&prev: &f64| prev - objective <= opts.tol * prev.abs());
        assignment = next;
        history.push(objective);
        if stable || small_gain || history.len() >= opts.max_iters {
            return LloydRun {
                centroids,
                assignment,
                objective,
                history,
            };
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assignment) {
            counts[j] += 1;
            sums[j].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        let mut taken = vec![false; points.len()];
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            } else {
                // empty cluster: move it onto the point farthest from its centroid
                let far = (0..points.len())
                    .filter(|&i| !taken[i])
                    .fold((0, -1.0), |best, i| if dists[i] > best.1 { (i, dists[i]) } else { best })
                    .0;
                taken[far] = true;
                centroids[j] = points[far].clone();
            }
        }
    }
}

fn means(points: &[Vec<f64>], assignment: &[usize], k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &j) in points.iter().zip(assignment) {
        counts[j] += 1;
        sums[j].iter_mut().zip(p).for_each(|(s, x)| *s += x);
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|x| *x /= c as f64);
        }
    }
    (sums, counts)
}

/// Single-point moves that lower the objective once centroid shifts are
/// accounted for, best move first. Lloyd fixed points are not always stable
/// under these moves, so this escapes some of its local minima.
fn hartigan(points: &[Vec<f64>], mut run: LloydRun, opts: &KMeansOptions) -> LloydRun {
    let k = run.centroids.len();
    let n = points.len();
    for _ in 0..opts.max_iters.saturating_mul(n) {
        let (centroids, counts) = means(points, &run.assignment, k);
        // (gain, point, target)
        let mut best = (0.0, 0, 0);
        for (i, p) in points.iter().enumerate() {
            let a = run.assignment[i];
            if counts[a] <= 1 {
                continue;
            }
            let na = counts[a] as f64;
            let remove = na / (na - 1.0) * sq_dist(p, &centroids[a]);
            for (b, c) in centroids.iter().enumerate() {
                if b == a {
                    continue;
                }
                let nb = counts[b] as f64;
                let gain = remove - nb / (nb + 1.0) * sq_dist(p, c);
                if gain > best.0 && gain > 1e-12 * remove {
                    best = (gain, i, b);
                }
            }
        }
        if best.0 <= 0.0 {
            break;
        }
        run.assignment[best.1] = best.2;
    }
    let (centroids, _) = means(points, &run.assignment, k);
    let objective = points
        .iter()
        .zip(&run.assignment)
        .map(|(p, &j)| sq_dist(p, &centroids[j]))
        .sum::<f64>();
    if run.history.last().is_some_and(|&last| objective < last) {
        run.history.push(objective);
    }
    run.objective = objective;
    run.centroids = centroids;
    run
}

/// Lloyd's algorithm with greedy k-means++ seeding, finished with
/// single-point moves. The restart with the lowest objective wins (earliest
/// on ties). Returns a plan without a schedule.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, opts: &KMeansOptions) -> Result<ClusterPlan> {
    let n = points.len();
    if k == 0 {
        return Err(Error::InvalidConfig("k must be positive".into()));
    }
    if n < k {
        return Err(Error::Infeasible { n, k });
    }
    let dim = points[0].len();
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(Error::dims("kmeans", &[dim], &[p.len()]));
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinitePoint(i));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // first centroids are drawn without replacement across restarts
    let mut firsts: Vec<usize> = (0..n).collect();
    firsts.shuffle(&mut rng);
    let mut best: Option<LloydRun> = None;
    for r in 0..opts.restarts.max(1) {
        let first = if r < n { firsts[r] } else { rng.gen_range(0..n) };
        let init = plus_plus_init(points, k, first, &mut rng);
        let run = hartigan(points, lloyd(points, init, opts), opts);
        if best.as_ref().map_or(true, |b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    let best = best.unwrap();
    Ok(ClusterPlan {
        k,
        centroids: best.centroids,
        assignment: best.assignment,
        objective: best.objective,
        history: best.history,
        schedule: Vec::new(),
    })
}

impl ClusterPlan {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignment {
            s[a] += 1;
        }
        s
    }

    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.k];
        for (i, &a) in self.assignment.iter().enumerate() {
            m[a].push(i);
        }
        m
    }

    /// Σᵢ ‖eᵢ − c_{assign(i)}‖² recomputed from `points`.
    pub fn recompute_objective(&self, points: &[Vec<f64>]) -> f64 {
        points
            .iter()
            .zip(&self.assignment)
            .map(|(p, &a)| sq_dist(p, &self.centroids[a]))
            .sum()
    }
}

/// Folds clusters smaller than `batch_size` into the cluster with the nearest
/// centroid, smallest first, then relabels and refits centroids.
fn merge_small(plan: &ClusterPlan, points: &[Vec<f64>], batch_size: usize) -> ClusterPlan {
    let mut assignment = plan.assignment.clone();
    let mut centroids = plan.centroids.clone();
    let mut sizes = plan.sizes();
    loop {
        let alive: Vec<usize> = (0..plan.k).filter(|&j| sizes[j] > 0).collect();
        if alive.len() <= 1 {
            break;
        }
        let Some(&small) = alive
            .iter()
            .filter(|&&j| sizes[j] < batch_size)
            .min_by_key(|&&j| (sizes[j], j))
        else {
            break;
        };
        let target = alive
            .iter()
            .copied()
            .filter(|&j| j != small)
            .min_by(|&a, &b| {
                sq_dist(&centroids[small], &centroids[a])
                    .total_cmp(&sq_dist(&centroids[small], &centroids[b]))
                    .then(a.cmp(&b))
            })
            .unwrap();
        let (ws, wt) = (sizes[small] as f64, sizes[target] as f64);
        centroids[target] = centroids[target]
            .iter()
            .zip(&centroids[small])
            .map(|(t, s)| (t * wt + s * ws) / (wt + ws))
            .collect();
        for a in assignment.iter_mut().filter(|a| **a == small) {
            *a = target;
        }
        sizes[target] += sizes[small];
        sizes[small] = 0;
    }
    let alive: Vec<usize> = (0..plan.k).filter(|&j| sizes[j] > 0).collect();
    let relabel: Vec<usize> = (0..plan.k)
        .map(|j| alive.iter().position(|&a| a == j).unwrap_or(usize::MAX))
        .collect();
    let assignment: Vec<usize> = assignment.iter().map(|&a| relabel[a]).collect();
    let dim = centroids[0].len();
    let k = alive.len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(&assignment) {
        counts[a] += 1;
        sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
    }
    let centroids: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|x| x / c as f64).collect())
        .collect();
    let mut merged = ClusterPlan {
        k,
        centroids,
        assignment,
        objective: 0.0,
        history: plan.history.clone(),
        schedule: Vec::new(),
    };
    merged.objective = merged.recompute_objective(points);
    merged
}

/// Shuffles each cluster's members, chunks them into batches of at most
/// `batch_size`, then shuffles the order of all batches.
///
/// `points` is only consulted by [`DropPolicy::Merge`].
pub fn build_schedule(
    plan: &ClusterPlan,
    points: &[Vec<f64>],
    batch_size: usize,
    seed: u64,
    policy: DropPolicy,
) -> ClusterPlan {
    let batch_size = batch_size.max(1);
    let mut out = match policy {
        DropPolicy::Keep => plan.clone(),
        DropPolicy::Merge => merge_small(plan, points, batch_size),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = Vec::new();
    for mut members in out.members() {
        members.shuffle(&mut rng);
        batches.extend(members.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    out.schedule = batches;
    out
}

/// Fraction of points whose cluster's majority label matches their own.
pub fn purity(assignment: &[usize], labels: &[usize]) -> f64 {
    let k = assignment.iter().max().map_or(0, |m| m + 1);
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![vec![0usize; n_labels]; k];
    for (&a, &l) in assignment.iter().zip(labels) {
        counts[a][l] += 1;
    }
    let majority: usize = counts.iter().map(|c| c.iter().max().copied().unwrap_or(0)).sum();
    majority as f64 / assignment.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(raw: &[[f64; 2]]) -> Vec<Vec<f64>> {
        raw.iter().map(|p| p.to_vec()).collect()
    }

    #[test]
    fn choose_k_rule() {
        assert_eq!(choose_k(1000, 32), 31);
        assert_eq!(choose_k(10, 32), 1);
        assert_eq!(choose_k(7, 1), 7);
    }

    #[test]
    fn single_cluster_is_mean() {
        let p = pts(&[[0.0, 0.0], [2.0, 0.0], [1.0, 3.0]]);
        let plan = kmeans(&p, 1, 0, &KMeansOptions::default()).unwrap();
        assert_eq!(plan.assignment, vec![0, 0, 0]);
        assert!((plan.centroids[0][0] - 1.0).abs() < 1e-12);
        assert!((plan.centroids[0][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_equals_n_is_exact() {
        let p = pts(&[[0.0, 0.0], [2.0, 0.0], [1.0, 3.0], [5.0, 5.0]]);
        let plan = kmeans(&p, 4, 1, &KMeansOptions::default()).unwrap();
        assert_eq!(plan.objective, 0.0);
        let mut a = plan.assignment.clone();
        a.sort();
        assert_eq!(a, vec![0, 1, 2, 3]);
    }

    #[test]
    fn infeasible_and_non_finite() {
        let p = pts(&[[0.0, 0.0]]);
        assert!(matches!(
            kmeans(&p, 2, 0, &KMeansOptions::default()),
            Err(Error::Infeasible { n: 1, k: 2 })
        ));
        let p = pts(&[[0.0, 0.0], [f64::NAN, 1.0]]);
        assert!(matches!(
            kmeans(&p, 1, 0, &KMeansOptions::default()),
            Err(Error::NonFinitePoint(1))
        ));
    }

    #[test]
    fn duplicate_points_do_not_break_seeding() {
        let p = pts(&[[1.0, 1.0]; 5]);
        let plan = kmeans(&p, 3, 0, &KMeansOptions::default()).unwrap();
        assert_eq!(plan.objective, 0.0);
    }

    #[test]
    fn schedule_examples() {
        let plan = ClusterPlan {
            k: 2,
            centroids: vec![vec![0.0], vec![1.0]],
            assignment: vec![0, 1, 0, 1, 0, 1, 0, 1],
            objective: 0.0,
            history: vec![],
            schedule: vec![],
        };
        let s = build_schedule(&plan, &[], 4, 3, DropPolicy::Keep);
        assert_eq!(s.schedule.len(), 2);
        for b in &s.schedule {
            assert!(b.iter().all(|&i| plan.assignment[i] == plan.assignment[b[0]]));
        }

        let plan = ClusterPlan {
            assignment: vec![0; 5],
            k: 1,
            centroids: vec![vec![0.0]],
            ..plan
        };
        let s = build_schedule(&plan, &[], 4, 3, DropPolicy::Keep);
        let mut sizes: Vec<usize> = s.schedule.iter().map(Vec::len).collect();
        sizes.sort();
        assert_eq!(sizes, vec![1, 4]);
    }

    #[test]
    fn merge_folds_small_cluster_into_nearest() {
        let p = pts(&[
            [0.0, 0.0],
            [0.1, 0.0],
            [0.0, 0.1],
            [0.1, 0.1],
            [0.3, 0.3],
            [9.0, 9.0],
            [9.1, 9.0],
            [9.0, 9.1],
            [9.1, 9.1],
        ]);
        let plan = ClusterPlan {
            k: 3,
            centroids: vec![vec![0.05, 0.05], vec![0.3, 0.3], vec![9.05, 9.05]],
            assignment: vec![0, 0, 0, 0, 1, 2, 2, 2, 2],
            objective: 0.0,
            history: vec![],
            schedule: vec![],
        };
        let s = build_schedule(&plan, &p, 4, 0, DropPolicy::Merge);
        assert_eq!(s.k, 2);
        assert_eq!(s.assignment[4], s.assignment[0]);
        assert!((s.objective - s.recompute_objective(&p)).abs() < 1e-12);
        let total: usize = s.schedule.iter().map(Vec::len).sum();
        assert_eq!(total, 9);
    }

    #[test]
    fn purity_bounds() {
        assert_eq!(purity(&[0, 0, 1, 1], &[0, 0, 1, 1]), 1.0);
        assert_eq!(purity(&[0, 0, 0, 0], &[0, 0, 1, 1]), 0.5);
    }
}
