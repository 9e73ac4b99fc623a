//! Lloyd's K-means with k-means++ seeding and restarts.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub max_iter: usize,
    /// Stop when no centroid moves farther than this.
    pub tol: f64,
    /// Independent seedings; the lowest WCSS run wins.
    pub n_init: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-6, n_init: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub wcss: f64,
    /// WCSS after every Lloyd iteration of the winning run, then once more
    /// after the transfer pass.
    pub history: Vec<f64>,
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

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

/// Within-cluster sum of squares of an assignment.
pub fn wcss(points: &[Vec<f64>], centroids: &[Vec<f64>], assignment: &[usize]) -> f64 {
    points.iter().zip(assignment).map(|(p, &a)| sq_dist(p, &centroids[a])).sum()
}

/// k-means++ seeding: first centroid uniform, then proportional to squared
/// distance to the nearest chosen centroid.
pub fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    while centroids.len() < k {
        let weights: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let next = match WeightedIndex::new(&weights) {
            Ok(dist) => dist.sample(rng),
            // all points coincide with chosen centroids
            Err(_) => rng.random_range(0..points.len()),
        };
        centroids.push(points[next].clone());
    }
    centroids
}

/// Lloyd iterations from the given centroids. Empty clusters keep their
/// previous centroid.
pub fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, cfg: &KMeansConfig) -> KMeansResult {
    let dim = points[0].len();
    let k = centroids.len();
    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    let mut history = Vec::new();
    for _ in 0..cfg.max_iter {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
            counts[a] += 1;
        }
        let mut shift = 0.0f64;
        for j in 0..k {
            if counts[j] > 0 {
                let new: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
                shift = shift.max(sq_dist(&new, &centroids[j]).sqrt());
                centroids[j] = new;
            }
        }
        assignment = points.iter().map(|p| nearest(p, &centroids).0).collect();
        history.push(wcss(points, &centroids, &assignment));
        if shift <= cfg.tol {
            break;
        }
    }
    let wcss = wcss(points, &centroids, &assignment);
    KMeansResult { centroids, assignment, wcss, history }
}

/// Single-point transfers (Hartigan's rule): moves a point to another
/// cluster whenever that lowers the WCSS, until no move does. Lloyd stops
/// at partitions where such moves still help, mostly with overlapping
/// clusters. Returns exact cluster means.
pub fn transfer_refine(points: &[Vec<f64>], run: KMeansResult) -> KMeansResult {
    let KMeansResult { mut centroids, mut assignment, mut history, .. } = run;
    let dim = points[0].len();
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    let mut sums = vec![vec![0.0; dim]; k];
    for (p, &a) in points.iter().zip(&assignment) {
        counts[a] += 1;
        sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    let mean = |sum: &[f64], n: usize| sum.iter().map(|s| s / n as f64).collect::<Vec<f64>>();
    for j in 0..k {
        if counts[j] > 0 {
            centroids[j] = mean(&sums[j], counts[j]);
        }
    }
    // bounded for safety; every accepted move strictly lowers the WCSS
    for _ in 0..points.len() * 100 {
        let mut moved = false;
        for (i, p) in points.iter().enumerate() {
            let a = assignment[i];
            if counts[a] < 2 {
                continue;
            }
            let na = counts[a] as f64;
            let remove = na / (na - 1.0) * sq_dist(p, &centroids[a]);
            let mut best = (a, 0.0);
            for b in (0..k).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let delta = nb / (nb + 1.0) * sq_dist(p, &centroids[b]) - remove;
                if delta < best.1 - 1e-12 {
                    best = (b, delta);
                }
            }
            let b = best.0;
            if b != a {
                sums[a].iter_mut().zip(p).for_each(|(s, v)| *s -= v);
                sums[b].iter_mut().zip(p).for_each(|(s, v)| *s += v);
                counts[a] -= 1;
                counts[b] += 1;
                assignment[i] = b;
                centroids[a] = mean(&sums[a], counts[a]);
                centroids[b] = mean(&sums[b], counts[b]);
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    // recompute from scratch so the running sums leave no drift
    let mut sums = vec![vec![0.0; dim]; k];
    for (p, &a) in points.iter().zip(&assignment) {
        sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
    }
    for j in 0..k {
        if counts[j] > 0 {
            centroids[j] = mean(&sums[j], counts[j]);
        }
    }
    let wcss = wcss(points, &centroids, &assignment);
    history.push(wcss);
    KMeansResult { centroids, assignment, wcss, history }
}

/// Best of `n_init` k-means++ seeded Lloyd runs, each polished by
/// [`transfer_refine`].
pub fn kmeans(points: &[Vec<f64>], k: usize, cfg: &KMeansConfig, rng: &mut impl Rng) -> Result<KMeansResult> {
    if k == 0 || points.len() < k {
        return Err(Error::InvalidArgument(format!("need at least k={k} >= 1 points, got {}", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("points differ in dimension".into()));
    }
    let mut best: Option<KMeansResult> = None;
    for _ in 0..cfg.n_init.max(1) {
        let run = transfer_refine(points, lloyd(points, plus_plus_init(points, k, rng), cfg));
        if best.as_ref().is_none_or(|b| run.wcss < b.wcss) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one run"))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Minimum WCSS over every assignment of points to `k` labels.
    pub(crate) fn exhaustive_min_wcss(points: &[Vec<f64>], k: usize) -> f64 {
        let n = points.len();
        let dim = points[0].len();
        let mut labels = vec![0usize; n];
        let mut best = f64::INFINITY;
        loop {
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (p, &l) in points.iter().zip(&labels) {
                sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
                counts[l] += 1;
            }
            let cost: f64 = points
                .iter()
                .zip(&labels)
                .map(|(p, &l)| {
                    let c: Vec<f64> = sums[l].iter().map(|s| s / counts[l] as f64).collect();
                    sq_dist(p, &c)
                })
                .sum();
            best = best.min(cost);
            // next assignment in base k; label 0 fixed for the first point
            let mut i = 1;
            loop {
                if i == n {
                    return best;
                }
                labels[i] += 1;
                if labels[i] < k {
                    break;
                }
                labels[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn one_dimensional_example() {
        let pts: Vec<Vec<f64>> = [0.0, 0.1, 10.0, 10.1].iter().map(|&v| vec![v]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = kmeans(&pts, 2, &KMeansConfig::default(), &mut rng).unwrap();
        let mut c: Vec<f64> = r.centroids.iter().map(|c| c[0]).collect();
        c.sort_by(f64::total_cmp);
        assert!((c[0] - 0.05).abs() < 1e-12 && (c[1] - 10.05).abs() < 1e-12);
        assert!((r.wcss - exhaustive_min_wcss(&pts, 2)).abs() < 1e-12);
    }

    #[test]
    fn lloyd_wcss_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let pts: Vec<Vec<f64>> = (0..60).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let init = plus_plus_init(&pts, 4, &mut rng);
            let r = lloyd(&pts, init, &KMeansConfig { n_init: 1, ..Default::default() });
            for w in r.history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }

    #[test]
    fn transfer_escapes_a_lloyd_fixed_point() {
        // {0, 2} | {3}: point 2 is equidistant from both means, so Lloyd
        // keeps it, but moving it lowers the WCSS from 2 to 0.5
        let pts: Vec<Vec<f64>> = [0.0, 2.0, 3.0].iter().map(|&v| vec![v]).collect();
        let stuck = lloyd(&pts, vec![vec![1.0], vec![3.0]], &KMeansConfig::default());
        assert_eq!(stuck.assignment, vec![0, 0, 1]);
        assert_eq!(stuck.wcss, 2.0);
        let r = transfer_refine(&pts, stuck);
        assert_eq!(r.assignment, vec![0, 1, 1]);
        assert_eq!(r.wcss, 0.5);
        assert_eq!(r.centroids, vec![vec![0.0], vec![2.5]]);
    }

    #[test]
    fn transfer_never_raises_wcss_and_matches_small_optima() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let k = rng.random_range(1..=3usize);
            let n = rng.random_range(k..=9usize);
            let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let cfg = KMeansConfig { n_init: 1, ..Default::default() };
            let base = lloyd(&pts, plus_plus_init(&pts, k, &mut rng), &cfg);
            let refined = transfer_refine(&pts, base.clone());
            assert!(refined.wcss <= base.wcss + 1e-12);
            let best = kmeans(&pts, k, &KMeansConfig::default(), &mut rng).unwrap();
            assert!(best.wcss - exhaustive_min_wcss(&pts, k) <= 1e-9);
        }
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let r = kmeans(&pts, 1, &KMeansConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((r.centroids[0][0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.centroids[0][1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let pts = vec![vec![1.0]];
        assert!(kmeans(&pts, 2, &KMeansConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }
}
