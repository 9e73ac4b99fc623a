//! Multiple unit-norm prototypes per class in the projection space.
//!
//! Lifecycle: confident teacher projections are gathered per class into a
//! [`FeatureBuffer`]; [`PrototypePool::init_offline`] clusters each class
//! buffer with K-means once; afterwards every training step re-collects a
//! buffer, assigns each row to its most similar prototype of the class and
//! moves that prototype towards the assigned centroid with momentum.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::kmeans::{kmeans, KMeansConfig};
use crate::matrix::Matrix;

/// Default per-class buffer capacity.
pub const BUFFER_CAPACITY: usize = 4096;

/// Jitter added to duplicated rows when a class has fewer rows than
/// prototypes at initialization.
pub const INIT_JITTER: f64 = 1e-3;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

/// Per-class sets `Q_i` of confident teacher projections.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBuffer {
    rows: Vec<Vec<Vec<f64>>>,
    seen: Vec<usize>,
    capacity: usize,
}

impl FeatureBuffer {
    pub fn new(n_classes: usize, capacity: usize) -> Self {
        Self { rows: vec![Vec::new(); n_classes], seen: vec![0; n_classes], capacity: capacity.max(1) }
    }

    pub fn n_classes(&self) -> usize {
        self.rows.len()
    }

    pub fn class_rows(&self, class: usize) -> &[Vec<f64>] {
        &self.rows[class]
    }

    pub fn is_empty(&self) -> bool {
        self.rows.iter().all(Vec::is_empty)
    }

    pub fn clear(&mut self) {
        self.rows.iter_mut().for_each(Vec::clear);
        self.seen.iter_mut().for_each(|s| *s = 0);
    }

    /// Adds `v` to class `class`, reservoir sampling once full.
    pub fn push(&mut self, class: usize, v: &[f64], rng: &mut impl Rng) {
        self.seen[class] += 1;
        let rows = &mut self.rows[class];
        if rows.len() < self.capacity {
            rows.push(v.to_vec());
        } else {
            let j = rng.random_range(0..self.seen[class]);
            if j < self.capacity {
                rows[j] = v.to_vec();
            }
        }
    }

    /// Appends every frame row of `v` to each class whose teacher
    /// probability exceeds `tau_plus`.
    pub fn collect(&mut self, p: &Matrix, v: &Matrix, tau_plus: f64, rng: &mut impl Rng) -> Result<()> {
        if p.rows() != v.rows() || p.cols() != self.n_classes() {
            return Err(Error::Shape(format!(
                "P {:?} and V {:?} do not fit a {}-class buffer",
                p.shape(),
                v.shape(),
                self.n_classes()
            )));
        }
        for k in 0..p.rows() {
            for class in 0..p.cols() {
                if p.get(k, class) > tau_plus {
                    self.push(class, v.row(k), rng);
                }
            }
        }
        Ok(())
    }
}

/// Outcome of [`PrototypePool::init_offline`] per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassInit {
    Clustered { rows: usize },
    /// Fewer rows than prototypes; rows were duplicated with jitter.
    Padded { rows: usize },
    /// No rows at all; random unit prototypes.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypePool {
    n_classes: usize,
    per_class: usize,
    dim: usize,
    momentum: f64,
    prototypes: Vec<f64>,
    initialized: bool,
}

impl PrototypePool {
    pub fn new(n_classes: usize, per_class: usize, dim: usize, momentum: f64) -> Result<Self> {
        if n_classes == 0 || per_class == 0 || dim == 0 {
            return Err(Error::InvalidArgument("pool sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(Self {
            n_classes,
            per_class,
            dim,
            momentum,
            prototypes: vec![0.0; n_classes * per_class * dim],
            initialized: false,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn prototype(&self, class: usize, j: usize) -> &[f64] {
        let o = (class * self.per_class + j) * self.dim;
        &self.prototypes[o..o + self.dim]
    }

    fn prototype_mut(&mut self, class: usize, j: usize) -> &mut [f64] {
        let o = (class * self.per_class + j) * self.dim;
        &mut self.prototypes[o..o + self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.prototypes
    }

    /// Restores a pool from raw prototype values.
    pub fn from_parts(
        n_classes: usize,
        per_class: usize,
        dim: usize,
        momentum: f64,
        prototypes: Vec<f64>,
        initialized: bool,
    ) -> Result<Self> {
        let mut pool = Self::new(n_classes, per_class, dim, momentum)?;
        if prototypes.len() != pool.prototypes.len() {
            return Err(Error::Shape("prototype data length".into()));
        }
        pool.prototypes = prototypes;
        pool.initialized = initialized;
        Ok(pool)
    }

    /// K-means each class buffer into `per_class` normalized centroids.
    pub fn init_offline(
        &mut self,
        buffers: &FeatureBuffer,
        kmeans_cfg: &KMeansConfig,
        rng: &mut impl Rng,
    ) -> Result<Vec<ClassInit>> {
        if buffers.n_classes() != self.n_classes {
            return Err(Error::Shape("buffer class count differs from pool".into()));
        }
        let c = self.per_class;
        let jitter = Normal::new(0.0, INIT_JITTER).expect("positive sigma");
        let mut report = Vec::with_capacity(self.n_classes);
        for class in 0..self.n_classes {
            let rows = buffers.class_rows(class);
            if rows.iter().any(|r| r.len() != self.dim) {
                return Err(Error::Shape(format!("class {class} rows are not {}-dimensional", self.dim)));
            }
            let (points, outcome) = if rows.is_empty() {
                log::warn!("class {class}: no confident frames, prototypes drawn at random");
                let pts: Vec<Vec<f64>> = (0..c)
                    .map(|_| (0..self.dim).map(|_| StandardNormal.sample(rng)).collect())
                    .collect();
                (pts, ClassInit::Random)
            } else if rows.len() < c {
                log::warn!("class {class}: {} confident frames for {c} prototypes, padding with jitter", rows.len());
                let mut pts = rows.to_vec();
                let mut i = 0;
                while pts.len() < c {
                    let dup: Vec<f64> = rows[i % rows.len()].iter().map(|v| v + jitter.sample(rng)).collect();
                    pts.push(dup);
                    i += 1;
                }
                (pts, ClassInit::Padded { rows: rows.len() })
            } else {
                (rows.to_vec(), ClassInit::Clustered { rows: rows.len() })
            };
            let result = kmeans(&points, c, kmeans_cfg, rng)?;
            for (j, centroid) in result.centroids.iter().enumerate() {
                let unit = normalize(centroid);
                self.prototype_mut(class, j).copy_from_slice(&unit);
            }
            report.push(outcome);
        }
        self.initialized = true;
        Ok(report)
    }

    /// Index of the most similar prototype of `class` (first on ties).
    pub fn nearest_in_class(&self, class: usize, v: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for j in 0..self.per_class {
            let s = dot(self.prototype(class, j), v);
            if s > best.1 {
                best = (j, s);
            }
        }
        best
    }

    /// Centroid of the rows assigned to each prototype of `class`; `None`
    /// where nothing was assigned.
    pub fn assign_and_centroid(&self, rows: &[Vec<f64>], class: usize) -> Result<Vec<Option<Vec<f64>>>> {
        if !self.initialized {
            return Err(Error::PoolUninitialized);
        }
        let mut sums = vec![vec![0.0; self.dim]; self.per_class];
        let mut counts = vec![0usize; self.per_class];
        for r in rows {
            let (j, _) = self.nearest_in_class(class, r);
            sums[j].iter_mut().zip(r).for_each(|(s, v)| *s += v);
            counts[j] += 1;
        }
        Ok(sums
            .into_iter()
            .zip(counts)
            .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
            .collect())
    }

    /// `c <- normalize(beta * c + (1 - beta) * c_hat)` where a centroid
    /// exists; other prototypes are left untouched.
    pub fn update_online(&mut self, class: usize, centroids: &[Option<Vec<f64>>]) -> Result<()> {
        if !self.initialized {
            return Err(Error::PoolUninitialized);
        }
        if centroids.len() != self.per_class {
            return Err(Error::Shape("one centroid slot per prototype expected".into()));
        }
        let beta = self.momentum;
        for (j, c_hat) in centroids.iter().enumerate() {
            if let Some(c_hat) = c_hat {
                let mixed: Vec<f64> =
                    self.prototype(class, j).iter().zip(c_hat).map(|(c, h)| beta * c + (1.0 - beta) * h).collect();
                let unit = normalize(&mixed);
                self.prototype_mut(class, j).copy_from_slice(&unit);
            }
        }
        Ok(())
    }

    /// One online iteration over all classes of a freshly collected buffer.
    pub fn step(&mut self, buffers: &FeatureBuffer) -> Result<()> {
        for class in 0..self.n_classes {
            let rows = buffers.class_rows(class);
            if rows.is_empty() {
                continue;
            }
            let centroids = self.assign_and_centroid(rows, class)?;
            self.update_online(class, &centroids)?;
        }
        Ok(())
    }

    /// Frame-to-class similarity `s_i = max_j <v, c_ij>` for a unit `v`,
    /// with the maximizing prototype index.
    pub fn similarity_argmax(&self, v: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
        if !self.initialized {
            return Err(Error::PoolUninitialized);
        }
        if v.len() != self.dim {
            return Err(Error::Shape(format!("query has {} dims, pool {}", v.len(), self.dim)));
        }
        let (idx, s): (Vec<usize>, Vec<f64>) =
            (0..self.n_classes).map(|i| self.nearest_in_class(i, v)).unzip();
        Ok((s, idx))
    }

    pub fn similarity(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.similarity_argmax(v)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kmeans::tests::exhaustive_min_wcss;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
        normalize(&(0..dim).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>())
    }

    fn pool_with(protos: &[&[f64]], per_class: usize, beta: f64) -> PrototypePool {
        let dim = protos[0].len();
        PrototypePool::from_parts(protos.len() / per_class, per_class, dim, beta, protos.concat(), true).unwrap()
    }

    #[test]
    fn collect_gate_is_per_class() {
        let p = Matrix::from_rows(&[vec![0.95, 0.95, 0.1], vec![0.5, 0.2, 0.91]]).unwrap();
        let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut buf = FeatureBuffer::new(3, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        buf.collect(&p, &v, 0.9, &mut rng).unwrap();
        assert_eq!(buf.class_rows(0), &[vec![1.0, 0.0]]);
        assert_eq!(buf.class_rows(1), &[vec![1.0, 0.0]]);
        assert_eq!(buf.class_rows(2), &[vec![0.0, 1.0]]);

        let mut quiet = FeatureBuffer::new(3, 10);
        quiet.collect(&p.map(|x| x.min(0.9)), &v, 0.9, &mut rng).unwrap();
        assert!(quiet.is_empty());
    }

    #[test]
    fn collect_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Matrix::from_vec(40, 4, (0..160).map(|_| rng.random()).collect()).unwrap();
        let v = Matrix::from_vec(40, 3, (0..120).map(|_| rng.random()).collect()).unwrap();
        let mut buf = FeatureBuffer::new(4, BUFFER_CAPACITY);
        buf.collect(&p, &v, 0.7, &mut rng).unwrap();
        for c in 0..4 {
            let mut expected = Vec::new();
            for k in 0..40 {
                if p.get(k, c) > 0.7 {
                    expected.push(v.row(k).to_vec());
                }
            }
            assert_eq!(buf.class_rows(c), expected.as_slice());
        }
    }

    #[test]
    fn reservoir_caps_buffer() {
        let mut buf = FeatureBuffer::new(1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..100 {
            buf.push(0, &[i as f64], &mut rng);
        }
        assert_eq!(buf.class_rows(0).len(), 5);
    }

    #[test]
    fn offline_init_single_prototype_is_normalized_mean() {
        let mut buf = FeatureBuffer::new(1, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for r in [[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]] {
            buf.push(0, &r, &mut rng);
        }
        let mut pool = PrototypePool::new(1, 1, 2, 0.99).unwrap();
        assert!(!pool.is_initialized());
        pool.init_offline(&buf, &KMeansConfig::default(), &mut rng).unwrap();
        assert!(pool.is_initialized());
        let expected = normalize(&[1.6 / 3.0, 1.8 / 3.0]);
        for (a, b) in pool.prototype(0, 0).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn offline_init_pads_and_randomizes_sparse_classes() {
        let mut buf = FeatureBuffer::new(2, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        buf.push(0, &[0.0, 1.0, 0.0], &mut rng);
        let mut pool = PrototypePool::new(2, 3, 3, 0.99).unwrap();
        let report = pool.init_offline(&buf, &KMeansConfig::default(), &mut rng).unwrap();
        assert_eq!(report, vec![ClassInit::Padded { rows: 1 }, ClassInit::Random]);
        for c in 0..2 {
            for j in 0..3 {
                assert!((dot(pool.prototype(c, j), pool.prototype(c, j)).sqrt() - 1.0).abs() < 1e-9);
            }
        }
        for j in 0..3 {
            assert!(dot(pool.prototype(0, j), &[0.0, 1.0, 0.0]) > 0.99);
        }
    }

    #[test]
    fn offline_init_reaches_exhaustive_optimum_before_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..40 {
            let rows: Vec<Vec<f64>> = (0..7).map(|_| unit(&mut rng, 2)).collect();
            let r = kmeans(&rows, 2, &KMeansConfig::default(), &mut rng).unwrap();
            assert!((r.wcss - exhaustive_min_wcss(&rows, 2)).abs() < 1e-9);
        }
    }

    #[test]
    fn assignment_examples() {
        let pool = pool_with(&[&[1.0, 0.0], &[0.0, 1.0]], 2, 0.99);
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let c = pool.assign_and_centroid(&rows, 0).unwrap();
        assert_eq!(c, vec![Some(vec![1.0, 0.0]), Some(vec![0.0, 1.0])]);

        let near_first = vec![vec![0.9, 0.1], vec![0.8, -0.2]];
        let c = pool.assign_and_centroid(&near_first, 0).unwrap();
        assert_eq!(c[1], None);
        let mean = c[0].as_ref().unwrap();
        assert!((mean[0] - 0.85).abs() < 1e-15 && (mean[1] + 0.05).abs() < 1e-15);
    }

    #[test]
    fn assignment_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let protos: Vec<Vec<f64>> = (0..6).map(|_| unit(&mut rng, 4)).collect();
        let refs: Vec<&[f64]> = protos.iter().map(Vec::as_slice).collect();
        let pool = pool_with(&refs, 3, 0.99);
        let rows: Vec<Vec<f64>> = (0..50).map(|_| unit(&mut rng, 4)).collect();
        for class in 0..2 {
            let got = pool.assign_and_centroid(&rows, class).unwrap();
            for j in 0..3 {
                let mut sum = [0.0; 4];
                let mut n = 0;
                for r in &rows {
                    let sims: Vec<f64> = (0..3).map(|m| dot(&protos[class * 3 + m], r)).collect();
                    let mut arg = 0;
                    for m in 1..3 {
                        if sims[m] > sims[arg] {
                            arg = m;
                        }
                    }
                    if arg == j {
                        for d in 0..4 {
                            sum[d] += r[d];
                        }
                        n += 1;
                    }
                }
                let expected = (n > 0).then(|| sum.iter().map(|s| s / n as f64).collect::<Vec<_>>());
                assert_eq!(got[j], expected);
            }
        }
    }

    #[test]
    fn momentum_update_examples() {
        let mut pool = pool_with(&[&[1.0, 0.0]], 1, 0.99);
        pool.update_online(0, &[Some(vec![0.0, 1.0])]).unwrap();
        let p = pool.prototype(0, 0);
        let n = (0.99f64 * 0.99 + 0.01 * 0.01).sqrt();
        assert!((p[0] - 0.99 / n).abs() < 1e-15 && (p[1] - 0.01 / n).abs() < 1e-15);
        assert!((p[0] - 0.99995).abs() < 1e-5 && (p[1] - 0.01010).abs() < 1e-5);

        let mut fixed = pool_with(&[&[0.6, 0.8]], 1, 0.99);
        fixed.update_online(0, &[Some(vec![0.6, 0.8])]).unwrap();
        assert!((fixed.prototype(0, 0)[0] - 0.6).abs() < 1e-15);

        let mut untouched = pool_with(&[&[0.6, 0.8], &[1.0, 0.0]], 2, 0.99);
        untouched.update_online(0, &[None, Some(vec![0.0, 1.0])]).unwrap();
        assert_eq!(untouched.prototype(0, 0), &[0.6, 0.8]);
    }

    #[test]
    fn similarity_examples() {
        let pool = pool_with(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0], &[0.0, -1.0]], 2, 0.99);
        let s = pool.similarity(&[0.6, 0.8]).unwrap();
        assert!((s[0] - 0.8).abs() < 1e-15);
        assert!((s[1] + 0.6).abs() < 1e-15);
        assert_eq!(pool.similarity(&[0.0, 1.0]).unwrap()[0], 1.0);
        let empty = PrototypePool::new(2, 2, 2, 0.99).unwrap();
        assert!(matches!(empty.similarity(&[1.0, 0.0]), Err(Error::PoolUninitialized)));
    }

    #[test]
    fn similarity_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let protos: Vec<Vec<f64>> = (0..12).map(|_| unit(&mut rng, 5)).collect();
        let refs: Vec<&[f64]> = protos.iter().map(Vec::as_slice).collect();
        let pool = pool_with(&refs, 3, 0.99);
        for _ in 0..100 {
            let v = unit(&mut rng, 5);
            let s = pool.similarity(&v).unwrap();
            for i in 0..4 {
                let brute = (0..3).map(|j| dot(&protos[i * 3 + j], &v)).fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(s[i], brute);
            }
        }
    }

    proptest! {
        #[test]
        fn similarity_ignores_prototype_order(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = unit(&mut rng, 3);
            let b = unit(&mut rng, 3);
            let v = unit(&mut rng, 3);
            let p1 = pool_with(&[&a, &b], 2, 0.9);
            let p2 = pool_with(&[&b, &a], 2, 0.9);
            prop_assert_eq!(p1.similarity(&v).unwrap(), p2.similarity(&v).unwrap());
        }

        #[test]
        fn single_update_moves_prototype_boundedly(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = unit(&mut rng, 4);
            let c_hat = unit(&mut rng, 4);
            let beta = 0.99;
            let pre: Vec<f64> = c.iter().zip(&c_hat).map(|(a, b)| beta * a + (1.0 - beta) * b).collect();
            let moved = crate::kmeans::sq_dist(&pre, &c).sqrt();
            prop_assert!(moved <= 2.0 * (1.0 - beta) + 1e-12);
        }
    }
}
