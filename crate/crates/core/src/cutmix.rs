//! Time-axis CutMix of spectrograms and of frame predictions.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;

/// Fraction bounds of the pasted run relative to `T`.
pub const RUN_FRACTION: (f64, f64) = (0.25, 0.75);

/// Binary time mask `m` (length `T`) and its pooled version `m'`
/// (length `T'`). Frames where the mask is 1 come from the clip itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeMask {
    raw: Vec<bool>,
    pooled: Vec<bool>,
}

impl TimeMask {
    /// Mask with a single run `[start, start + len)` of ones.
    pub fn from_run(t: usize, t_out: usize, start: usize, len: usize) -> Result<Self> {
        if start + len > t {
            return Err(Error::InvalidArgument(format!("run {start}+{len} exceeds {t} frames")));
        }
        let raw: Vec<bool> = (0..t).map(|i| i >= start && i < start + len).collect();
        let pooled = pool_mask(&raw, t_out)?;
        Ok(Self { raw, pooled })
    }

    /// Random run with uniform length in `[0.25 T, 0.75 T]` and uniform
    /// start.
    pub fn sample(t: usize, t_out: usize, rng: &mut impl Rng) -> Result<Self> {
        if t == 0 {
            return Err(Error::InvalidArgument("empty mask".into()));
        }
        let lo = ((RUN_FRACTION.0 * t as f64).ceil() as usize).max(1);
        let hi = ((RUN_FRACTION.1 * t as f64).floor() as usize).max(lo);
        let len = rng.random_range(lo..=hi);
        let start = rng.random_range(0..=t - len);
        Self::from_run(t, t_out, start, len)
    }

    pub fn raw(&self) -> &[bool] {
        &self.raw
    }

    pub fn pooled(&self) -> &[bool] {
        &self.pooled
    }
}

/// Majority pooling of `m` down to `t_out` frames, ties counted as 1.
pub fn pool_mask(m: &[bool], t_out: usize) -> Result<Vec<bool>> {
    if t_out == 0 || m.len() % t_out != 0 {
        return Err(Error::InvalidArgument(format!("{t_out} does not divide mask length {}", m.len())));
    }
    let factor = m.len() / t_out;
    Ok(m.chunks_exact(factor).map(|w| 2 * w.iter().filter(|&&b| b).count() >= factor).collect())
}

/// Uniform random pairing `sigma` of a batch.
pub fn sample_pairing(batch: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..batch).collect();
    idx.shuffle(rng);
    idx
}

fn mix_rows(a: &Matrix, b: &Matrix, keep_a: &[bool], what: &str) -> Result<Matrix> {
    if !a.same_shape(b) {
        return shape_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    if keep_a.len() != a.rows() {
        return shape_err(format!("{what}: mask has {} frames, inputs have {}", keep_a.len(), a.rows()));
    }
    let mut out = b.clone();
    for (t, &k) in keep_a.iter().enumerate() {
        if k {
            out.row_mut(t).copy_from_slice(a.row(t));
        }
    }
    Ok(out)
}

/// `m * X_i + (1 - m) * X_sigma`, broadcast over frequency.
pub fn cutmix_spec(xi: &Matrix, xs: &Matrix, mask: &TimeMask) -> Result<Matrix> {
    mix_rows(xi, xs, &mask.raw, "spectrogram")
}

/// `m' * P_i + (1 - m') * P_sigma`.
pub fn cutmix_pred(pi: &Matrix, ps: &Matrix, mask: &TimeMask) -> Result<Matrix> {
    mix_rows(pi, ps, &mask.pooled, "predictions")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn oracle_pool(m: &[bool], t_out: usize) -> Vec<bool> {
        let f = m.len() / t_out;
        (0..t_out)
            .map(|t| {
                let ones: usize = (0..f).map(|j| m[t * f + j] as usize).sum();
                ones as f64 / f as f64 >= 0.5
            })
            .collect()
    }

    #[test]
    fn pooling_examples() {
        let b = |v: &[u8]| v.iter().map(|&x| x == 1).collect::<Vec<_>>();
        assert_eq!(pool_mask(&b(&[1, 1, 1, 1, 0, 0, 0, 0]), 2).unwrap(), b(&[1, 0]));
        assert_eq!(pool_mask(&b(&[1, 1, 0, 0, 0, 0, 0, 0]), 2).unwrap(), b(&[1, 0]));
        assert_eq!(pool_mask(&[true; 12], 3).unwrap(), vec![true; 3]);
        assert!(pool_mask(&[true; 10], 4).is_err());
    }

    #[test]
    fn pooling_matches_oracle_for_all_short_masks() {
        for t in (4..=16).step_by(4) {
            for bits in 0u32..(1 << t) {
                let m: Vec<bool> = (0..t).map(|i| bits >> i & 1 == 1).collect();
                assert_eq!(pool_mask(&m, t / 4).unwrap(), oracle_pool(&m, t / 4));
            }
        }
    }

    #[test]
    fn sampled_masks_have_one_run_within_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let m = TimeMask::sample(312, 78, &mut rng).unwrap();
            let ones = m.raw().iter().filter(|&&b| b).count();
            assert!((78..=234).contains(&ones), "{ones}");
            let rises = m.raw().windows(2).filter(|w| !w[0] && w[1]).count() + m.raw()[0] as usize;
            assert_eq!(rises, 1);
            assert_eq!(m.pooled(), oracle_pool(m.raw(), 78).as_slice());
        }
    }

    #[test]
    fn identity_and_swap_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rand_m = |r, c, rng: &mut ChaCha8Rng| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random::<f64>()).collect()).unwrap()
        };
        let xi = rand_m(8, 3, &mut rng);
        let xs = rand_m(8, 3, &mut rng);
        let all = TimeMask::from_run(8, 2, 0, 8).unwrap();
        assert_eq!(cutmix_spec(&xi, &xs, &all).unwrap(), xi);
        assert_eq!(all.pooled(), &[true, true]);
        let none = TimeMask::from_run(8, 2, 0, 0).unwrap();
        let pi = rand_m(2, 3, &mut rng);
        let ps = rand_m(2, 3, &mut rng);
        assert_eq!(cutmix_pred(&pi, &ps, &none).unwrap(), ps);
        assert_eq!(cutmix_spec(&xi, &xi, &TimeMask::from_run(8, 2, 3, 4).unwrap()).unwrap(), xi);
        assert!(cutmix_spec(&xi, &rand_m(8, 2, &mut rng), &all).is_err());
        assert!(cutmix_pred(&xi, &xs, &all).is_err());
    }

    #[test]
    fn random_pair_matches_elementwise_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let xi = Matrix::from_vec(4, 2, (0..8).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            let xs = Matrix::from_vec(4, 2, (0..8).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            let mask = TimeMask::sample(4, 2, &mut rng).unwrap();
            let out = cutmix_spec(&xi, &xs, &mask).unwrap();
            for t in 0..4 {
                let m = mask.raw()[t] as u8 as f64;
                for f in 0..2 {
                    assert_eq!(out.get(t, f), m * xi.get(t, f) + (1.0 - m) * xs.get(t, f));
                }
            }
        }
    }

    #[test]
    fn pairing_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = sample_pairing(16, &mut rng);
        p.sort();
        assert_eq!(p, (0..16).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn complementarity(vals in proptest::collection::vec(-10.0f64..10.0, 32), start in 0usize..8, len in 0usize..9) {
            let len = len.min(8 - start);
            let xi = Matrix::from_vec(8, 2, vals[..16].to_vec()).unwrap();
            let xs = Matrix::from_vec(8, 2, vals[16..].to_vec()).unwrap();
            let mask = TimeMask::from_run(8, 2, start, len).unwrap();
            let a = cutmix_spec(&xi, &xs, &mask).unwrap();
            let b = cutmix_spec(&xs, &xi, &mask).unwrap();
            for i in 0..16 {
                prop_assert_eq!(a.as_slice()[i] + b.as_slice()[i], xi.as_slice()[i] + xs.as_slice()[i]);
            }
        }

        #[test]
        fn mixed_prediction_rows_come_from_a_source(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pi = Matrix::from_vec(6, 3, (0..18).map(|_| rng.random()).collect()).unwrap();
            let ps = Matrix::from_vec(6, 3, (0..18).map(|_| rng.random()).collect()).unwrap();
            let mask = TimeMask::sample(24, 6, &mut rng).unwrap();
            let out = cutmix_pred(&pi, &ps, &mask).unwrap();
            for t in 0..6 {
                prop_assert!(out.row(t) == pi.row(t) || out.row(t) == ps.row(t));
                let expected = if mask.pooled()[t] { pi.row(t) } else { ps.row(t) };
                prop_assert_eq!(out.row(t), expected);
            }
        }
    }
}
