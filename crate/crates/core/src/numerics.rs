//! Small dense-vector helpers and the deterministic random stream.
//!
//! Points and velocities are plain `Vec<f64>` / `&[f64]`. Every reduction
//! accumulates left to right so repeated runs are bit-identical.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

/// Inner product with left-to-right accumulation.
pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Euclidean norm, `sqrt(dot(a, a))`.
pub fn l2_norm(a: &[f64]) -> f64 {
    dot_unchecked(a, a).sqrt()
}

/// `‖a − b‖` without allocating.
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s.sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// `a + s·b`.
pub fn axpy(a: &[f64], s: f64, b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + s * y).collect()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Mean of a point cloud, coordinate-wise.
pub fn mean(points: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = points.first() else {
        return Vec::new();
    };
    let mut m = vec![0.0; first.len()];
    for p in points {
        for (acc, v) in m.iter_mut().zip(p) {
            *acc += v;
        }
    }
    let n = points.len() as f64;
    m.iter_mut().for_each(|v| *v /= n);
    m
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based random stream (ChaCha20) addressed by `(seed, stream_id)`.
///
/// Normal variates use the Box–Muller transform on `(0, 1]` uniforms; the
/// second variate of each pair is cached and returned by the next call.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Derive an independent child stream. The parent is not advanced, so
    /// `split(i)` is a pure function of `(seed, stream_id, i)`.
    pub fn split(&self, child: u64) -> RngStream {
        let id = splitmix64(self.stream_id ^ splitmix64(child.wrapping_add(0xA076_1D64_78BD_642F)));
        RngStream::new(self.seed, id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// A uniformly random unit vector in `R^d`.
    pub fn unit_vector(&mut self, d: usize) -> Vec<f64> {
        loop {
            let v = sample_standard_normal(self, d);
            let n = l2_norm(&v);
            if n > 1e-12 {
                return scale(&v, 1.0 / n);
            }
        }
    }
}

/// `d` i.i.d. standard normal draws.
pub fn sample_standard_normal(rng: &mut RngStream, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.standard_normal()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dot_examples() {
        assert_eq!(dot(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(dot(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert!(matches!(
            dot(&[1.0], &[1.0, 2.0]),
            Err(Error::Dimension { expected: 1, actual: 2 })
        ));
    }

    #[test]
    fn norm_examples() {
        assert_eq!(l2_norm(&[0.0, 0.0]), 0.0);
        assert_eq!(l2_norm(&[3.0, 4.0]), 5.0);
    }

    #[test]
    fn norm_matches_brute_force() {
        let mut rng = RngStream::new(3, 0);
        for _ in 0..100 {
            let a = sample_standard_normal(&mut rng, 5);
            let mut s = 0.0;
            for v in &a {
                s += v.powi(2);
            }
            assert_eq!(l2_norm(&a), s.sqrt());
            assert!((dot(&a, &a).unwrap() - l2_norm(&a).powi(2)).abs() <= 1e-12 * s);
        }
    }

    #[test]
    fn normal_golden_pair() {
        let mut rng = RngStream::new(42, 0);
        let z = sample_standard_normal(&mut rng, 2);
        assert_eq!(
            [z[0].to_bits(), z[1].to_bits()],
            [0xbff0_3e13_f987_ed27, 0x3fe4_8f08_6f47_88ca],
            "{z:?}"
        );
    }

    #[test]
    fn normal_moments() {
        let mut rng = RngStream::new(7, 1);
        let n = 100_000;
        let draws: Vec<Vec<f64>> = (0..n).map(|_| sample_standard_normal(&mut rng, 2)).collect();
        let m = mean(&draws);
        for c in 0..2 {
            assert!(m[c].abs() < 0.02, "mean {m:?}");
        }
        let small = &draws[..10_000];
        let ms = mean(small);
        for c in 0..2 {
            let var = small.iter().map(|p| (p[c] - ms[c]).powi(2)).sum::<f64>() / (small.len() - 1) as f64;
            assert!((0.94..=1.06).contains(&var), "var {var}");
        }
    }

    #[test]
    fn streams_are_deterministic_and_distinct() {
        let a: Vec<u64> = {
            let mut r = RngStream::new(5, 9);
            (0..8).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = RngStream::new(5, 9);
            (0..8).map(|_| r.next_u64()).collect()
        };
        let c: Vec<u64> = {
            let mut r = RngStream::new(5, 10);
            (0..8).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);

        let parent = RngStream::new(5, 9);
        let mut s1 = parent.split(3);
        let mut s2 = parent.split(3);
        let mut s3 = parent.split(4);
        assert_eq!(s1.next_u64(), s2.next_u64());
        assert_ne!(s1.next_u64(), s3.next_u64());
    }

    #[test]
    fn split_streams_are_uncorrelated() {
        let parent = RngStream::new(11, 0);
        let mut a = parent.split(0);
        let mut b = parent.split(1);
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|_| a.standard_normal()).collect();
        let ys: Vec<f64> = (0..n).map(|_| b.standard_normal()).collect();
        let corr = xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        assert!(corr.abs() < 0.03, "corr {corr}");
    }

    proptest! {
        #[test]
        fn norm_is_absolutely_homogeneous(
            a in proptest::collection::vec(-1e3f64..1e3, 1..8),
            s in -1e3f64..1e3,
        ) {
            let lhs = l2_norm(&scale(&a, s));
            let rhs = s.abs() * l2_norm(&a);
            prop_assert!((lhs - rhs).abs() <= 1e-14 * rhs.max(f64::MIN_POSITIVE) + 1e-300);
        }
    }
}
