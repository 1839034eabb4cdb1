use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Scalar, Tensor};

/// Seeded generator. Independent streams are derived from a root seed, a
/// purpose label and any number of integer coordinates (epoch, batch, user).
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Mixes a root seed, a label and coordinates into one stream seed.
pub fn derive_seed(seed: u64, purpose: &str, coords: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ fnv1a(purpose.as_bytes()));
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c));
    }
    h
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn stream(seed: u64, purpose: &str, coords: &[u64]) -> Self {
        Self::new(derive_seed(seed, purpose, coords))
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Tensor of i.i.d. standard normal entries.
    pub fn gaussian<F: Scalar>(&mut self, shape: &[usize]) -> Tensor<F> {
        let len = shape.iter().product();
        let data = (0..len).map(|_| F::of(self.normal())).collect();
        Tensor::new(shape, data).expect("length matches shape")
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.random_range(lo..=hi)
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let a: Tensor<f64> = Rng::new(42).gaussian(&[3, 4]);
        let b: Tensor<f64> = Rng::new(42).gaussian(&[3, 4]);
        assert_eq!(a, b);
        let empty: Tensor<f32> = Rng::new(42).gaussian(&[0]);
        assert!(empty.is_empty());
    }

    #[test]
    fn streams_differ_by_purpose_and_coordinate() {
        let s = |p: &str, c: &[u64]| derive_seed(7, p, c);
        assert_ne!(s("noise", &[0, 1]), s("noise", &[1, 0]));
        assert_ne!(s("noise", &[0]), s("step", &[0]));
        assert_eq!(s("noise", &[3]), s("noise", &[3]));
    }

    #[test]
    fn gaussian_moments() {
        let t: Tensor<f64> = Rng::new(1).gaussian(&[1_000_000]);
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }
}
