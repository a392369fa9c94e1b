//! SplitMix64 random stream with Box–Muller normal sampling.
//!
//! The whole system is seeded through this one generator so that a run is a
//! pure function of its config: same seed, same weights, same data, same
//! training trace — on every platform.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use alloc::vec::Vec;

#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1): the top 53 bits of the next word scaled by 2⁻⁵³.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound). `bound` must be nonzero.
    ///
    /// Plain modulo: the tiny bias is irrelevant for synthetic-task sampling
    /// and keeping the mapping trivial keeps it reproducible by inspection.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        self.next_u64() % bound
    }

    /// One standard-normal draw per call would waste the Box–Muller pair, so
    /// normals are only exposed in bulk; see [`normal_tensor`].
    fn next_normal_pair(&mut self) -> (f64, f64) {
        let mut u1 = self.next_f64();
        let u2 = self.next_f64();
        if u1 == 0.0 {
            // ln(0) guard; probability 2⁻⁵³ per draw, replaced by the
            // smallest value the 53-bit mapping can produce.
            u1 = 1.0 / (1u64 << 53) as f64;
        }
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        (r * libm::cos(theta), r * libm::sin(theta))
    }

    /// Fills a tensor with N(0, 1) draws in row-major order.
    ///
    /// Each call consumes whole Box–Muller pairs: for an odd element count the
    /// second half of the final pair is discarded, never carried into the next
    /// call, so the stream position depends only on the shapes drawn so far.
    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        while out.len() + 2 <= n {
            let (a, b) = self.next_normal_pair();
            out.push(a);
            out.push(b);
        }
        if out.len() < n {
            let (a, _) = self.next_normal_pair();
            out.push(a);
        }
        out
    }
}

/// Tensor of N(0, 1)·`scale` draws in row-major order, cast to `S` after
/// scaling in f64.
pub fn normal_tensor<S: Scalar>(rng: &mut Rng, dims: &[usize], scale: f64) -> Tensor<S> {
    let n: usize = dims.iter().product();
    let data: Vec<S> = rng
        .normal_vec(n)
        .into_iter()
        .map(|v| S::from_f64(v * scale))
        .collect();
    Tensor::from_vec(dims.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix64_reference_vector() {
        // Published first outputs for seed 0.
        let mut rng = Rng::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(rng.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(rng.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_ne!(Rng::new(1).next_u64(), Rng::new(2).next_u64());
    }

    #[test]
    fn uniform_is_in_unit_interval() {
        let mut rng = Rng::new(7);
        for _ in 0..10_000 {
            let u = rng.next_f64();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(1234);
        let n = 100_000usize;
        let xs = rng.normal_vec(n);
        let mean: f64 = xs.iter().sum::<f64>() / n as f64;
        let var: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean drifted: {mean}");
        assert!((var - 1.0).abs() < 0.05, "variance drifted: {var}");
    }

    #[test]
    fn odd_draws_discard_pair_tail() {
        let mut a = Rng::new(9);
        let mut b = Rng::new(9);
        let _ = a.normal_vec(3); // consumes two pairs
        let _ = b.normal_vec(4); // also two pairs
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn normal_tensor_is_row_major_prefix_stable() {
        // The first k draws of a larger tensor equal the draws of a smaller
        // one only when they cover whole pairs; check the exact stream rule.
        let mut a = Rng::new(5);
        let mut b = Rng::new(5);
        let t4: Tensor<f64> = normal_tensor(&mut a, &[2, 2], 1.0);
        let t2: Tensor<f64> = normal_tensor(&mut b, &[2], 1.0);
        assert_eq!(&t4.data()[..2], t2.data());
    }
}
