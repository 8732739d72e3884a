//! Seed derivation and random streams.
//!
//! Every random decision draws from a ChaCha stream whose seed is derived
//! from a master seed plus a stream tag and indices, so streams never
//! interfere with one another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor2D;

pub type Stream = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a master seed, a stream tag and a list of indices into one seed.
pub fn derive_seed(master: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix64(master);
    for b in tag.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    for &i in indices {
        h = splitmix64(h ^ i);
    }
    h
}

pub fn stream(master: u64, tag: &str, indices: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, indices))
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Matrix of i.i.d. `N(0, sigma²)` entries.
pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, sigma: f64) -> Tensor2D {
    let mut t = Tensor2D::zeros(rows, cols);
    for v in t.data_mut() {
        *v = sigma * normal(rng);
    }
    t
}

/// Fisher–Yates shuffle of `0..n`.
pub fn permutation(rng: &mut impl Rng, n: usize) -> alloc::vec::Vec<usize> {
    let mut idx: alloc::vec::Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
