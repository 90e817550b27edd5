//! Named, splittable random streams. Every random draw in the crate comes
//! from a generator derived here from a root seed and a label, so runs never
//! depend on ambient entropy or on the order in which streams are created.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Generator for the sub-stream `label[index]` of `root`.
pub fn stream(root: u64, label: &str, index: u64) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Child seed for handing to an API that takes a plain `u64`.
pub fn child_seed(root: u64, label: &str, index: u64) -> u64 {
    use rand::RngCore;
    stream(root, label, index).next_u64()
}

pub fn gaussian_matrix(rng: &mut StreamRng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

pub fn gaussian_vector(rng: &mut StreamRng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}
