//! Dense matrices, seeded randomness, Jacobi decompositions and
//! reverse-mode autodiff.

pub mod finite_diff;
pub mod linalg;
pub mod matrix;
pub mod rng;
pub mod tape;

pub use finite_diff::{finite_difference_gradient, max_relative_error, relative_error};
pub use linalg::{orthonormal_columns, singular_values, symmetric_eigen, SymmetricEigen};
pub use matrix::Matrix;
pub use rng::{derive_seed, gaussian_matrix, SeededRng, RNG_ALGORITHM};
pub use tape::{Elementwise, GradientMap, NodeId, ParamId, ParamSet, Tape, Trainability};

/// 64-bit FNV-1a over a byte stream.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut state = Fnv1a::new();
    state.write(bytes);
    state.finish()
}

/// Incremental 64-bit FNV-1a.
#[derive(Clone, Copy, Debug)]
pub struct Fnv1a(u64);

impl Fnv1a {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub fn new() -> Self {
        Self(Self::OFFSET)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::fnv1a64;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }
}
