//! Counter-based random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 stream keyed by
//! `(seed, domain)` and positioned by a stream index (usually a row). A cell's
//! value therefore depends only on `(seed, domain, row, column)`, never on the
//! order in which rows are visited.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Purpose tags separating the streams drawn from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Mask = 1,
    Filter = 2,
    Generate = 3,
    Split = 4,
    Regime = 5,
    Coefficients = 6,
    Bootstrap = 7,
    MonteCarlo = 8,
    Trial = 9,
}

pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Child seed for sub-task `index` of `seed`.
pub fn derive_seed(seed: u64, domain: Domain, index: u64) -> u64 {
    stream(seed, domain, index).next_u64()
}
