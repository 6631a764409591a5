//! Counter-based random streams.
//!
//! Every random quantity in a run is drawn from a ChaCha8 stream addressed by
//! `(seed, purpose, iteration, index)`. The key is derived from the seed and
//! purpose, the 64-bit stream id from the iteration and index. Draws therefore
//! never depend on the order in which work items are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share a key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Truth = 1,
    Initial = 2,
    ObservedNuisance = 3,
    FlowNuisance = 4,
    Minibatch = 5,
    Quadrature = 6,
    MonteCarlo = 7,
    Model = 8,
    Resample = 9,
    Diagnostics = 10,
    Rendering = 11,
}

const INDEX_BITS: u32 = 32;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A family of streams sharing one `(seed, purpose)` key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamFamily {
    seed: u64,
    purpose: Purpose,
    key: [u8; 32],
}

impl StreamFamily {
    pub fn new(seed: u64, purpose: Purpose) -> Self {
        let mut key = [0u8; 32];
        let mut state = splitmix64(seed) ^ splitmix64(purpose as u64 ^ 0xA5A5_A5A5_0000_0000);
        for chunk in key.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        Self { seed, purpose, key }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn purpose(&self) -> Purpose {
        self.purpose
    }

    /// The stream for work item `index` of `iteration`.
    ///
    /// Panics if `index` does not fit in 32 bits or `iteration` in 32 bits.
    pub fn stream(&self, iteration: u64, index: u64) -> ChaCha8Rng {
        assert!(index < (1u64 << INDEX_BITS), "stream index {index} out of range");
        assert!(
            iteration < (1u64 << (64 - INDEX_BITS)),
            "stream iteration {iteration} out of range"
        );
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream((iteration << INDEX_BITS) | index);
        rng
    }
}

/// Shorthand for `StreamFamily::new(seed, purpose).stream(iteration, index)`.
pub fn stream(seed: u64, purpose: Purpose, iteration: u64, index: u64) -> ChaCha8Rng {
    StreamFamily::new(seed, purpose).stream(iteration, index)
}
