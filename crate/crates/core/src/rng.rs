//! Deterministic random substreams.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by
//! `(seed, purpose, epoch, id)`, so results do not depend on how work is
//! split across threads or on the order in which clients are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a random stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    UserInit = 1,
    ItemInit = 2,
    TrainNegatives = 3,
    EvalNegatives = 4,
    AttackRound = 5,
    AttackClient = 6,
    PoisonedItems = 7,
    MaliciousProfiles = 8,
    MaliciousInit = 9,
    Synthetic = 10,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Returns the generator for one `(seed, purpose, epoch, id)` cell.
pub fn substream(seed: u64, purpose: Purpose, epoch: u64, id: u64) -> ChaCha8Rng {
    let mut state = seed;
    for word in [purpose as u64, epoch, id] {
        state = splitmix64(&mut state) ^ word;
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
