//! Heterogeneous multi-agent tidying in a deterministic multi-room gridworld.
//!
//! Agents with different capabilities (navigation, manipulation, height)
//! explore a house, detect misplaced objects against a placement ontology,
//! exchange information through one of several communication protocols and
//! re-place the objects. The crate covers the whole loop:
//!
//! * [`knowledge`]: placement ontology and the reasonable-placement predicate.
//! * [`world`]: scenes, agent embodiment, actions and height-aware visibility.
//! * [`taskgen`]: meta-task generation and expert demonstrations.
//! * [`perception`]: semantic maps, misplacement detection, receptacle prediction.
//! * [`comm`]: handshake-based group communication and baseline protocols.
//! * [`decision`]: sub-task allocation, sub-goals and the shortest-path executor.
//! * [`learn`]: linear imitation heads and the composite losses.
//! * [`harness`]: episode runner, metrics, suites, trajectory logs and replay.

pub mod comm;
pub mod decision;
pub mod error;
pub mod harness;
pub mod knowledge;
pub mod learn;
pub mod perception;
pub mod taskgen;
pub mod world;

pub use error::{Error, Result};

pub(crate) fn rng_from_seed(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a salt (splitmix64).
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
