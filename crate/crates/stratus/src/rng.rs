//! Deterministic, partitionable random substreams.
//!
//! Every randomized routine in the crate derives its generator from a root
//! seed plus a list of integer tags identifying the unit of work (member,
//! step, grid point, resample index, ...). Identical (seed, tags) always
//! yield an identical stream, independent of thread count or evaluation
//! order, which is what makes seeded runs bit-reproducible.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One round of the splitmix64 mixer; advances `state` and returns a value.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Collapse a root seed and a tag path into a single 64-bit subseed.
///
/// Tags are mixed in order, so (`seed`, `[a, b]`) and (`seed`, `[b, a]`)
/// give unrelated streams.
pub fn derive_seed(root: u64, tags: &[u64]) -> u64 {
    let mut state = root ^ 0xA076_1D64_78BD_642F;
    let mut out = splitmix64(&mut state);
    for &tag in tags {
        state ^= tag.wrapping_mul(0xE703_7ED1_A0B4_28DB);
        out = splitmix64(&mut state);
    }
    out
}

/// Deterministic generator for the work unit identified by `tags`.
pub fn substream(root: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tags))
}

/// Stateless uniform draw in `[0, 1)` for the work unit `tags`.
///
/// Used where a full generator per unit would be wasteful, e.g. one
/// tie-breaking draw per grid point in rank histograms.
pub fn unit_uniform(root: u64, tags: &[u64]) -> f64 {
    let bits = derive_seed(root, tags);
    // 53 top bits -> uniform double in [0, 1).
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
