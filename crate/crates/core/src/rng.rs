//! Seeded random streams.
//!
//! Every random draw in the lab comes from a ChaCha8 stream selected by an
//! experiment seed plus a [`StreamKey`]. Two different keys never share a
//! stream, so adding a width or a role to an experiment never shifts the
//! draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// What a stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Init,
    Dataset,
    Labels,
    TestGraph,
    MultiNet,
    MonteCarlo,
    Probe,
}

impl Role {
    fn tag(self) -> u64 {
        match self {
            Role::Init => 1,
            Role::Dataset => 2,
            Role::Labels => 3,
            Role::TestGraph => 4,
            Role::MultiNet => 5,
            Role::MonteCarlo => 6,
            Role::Probe => 7,
        }
    }
}

/// Identifies one stream under a seed: a role and a free index (a width,
/// a block number, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub role: Role,
    pub index: u64,
}

impl StreamKey {
    pub fn new(role: Role, index: u64) -> Self {
        Self { role, index }
    }
}

/// Plain stream for a seed; used where a single sequence suffices.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream for `(seed, key)`.
pub fn keyed_rng(seed: u64, key: StreamKey) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // 8 bits of role, 56 bits of index.
    rng.set_stream((key.role.tag() << 56) ^ (key.index & ((1u64 << 56) - 1)));
    rng
}

#[inline]
pub fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Fills `out` with i.i.d. standard normals in index order.
pub fn fill_standard_normal<R: rand::Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for x in out.iter_mut() {
        *x = StandardNormal.sample(rng);
    }
}
