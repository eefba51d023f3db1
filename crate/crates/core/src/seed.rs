//! Seed splitting. Every random stream is derived from one master seed, a
//! stream tag and an entity id (usually an image id), so results do not
//! depend on processing order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_SCENES: u64 = 1;
pub const STREAM_DETECTOR: u64 = 2;
pub const STREAM_SAMPLING: u64 = 3;
pub const STREAM_PROBE: u64 = 4;
pub const STREAM_ROIS: u64 = 5;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: u64, id: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream) ^ id)
}

pub fn rng_for(master: u64, stream: u64, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, id))
}
