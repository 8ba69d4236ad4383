//! Seeded random streams. Panel `i` of a run seeded with `s` always comes
//! from stream `i` of the ChaCha8 generator keyed by `s`, so output does not
//! depend on the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type PanelRng = ChaCha8Rng;

pub fn stream_rng(seed: u64, stream: u64) -> PanelRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
