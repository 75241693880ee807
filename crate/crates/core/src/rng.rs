//! Named random sub-streams derived from one master seed, so that enabling or
//! disabling one consumer never shifts the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Field = 1,
    Gnss = 2,
    Imu = 3,
    Lidar = 4,
    GnssBias = 5,
    Scenario = 6,
    Terrain = 7,
}

pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
