//! Counter-based seeding: every random draw is keyed by the tuple that
//! names it, so generation order and thread count never matter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit key for a sequence of labelled parts (FNV-1a, then a
/// splitmix finalizer).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Key(u64);

impl Key {
    pub fn new(seed: u64) -> Self {
        Key(0xcbf2_9ce4_8422_2325).u64(seed)
    }

    pub fn str(self, part: &str) -> Self {
        self.bytes(part.as_bytes()).bytes(&[0xff])
    }

    pub fn u64(self, part: u64) -> Self {
        self.bytes(&part.to_le_bytes())
    }

    fn bytes(self, bytes: &[u8]) -> Self {
        let mut h = self.0;
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Key(h)
    }

    pub fn value(self) -> u64 {
        let mut z = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.value())
    }
}

/// Maps `f` over `0..n`, on a dedicated pool when `threads > 1`. Output
/// order is index order regardless of scheduling.
pub fn par_map<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        Err(_) => (0..n).map(f).collect(),
    }
}
