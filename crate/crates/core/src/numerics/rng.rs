use rand::{Error as RandError, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seedable random stream that can be split into independent named
/// sub-streams. Child streams depend only on the parent's key and the label,
/// never on how much of the parent has been consumed.
#[derive(Clone, Debug)]
pub struct SplitRng {
    key: u64,
    inner: ChaCha8Rng,
}

impl SplitRng {
    pub fn new(seed: u64) -> Self {
        let key = splitmix64(seed);
        Self {
            key,
            inner: ChaCha8Rng::seed_from_u64(key),
        }
    }

    /// Independent stream derived from this stream's key and `label`.
    pub fn fork(&self, label: &str) -> Self {
        let mut h = self.key;
        for b in label.bytes() {
            h = splitmix64(h ^ u64::from(b));
        }
        Self::new(h)
    }

    pub fn fork_index(&self, label: &str, index: u64) -> Self {
        Self::new(splitmix64(self.fork(label).key ^ index))
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let unit = (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        lo + (hi - lo) * unit
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        use rand::Rng;
        self.inner.gen_range(0..n)
    }

    pub fn coin(&mut self, p: f64) -> bool {
        self.uniform(0.0, 1.0) < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for SplitRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), RandError> {
        self.inner.try_fill_bytes(dest)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
