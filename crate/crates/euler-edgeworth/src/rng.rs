//! Counter-based random variates for reproducible parallel Monte Carlo.
//!
//! Every draw is a pure function of `(seed, stream, counter)`, so paths can
//! be generated in any order, on any number of workers, and a rerun with the
//! same configuration is bitwise identical. The mixing function is the
//! splitmix64 finalizer applied to the keyed counter, which is statistically
//! solid for Monte Carlo work and very fast.

/// Stateless generator for one `(seed, stream)` pair.
#[derive(Debug, Clone, Copy)]
pub struct CounterRng {
    seed: u64,
    stream: u64,
    /// Mixed (seed, stream) key, precomputed once.
    key: u64,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl CounterRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let key = splitmix64(seed)
            ^ splitmix64(stream.wrapping_mul(GOLDEN) ^ 0x1234_5678_9abc_def0);
        CounterRng { seed, stream, key }
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Derive a generator for an independent substream, for nested Monte
    /// Carlo that must not collide with the path-level counters.
    pub fn substream(&self, tag: u64) -> CounterRng {
        CounterRng::new(
            splitmix64(self.seed ^ splitmix64(tag ^ 0xa5a5_5a5a_dead_beef)),
            self.stream,
        )
    }

    #[inline]
    fn word(&self, counter: u64, lane: u64) -> u64 {
        splitmix64(self.key ^ splitmix64(counter.wrapping_mul(GOLDEN) ^ lane))
    }

    /// Uniform in (0, 1], safe to pass through `ln`.
    #[inline]
    fn uniform(&self, counter: u64, lane: u64) -> f64 {
        ((self.word(counter, lane) >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Standard normal draw at `counter`, by Box-Muller on two keyed lanes.
    #[inline]
    pub fn normal(&self, counter: u64) -> f64 {
        let u1 = self.uniform(counter, 0x01);
        let u2 = self.uniform(counter, 0x02);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
