//! Counter-based random number streams.
//!
//! Every draw is a pure function of (seed, stream id, counter), so particle
//! trajectories are bitwise reproducible no matter how work is scheduled
//! across threads. The mixer is the splitmix64 finalizer; normals come from
//! Box-Muller on two counter slots.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Root generator: hands out independent per-stream generators.
#[derive(Debug, Clone, Copy)]
pub struct CounterRng {
    seed: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { seed }
    }

    /// Stream `id` (one per particle, probe, or experiment).
    pub fn stream(&self, id: u64) -> Stream {
        let key = mix64(mix64(self.seed ^ GOLDEN).wrapping_add(id.wrapping_mul(GOLDEN)));
        Stream { key }
    }
}

/// A stateless stream: indexing by counter gives the draw.
#[derive(Debug, Clone, Copy)]
pub struct Stream {
    key: u64,
}

impl Stream {
    #[inline]
    pub fn raw(&self, counter: u64) -> u64 {
        mix64(self.key.wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    /// Uniform on the open interval (0, 1): cell midpoints of a 2^53 grid,
    /// so the logarithm below never sees zero.
    #[inline]
    pub fn uniform(&self, counter: u64) -> f64 {
        ((self.raw(counter) >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Standard normal pair occupying counter slots 2c and 2c+1.
    #[inline]
    pub fn normal_pair(&self, c: u64) -> (f64, f64) {
        let u1 = self.uniform(2 * c);
        let u2 = self.uniform(2 * c + 1);
        let r = (-2.0 * u1.ln()).sqrt();
        let phi = 2.0 * std::f64::consts::PI * u2;
        (r * phi.cos(), r * phi.sin())
    }

    /// Single standard normal at logical index `c`.
    #[inline]
    pub fn normal(&self, c: u64) -> f64 {
        self.normal_pair(c).0
    }

    /// Standard normal indexed without waste: consecutive indices share a
    /// Box-Muller pair, so a hot loop drawing one normal per step pays for
    /// one transform every two draws.
    #[inline]
    pub fn normal_at(&self, index: u64) -> f64 {
        let (a, b) = self.normal_pair(index >> 1);
        if index & 1 == 0 { a } else { b }
    }
}
