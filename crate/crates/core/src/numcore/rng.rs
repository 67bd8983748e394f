//! Counter-based deterministic random streams.
//!
//! The generator is fixed for the life of the project: output `i` of a stream
//! is `mix(base + i * GOLDEN)` where `base = mix(seed ^ fnv1a(name))` and
//! `mix` is the splitmix64 finalizer. Streams are named (per layer, per
//! epoch, per sample) so masks and noise are reproducible regardless of
//! evaluation order.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// A named, seeded, counter-based random stream.
#[derive(Clone, Debug)]
pub struct RngStream {
    base: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, name: &str) -> Self {
        RngStream {
            base: mix(seed ^ fnv1a(name.as_bytes())),
            counter: 0,
        }
    }

    /// Child stream keyed by this stream's base and a new name; the parent's
    /// counter is unaffected.
    pub fn derive(&self, name: &str) -> Self {
        RngStream {
            base: mix(self.base ^ fnv1a(name.as_bytes())),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix(self.base.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller; consumes two counter steps.
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] so ln(u1) is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Unbiased integer in [0, n) by rejection.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let r = self.next_u64();
            if r < zone {
                return r % n;
            }
        }
    }
}

/// Fisher-Yates shuffle driven by a stream.
pub fn shuffle<T>(items: &mut [T], stream: &mut RngStream) {
    for i in (1..items.len()).rev() {
        let j = stream.below(i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(7, "layer");
        let mut b = RngStream::new(7, "layer");
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn named_streams_differ() {
        let mut a = RngStream::new(7, "layer.a");
        let mut b = RngStream::new(7, "layer.b");
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn uniform_bounds() {
        let mut s = RngStream::new(1, "u");
        for _ in 0..1000 {
            let v = s.uniform();
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn normal_is_finite_and_centered() {
        let mut s = RngStream::new(3, "n");
        let n = 20_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let v = s.normal();
            assert!(v.is_finite());
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn shuffle_is_permutation_and_deterministic() {
        let mut v1: Vec<u32> = (0..50).collect();
        let mut v2: Vec<u32> = (0..50).collect();
        shuffle(&mut v1, &mut RngStream::new(9, "shuf"));
        shuffle(&mut v2, &mut RngStream::new(9, "shuf"));
        assert_eq!(v1, v2);
        let mut sorted = v1.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
