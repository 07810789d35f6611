//! Counter-addressed random streams.
//!
//! A stream is identified by `(seed, stream)` and positioned by `counter`,
//! the number of 64-bit words consumed so far. ChaCha8 makes the mapping
//! from `(seed, stream, counter)` to output bits platform independent, and
//! named sub-streams let each Bayesian site own its noise so that changing
//! the order in which sites are visited cannot change any draw.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    counter: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, 0, 0)
    }

    /// Reconstructs the stream `(seed, stream)` positioned after `counter`
    /// words.
    pub fn at(seed: u64, stream: u64, counter: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng.set_word_pos(u128::from(counter) * 2);
        Self {
            seed,
            stream,
            counter,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Independent child stream keyed by a label. The child does not depend
    /// on how many draws the parent has made.
    pub fn derive(&self, label: &str) -> Self {
        Self::at(self.seed, mix(self.stream ^ fnv1a(label.as_bytes())), 0)
    }

    /// Independent child stream keyed by an index (epoch, step, sample).
    pub fn fork(&self, index: u64) -> Self {
        Self::at(
            self.seed,
            mix(self.stream.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(mix(index))),
            0,
        )
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw (Box-Muller, one output per pair of uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.counter += 1;
        self.rng.gen_range(0..n)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

// splitmix64 finaliser
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_position_same_draws() {
        let mut a = RngStream::new(7).derive("site");
        let first: Vec<f64> = a.normals(5);
        let mut b = RngStream::at(a.seed(), a.stream(), 0);
        assert_eq!(b.normals(5), first);
        // resume mid-stream
        let mut c = RngStream::at(a.seed(), a.stream(), 4);
        assert_eq!(c.normals(3), first[2..5].to_vec());
    }

    #[test]
    fn derived_streams_ignore_parent_position() {
        let mut parent = RngStream::new(3);
        let before = parent.derive("x").normal();
        parent.normals(10);
        assert_eq!(parent.derive("x").normal(), before);
        assert_ne!(parent.derive("y").normal(), before);
        assert_ne!(parent.fork(1).normal(), parent.fork(2).normal());
    }

    #[test]
    fn uniform_is_in_unit_interval() {
        let mut r = RngStream::new(1);
        for _ in 0..1000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
