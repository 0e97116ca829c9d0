//! Keyed deterministic random streams.
//!
//! Every piece of randomness in a run is drawn from a stream derived from
//! `(master_seed, context)` where the context is an ordered list of labels,
//! e.g. `["task", 3, "epoch", 2, "shuffle"]`. Streams are pure values: the
//! output sequence is a function of the key alone, so the stream one request
//! consumes is byte-identical whether or not any other request exists in the
//! run. That removal-invariance is what makes bitwise full-vs-retain
//! comparisons possible, and it is why no global generator exists anywhere.
//!
//! The construction is fixed and documented so golden vectors hold across
//! platforms:
//!
//! 1. the key is hashed with FNV-1a 64 over a length-prefixed serialization
//!    of the master seed and labels;
//! 2. the 64-bit hash seeds a SplitMix64 chain;
//! 3. four SplitMix64 outputs form the 256-bit state of xoshiro256**.
//!
//! Not cryptographic; do not use for anything adversarial.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RngError {
    #[error("sample larger than population: k={k} > n={n}")]
    SampleLargerThanPopulation { k: usize, n: usize },
    #[error("stream context must be non-empty")]
    EmptyContext,
}

/// One element of a stream context.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Label {
    Text(String),
    Int(i64),
}

impl From<&str> for Label {
    fn from(s: &str) -> Self {
        Label::Text(s.to_owned())
    }
}

impl From<String> for Label {
    fn from(s: String) -> Self {
        Label::Text(s)
    }
}

impl From<i64> for Label {
    fn from(v: i64) -> Self {
        Label::Int(v)
    }
}

impl From<i32> for Label {
    fn from(v: i32) -> Self {
        Label::Int(v as i64)
    }
}

impl From<usize> for Label {
    fn from(v: usize) -> Self {
        Label::Int(v as i64)
    }
}

impl From<u64> for Label {
    fn from(v: u64) -> Self {
        Label::Int(v as i64)
    }
}

/// Builds a `Vec<Label>` from mixed text and integer literals.
#[macro_export]
macro_rules! labels {
    ($($item:expr),* $(,)?) => {
        vec![$($crate::rng::Label::from($item)),*]
    };
}

/// Identifies one stream: a master seed plus an ordered label context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamKey {
    pub master_seed: u64,
    pub context: Vec<Label>,
}

impl StreamKey {
    /// Stable 64-bit hash of the key: FNV-1a over the serialized labels.
    /// Strings are tagged 0x01 and length-prefixed, integers tagged 0x02;
    /// all multi-byte values little-endian.
    pub fn stable_hash(&self) -> u64 {
        const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = FNV_OFFSET;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(FNV_PRIME);
            }
        };
        eat(&self.master_seed.to_le_bytes());
        for label in &self.context {
            match label {
                Label::Text(s) => {
                    eat(&[0x01]);
                    eat(&(s.len() as u64).to_le_bytes());
                    eat(s.as_bytes());
                }
                Label::Int(v) => {
                    eat(&[0x02]);
                    eat(&v.to_le_bytes());
                }
            }
        }
        h
    }
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A deterministic stream: xoshiro256** with 256-bit state, a pure function
/// of its [`StreamKey`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RandStream {
    s: [u64; 4],
}

/// Derives the stream for `(master_seed, context)`.
///
/// Calling twice with the same arguments returns streams producing identical
/// output sequences; distinct contexts yield independent streams.
pub fn derive_stream(master_seed: u64, context: &[Label]) -> Result<RandStream, RngError> {
    if context.is_empty() {
        return Err(RngError::EmptyContext);
    }
    let key = StreamKey {
        master_seed,
        context: context.to_vec(),
    };
    Ok(RandStream::from_key(&key))
}

impl RandStream {
    pub fn from_key(key: &StreamKey) -> Self {
        let mut seed = key.stable_hash();
        let mut s = [0u64; 4];
        for slot in &mut s {
            *slot = splitmix64(&mut seed);
        }
        // xoshiro forbids the all-zero state.
        if s == [0, 0, 0, 0] {
            s[0] = 1;
        }
        RandStream { s }
    }

    /// Next raw 64-bit output (xoshiro256**).
    pub fn next_u64(&mut self) -> u64 {
        let out = self.s[1]
            .wrapping_mul(5)
            .rotate_left(7)
            .wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        out
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw via Box-Muller, consuming exactly two 64-bit
    /// outputs per sample so the draw count per call is fixed everywhere.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_uniform(); // (0, 1], keeps ln finite
        let u2 = self.next_uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Unbiased uniform draw in [0, bound). `bound` must be nonzero.
    fn next_bounded(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let x = self.next_u64();
            if x >= threshold {
                return x % bound;
            }
        }
    }

    /// Uniform random permutation of `[0, n)` (Fisher-Yates).
    pub fn shuffle(&mut self, n: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.next_bounded(i as u64 + 1) as usize;
            perm.swap(i, j);
        }
        perm
    }

    /// `k` distinct indices from `[0, n)`, uniform over k-subsets
    /// (partial Fisher-Yates).
    pub fn sample_k(&mut self, n: usize, k: usize) -> Result<Vec<usize>, RngError> {
        if k > n {
            return Err(RngError::SampleLargerThanPopulation { k, n });
        }
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.next_bounded((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        Ok(pool)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(seed: u64, ctx: &[Label]) -> RandStream {
        derive_stream(seed, ctx).unwrap()
    }

    #[test]
    fn same_key_same_stream() {
        let mut a = stream(7, &labels!["a"]);
        let mut b = stream(7, &labels!["a"]);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn distinct_contexts_differ() {
        // Collision probability for a first draw is ~2^-64.
        let mut a = stream(7, &labels!["a"]);
        let mut b = stream(7, &labels!["b"]);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn distinct_seeds_differ() {
        let mut a = stream(7, &labels!["a"]);
        let mut b = stream(8, &labels!["a"]);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn empty_context_rejected() {
        assert_eq!(derive_stream(7, &[]).unwrap_err(), RngError::EmptyContext);
    }

    #[test]
    fn replay_is_independent_of_sibling_streams() {
        // The stream for a context is identical whether or not other
        // streams were derived or consumed in between.
        let alone: Vec<u64> = {
            let mut s = stream(99, &labels!["task", 3, "shuffle"]);
            (0..32).map(|_| s.next_u64()).collect()
        };
        let mut noise1 = stream(99, &labels!["task", 2, "shuffle"]);
        let _ = noise1.shuffle(100);
        let mut again = stream(99, &labels!["task", 3, "shuffle"]);
        let mut noise2 = stream(99, &labels!["task", 5, "mem"]);
        let interleaved: Vec<u64> = (0..32)
            .map(|_| {
                let _ = noise2.next_gaussian();
                again.next_u64()
            })
            .collect();
        assert_eq!(alone, interleaved);
    }

    #[test]
    fn golden_vector() {
        // Portability pin: first 8 raw outputs for a fixed key. These
        // constants were produced by this implementation and must never
        // change on any platform.
        let mut s = stream(42, &labels!["golden", "vector"]);
        let got: Vec<u64> = (0..8).map(|_| s.next_u64()).collect();
        assert_eq!(
            got,
            vec![
                0x7e31_4d63_9fde_d694,
                0xf589_1a42_9a9c_7c0a,
                0x59a4_f4a8_4906_bb1b,
                0x4dbe_a334_07bf_dcae,
                0x3adf_a119_45e9_f81f,
                0x8074_7520_c456_f3cc,
                0xc766_dc40_ef75_7e53,
                0x8146_52f5_a55c_a752,
            ]
        );
    }

    #[test]
    fn uniform_mean_matches_law_of_large_numbers() {
        let mut s = stream(1, &labels!["uniform-mean"]);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| s.next_uniform()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn gaussian_moments() {
        let mut s = stream(2, &labels!["gauss"]);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| s.next_gaussian()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn shuffle_one_element() {
        let mut s = stream(3, &labels!["shuffle1"]);
        assert_eq!(s.shuffle(1), vec![0]);
    }

    #[test]
    fn sample_all_is_permutation() {
        let mut s = stream(4, &labels!["sample-all"]);
        let mut got = s.sample_k(5, 5).unwrap();
        got.sort_unstable();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn sample_too_many_is_error() {
        let mut s = stream(5, &labels!["sample-err"]);
        assert_eq!(
            s.sample_k(3, 4).unwrap_err(),
            RngError::SampleLargerThanPopulation { k: 4, n: 3 }
        );
    }
}
