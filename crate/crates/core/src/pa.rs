//! Toeplitz-hash privacy amplification.
//!
//! The matrix entry `T[i][j]` is `seed[i - j + n_in - 1]`, so output bit `i`
//! is the parity of `seed[i .. i + n_in]` against the reversed key. The
//! word-sliced product below is checked against the explicit matrix.

use rand::RngCore;
use thiserror::Error;

use crate::bits::BitString;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PaError {
    #[error("seed has {found} bits, expected n_in + n_out - 1 = {expected}")]
    SeedLength { expected: usize, found: usize },
    #[error("key has {found} bits, seed expects {expected}")]
    KeyLength { expected: usize, found: usize },
    #[error("requested {requested} output bits exceed the secure bound {bound}")]
    Bound { requested: usize, bound: u64 },
    #[error("malformed seed message")]
    Encoding,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToeplitzSeed {
    pub bits: BitString,
    pub n_in: usize,
    pub n_out: usize,
}

impl ToeplitzSeed {
    pub fn new(bits: BitString, n_in: usize, n_out: usize) -> Result<Self, PaError> {
        let expected = (n_in + n_out).saturating_sub(1);
        if bits.len() != expected || n_in == 0 || n_out == 0 {
            return Err(PaError::SeedLength {
                expected,
                found: bits.len(),
            });
        }
        Ok(Self { bits, n_in, n_out })
    }

    pub fn random<R: RngCore>(rng: &mut R, n_in: usize, n_out: usize) -> Self {
        let len = n_in + n_out - 1;
        let mut bytes = vec![0u8; len.div_ceil(8)];
        rng.fill_bytes(&mut bytes);
        if len % 8 != 0 {
            *bytes.last_mut().unwrap() &= 0xFF << (8 - len % 8);
        }
        let bits = BitString::from_bytes(&bytes, len).unwrap();
        Self { bits, n_in, n_out }
    }

    /// `PA_SEED` payload: n_in u32, n_out u32, packed bits MSB-first.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.bits.len().div_ceil(8));
        out.extend_from_slice(&(self.n_in as u32).to_be_bytes());
        out.extend_from_slice(&(self.n_out as u32).to_be_bytes());
        out.extend_from_slice(&self.bits.to_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, PaError> {
        if b.len() < 8 {
            return Err(PaError::Encoding);
        }
        let n_in = u32::from_be_bytes(b[..4].try_into().unwrap()) as usize;
        let n_out = u32::from_be_bytes(b[4..8].try_into().unwrap()) as usize;
        if n_in == 0 || n_out == 0 {
            return Err(PaError::Encoding);
        }
        let bits = BitString::from_bytes(&b[8..], n_in + n_out - 1).ok_or(PaError::Encoding)?;
        Self::new(bits, n_in, n_out)
    }
}

pub fn toeplitz_hash(key: &BitString, seed: &ToeplitzSeed) -> Result<BitString, PaError> {
    if key.len() != seed.n_in {
        return Err(PaError::KeyLength {
            expected: seed.n_in,
            found: key.len(),
        });
    }
    let n_in = seed.n_in;
    let rev = BitString::from_fn(n_in, |j| key.get(n_in - 1 - j));
    let rw = rev.words();
    Ok(BitString::from_fn(seed.n_out, |i| {
        let mut acc = 0u64;
        for (w, &kw) in rw.iter().enumerate() {
            acc ^= seed.bits.word_at(i + 64 * w) & kw;
        }
        acc.count_ones() & 1 == 1
    }))
}

/// The Toeplitz matrix as rows of bits; test oracle for `toeplitz_hash`.
pub fn toeplitz_matrix(seed: &ToeplitzSeed) -> Vec<Vec<bool>> {
    (0..seed.n_out)
        .map(|i| {
            (0..seed.n_in)
                .map(|j| seed.bits.get(i + seed.n_in - 1 - j))
                .collect()
        })
        .collect()
}

pub fn toeplitz_naive(key: &BitString, seed: &ToeplitzSeed) -> BitString {
    toeplitz_matrix(seed)
        .iter()
        .map(|row| row.iter().enumerate().fold(false, |acc, (j, &t)| acc ^ (t & key.get(j))))
        .collect()
}

fn check_bound(seed: &ToeplitzSeed, bound: u64) -> Result<(), PaError> {
    if seed.n_out as u64 > bound {
        return Err(PaError::Bound {
            requested: seed.n_out,
            bound,
        });
    }
    Ok(())
}

/// Hashes both sender positions under the same seed.
pub fn amplify_sender(
    blocks: [&BitString; 2],
    seed: &ToeplitzSeed,
    bound: u64,
) -> Result<[BitString; 2], PaError> {
    check_bound(seed, bound)?;
    let (m0, m1) = std::thread::scope(|s| {
        let h = s.spawn(|| toeplitz_hash(blocks[1], seed));
        (toeplitz_hash(blocks[0], seed), h.join().expect("hash worker panicked"))
    });
    Ok([m0?, m1?])
}

pub fn amplify_receiver(block: &BitString, seed: &ToeplitzSeed, bound: u64) -> Result<BitString, PaError> {
    check_bound(seed, bound)?;
    toeplitz_hash(block, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_bits(r: &mut ChaCha20Rng, n: usize) -> BitString {
        BitString::from_fn(n, |_| r.gen())
    }

    #[test]
    fn toy_4_to_2() {
        let seed = ToeplitzSeed::new(BitString::from_bools(&[true, false, true, true, false]), 4, 2).unwrap();
        // hand-built: row i, column j holds seed[i - j + 3]
        assert_eq!(
            toeplitz_matrix(&seed),
            vec![vec![true, true, false, true], vec![false, true, true, false]]
        );
        for k in 0..16u8 {
            let key = BitString::from_fn(4, |j| k >> (3 - j) & 1 == 1);
            let want = BitString::from_bools(&[
                (k >> 3 & 1) ^ (k >> 2 & 1) ^ (k & 1) == 1,
                (k >> 2 & 1) ^ (k >> 1 & 1) == 1,
            ]);
            assert_eq!(toeplitz_hash(&key, &seed).unwrap(), want);
        }
    }

    #[test]
    fn zero_key_and_linearity() {
        let mut r = ChaCha20Rng::seed_from_u64(1);
        let seed = ToeplitzSeed::random(&mut r, 300, 77);
        assert_eq!(toeplitz_hash(&BitString::zeros(300), &seed).unwrap().count_ones(), 0);
        for _ in 0..1000 {
            let (a, b) = (rand_bits(&mut r, 300), rand_bits(&mut r, 300));
            let ha = toeplitz_hash(&a, &seed).unwrap();
            let hb = toeplitz_hash(&b, &seed).unwrap();
            assert_eq!(toeplitz_hash(&a.xor(&b), &seed).unwrap(), ha.xor(&hb));
        }
    }

    proptest! {
        #[test]
        fn sliced_matches_naive(n_in in 1usize..400, n_out in 1usize..150, s in any::<u64>()) {
            let mut r = ChaCha20Rng::seed_from_u64(s);
            let seed = ToeplitzSeed::random(&mut r, n_in, n_out);
            let key = rand_bits(&mut r, n_in);
            prop_assert_eq!(toeplitz_hash(&key, &seed).unwrap(), toeplitz_naive(&key, &seed));
        }
    }

    #[test]
    fn seed_wire_round_trip() {
        let mut r = ChaCha20Rng::seed_from_u64(2);
        let seed = ToeplitzSeed::random(&mut r, 1000, 128);
        let bytes = seed.to_bytes();
        assert_eq!(&bytes[..8], &[0, 0, 3, 0xe8, 0, 0, 0, 128]);
        assert_eq!(ToeplitzSeed::from_bytes(&bytes).unwrap(), seed);
        assert_eq!(ToeplitzSeed::from_bytes(&bytes[..bytes.len() - 1]), Err(PaError::Encoding));
    }

    #[test]
    fn size_and_bound_guards() {
        let mut r = ChaCha20Rng::seed_from_u64(3);
        let seed = ToeplitzSeed::random(&mut r, 64, 256);
        assert!(matches!(toeplitz_hash(&BitString::zeros(63), &seed), Err(PaError::KeyLength { .. })));
        let k = rand_bits(&mut r, 64);
        assert_eq!(
            amplify_receiver(&k, &seed, 128),
            Err(PaError::Bound { requested: 256, bound: 128 })
        );
        assert!(ToeplitzSeed::new(BitString::zeros(10), 4, 2).is_err());
    }

    #[test]
    fn sender_receiver_agree() {
        let mut r = ChaCha20Rng::seed_from_u64(4);
        let k0 = rand_bits(&mut r, 5000);
        let k1 = rand_bits(&mut r, 5000);
        let seed = ToeplitzSeed::random(&mut r, 5000, 128);
        let [m0, m1] = amplify_sender([&k0, &k1], &seed, 128).unwrap();
        assert_eq!(amplify_receiver(&k1, &seed, 128).unwrap(), m1);
        let d = m0.hamming_distance(&m1);
        assert!((34..=94).contains(&d), "{d}");
    }
}
