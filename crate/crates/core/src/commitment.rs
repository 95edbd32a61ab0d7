//! Two-bit extension of Naor's commitment with AES-256 in counter mode as
//! the generator `G: {0,1}^256 -> {0,1}^768`.
//!
//! `c = G(x) ^ b1*r1 ^ b2*r2` where `r2 = r1 >> 1` over the whole 768-bit
//! string (byte 0 most significant).

use aes::cipher::{generic_array::GenericArray, BlockEncrypt, KeyInit};
use aes::Aes256;
use rand::{CryptoRng, Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

pub const SEED_BYTES: usize = 32;
pub const COMMIT_BYTES: usize = 96;
pub const OPENING_BYTES: usize = 33;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CommitmentError {
    #[error("public string r1 must not be all-zeros or all-ones")]
    ExcludedPublicString,
    #[error("record has {found} bytes, expected {expected}")]
    Size { expected: usize, found: usize },
    #[error("opening flag byte {0:#04x} has bits beyond b1,b2")]
    Flags(u8),
}

pub type Block768 = [u8; COMMIT_BYTES];

fn shr1(r: &Block768) -> Block768 {
    let mut out = [0u8; COMMIT_BYTES];
    let mut carry = 0u8;
    for (o, &b) in out.iter_mut().zip(r.iter()) {
        *o = (b >> 1) | (carry << 7);
        carry = b & 1;
    }
    out
}

#[derive(Clone, PartialEq, Eq)]
pub struct PublicString {
    r1: Block768,
    r2: Block768,
}

impl std::fmt::Debug for PublicString {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PublicString({}..)", hex::encode(&self.r1[..8]))
    }
}

impl PublicString {
    pub fn new(r1: Block768) -> Result<Self, CommitmentError> {
        if r1.iter().all(|&b| b == 0) || r1.iter().all(|&b| b == 0xFF) {
            return Err(CommitmentError::ExcludedPublicString);
        }
        Ok(Self { r2: shr1(&r1), r1 })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CommitmentError> {
        let r1: Block768 = bytes.try_into().map_err(|_| CommitmentError::Size {
            expected: COMMIT_BYTES,
            found: bytes.len(),
        })?;
        Self::new(r1)
    }

    pub fn r1(&self) -> &Block768 {
        &self.r1
    }

    pub fn r2(&self) -> &Block768 {
        &self.r2
    }
}

/// Draws `r1` uniformly, resampling the two excluded strings.
pub fn sample_public<R: RngCore + CryptoRng>(rng: &mut R) -> PublicString {
    loop {
        let mut r1 = [0u8; COMMIT_BYTES];
        rng.fill_bytes(&mut r1);
        if let Ok(p) = PublicString::new(r1) {
            return p;
        }
    }
}

/// AES-256 encryptions of the 16-byte big-endian counters 0..5 under key `x`.
pub fn expand_seed(x: &[u8; SEED_BYTES]) -> Block768 {
    let cipher = Aes256::new(GenericArray::from_slice(x));
    let mut blocks = [GenericArray::default(); 6];
    for (i, b) in blocks.iter_mut().enumerate() {
        b[15] = i as u8;
    }
    cipher.encrypt_blocks(&mut blocks);
    let mut out = [0u8; COMMIT_BYTES];
    for (i, b) in blocks.iter().enumerate() {
        out[16 * i..16 * (i + 1)].copy_from_slice(b);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Commitment(pub Block768);

impl Commitment {
    pub fn to_bytes(&self) -> [u8; COMMIT_BYTES] {
        self.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CommitmentError> {
        bytes
            .try_into()
            .map(Commitment)
            .map_err(|_| CommitmentError::Size {
                expected: COMMIT_BYTES,
                found: bytes.len(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Opening {
    pub x: [u8; SEED_BYTES],
    pub b1: bool,
    pub b2: bool,
}

impl Opening {
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R, b1: bool, b2: bool) -> Self {
        let mut x = [0u8; SEED_BYTES];
        rng.fill_bytes(&mut x);
        Self { x, b1, b2 }
    }

    pub fn to_bytes(&self) -> [u8; OPENING_BYTES] {
        let mut out = [0u8; OPENING_BYTES];
        out[..32].copy_from_slice(&self.x);
        out[32] = ((self.b1 as u8) << 1) | self.b2 as u8;
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CommitmentError> {
        if bytes.len() != OPENING_BYTES {
            return Err(CommitmentError::Size {
                expected: OPENING_BYTES,
                found: bytes.len(),
            });
        }
        let flags = bytes[32];
        if flags & !3 != 0 {
            return Err(CommitmentError::Flags(flags));
        }
        Ok(Self {
            x: bytes[..32].try_into().unwrap(),
            b1: flags & 2 != 0,
            b2: flags & 1 != 0,
        })
    }
}

pub fn commit(public: &PublicString, open: &Opening) -> Commitment {
    let mut c = expand_seed(&open.x);
    for i in 0..COMMIT_BYTES {
        c[i] ^= (public.r1[i] & 0u8.wrapping_sub(open.b1 as u8))
            ^ (public.r2[i] & 0u8.wrapping_sub(open.b2 as u8));
    }
    Commitment(c)
}

pub fn verify_open(public: &PublicString, c: &Commitment, open: &Opening) -> bool {
    let expect = commit(public, open);
    // full-width comparison, no early exit
    expect
        .0
        .iter()
        .zip(c.0.iter())
        .fold(0u8, |acc, (a, b)| acc | (a ^ b))
        == 0
}

fn worker_count(n: usize) -> usize {
    let hw = std::thread::available_parallelism().map_or(1, |p| p.get());
    hw.min(n / 4096 + 1).max(1)
}

/// Commits to a batch; results come back in input order.
pub fn commit_batch(public: &PublicString, openings: &[Opening]) -> Vec<Commitment> {
    let workers = worker_count(openings.len());
    if workers == 1 {
        return openings.iter().map(|o| commit(public, o)).collect();
    }
    let chunk = openings.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = openings
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|o| commit(public, o)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("commit worker panicked"))
            .collect()
    })
}

/// Verifies a batch, returning the position of the first failing opening.
pub fn verify_batch(
    public: &PublicString,
    commitments: &[Commitment],
    openings: &[Opening],
) -> Result<(), usize> {
    assert_eq!(commitments.len(), openings.len());
    let recomputed = commit_batch(public, openings);
    match recomputed.iter().zip(commitments).position(|(a, b)| a != b) {
        Some(i) => Err(i),
        None => Ok(()),
    }
}

/// Preprocessing phase: commit to a random bit pair `m` ahead of time.
pub fn precommit<R: RngCore + CryptoRng>(rng: &mut R, public: &PublicString) -> (Commitment, Opening) {
    let (m1, m2) = (rng.gen(), rng.gen());
    let open = Opening::random(rng, m1, m2);
    (commit(public, &open), open)
}

/// Online phase: publish `m ^ b` for the real bit pair `b`.
pub fn online_commit(m: (bool, bool), b: (bool, bool)) -> (bool, bool) {
    (m.0 ^ b.0, m.1 ^ b.1)
}

/// Verifies the preprocessing commitment and unmasks the online pair.
pub fn open_chain(
    public: &PublicString,
    c: &Commitment,
    inner: &Opening,
    masked: (bool, bool),
) -> Option<(bool, bool)> {
    verify_open(public, c, inner).then_some((inner.b1 ^ masked.0, inner.b2 ^ masked.1))
}

/// Derandomized generator so commitments of a whole block are reproducible.
pub fn openings_for(
    seed: [u8; 32],
    bases: &crate::bits::BitString,
    outcomes: &crate::bits::BitString,
) -> Vec<Opening> {
    let mut rng = ChaCha20Rng::from_seed(seed);
    (0..bases.len())
        .map(|i| Opening::random(&mut rng, bases.get(i), outcomes.get(i)))
        .collect()
}

/// Scaled-down instance of the same construction (8-bit seed, three 8-bit
/// blocks) where equivocation can be searched exhaustively.
pub mod toy {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    pub const SEED_BITS: u32 = 8;
    pub const OUT_BITS: u32 = 24;

    /// An 8-bit keyed permutation family standing in for the block cipher.
    pub struct ToyCipher {
        tables: Vec<[u8; 256]>,
    }

    impl ToyCipher {
        pub fn new(instance_seed: u64) -> Self {
            let mut rng = ChaCha20Rng::seed_from_u64(instance_seed);
            let tables = (0..256)
                .map(|_| {
                    let mut t: [u8; 256] = std::array::from_fn(|i| i as u8);
                    t.shuffle(&mut rng);
                    t
                })
                .collect();
            Self { tables }
        }

        /// Counter-mode expansion of an 8-bit seed into 24 bits.
        pub fn expand(&self, x: u8) -> u32 {
            let t = &self.tables[x as usize];
            (t[0] as u32) << 16 | (t[1] as u32) << 8 | t[2] as u32
        }
    }

    pub fn commit(g: &ToyCipher, r1: u32, x: u8, b1: bool, b2: bool) -> u32 {
        let r2 = r1 >> 1;
        g.expand(x) ^ if b1 { r1 } else { 0 } ^ if b2 { r2 } else { 0 }
    }

    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct BindingReport {
        pub public_strings: u64,
        pub equivocable: u64,
        pub rate: f64,
        pub bound: f64,
    }

    /// For every admissible `r1`, decides whether some commitment can be
    /// opened to two different bit pairs.
    pub fn exhaustive_binding(g: &ToyCipher) -> BindingReport {
        let size = 1usize << OUT_BITS;
        let mut diff = vec![0u64; size / 64];
        let outs: Vec<u32> = (0..=255u8).map(|x| g.expand(x)).collect();
        for &a in &outs {
            for &b in &outs {
                let d = (a ^ b) as usize;
                diff[d / 64] |= 1 << (d % 64);
            }
        }
        let has = |d: u32| diff[d as usize / 64] >> (d % 64) & 1 == 1;
        let all_ones = (size - 1) as u32;
        let mut n = 0u64;
        let mut bad = 0u64;
        for r1 in 1..all_ones {
            let r2 = r1 >> 1;
            n += 1;
            if has(r1) || has(r2) || has(r1 ^ r2) {
                bad += 1;
            }
        }
        BindingReport {
            public_strings: n,
            equivocable: bad,
            rate: bad as f64 / n as f64,
            bound: 2f64.powi(-(SEED_BITS as i32 - 3)),
        }
    }

    /// Direct check: can `c` under `r1` be opened to both bit pairs?
    pub fn find_equivocation(g: &ToyCipher, r1: u32) -> Option<(u8, (bool, bool), u8, (bool, bool))> {
        let pairs = [(false, false), (false, true), (true, false), (true, true)];
        for x in 0..=255u8 {
            for &p in &pairs {
                let c = commit(g, r1, x, p.0, p.1);
                for y in 0..=255u8 {
                    for &q in &pairs {
                        if q != p && commit(g, r1, y, q.0, q.1) == c {
                            return Some((x, p, y, q));
                        }
                    }
                }
            }
        }
        None
    }
}
