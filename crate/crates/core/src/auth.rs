//! One-time polynomial MAC over GF(2^128) with a consume-once secret pool.
//!
//! Each context reserves 32 fresh secret bytes (16 evaluation point, 16
//! mask) when it is opened, absorbs every message of one protocol stage and
//! is finalized into a 128-bit tag. Messages are absorbed per direction so
//! that the two parties agree on the digest even when their sends cross on
//! the wire.

use std::collections::VecDeque;
use std::path::Path;

use thiserror::Error;

use crate::Party;

pub const KEY_QUOTA: usize = 32;
pub const DEFAULT_LOW_WATERMARK: usize = 256;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AuthError {
    #[error("secret pool holds {available} bytes, {needed} needed; replenish required")]
    ReplenishNeeded { available: usize, needed: usize },
    #[error("context {0:#x} already finalized")]
    Finalized(u64),
    #[error("authentication tag mismatch")]
    TagMismatch,
    #[error("replenish handle {got:#x} does not match expected {expected:#x}")]
    HandleMismatch { expected: u64, got: u64 },
    #[error("secret file: {0}")]
    SecretFile(String),
}

/// Multiplication in GF(2^128) modulo `x^128 + x^7 + x^2 + x + 1`; bit `i`
/// of the integer is the coefficient of `x^i`.
pub fn gf_mul(a: u128, b: u128) -> u128 {
    let mut acc = 0u128;
    let mut a = a;
    let mut b = b;
    while b != 0 {
        if b & 1 == 1 {
            acc ^= a;
        }
        a = mul_x(a);
        b >>= 1;
    }
    acc
}

#[inline]
fn mul_x(a: u128) -> u128 {
    (a << 1) ^ ((a >> 127) * 0x87)
}

/// Multiplication by a fixed element through 4-bit lookup tables.
#[derive(Clone)]
pub struct GfMulTable {
    table: Box<[[u128; 16]; 32]>,
}

impl GfMulTable {
    pub fn new(k: u128) -> Self {
        let mut table = Box::new([[0u128; 16]; 32]);
        let mut base = k;
        for row in table.iter_mut() {
            let b = [base, mul_x(base), mul_x(mul_x(base)), mul_x(mul_x(mul_x(base)))];
            for (v, entry) in row.iter_mut().enumerate() {
                *entry = (0..4).filter(|j| v >> j & 1 == 1).fold(0, |acc, j| acc ^ b[j]);
            }
            base = mul_x(b[3]);
        }
        Self { table }
    }

    #[inline]
    pub fn mul(&self, a: u128) -> u128 {
        let mut acc = 0u128;
        for (j, row) in self.table.iter().enumerate() {
            acc ^= row[(a >> (4 * j)) as usize & 15];
        }
        acc
    }
}

/// Ordered consume-once reservoir of shared secret bytes.
#[derive(Debug, Clone)]
pub struct SecretStore {
    pool: VecDeque<u8>,
    pub low_watermark: usize,
    consumed_offset: u64,
    consumptions: Vec<(u64, usize)>,
    next_replenish: u64,
}

impl SecretStore {
    pub fn new(bootstrap: &[u8]) -> Self {
        Self {
            pool: bootstrap.iter().copied().collect(),
            low_watermark: DEFAULT_LOW_WATERMARK,
            consumed_offset: 0,
            consumptions: Vec::new(),
            next_replenish: 0,
        }
    }

    pub fn with_watermark(mut self, w: usize) -> Self {
        self.low_watermark = w;
        self
    }

    /// Reads a hex-encoded bootstrap secret.
    pub fn from_hex_file(path: &Path) -> Result<Self, AuthError> {
        let text = std::fs::read_to_string(path).map_err(|e| AuthError::SecretFile(e.to_string()))?;
        let clean: String = text.split_whitespace().collect();
        let bytes = hex::decode(clean).map_err(|e| AuthError::SecretFile(e.to_string()))?;
        Ok(Self::new(&bytes))
    }

    pub fn available(&self) -> usize {
        self.pool.len()
    }

    pub fn consumed_offset(&self) -> u64 {
        self.consumed_offset
    }

    /// True once the pool has fallen below its low watermark.
    pub fn needs_replenish(&self) -> bool {
        self.pool.len() < self.low_watermark
    }

    /// Every `(offset, length)` consumption so far, in order.
    pub fn consumption_log(&self) -> &[(u64, usize)] {
        &self.consumptions
    }

    pub fn take(&mut self, n: usize) -> Result<Vec<u8>, AuthError> {
        if self.pool.len() < n {
            return Err(AuthError::ReplenishNeeded {
                available: self.pool.len(),
                needed: n,
            });
        }
        let out: Vec<u8> = self.pool.drain(..n).collect();
        self.consumptions.push((self.consumed_offset, n));
        self.consumed_offset += n as u64;
        Ok(out)
    }

    /// Appends key material delivered under `handle`. Handles must arrive in
    /// the agreed sequence so both parties extend their pools identically.
    pub fn replenish(&mut self, handle: u64, key: &[u8]) -> Result<(), AuthError> {
        if handle != self.next_replenish {
            return Err(AuthError::HandleMismatch {
                expected: self.next_replenish,
                got: handle,
            });
        }
        self.next_replenish += 1;
        self.pool.extend(key.iter().copied());
        Ok(())
    }

    pub fn next_replenish_handle(&self) -> u64 {
        self.next_replenish
    }
}

/// Running one-time MAC state for one key handle.
pub struct AuthContext {
    pub key_handle: u64,
    point: GfMulTable,
    mask: u128,
    acc: [u128; 2],
    blocks: [u64; 2],
    pub message_count: u64,
    finalized: bool,
}

impl std::fmt::Debug for AuthContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuthContext")
            .field("key_handle", &self.key_handle)
            .field("message_count", &self.message_count)
            .field("finalized", &self.finalized)
            .finish()
    }
}

pub type Tag = [u8; 16];

impl AuthContext {
    /// Reserves the per-tag key quota from `store`.
    pub fn open(key_handle: u64, store: &mut SecretStore) -> Result<Self, AuthError> {
        let key = store.take(KEY_QUOTA)?;
        Ok(Self::with_key(key_handle, key.as_slice().try_into().unwrap()))
    }

    pub fn with_key(key_handle: u64, key: &[u8; KEY_QUOTA]) -> Self {
        let point = u128::from_be_bytes(key[..16].try_into().unwrap());
        let mask = u128::from_be_bytes(key[16..].try_into().unwrap());
        Self {
            key_handle,
            point: GfMulTable::new(point),
            mask,
            acc: [0; 2],
            blocks: [0; 2],
            message_count: 0,
            finalized: false,
        }
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    #[inline]
    fn step(&mut self, dir: usize, block: u128) {
        self.acc[dir] = self.point.mul(self.acc[dir] ^ block);
        self.blocks[dir] += 1;
    }

    /// Absorbs one message sent by `from`: a length block, then the bytes in
    /// zero-padded 16-byte blocks.
    pub fn absorb(&mut self, from: Party, message: &[u8]) -> Result<(), AuthError> {
        if self.finalized {
            return Err(AuthError::Finalized(self.key_handle));
        }
        let dir = from as usize;
        self.step(dir, (1u128 << 127) | message.len() as u128);
        let mut chunks = message.chunks_exact(16);
        for c in &mut chunks {
            self.step(dir, u128::from_be_bytes(c.try_into().unwrap()));
        }
        let rest = chunks.remainder();
        if !rest.is_empty() {
            let mut buf = [0u8; 16];
            buf[..rest.len()].copy_from_slice(rest);
            self.step(dir, u128::from_be_bytes(buf));
        }
        self.message_count += 1;
        Ok(())
    }

    /// Tag over the sender-to-receiver stream followed by the reverse stream
    /// and a block counting both.
    pub fn finalize_tag(&mut self) -> Result<Tag, AuthError> {
        if self.finalized {
            return Err(AuthError::Finalized(self.key_handle));
        }
        self.finalized = true;
        let mut shifted = self.acc[0];
        for _ in 0..self.blocks[1] {
            shifted = self.point.mul(shifted);
        }
        let lens = ((self.blocks[0] as u128) << 64) | self.blocks[1] as u128;
        let h = self.point.mul(shifted ^ self.acc[1] ^ lens);
        Ok((h ^ self.mask).to_be_bytes())
    }
}

pub fn verify_exchange(local: &Tag, remote: &Tag) -> Result<(), AuthError> {
    let diff = local.iter().zip(remote).fold(0u8, |acc, (a, b)| acc | (a ^ b));
    if diff == 0 {
        Ok(())
    } else {
        Err(AuthError::TagMismatch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn ctx(key: u8) -> AuthContext {
        AuthContext::with_key(1, &[key; 32])
    }

    fn tag_of(key: &[u8; 32], msgs: &[(Party, &[u8])]) -> Tag {
        let mut c = AuthContext::with_key(0, key);
        for (p, m) in msgs {
            c.absorb(*p, m).unwrap();
        }
        c.finalize_tag().unwrap()
    }

    #[test]
    fn gf_known_product() {
        // independent big-integer carry-less product reduced by the same modulus
        assert_eq!(
            gf_mul(0x0123456789abcdeffedcba9876543210, 0xdeadbeefcafebabe0011223344556677),
            0xfa990997bd53944d1a1576f80d93b1dd
        );
        assert_eq!(gf_mul(1 << 127, 2), 0x87);
    }

    proptest! {
        #[test]
        fn table_matches_reference(a in any::<u128>(), k in any::<u128>()) {
            prop_assert_eq!(GfMulTable::new(k).mul(a), gf_mul(a, k));
        }

        #[test]
        fn gf_commutative(a in any::<u128>(), b in any::<u128>()) {
            prop_assert_eq!(gf_mul(a, b), gf_mul(b, a));
        }
    }

    #[test]
    fn framing_is_length_delimited() {
        let k = [9u8; 32];
        let s = Party::Sender;
        let split = tag_of(&k, &[(s, b"ab"), (s, b"c")]);
        let joined = tag_of(&k, &[(s, b"abc")]);
        let other = tag_of(&k, &[(s, b"a"), (s, b"bc")]);
        assert_ne!(split, joined);
        assert_ne!(split, other);
        let mut c = ctx(3);
        let before = c.acc;
        c.absorb(s, b"").unwrap();
        assert_ne!(c.acc, before);
        // trailing zero bytes are not lost to padding
        assert_ne!(tag_of(&k, &[(s, b"x")]), tag_of(&k, &[(s, b"x\0")]));
    }

    #[test]
    fn direction_matters_but_interleaving_does_not() {
        let k = [5u8; 32];
        let (a, b) = (Party::Sender, Party::Receiver);
        let t1 = tag_of(&k, &[(a, b"one"), (b, b"two"), (a, b"three")]);
        let t2 = tag_of(&k, &[(b, b"two"), (a, b"one"), (a, b"three")]);
        assert_eq!(t1, t2);
        let t3 = tag_of(&k, &[(a, b"one"), (a, b"two"), (a, b"three")]);
        assert_ne!(t1, t3);
        assert_ne!(tag_of(&k, &[(a, b"m")]), tag_of(&k, &[(b, b"m")]));
    }

    #[test]
    fn identical_transcripts_identical_tags() {
        let mut r = ChaCha20Rng::seed_from_u64(1);
        let key: [u8; 32] = r.gen();
        let msgs: Vec<(Party, Vec<u8>)> = (0..50)
            .map(|i| {
                let len = r.gen_range(0..300);
                (if i % 3 == 0 { Party::Receiver } else { Party::Sender }, (0..len).map(|_| r.gen()).collect())
            })
            .collect();
        let view: Vec<(Party, &[u8])> = msgs.iter().map(|(p, m)| (*p, m.as_slice())).collect();
        assert_eq!(tag_of(&key, &view), tag_of(&key, &view));
    }

    #[test]
    fn one_bit_differences_collide_never() {
        let mut r = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..10_000 {
            let key: [u8; 32] = r.gen();
            let len = r.gen_range(1..64);
            let m: Vec<u8> = (0..len).map(|_| r.gen()).collect();
            let mut m2 = m.clone();
            m2[r.gen_range(0..len)] ^= 1 << r.gen_range(0..8);
            assert_ne!(tag_of(&key, &[(Party::Sender, &m)]), tag_of(&key, &[(Party::Sender, &m2)]));
        }
    }

    #[test]
    fn finalized_context_rejects() {
        let mut c = ctx(1);
        c.finalize_tag().unwrap();
        assert_eq!(c.absorb(Party::Sender, b"x"), Err(AuthError::Finalized(1)));
        assert_eq!(c.finalize_tag(), Err(AuthError::Finalized(1)));
    }

    #[test]
    fn depleted_store() {
        let mut s = SecretStore::new(&[0u8; 40]);
        assert!(AuthContext::open(1, &mut s).is_ok());
        assert_eq!(
            AuthContext::open(2, &mut s).unwrap_err(),
            AuthError::ReplenishNeeded { available: 8, needed: 32 }
        );
        assert_eq!(s.available(), 8);
    }

    #[test]
    fn replayed_tag_rejected() {
        let mut s = SecretStore::new(&(0..=255u8).collect::<Vec<_>>());
        let mut first = AuthContext::open(1, &mut s).unwrap();
        let mut second = AuthContext::open(2, &mut s).unwrap();
        first.absorb(Party::Sender, b"same").unwrap();
        second.absorb(Party::Sender, b"same").unwrap();
        let (t1, t2) = (first.finalize_tag().unwrap(), second.finalize_tag().unwrap());
        assert!(verify_exchange(&t1, &t1).is_ok());
        assert_eq!(verify_exchange(&t2, &t1), Err(AuthError::TagMismatch));
    }

    #[test]
    fn replenish_grows_pool() {
        let mut s = SecretStore::new(&[1u8; DEFAULT_LOW_WATERMARK]);
        assert!(!s.needs_replenish());
        s.take(1).unwrap();
        assert!(s.needs_replenish());
        s.replenish(0, &[2u8; 32]).unwrap();
        assert_eq!(s.available(), DEFAULT_LOW_WATERMARK + 31);
        assert_eq!(
            s.replenish(5, &[0; 32]),
            Err(AuthError::HandleMismatch { expected: 1, got: 5 })
        );
    }

    #[test]
    fn lockstep_consumption_identical() {
        let boot: Vec<u8> = (0..64).collect();
        let (mut a, mut b) = (SecretStore::new(&boot), SecretStore::new(&boot));
        let mut r = ChaCha20Rng::seed_from_u64(3);
        let (mut out_a, mut out_b) = (Vec::new(), Vec::new());
        let mut handle = 0;
        for _ in 0..500 {
            if a.available() < KEY_QUOTA || r.gen_bool(0.3) {
                let key: [u8; 32] = r.gen();
                a.replenish(handle, &key).unwrap();
                b.replenish(handle, &key).unwrap();
                handle += 1;
            } else {
                out_a.extend(a.take(KEY_QUOTA).unwrap());
                out_b.extend(b.take(KEY_QUOTA).unwrap());
            }
        }
        assert_eq!(out_a, out_b);
        assert_eq!(a.consumption_log(), b.consumption_log());
        // consumed intervals are contiguous and disjoint
        let mut next = 0;
        for &(off, len) in a.consumption_log() {
            assert_eq!(off, next);
            next += len as u64;
        }
    }

    #[test]
    fn hex_bootstrap() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("secret.hex");
        std::fs::write(&p, "00ff10\n20").unwrap();
        let s = SecretStore::from_hex_file(&p).unwrap();
        assert_eq!(s.available(), 4);
        std::fs::write(&p, "zz").unwrap();
        assert!(SecretStore::from_hex_file(&p).is_err());
    }
}
