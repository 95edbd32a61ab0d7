//! Packed bit strings.
//!
//! Bit `i` lives in word `i / 64` at bit position `63 - i % 64`, so the
//! packed byte representation is MSB-first and matches the wire formats.

use std::fmt;

#[derive(Clone, PartialEq, Eq, Default, Hash)]
pub struct BitString {
    words: Vec<u64>,
    len: usize,
}

#[inline]
fn mask_bit(i: usize) -> u64 {
    1u64 << (63 - (i % 64))
}

impl BitString {
    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut s = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                s.set(i, true);
            }
        }
        s
    }

    pub fn from_fn(len: usize, mut f: impl FnMut(usize) -> bool) -> Self {
        let mut s = Self::zeros(len);
        for i in 0..len {
            if f(i) {
                s.words[i / 64] |= mask_bit(i);
            }
        }
        s
    }

    /// Unpacks `len` bits from MSB-first bytes. Extra trailing bits must be zero.
    pub fn from_bytes(bytes: &[u8], len: usize) -> Option<Self> {
        if bytes.len() != len.div_ceil(8) {
            return None;
        }
        let mut words = vec![0u64; len.div_ceil(64)];
        for (i, chunk) in bytes.chunks(8).enumerate() {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            words[i] = u64::from_be_bytes(buf);
        }
        let s = Self { words, len };
        if s.tail_is_clean() {
            Some(s)
        } else {
            None
        }
    }

    fn tail_is_clean(&self) -> bool {
        let rem = self.len % 64;
        if rem == 0 {
            return true;
        }
        let last = *self.words.last().unwrap();
        last & (u64::MAX >> rem) == 0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.words.len() * 8);
        for w in &self.words {
            out.extend_from_slice(&w.to_be_bytes());
        }
        out.truncate(self.len.div_ceil(8));
        out
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.words[i / 64] & mask_bit(i) != 0
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: bool) {
        debug_assert!(i < self.len);
        if v {
            self.words[i / 64] |= mask_bit(i);
        } else {
            self.words[i / 64] &= !mask_bit(i);
        }
    }

    #[inline]
    pub fn flip(&mut self, i: usize) {
        debug_assert!(i < self.len);
        self.words[i / 64] ^= mask_bit(i);
    }

    pub fn push(&mut self, v: bool) {
        if self.len % 64 == 0 {
            self.words.push(0);
        }
        self.len += 1;
        let i = self.len - 1;
        self.set(i, v);
    }

    pub fn extend_from(&mut self, other: &BitString) {
        for b in other.iter() {
            self.push(b);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Parity of bits in `[start, end)`.
    pub fn parity_range(&self, start: usize, end: usize) -> bool {
        debug_assert!(start <= end && end <= self.len);
        if start == end {
            return false;
        }
        let (ws, we) = (start / 64, (end - 1) / 64);
        let head = u64::MAX >> (start % 64);
        let tail = u64::MAX << (63 - (end - 1) % 64);
        if ws == we {
            return (self.words[ws] & head & tail).count_ones() & 1 == 1;
        }
        let mut acc = (self.words[ws] & head).count_ones() + (self.words[we] & tail).count_ones();
        for w in &self.words[ws + 1..we] {
            acc += w.count_ones();
        }
        acc & 1 == 1
    }

    pub fn parity(&self) -> bool {
        self.count_ones() & 1 == 1
    }

    pub fn xor_assign(&mut self, other: &BitString) {
        assert_eq!(self.len, other.len, "length mismatch in xor");
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a ^= b;
        }
    }

    pub fn xor(&self, other: &BitString) -> BitString {
        let mut out = self.clone();
        out.xor_assign(other);
        out
    }

    pub fn hamming_distance(&self, other: &BitString) -> usize {
        assert_eq!(self.len, other.len, "length mismatch in hamming distance");
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum()
    }

    /// Gathers the bits at `indices` into a new string, in the given order.
    pub fn select(&self, indices: &[u32]) -> BitString {
        BitString::from_fn(indices.len(), |k| self.get(indices[k] as usize))
    }

    /// Returns 64 bits starting at bit `offset`, zero-filled past the end.
    #[inline]
    pub fn word_at(&self, offset: usize) -> u64 {
        let w = offset / 64;
        let sh = offset % 64;
        let hi = self.words.get(w).copied().unwrap_or(0);
        if sh == 0 {
            hi
        } else {
            let lo = self.words.get(w + 1).copied().unwrap_or(0);
            (hi << sh) | (lo >> (64 - sh))
        }
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn slice(&self, start: usize, end: usize) -> BitString {
        BitString::from_fn(end - start, |i| self.get(start + i))
    }
}

impl fmt::Debug for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.len <= 128 {
            let s: String = self.iter().map(|b| if b { '1' } else { '0' }).collect();
            write!(f, "BitString({s})")
        } else {
            write!(f, "BitString(len={}, ones={})", self.len, self.count_ones())
        }
    }
}

impl FromIterator<bool> for BitString {
    fn from_iter<I: IntoIterator<Item = bool>>(iter: I) -> Self {
        let mut s = BitString::default();
        for b in iter {
            s.push(b);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn msb_first_packing() {
        let s = BitString::from_bools(&[true, false, false, false, false, false, false, true, true]);
        assert_eq!(s.to_bytes(), vec![0x81, 0x80]);
    }

    #[test]
    fn dirty_tail_rejected() {
        assert!(BitString::from_bytes(&[0x81, 0x81], 9).is_none());
        assert!(BitString::from_bytes(&[0x81, 0x80], 9).is_some());
        assert!(BitString::from_bytes(&[0x81], 9).is_none());
    }

    proptest! {
        #[test]
        fn parity_range_matches_naive(bits in proptest::collection::vec(any::<bool>(), 1..300), a in 0usize..300, b in 0usize..300) {
            let s = BitString::from_bools(&bits);
            let (lo, hi) = (a.min(b) % (bits.len() + 1), a.max(b) % (bits.len() + 1));
            let (lo, hi) = (lo.min(hi), lo.max(hi));
            let naive = bits[lo..hi].iter().filter(|&&x| x).count() % 2 == 1;
            prop_assert_eq!(s.parity_range(lo, hi), naive);
        }

        #[test]
        fn bytes_round_trip(bits in proptest::collection::vec(any::<bool>(), 0..300)) {
            let s = BitString::from_bools(&bits);
            let back = BitString::from_bytes(&s.to_bytes(), bits.len()).unwrap();
            prop_assert_eq!(back, s);
        }

        #[test]
        fn word_at_matches_bits(bits in proptest::collection::vec(any::<bool>(), 1..300), off in 0usize..300) {
            let s = BitString::from_bools(&bits);
            let off = off % bits.len();
            let w = s.word_at(off);
            for k in 0..64 {
                let expect = bits.get(off + k).copied().unwrap_or(false);
                prop_assert_eq!((w >> (63 - k)) & 1 == 1, expect);
            }
        }
    }
}
