//! Local logic of the QKD lane that refills the authentication secret.
//!
//! Sifting keeps matching-basis events, a disclosed random sample estimates
//! the error rate, and the rest accumulates in a [`QkdBuffer`] until enough
//! material is available for one reconcile-and-amplify round. The networked
//! exchange lives in the pipeline.

use rand::seq::index;
use rand::RngCore;

use crate::bits::BitString;
use crate::otcore::AbortReason;
use crate::params::binary_entropy;
use crate::qsim::RawEventBlock;

#[derive(Debug, Clone, PartialEq)]
pub struct QkdConfig {
    /// Fraction of sifted bits disclosed for error estimation.
    pub sample_fraction: f64,
    pub qber_threshold: f64,
    /// Bits withheld from every extracted key on top of the leakage.
    pub safety_bits: u64,
    /// Efficiency assumed before reconciliation, for the backpressure check.
    pub precheck_f: f64,
    /// Raw events routed to the lane per sift round.
    pub block_events: usize,
    /// Key bytes requested per replenishment.
    pub request_bytes: usize,
}

impl Default for QkdConfig {
    fn default() -> Self {
        Self {
            sample_fraction: 0.10,
            qber_threshold: 0.11,
            safety_bits: 128,
            precheck_f: 1.5,
            block_events: 40_000,
            request_bytes: 1024,
        }
    }
}

/// Sifted positions (matching bases), ascending.
pub fn sift_indices(bases_a: &BitString, bases_b: &BitString) -> Vec<u32> {
    (0..bases_a.len().min(bases_b.len()))
        .filter(|&i| bases_a.get(i) == bases_b.get(i))
        .map(|i| i as u32)
        .collect()
}

/// Positions within the sifted list to disclose, ascending.
pub fn choose_sample<R: RngCore>(rng: &mut R, sifted_len: usize, fraction: f64) -> Vec<u32> {
    let k = ((sifted_len as f64 * fraction).ceil() as usize).min(sifted_len);
    let mut s: Vec<u32> = index::sample(rng, sifted_len, k).into_iter().map(|i| i as u32).collect();
    s.sort_unstable();
    s
}

/// Splits one party's sifted bits into (kept key, disclosed sample bits).
pub fn split_sample(block: &RawEventBlock, sifted: &[u32], sample: &[u32]) -> (BitString, BitString) {
    let mut key = BitString::zeros(0);
    let mut disclosed = BitString::zeros(0);
    let mut s = sample.iter().peekable();
    for (pos, &j) in sifted.iter().enumerate() {
        let bit = block.outcomes.get(j as usize);
        if s.peek() == Some(&&(pos as u32)) {
            s.next();
            disclosed.push(bit);
        } else {
            key.push(bit);
        }
    }
    (key, disclosed)
}

/// Sifted key material waiting for reconciliation, with the running sample
/// statistics that drive the error estimate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QkdBuffer {
    pub key: BitString,
    pub sample_n: u64,
    pub sample_errors: u64,
}

impl QkdBuffer {
    pub fn absorb(&mut self, key: &BitString, mine: &BitString, theirs: &BitString) {
        self.key.extend_from(key);
        self.sample_n += mine.len() as u64;
        self.sample_errors += mine.hamming_distance(theirs) as u64;
    }

    pub fn q_est(&self) -> f64 {
        if self.sample_n == 0 {
            0.5
        } else {
            self.sample_errors as f64 / self.sample_n as f64
        }
    }

    pub fn check(&self, cfg: &QkdConfig) -> Result<(), AbortReason> {
        if self.key.is_empty() || self.sample_n == 0 || self.q_est() > cfg.qber_threshold {
            return Err(AbortReason::QkdQber);
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        *self = Self::default();
    }
}

/// Engineering rule `n·(1 − h(q)·f) − safety`, clamped at zero.
pub fn extractable_bits(n: u64, q: f64, f: f64, safety: u64) -> u64 {
    let h = binary_entropy(q.clamp(0.0, 1.0)).unwrap_or(1.0);
    let v = (n as f64 * (1.0 - h * f)).floor() - safety as f64;
    if v > 0.0 {
        v as u64
    } else {
        0
    }
}

/// After reconciliation the measured leakage replaces the `h(q)·f` estimate;
/// the verification hash counts as leakage too.
pub fn final_length(n: u64, leak: u64, verify_bits: u64, safety: u64) -> u64 {
    n.saturating_sub(leak + verify_bits + safety)
}

/// Whole-lane local run (both parties in one place), for tests and examples.
pub fn sift_qkd<R: RngCore>(
    a: &RawEventBlock,
    b: &RawEventBlock,
    cfg: &QkdConfig,
    rng: &mut R,
) -> Result<(BitString, BitString, f64), AbortReason> {
    let sifted = sift_indices(&a.bases, &b.bases);
    let sample = choose_sample(rng, sifted.len(), cfg.sample_fraction);
    let (ka, sa) = split_sample(a, &sifted, &sample);
    let (kb, sb) = split_sample(b, &sifted, &sample);
    let mut buf = QkdBuffer::default();
    buf.absorb(&ka, &sa, &sb);
    buf.check(cfg)?;
    Ok((ka, kb, buf.q_est()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qsim::{generate_block, ChannelModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn noiseless_sift() {
        let (a, b) = generate_block(&ChannelModel::noiseless(), 20_000, [1; 32]);
        let (ka, kb, q) = sift_qkd(&a, &b, &QkdConfig::default(), &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        assert_eq!(q, 0.0);
        assert_eq!(ka, kb);
        let sifted = ka.len() as f64 / 0.9;
        assert!((sifted - 10_000.0).abs() < 3.0 * 70.8 + 2.0, "{sifted}");
    }

    #[test]
    fn one_percent_estimate_in_interval() {
        let (a, b) = generate_block(&ChannelModel::with_qber(0.01), 400_000, [2; 32]);
        let (_, _, q) = sift_qkd(&a, &b, &QkdConfig::default(), &mut ChaCha20Rng::seed_from_u64(2)).unwrap();
        let n = 20_000.0;
        let sigma = (0.01f64 * 0.99 / n).sqrt();
        assert!((q - 0.01).abs() < 3.0 * sigma, "{q}");
    }

    #[test]
    fn all_mismatched_aborts() {
        let (a, mut b) = generate_block(&ChannelModel::noiseless(), 1000, [3; 32]);
        b.bases = BitString::from_fn(1000, |i| !a.bases.get(i));
        assert_eq!(
            sift_qkd(&a, &b, &QkdConfig::default(), &mut ChaCha20Rng::seed_from_u64(3)),
            Err(AbortReason::QkdQber)
        );
    }

    #[test]
    fn noisy_channel_aborts() {
        let (a, b) = generate_block(&ChannelModel::with_qber(0.2), 20_000, [4; 32]);
        assert_eq!(
            sift_qkd(&a, &b, &QkdConfig::default(), &mut ChaCha20Rng::seed_from_u64(4)),
            Err(AbortReason::QkdQber)
        );
    }

    #[test]
    fn length_rules() {
        assert_eq!(extractable_bits(1000, 0.0, 1.5, 128), 872);
        assert_eq!(extractable_bits(100, 0.11, 1.5, 128), 0);
        assert_eq!(final_length(10_000, 800, 128, 128), 8_944);
        assert_eq!(final_length(100, 800, 128, 128), 0);
    }
}
