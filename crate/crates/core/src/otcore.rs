//! Parameter estimation, index-set separation and raw-key extraction.
//!
//! The receiver commits to every `(θ^B_i, x^B_i)`, the sender picks the test
//! set `I_t`, the receiver opens those commitments and the sender estimates
//! the error rate over the matching-basis part `I_s`. After `θ^A` over the
//! rest is disclosed the receiver separates matching (`I_0`) from
//! non-matching (`I_1`) indices and sends `(I_c, I_c̄)`.

use rand::seq::index;
use rand::{CryptoRng, Rng, RngCore};
use thiserror::Error;

use crate::bits::BitString;
use crate::commitment::{verify_batch, Commitment, Opening, PublicString};

/// Enumerated abort reasons, transmitted in STATUS frames by their code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error)]
#[repr(u8)]
pub enum AbortReason {
    #[error("commitment")]
    Commitment = 1,
    #[error("p_exceeded")]
    PExceeded = 2,
    #[error("check_size")]
    CheckSize = 3,
    #[error("insufficient_raw")]
    InsufficientRaw = 4,
    #[error("protocol_violation")]
    ProtocolViolation = 5,
    #[error("auth_fail")]
    AuthFail = 6,
    #[error("ir_fail")]
    IrFail = 7,
    #[error("ir_stuck")]
    IrStuck = 8,
    #[error("pa_bound")]
    PaBound = 9,
    #[error("qkd_qber")]
    QkdQber = 10,
    #[error("params_mismatch")]
    ParamsMismatch = 11,
    #[error("transport")]
    Transport = 12,
}

impl AbortReason {
    pub const ALL: [AbortReason; 12] = [
        AbortReason::Commitment,
        AbortReason::PExceeded,
        AbortReason::CheckSize,
        AbortReason::InsufficientRaw,
        AbortReason::ProtocolViolation,
        AbortReason::AuthFail,
        AbortReason::IrFail,
        AbortReason::IrStuck,
        AbortReason::PaBound,
        AbortReason::QkdQber,
        AbortReason::ParamsMismatch,
        AbortReason::Transport,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(b: u8) -> Option<Self> {
        Self::ALL.iter().copied().find(|r| r.code() == b)
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|r| r.to_string() == s)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum OtCoreError {
    #[error("test set size floor(alpha * n0) is zero (n0 = {n0}, alpha = {alpha})")]
    Degenerate { n0: u64, alpha: f64 },
    #[error("aborted: {0}")]
    Abort(#[from] AbortReason),
}

/// Uniform `⌊α·n0⌋`-subset of `[0, n0)`, sorted ascending.
pub fn choose_test_set<R: RngCore + CryptoRng>(
    rng: &mut R,
    n0: u64,
    alpha: f64,
) -> Result<Vec<u32>, OtCoreError> {
    let k = crate::params::floor_tolerant(alpha * n0 as f64);
    if k == 0 || k > n0 || n0 > u32::MAX as u64 {
        return Err(OtCoreError::Degenerate { n0, alpha });
    }
    Ok(sorted_sample(rng, n0 as usize, k as usize, None))
}

fn sorted_sample<R: RngCore>(rng: &mut R, n: usize, k: usize, from: Option<&[u32]>) -> Vec<u32> {
    let mut out: Vec<u32> = index::sample(rng, n, k)
        .into_iter()
        .map(|i| from.map_or(i as u32, |f| f[i]))
        .collect();
    out.sort_unstable();
    out
}

/// Ascending indices of `[0, n0)` not in the sorted set `i_t`.
pub fn complement(i_t: &[u32], n0: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(n0 - i_t.len().min(n0));
    let mut it = i_t.iter().peekable();
    for i in 0..n0 as u32 {
        if it.peek() == Some(&&i) {
            it.next();
        } else {
            out.push(i);
        }
    }
    out
}

fn strictly_ascending_below(set: &[u32], n0: usize) -> bool {
    set.windows(2).all(|w| w[0] < w[1]) && set.last().map_or(true, |&l| (l as usize) < n0)
}

/// The receiver's answer to the test-set announcement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestSelection {
    pub i_t: Vec<u32>,
    pub openings: Vec<Opening>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Continue,
    Abort(AbortReason),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationResult {
    pub i_s: Vec<u32>,
    pub errors: u64,
    pub p_hat: f64,
    pub verdict: Verdict,
}

impl EstimationResult {
    fn abort(reason: AbortReason) -> Self {
        Self {
            i_s: Vec::new(),
            errors: 0,
            p_hat: f64::NAN,
            verdict: Verdict::Abort(reason),
        }
    }
}

/// Sender-side estimation. `commitments` covers the whole block.
pub fn estimate(
    test: &TestSelection,
    theta_a: &BitString,
    x_a: &BitString,
    public: &PublicString,
    commitments: &[Commitment],
    n_check: u64,
    p_max: f64,
) -> EstimationResult {
    let n0 = theta_a.len();
    if test.openings.len() != test.i_t.len()
        || commitments.len() != n0
        || x_a.len() != n0
        || !strictly_ascending_below(&test.i_t, n0)
    {
        return EstimationResult::abort(AbortReason::ProtocolViolation);
    }
    let picked: Vec<Commitment> = test.i_t.iter().map(|&j| commitments[j as usize]).collect();
    if verify_batch(public, &picked, &test.openings).is_err() {
        return EstimationResult::abort(AbortReason::Commitment);
    }
    let mut i_s = Vec::new();
    let mut errors = 0u64;
    for (&j, o) in test.i_t.iter().zip(&test.openings) {
        if theta_a.get(j as usize) == o.b1 {
            i_s.push(j);
            errors += (x_a.get(j as usize) != o.b2) as u64;
        }
    }
    let p_hat = if i_s.is_empty() {
        f64::NAN
    } else {
        errors as f64 / i_s.len() as f64
    };
    let verdict = if (i_s.len() as u64) < n_check {
        Verdict::Abort(AbortReason::CheckSize)
    } else if p_hat > p_max {
        Verdict::Abort(AbortReason::PExceeded)
    } else {
        Verdict::Continue
    };
    EstimationResult {
        i_s,
        errors,
        p_hat,
        verdict,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSplit {
    pub i0: Vec<u32>,
    pub i1: Vec<u32>,
    pub c: bool,
}

impl IndexSplit {
    /// `(I_c, I_c̄)` as transmitted.
    pub fn ordered_pair(&self) -> (&[u32], &[u32]) {
        if self.c {
            (&self.i1, &self.i0)
        } else {
            (&self.i0, &self.i1)
        }
    }
}

/// Receiver-side separation over `rest` (the indices outside `I_t`). The
/// choice bit is fresh unless the client supplied one.
pub fn build_split<R: RngCore + CryptoRng>(
    rest: &[u32],
    theta_a: &BitString,
    theta_b: &BitString,
    n_raw: u64,
    choice: Option<bool>,
    rng: &mut R,
) -> Result<IndexSplit, AbortReason> {
    let (matching, other): (Vec<u32>, Vec<u32>) = rest
        .iter()
        .partition(|&&j| theta_a.get(j as usize) == theta_b.get(j as usize));
    let n_raw = n_raw as usize;
    if n_raw == 0 || matching.len() < n_raw || other.len() < n_raw {
        return Err(AbortReason::InsufficientRaw);
    }
    let i0 = sorted_sample(rng, matching.len(), n_raw, Some(&matching));
    let i1 = sorted_sample(rng, other.len(), n_raw, Some(&other));
    let c = choice.unwrap_or_else(|| rng.gen());
    Ok(IndexSplit { i0, i1, c })
}

/// Sender-side check of a received ordered pair.
pub fn validate_pair(
    first: &[u32],
    second: &[u32],
    i_t: &[u32],
    n0: usize,
    n_raw: u64,
) -> Result<(), AbortReason> {
    let ok = first.len() as u64 == n_raw
        && second.len() as u64 == n_raw
        && strictly_ascending_below(first, n0)
        && strictly_ascending_below(second, n0)
        && disjoint_sorted(first, second)
        && disjoint_sorted(first, i_t)
        && disjoint_sorted(second, i_t);
    ok.then_some(()).ok_or(AbortReason::ProtocolViolation)
}

fn disjoint_sorted(a: &[u32], b: &[u32]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return false,
        }
    }
    true
}

fn select_checked(x: &BitString, set: &[u32]) -> Result<BitString, AbortReason> {
    if set.iter().any(|&j| j as usize >= x.len()) {
        return Err(AbortReason::ProtocolViolation);
    }
    Ok(x.select(set))
}

/// Sender raw blocks for positions 0 and 1, in ascending index order.
pub fn extract_sender(x_a: &BitString, first: &[u32], second: &[u32]) -> Result<[BitString; 2], AbortReason> {
    Ok([select_checked(x_a, first)?, select_checked(x_a, second)?])
}

/// Receiver raw block from `I_0`, to be placed at position `c`.
pub fn extract_receiver(x_b: &BitString, split: &IndexSplit) -> Result<BitString, AbortReason> {
    select_checked(x_b, &split.i0)
}

/// Index set on the wire: count u32, then u32 gaps (first gap from zero).
pub fn encode_index_set(set: &[u32], out: &mut Vec<u8>) {
    out.reserve(4 * (set.len() + 1));
    out.extend_from_slice(&(set.len() as u32).to_be_bytes());
    let mut prev = 0u32;
    for &j in set {
        out.extend_from_slice(&(j - prev).to_be_bytes());
        prev = j;
    }
}

/// Decodes one set and returns it with the number of bytes consumed.
/// Sets must be strictly ascending.
pub fn decode_index_set(bytes: &[u8]) -> Result<(Vec<u32>, usize), AbortReason> {
    let word = |k: usize| -> Option<u32> {
        bytes
            .get(4 * k..4 * k + 4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
    };
    let count = word(0).ok_or(AbortReason::ProtocolViolation)? as usize;
    if bytes.len() < 4 * (count + 1) {
        return Err(AbortReason::ProtocolViolation);
    }
    let mut set = Vec::with_capacity(count);
    let mut acc = 0u32;
    for k in 0..count {
        let gap = word(k + 1).unwrap();
        if k > 0 && gap == 0 {
            return Err(AbortReason::ProtocolViolation);
        }
        acc = acc.checked_add(gap).ok_or(AbortReason::ProtocolViolation)?;
        set.push(acc);
    }
    Ok((set, 4 * (count + 1)))
}

pub fn encode_pair(first: &[u32], second: &[u32]) -> Vec<u8> {
    let mut out = Vec::new();
    encode_index_set(first, &mut out);
    encode_index_set(second, &mut out);
    out
}

pub fn decode_pair(bytes: &[u8]) -> Result<(Vec<u32>, Vec<u32>), AbortReason> {
    let (a, used) = decode_index_set(bytes)?;
    let (b, used2) = decode_index_set(&bytes[used..])?;
    if used + used2 != bytes.len() {
        return Err(AbortReason::ProtocolViolation);
    }
    Ok((a, b))
}

/// Final output of one oblivious transfer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OtResult {
    Sender { m0: BitString, m1: BitString },
    Receiver { mc: BitString, c: bool },
}

impl OtResult {
    /// One hex line: `m0 m1` for the sender, `c mc` for the receiver.
    pub fn to_hex_line(&self) -> String {
        match self {
            OtResult::Sender { m0, m1 } => format!("{} {}", hex::encode(m0.to_bytes()), hex::encode(m1.to_bytes())),
            OtResult::Receiver { mc, c } => format!("{} {}", *c as u8, hex::encode(mc.to_bytes())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commitment::{commit_batch, openings_for, sample_public};
    use crate::params::ProtocolParams;
    use crate::qsim::{generate_block, ChannelModel};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rng(s: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(s)
    }

    #[test]
    fn test_set_size_and_guard() {
        let t = choose_test_set(&mut rng(1), 20, 0.35).unwrap();
        assert_eq!(t.len(), 7);
        assert!(t.windows(2).all(|w| w[0] < w[1]) && *t.last().unwrap() < 20);
        assert_eq!(
            choose_test_set(&mut rng(1), 2, 0.35),
            Err(OtCoreError::Degenerate { n0: 2, alpha: 0.35 })
        );
    }

    #[test]
    fn test_set_is_uniform() {
        // chi-square over index frequencies, 10^4 draws of 7 from 20
        let mut r = rng(2);
        let mut hits = [0f64; 20];
        for _ in 0..10_000 {
            for j in choose_test_set(&mut r, 20, 0.35).unwrap() {
                hits[j as usize] += 1.0;
            }
        }
        let expect = 10_000.0 * 7.0 / 20.0;
        let chi2: f64 = hits.iter().map(|h| (h - expect).powi(2) / expect).sum();
        // 19 degrees of freedom, 0.999 quantile is 43.8
        assert!(chi2 < 43.8, "chi2 = {chi2}");
    }

    struct Setup {
        a: crate::qsim::RawEventBlock,
        b: crate::qsim::RawEventBlock,
        public: PublicString,
        openings: Vec<Opening>,
        commitments: Vec<Commitment>,
        i_t: Vec<u32>,
    }

    fn setup(model: &ChannelModel, n0: usize, s: u64) -> Setup {
        let mut r = rng(s);
        let (a, b) = generate_block(model, n0, r.gen());
        let public = sample_public(&mut r);
        let openings = openings_for(r.gen(), &b.bases, &b.outcomes);
        let commitments = commit_batch(&public, &openings);
        let i_t = choose_test_set(&mut r, n0 as u64, 0.35).unwrap();
        Setup { a, b, public, openings, commitments, i_t }
    }

    fn selection(s: &Setup) -> TestSelection {
        TestSelection {
            i_t: s.i_t.clone(),
            openings: s.i_t.iter().map(|&j| s.openings[j as usize]).collect(),
        }
    }

    fn run_estimate(s: &Setup, sel: &TestSelection, p_max: f64) -> EstimationResult {
        let n_check = crate::params::DerivedCounts::new(s.a.len() as u64, 0.35, 0.005).n_check;
        estimate(sel, &s.a.bases, &s.a.outcomes, &s.public, &s.commitments, n_check, p_max)
    }

    #[test]
    fn noiseless_estimate_continues() {
        let s = setup(&ChannelModel::noiseless(), 20_000, 3);
        let r = run_estimate(&s, &selection(&s), 0.014);
        assert_eq!(r.p_hat, 0.0);
        assert_eq!(r.verdict, Verdict::Continue);
        assert!(r.i_s.iter().all(|&j| s.a.bases.get(j as usize) == s.b.bases.get(j as usize)));
    }

    #[test]
    fn forged_opening_aborts() {
        let s = setup(&ChannelModel::noiseless(), 5_000, 4);
        let mut sel = selection(&s);
        sel.openings[17].b2 ^= true;
        assert_eq!(run_estimate(&s, &sel, 0.014).verdict, Verdict::Abort(AbortReason::Commitment));
        let mut sel = selection(&s);
        sel.openings.pop();
        assert_eq!(
            run_estimate(&s, &sel, 0.014).verdict,
            Verdict::Abort(AbortReason::ProtocolViolation)
        );
    }

    #[test]
    fn check_size_abort_when_bases_never_match() {
        let mut s = setup(&ChannelModel::noiseless(), 5_000, 5);
        // adversarial sender bases: opposite of every receiver basis
        s.a.bases = BitString::from_fn(s.a.len(), |i| !s.b.bases.get(i));
        assert_eq!(run_estimate(&s, &selection(&s), 0.014).verdict, Verdict::Abort(AbortReason::CheckSize));
    }

    #[test]
    fn two_percent_qber_aborts() {
        let model = ChannelModel::with_qber(0.02);
        let aborts = (0..20)
            .filter(|&k| {
                let s = setup(&model, 1_000_000, 100 + k);
                run_estimate(&s, &selection(&s), 0.014).verdict == Verdict::Abort(AbortReason::PExceeded)
            })
            .count();
        assert!(aborts >= 19, "{aborts}");
    }

    #[test]
    fn split_and_extract() {
        let params = ProtocolParams {
            n0: 40_000,
            ..ProtocolParams::default()
        };
        let dc = params.derived_counts();
        let s = setup(&ChannelModel::noiseless(), 40_000, 6);
        let rest = complement(&s.i_t, 40_000);
        assert_eq!(rest.len() + s.i_t.len(), 40_000);
        for seed in 0..8 {
            let split = build_split(&rest, &s.a.bases, &s.b.bases, dc.n_raw, None, &mut rng(seed)).unwrap();
            assert_eq!(split.i0.len() as u64, dc.n_raw);
            assert!(disjoint_sorted(&split.i0, &split.i1));
            let (first, second) = split.ordered_pair();
            assert_eq!(first == split.i0.as_slice(), !split.c);
            validate_pair(first, second, &s.i_t, 40_000, dc.n_raw).unwrap();
            let blocks = extract_sender(&s.a.outcomes, first, second).unwrap();
            let mine = extract_receiver(&s.b.outcomes, &split).unwrap();
            assert_eq!(blocks[split.c as usize], mine);
            let d = blocks[!split.c as usize].hamming_distance(&mine) as f64 / mine.len() as f64;
            assert!((d - 0.5).abs() < 4.0 * 0.5 / (mine.len() as f64).sqrt(), "{d}");
        }
    }

    #[test]
    fn identity_toy_extraction() {
        let x = BitString::from_bools(&[true, false, true, true, false, false, true, false]);
        let split = IndexSplit { i0: vec![2, 5], i1: vec![1, 6], c: true };
        let (f, s) = split.ordered_pair();
        let blocks = extract_sender(&x, f, s).unwrap();
        assert_eq!(blocks[0], BitString::from_bools(&[false, true]));
        assert_eq!(blocks[1], BitString::from_bools(&[true, false]));
        assert_eq!(extract_sender(&x, &[8], &[0]), Err(AbortReason::ProtocolViolation));
    }

    #[test]
    fn skewed_bases_are_insufficient() {
        let t = BitString::zeros(100);
        let rest: Vec<u32> = (0..100).collect();
        assert_eq!(
            build_split(&rest, &t, &t, 10, None, &mut rng(0)),
            Err(AbortReason::InsufficientRaw)
        );
    }

    #[test]
    fn table_defaults_have_margin() {
        // Hoeffding: both classes exceed n_raw unless the rest deviates by δ2·(1−α)·N0
        let p = ProtocolParams::default();
        let dc = p.derived_counts();
        let rest = p.n0 - dc.n_test;
        let slack = rest as f64 / 2.0 - dc.n_raw as f64;
        let bound = 2.0 * (-2.0 * slack * slack / rest as f64).exp();
        assert!(bound < 1e-40, "{bound}");
    }

    #[test]
    fn pair_validation_rejects_overlap() {
        assert!(validate_pair(&[1, 2], &[3, 4], &[0], 5, 2).is_ok());
        assert!(validate_pair(&[1, 2], &[2, 4], &[0], 5, 2).is_err());
        assert!(validate_pair(&[0, 2], &[3, 4], &[0], 5, 2).is_err());
        assert!(validate_pair(&[2, 1], &[3, 4], &[0], 5, 2).is_err());
        assert!(validate_pair(&[1, 2], &[3, 5], &[0], 5, 2).is_err());
    }

    #[test]
    fn index_wire_layout() {
        let mut out = Vec::new();
        encode_index_set(&[3, 4, 10], &mut out);
        assert_eq!(out, [0, 0, 0, 3, 0, 0, 0, 3, 0, 0, 0, 1, 0, 0, 0, 6]);
        assert_eq!(decode_index_set(&out).unwrap(), (vec![3, 4, 10], 16));
        assert!(decode_index_set(&out[..15]).is_err());
        let dup = [0, 0, 0, 2, 0, 0, 0, 5, 0, 0, 0, 0];
        assert!(decode_index_set(&dup).is_err());
    }

    #[test]
    fn abort_codes_round_trip() {
        for r in AbortReason::ALL {
            assert_eq!(AbortReason::from_code(r.code()), Some(r));
            assert_eq!(AbortReason::from_name(&r.to_string()), Some(r));
        }
        assert_eq!(AbortReason::from_code(0), None);
    }

    proptest! {
        #[test]
        fn pair_codec_round_trip(mut a in proptest::collection::vec(any::<u32>(), 0..50),
                                 mut b in proptest::collection::vec(any::<u32>(), 0..50)) {
            a.sort_unstable(); a.dedup();
            b.sort_unstable(); b.dedup();
            prop_assert_eq!(decode_pair(&encode_pair(&a, &b)).unwrap(), (a, b));
        }

        #[test]
        fn decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_pair(&bytes);
        }

        #[test]
        fn p_hat_matches_recount(seed in 0u64..1000, q in 0.0f64..0.2) {
            let s = setup(&ChannelModel::with_qber(q), 2_000, seed);
            let sel = selection(&s);
            let r = run_estimate(&s, &sel, 0.5);
            let (mut n, mut e) = (0u64, 0u64);
            for &j in &s.i_t {
                let j = j as usize;
                if s.a.bases.get(j) == s.b.bases.get(j) {
                    n += 1;
                    e += (s.a.outcomes.get(j) != s.b.outcomes.get(j)) as u64;
                }
            }
            prop_assert_eq!(r.i_s.len() as u64, n);
            prop_assert_eq!(r.errors, e);
            if n > 0 { prop_assert_eq!(r.p_hat, e as f64 / n as f64); }
        }
    }
}
