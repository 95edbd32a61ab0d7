//! Position-hiding Cascade reconciliation.
//!
//! The sender holds two raw blocks and does not know which one the receiver's
//! block is correlated with. Each round she sends parities of the same
//! sub-blocks for both positions; the receiver computes mismatches against
//! the correlated position only and returns the same answer for both. The
//! mismatch pattern depends only on the channel errors, so nothing in the
//! sender's view depends on the position.
//!
//! Both parties run a mirrored [`Engine`] that turns mismatch flags into the
//! next set of sub-block queries, so descriptors on the wire are checked
//! rather than trusted.
//!
//! A second mode answers the uncorrelated position from a fabricated error
//! pattern instead, which makes the two positions statistically (not
//! exactly) alike.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::auth::GfMulTable;
use crate::bits::BitString;
use crate::params::binary_entropy;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum CascadeError {
    #[error("verification failed")]
    IrFail,
    #[error("round limit {0} exceeded")]
    IrStuck(u64),
    #[error("cascade protocol violation: {0}")]
    Protocol(String),
}

fn violation(msg: impl Into<String>) -> CascadeError {
    CascadeError::Protocol(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionHiding {
    /// One response stream serves both positions.
    SharedResponses,
    /// The uncorrelated position is answered from a private random error
    /// pattern at the estimated error rate.
    FabricatedDummy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    pub passes: usize,
    /// Top-level block length is `max(min_block, round(block_factor / p_hat))`.
    pub block_factor: f64,
    pub min_block: usize,
    /// Block length multiplier between passes.
    pub growth: usize,
    pub hash_bits_verify: u32,
    pub max_rounds: u64,
    pub mode: PositionHiding,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            passes: 8,
            block_factor: 0.73,
            min_block: 8,
            growth: 8,
            hash_bits_verify: 128,
            max_rounds: 1 << 20,
            mode: PositionHiding::SharedResponses,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<(), CascadeError> {
        if self.passes < 2 {
            return Err(violation("at least two passes required"));
        }
        if self.hash_bits_verify < 96 || self.hash_bits_verify > 128 {
            return Err(violation("verification hash must have 96..=128 bits"));
        }
        if self.growth < 1 || self.min_block < 1 {
            return Err(violation("bad block schedule"));
        }
        Ok(())
    }

    /// Block lengths per pass. A zero error estimate runs a single
    /// confirmation pass over the whole block.
    pub fn block_sizes(&self, p_hat: f64, n: usize) -> Vec<usize> {
        let n = n.max(1);
        if p_hat <= 0.0 {
            return vec![n];
        }
        let k1 = ((self.block_factor / p_hat).round() as usize).max(self.min_block);
        // later passes stop at half the block so two leftover errors can
        // still land in different sub-blocks
        let cap = (n / 2).max(1);
        let mut k = k1.min(cap);
        let mut out = Vec::with_capacity(self.passes);
        for _ in 0..self.passes {
            out.push(k);
            k = k.saturating_mul(self.growth).min(cap);
        }
        out
    }
}

/// A sub-block over the shuffled ordering of one pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Desc {
    pub offset: u32,
    pub len: u32,
}

/// `CASC_PAR` (sender parities) and `CASC_RSP` (mismatch flags) share this
/// layout: pass u8, position u8, count u32, (offset u32, len u32) per
/// descriptor, then one bit per descriptor packed MSB-first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParityMsg {
    pub pass: u8,
    pub position: u8,
    pub descs: Vec<Desc>,
    pub bits: BitString,
}

/// Pass byte of an empty message sent for a position whose session ended.
pub const PASS_IDLE: u8 = 0xFF;

impl ParityMsg {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 8 * self.descs.len() + self.bits.len().div_ceil(8));
        out.push(self.pass);
        out.push(self.position);
        out.extend_from_slice(&(self.descs.len() as u32).to_be_bytes());
        for d in &self.descs {
            out.extend_from_slice(&d.offset.to_be_bytes());
            out.extend_from_slice(&d.len.to_be_bytes());
        }
        out.extend_from_slice(&self.bits.to_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, CascadeError> {
        if b.len() < 6 {
            return Err(violation("short parity message"));
        }
        let count = u32::from_be_bytes(b[2..6].try_into().unwrap()) as usize;
        let need = count
            .checked_mul(8)
            .and_then(|x| x.checked_add(6 + count.div_ceil(8)))
            .ok_or_else(|| violation("descriptor count overflow"))?;
        if b.len() != need {
            return Err(violation(format!("parity message is {} bytes, expected {need}", b.len())));
        }
        let descs = (0..count)
            .map(|i| {
                let o = 6 + 8 * i;
                Desc {
                    offset: u32::from_be_bytes(b[o..o + 4].try_into().unwrap()),
                    len: u32::from_be_bytes(b[o + 4..o + 8].try_into().unwrap()),
                }
            })
            .collect();
        let bits = BitString::from_bytes(&b[6 + 8 * count..], count)
            .ok_or_else(|| violation("dirty parity padding"))?;
        Ok(Self {
            pass: b[0],
            position: b[1],
            descs,
            bits,
        })
    }

    /// Number of parity (or flag) bits carried.
    pub fn payload_bits(&self) -> usize {
        self.bits.len()
    }
}

struct PassState {
    perm: Vec<u32>,
    inv: Vec<u32>,
    k: usize,
    corr: BitString,
    odd: Vec<bool>,
}

impl PassState {
    fn blocks(&self, n: usize) -> usize {
        n.div_ceil(self.k)
    }
}

#[derive(Debug, Clone)]
struct Search {
    lo: usize,
    hi: usize,
    queried: bool,
}

enum Phase {
    Idle,
    Top(usize),
    Search { pass: usize, searches: Vec<Search> },
    Done,
}

/// Per-pass counters gathered by the engine.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PassStats {
    pub queries: u64,
    pub mismatches: u64,
    pub top_level_odd: u64,
    pub corrections: u64,
}

/// Deterministic Cascade logic shared by both parties. It knows only the
/// public transcript: shuffles, disclosed ranges, mismatch flags and the
/// positions corrected so far.
pub struct Engine {
    n: usize,
    passes: Vec<PassState>,
    started: usize,
    phase: Phase,
    cache: HashMap<(u8, u32, u32), bool>,
    corrected: BitString,
    rounds: u64,
    max_rounds: u64,
    pending: Option<(u8, Vec<Desc>)>,
    pub stats: Vec<PassStats>,
}

fn permutation(seed: &[u8; 32], pass: usize, n: usize) -> Vec<u32> {
    let mut h = Sha256::new();
    h.update(b"cascade-shuffle");
    h.update(seed);
    h.update((pass as u32).to_be_bytes());
    let mut rng = ChaCha20Rng::from_seed(h.finalize().into());
    let mut p: Vec<u32> = (0..n as u32).collect();
    p.shuffle(&mut rng);
    p
}

fn permute(key: &BitString, perm: &[u32]) -> BitString {
    BitString::from_fn(perm.len(), |i| key.get(perm[i] as usize))
}

impl Engine {
    pub fn new(n: usize, sizes: &[usize], seed: &[u8; 32], max_rounds: u64) -> Self {
        let passes = sizes
            .iter()
            .enumerate()
            .map(|(p, &k)| {
                let perm = permutation(seed, p, n);
                let mut inv = vec![0u32; n];
                for (i, &j) in perm.iter().enumerate() {
                    inv[j as usize] = i as u32;
                }
                PassState {
                    perm,
                    inv,
                    k: k.max(1),
                    corr: BitString::zeros(n),
                    odd: Vec::new(),
                }
            })
            .collect();
        Self {
            n,
            passes,
            started: 0,
            phase: if n == 0 { Phase::Done } else { Phase::Idle },
            cache: HashMap::new(),
            corrected: BitString::zeros(n),
            rounds: 0,
            max_rounds,
            pending: None,
            stats: vec![PassStats::default(); sizes.len()],
        }
    }

    pub fn perm(&self, pass: usize) -> &[u32] {
        &self.passes[pass].perm
    }

    pub fn num_passes(&self) -> usize {
        self.passes.len()
    }

    /// Positions flipped so far, in original order.
    pub fn corrections(&self) -> &BitString {
        &self.corrected
    }

    /// Parity of corrections over a range of a pass's shuffled ordering.
    pub fn corr_parity(&self, pass: usize, d: Desc) -> bool {
        self.passes[pass]
            .corr
            .parity_range(d.offset as usize, (d.offset + d.len) as usize)
    }

    pub fn is_done(&self) -> bool {
        matches!(self.phase, Phase::Done)
    }

    fn cached_flag(&self, pass: usize, lo: usize, hi: usize) -> Option<bool> {
        let d = Desc {
            offset: lo as u32,
            len: (hi - lo) as u32,
        };
        self.cache
            .get(&(pass as u8, d.offset, d.len))
            .map(|&base| base ^ self.corr_parity(pass, d))
    }

    fn apply_corrections(&mut self, pass: usize, found: &[usize]) {
        for &pos in found {
            let j = self.passes[pass].perm[pos] as usize;
            self.corrected.flip(j);
            for (r, ps) in self.passes.iter_mut().enumerate() {
                let at = ps.inv[j] as usize;
                ps.corr.flip(at);
                if r < self.started {
                    let b = at / ps.k;
                    ps.odd[b] = !ps.odd[b];
                }
            }
            self.stats[pass].corrections += 1;
        }
    }

    /// Runs the logic forward until it needs flags for new sub-blocks.
    /// Returns `None` once every pass is clean.
    pub fn next_query(&mut self) -> Result<Option<(u8, Vec<Desc>)>, CascadeError> {
        if let Some(p) = &self.pending {
            return Ok(Some(p.clone()));
        }
        loop {
            match &mut self.phase {
                Phase::Done => return Ok(None),
                Phase::Idle => {
                    let odd_pass = (0..self.started).find(|&q| self.passes[q].odd.iter().any(|&o| o));
                    match odd_pass {
                        Some(q) => {
                            let ps = &self.passes[q];
                            let searches = (0..ps.odd.len())
                                .filter(|&b| ps.odd[b])
                                .map(|b| Search {
                                    lo: b * ps.k,
                                    hi: ((b + 1) * ps.k).min(self.n),
                                    queried: false,
                                })
                                .collect();
                            self.phase = Phase::Search { pass: q, searches };
                        }
                        None if self.started < self.passes.len() => {
                            let p = self.started;
                            self.started += 1;
                            let ps = &mut self.passes[p];
                            ps.odd = vec![false; ps.blocks(self.n)];
                            self.phase = Phase::Top(p);
                            let k = ps.k;
                            let descs = (0..ps.odd.len())
                                .map(|b| Desc {
                                    offset: (b * k) as u32,
                                    len: (((b + 1) * k).min(self.n) - b * k) as u32,
                                })
                                .collect();
                            return self.emit(p, descs);
                        }
                        None => {
                            self.phase = Phase::Done;
                            return Ok(None);
                        }
                    }
                }
                Phase::Top(_) => unreachable!("top-level query awaiting flags"),
                Phase::Search { pass, searches } => {
                    let pass = *pass;
                    let mut searches = std::mem::take(searches);
                    let mut descs = Vec::new();
                    for s in searches.iter_mut() {
                        s.queried = false;
                        while s.hi - s.lo > 1 {
                            let mid = s.lo + (s.hi - s.lo) / 2;
                            match self.cached_flag(pass, s.lo, mid) {
                                Some(true) => s.hi = mid,
                                Some(false) => s.lo = mid,
                                None => {
                                    s.queried = true;
                                    descs.push(Desc {
                                        offset: s.lo as u32,
                                        len: (mid - s.lo) as u32,
                                    });
                                    break;
                                }
                            }
                        }
                    }
                    if descs.is_empty() {
                        let found: Vec<usize> = searches.iter().map(|s| s.lo).collect();
                        self.apply_corrections(pass, &found);
                        self.phase = Phase::Idle;
                    } else {
                        self.phase = Phase::Search { pass, searches };
                        return self.emit(pass, descs);
                    }
                }
            }
        }
    }

    fn emit(&mut self, pass: usize, descs: Vec<Desc>) -> Result<Option<(u8, Vec<Desc>)>, CascadeError> {
        self.rounds += 1;
        if self.rounds > self.max_rounds {
            return Err(CascadeError::IrStuck(self.max_rounds));
        }
        self.stats[pass].queries += descs.len() as u64;
        self.pending = Some((pass as u8, descs));
        Ok(self.pending.clone())
    }

    /// Feeds the mismatch flags for the pending query.
    pub fn apply_flags(&mut self, flags: &BitString) -> Result<(), CascadeError> {
        let (pass, descs) = self
            .pending
            .take()
            .ok_or_else(|| violation("flags without a pending query"))?;
        if flags.len() != descs.len() {
            return Err(violation(format!(
                "{} flags for {} descriptors",
                flags.len(),
                descs.len()
            )));
        }
        let p = pass as usize;
        for (i, d) in descs.iter().enumerate() {
            let base = flags.get(i) ^ self.corr_parity(p, *d);
            self.cache.insert((pass, d.offset, d.len), base);
        }
        let mismatches = flags.count_ones() as u64;
        self.stats[p].mismatches += mismatches;
        match &mut self.phase {
            Phase::Top(tp) => {
                debug_assert_eq!(*tp, p);
                for i in 0..descs.len() {
                    self.passes[p].odd[i] = flags.get(i);
                }
                self.stats[p].top_level_odd += mismatches;
                self.phase = Phase::Idle;
            }
            Phase::Search { searches, .. } => {
                let mut k = 0;
                for s in searches.iter_mut().filter(|s| s.queried) {
                    let mid = s.lo + (s.hi - s.lo) / 2;
                    if flags.get(k) {
                        s.hi = mid;
                    } else {
                        s.lo = mid;
                    }
                    k += 1;
                }
            }
            _ => return Err(violation("flags in a phase without queries")),
        }
        Ok(())
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }
}

fn parities(perm_key: &BitString, descs: &[Desc]) -> BitString {
    BitString::from_fn(descs.len(), |i| {
        let d = descs[i];
        perm_key.parity_range(d.offset as usize, (d.offset + d.len) as usize)
    })
}

/// Traffic counters for one side of a session.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrafficStats {
    pub messages: [u64; 2],
    pub bytes: [u64; 2],
    pub parity_bits: [u64; 2],
}

/// Sender side. Holds one or two blocks; never modifies them.
pub struct CascadeSender {
    keys: Vec<Vec<BitString>>,
    engines: Vec<Engine>,
    shared: bool,
    leak: [u64; 2],
    pub traffic: TrafficStats,
}

impl CascadeSender {
    pub fn new(
        blocks: Vec<BitString>,
        p_hat: f64,
        seed: &[u8; 32],
        config: &CascadeConfig,
    ) -> Result<Self, CascadeError> {
        config.validate()?;
        if blocks.is_empty() || blocks.len() > 2 {
            return Err(violation("one or two sender blocks"));
        }
        let n = blocks[0].len();
        if blocks.iter().any(|b| b.len() != n) {
            return Err(violation("sender blocks differ in length"));
        }
        let sizes = config.block_sizes(p_hat, n);
        let shared = config.mode == PositionHiding::SharedResponses || blocks.len() == 1;
        let engine_count = if shared { 1 } else { blocks.len() };
        let engines: Vec<Engine> = (0..engine_count)
            .map(|_| Engine::new(n, &sizes, seed, config.max_rounds))
            .collect();
        let keys = blocks
            .iter()
            .map(|b| (0..sizes.len()).map(|p| permute(b, engines[0].perm(p))).collect())
            .collect();
        Ok(Self {
            keys,
            engines,
            shared,
            leak: [0; 2],
            traffic: TrafficStats::default(),
        })
    }

    pub fn positions(&self) -> usize {
        self.keys.len()
    }

    /// Parity messages for the next round, one per position, or `None`
    /// when reconciliation is complete.
    pub fn next_round(&mut self) -> Result<Option<Vec<ParityMsg>>, CascadeError> {
        let mut out = Vec::with_capacity(self.keys.len());
        if self.shared {
            let Some((pass, descs)) = self.engines[0].next_query()? else {
                return Ok(None);
            };
            for pos in 0..self.keys.len() {
                out.push(ParityMsg {
                    pass,
                    position: pos as u8,
                    bits: parities(&self.keys[pos][pass as usize], &descs),
                    descs: descs.clone(),
                });
            }
        } else {
            let mut any = false;
            for pos in 0..self.keys.len() {
                match self.engines[pos].next_query()? {
                    Some((pass, descs)) => {
                        any = true;
                        out.push(ParityMsg {
                            pass,
                            position: pos as u8,
                            bits: parities(&self.keys[pos][pass as usize], &descs),
                            descs,
                        });
                    }
                    None => out.push(ParityMsg {
                        pass: PASS_IDLE,
                        position: pos as u8,
                        descs: Vec::new(),
                        bits: BitString::zeros(0),
                    }),
                }
            }
            if !any {
                return Ok(None);
            }
        }
        for m in &out {
            let pos = m.position as usize;
            self.leak[pos] += m.payload_bits() as u64;
            self.traffic.messages[pos] += 1;
            self.traffic.bytes[pos] += m.to_bytes().len() as u64;
            self.traffic.parity_bits[pos] += m.payload_bits() as u64;
        }
        Ok(Some(out))
    }

    pub fn on_responses(&mut self, rsps: &[ParityMsg]) -> Result<(), CascadeError> {
        if rsps.len() != self.keys.len() {
            return Err(violation("response count differs from position count"));
        }
        for (pos, r) in rsps.iter().enumerate() {
            if r.position as usize != pos {
                return Err(violation("responses out of position order"));
            }
        }
        if self.shared {
            // every position must carry the same answer
            if rsps.iter().any(|r| r.bits != rsps[0].bits || r.descs != rsps[0].descs) {
                return Err(violation("responses differ across positions"));
            }
            let (_, descs) = self.engines[0]
                .pending
                .clone()
                .ok_or_else(|| violation("unsolicited response"))?;
            if rsps[0].descs != descs {
                return Err(violation("response descriptors do not mirror the query"));
            }
            self.engines[0].apply_flags(&rsps[0].bits)
        } else {
            for (pos, r) in rsps.iter().enumerate() {
                if r.pass == PASS_IDLE {
                    if self.engines[pos].pending.is_some() {
                        return Err(violation("idle response for an active session"));
                    }
                    continue;
                }
                if self.engines[pos].pending.as_ref().map(|p| &p.1) != Some(&r.descs) {
                    return Err(violation("response descriptors do not mirror the query"));
                }
                self.engines[pos].apply_flags(&r.bits)?;
            }
            Ok(())
        }
    }

    /// Parity bits disclosed per position.
    pub fn leak_bits(&self) -> [u64; 2] {
        self.leak
    }

    pub fn pass_stats(&self) -> Vec<Vec<PassStats>> {
        self.engines.iter().map(|e| e.stats.clone()).collect()
    }

    pub fn rounds(&self) -> u64 {
        self.engines.iter().map(Engine::rounds).max().unwrap_or(0)
    }
}

enum Responder {
    Real(Vec<BitString>),
    Fabricated(Vec<BitString>),
}

/// Receiver side: corrects its block towards the sender's position `c`.
pub struct CascadeReceiver {
    c: usize,
    positions: usize,
    block: BitString,
    sessions: Vec<(Engine, Responder)>,
    shared: bool,
    pub traffic: TrafficStats,
}

impl CascadeReceiver {
    /// `positions` is 2 for the OT lane, 1 for the single-block QKD mode
    /// (where `c` must be 0). `rng` only feeds the fabricated error pattern.
    pub fn new<R: RngCore>(
        block: BitString,
        c: usize,
        positions: usize,
        p_hat: f64,
        seed: &[u8; 32],
        config: &CascadeConfig,
        rng: &mut R,
    ) -> Result<Self, CascadeError> {
        config.validate()?;
        if !(1..=2).contains(&positions) || c >= positions {
            return Err(violation("bad position layout"));
        }
        let n = block.len();
        let sizes = config.block_sizes(p_hat, n);
        let shared = config.mode == PositionHiding::SharedResponses || positions == 1;
        let mut sessions = Vec::new();
        let count = if shared { 1 } else { positions };
        for pos in 0..count {
            let engine = Engine::new(n, &sizes, seed, config.max_rounds);
            let responder = if shared || pos == c {
                Responder::Real((0..sizes.len()).map(|p| permute(&block, engine.perm(p))).collect())
            } else {
                let q = p_hat.clamp(0.0, 0.5);
                let e = BitString::from_fn(n, |_| q > 0.0 && rng.gen_bool(q));
                Responder::Fabricated((0..sizes.len()).map(|p| permute(&e, engine.perm(p))).collect())
            };
            sessions.push((engine, responder));
        }
        Ok(Self {
            c,
            positions,
            block,
            sessions,
            shared,
            traffic: TrafficStats::default(),
        })
    }

    fn answer(
        engine: &mut Engine,
        responder: &Responder,
        query: &ParityMsg,
    ) -> Result<BitString, CascadeError> {
        let (pass, descs) = engine
            .next_query()?
            .ok_or_else(|| violation("query after reconciliation finished"))?;
        if pass != query.pass || descs != query.descs {
            return Err(violation("query descriptors diverge from the mirrored schedule"));
        }
        if query.bits.len() != descs.len() {
            return Err(violation("parity count differs from descriptor count"));
        }
        let p = pass as usize;
        let flags = BitString::from_fn(descs.len(), |i| {
            let d = descs[i];
            let (lo, hi) = (d.offset as usize, (d.offset + d.len) as usize);
            let corr = engine.corr_parity(p, d);
            match responder {
                Responder::Real(keys) => query.bits.get(i) ^ keys[p].parity_range(lo, hi) ^ corr,
                Responder::Fabricated(es) => es[p].parity_range(lo, hi) ^ corr,
            }
        });
        engine.apply_flags(&flags)?;
        Ok(flags)
    }

    pub fn on_queries(&mut self, queries: &[ParityMsg]) -> Result<Vec<ParityMsg>, CascadeError> {
        if queries.len() != self.positions {
            return Err(violation("query count differs from position count"));
        }
        for (pos, q) in queries.iter().enumerate() {
            if q.position as usize != pos {
                return Err(violation("queries out of position order"));
            }
            self.traffic.messages[pos] += 1;
            self.traffic.bytes[pos] += q.to_bytes().len() as u64;
            self.traffic.parity_bits[pos] += q.payload_bits() as u64;
        }
        let out: Vec<ParityMsg> = if self.shared {
            if queries.iter().any(|q| q.descs != queries[0].descs || q.pass != queries[0].pass) {
                return Err(violation("positions queried with different descriptors"));
            }
            let (engine, responder) = &mut self.sessions[0];
            let flags = Self::answer(engine, responder, &queries[self.c])?;
            queries
                .iter()
                .map(|q| ParityMsg {
                    pass: q.pass,
                    position: q.position,
                    descs: q.descs.clone(),
                    bits: flags.clone(),
                })
                .collect()
        } else {
            let mut out = Vec::with_capacity(queries.len());
            for (pos, q) in queries.iter().enumerate() {
                let (engine, responder) = &mut self.sessions[pos];
                if q.pass == PASS_IDLE {
                    if engine.next_query()?.is_some() {
                        return Err(violation("idle query for an active session"));
                    }
                    out.push(q.clone());
                    continue;
                }
                let flags = Self::answer(engine, responder, q)?;
                out.push(ParityMsg {
                    pass: q.pass,
                    position: q.position,
                    descs: q.descs.clone(),
                    bits: flags,
                });
            }
            out
        };
        Ok(out)
    }

    /// True once the mirrored schedule has no further queries.
    pub fn is_done(&mut self) -> Result<bool, CascadeError> {
        for (e, _) in self.sessions.iter_mut() {
            if e.next_query()?.is_some() {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn real_engine(&self) -> &Engine {
        if self.shared {
            &self.sessions[0].0
        } else {
            &self.sessions[self.c].0
        }
    }

    pub fn corrected(&self) -> BitString {
        self.block.xor(self.real_engine().corrections())
    }

    pub fn corrections(&self) -> usize {
        self.real_engine().corrections().count_ones()
    }

    pub fn choice(&self) -> usize {
        self.c
    }
}

/// `CASC_VER` payload: 16-byte hash seed, then one 16-byte hash per position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyMsg {
    pub seed: [u8; 16],
    pub hashes: Vec<[u8; 16]>,
}

impl VerifyMsg {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.seed.to_vec();
        for h in &self.hashes {
            out.extend_from_slice(h);
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, CascadeError> {
        if b.len() < 32 || b.len() % 16 != 0 || b.len() > 48 {
            return Err(violation("bad verification message length"));
        }
        Ok(Self {
            seed: b[..16].try_into().unwrap(),
            hashes: b[16..].chunks(16).map(|c| c.try_into().unwrap()).collect(),
        })
    }
}

/// Polynomial hash over GF(2^128) of the block (128-bit chunks plus a length
/// block), truncated to `bits` bits.
pub fn poly_hash(seed: &[u8; 16], block: &BitString, bits: u32) -> [u8; 16] {
    // keep the point away from zero so the hash never degenerates
    let k = u128::from_be_bytes(*seed) | 1;
    let t = GfMulTable::new(k);
    let mut acc = 0u128;
    let words = block.words();
    for pair in words.chunks(2) {
        let hi = pair[0] as u128;
        let lo = pair.get(1).copied().unwrap_or(0) as u128;
        acc = t.mul(acc ^ (hi << 64 | lo));
    }
    acc = t.mul(acc ^ block.len() as u128);
    let mut out = acc.to_be_bytes();
    let keep = bits as usize;
    for (i, b) in out.iter_mut().enumerate() {
        if 8 * i >= keep {
            *b = 0;
        } else if 8 * (i + 1) > keep {
            *b &= 0xFF << (8 - keep % 8);
        }
    }
    out
}

/// The sender hashes every position with a fresh seed. The receiver checks
/// locally, so the sender never learns which position matched.
pub fn sender_verify_msg<R: RngCore>(blocks: &[&BitString], bits: u32, rng: &mut R) -> VerifyMsg {
    let mut seed = [0u8; 16];
    rng.fill_bytes(&mut seed);
    VerifyMsg {
        seed,
        hashes: blocks.iter().map(|b| poly_hash(&seed, b, bits)).collect(),
    }
}

/// Accepts iff the corrected block matches position `c` and no other.
pub fn receiver_verify(corrected: &BitString, c: usize, msg: &VerifyMsg, bits: u32) -> Result<(), CascadeError> {
    let h = poly_hash(&msg.seed, corrected, bits);
    let matches: Vec<usize> = (0..msg.hashes.len()).filter(|&i| msg.hashes[i] == h).collect();
    if matches == [c] {
        Ok(())
    } else {
        Err(CascadeError::IrFail)
    }
}

/// `leak / (n * h(p_hat))`; `None` when the error estimate is zero.
pub fn measure_efficiency(leak: u64, n: usize, p_hat: f64) -> Option<f64> {
    if p_hat <= 0.0 || n == 0 {
        return None;
    }
    Some(leak as f64 / (n as f64 * binary_entropy(p_hat.min(0.5)).ok()?))
}

#[derive(Debug, Clone)]
pub struct ReconciliationOutcome {
    pub corrected_receiver_block: BitString,
    pub leak_bits_per_position: [u64; 2],
    pub f_actual: Option<f64>,
    pub verified: Result<(), CascadeError>,
    pub rounds: u64,
    pub corrections: usize,
    pub sender_stats: Vec<Vec<PassStats>>,
    pub sender_traffic: TrafficStats,
    pub receiver_traffic: TrafficStats,
}

/// Runs both sides in-process, message by message, including the wire
/// encoding. Used by tests and examples; the pipeline drives the same
/// state machines over a transport.
pub fn reconcile_local<R: RngCore>(
    sender_blocks: &[&BitString],
    receiver_block: &BitString,
    c: usize,
    p_hat: f64,
    seed: &[u8; 32],
    config: &CascadeConfig,
    rng: &mut R,
) -> Result<ReconciliationOutcome, CascadeError> {
    let owned: Vec<BitString> = sender_blocks.iter().map(|b| (*b).clone()).collect();
    let mut alice = CascadeSender::new(owned, p_hat, seed, config)?;
    let mut bob = CascadeReceiver::new(
        receiver_block.clone(),
        c,
        sender_blocks.len(),
        p_hat,
        seed,
        config,
        rng,
    )?;
    while let Some(queries) = alice.next_round()? {
        let wire: Vec<ParityMsg> = queries
            .iter()
            .map(|q| ParityMsg::from_bytes(&q.to_bytes()))
            .collect::<Result<_, _>>()?;
        let rsps = bob.on_queries(&wire)?;
        let wire: Vec<ParityMsg> = rsps
            .iter()
            .map(|r| ParityMsg::from_bytes(&r.to_bytes()))
            .collect::<Result<_, _>>()?;
        alice.on_responses(&wire)?;
    }
    if !bob.is_done()? {
        return Err(violation("receiver schedule still active"));
    }
    let ver = sender_verify_msg(sender_blocks, config.hash_bits_verify, rng);
    let ver = VerifyMsg::from_bytes(&ver.to_bytes())?;
    let corrected = bob.corrected();
    let verified = receiver_verify(&corrected, c, &ver, config.hash_bits_verify);
    let leak = alice.leak_bits();
    let n = receiver_block.len();
    Ok(ReconciliationOutcome {
        f_actual: measure_efficiency(leak[c.min(1)], n, p_hat),
        corrections: bob.corrections(),
        corrected_receiver_block: corrected,
        leak_bits_per_position: leak,
        verified,
        rounds: alice.rounds(),
        sender_stats: alice.pass_stats(),
        sender_traffic: alice.traffic.clone(),
        receiver_traffic: bob.traffic.clone(),
    })
}

/// Seeds a deterministic generator from arbitrary bytes.
pub fn seed_from(label: &[u8], data: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(label);
    h.update(data);
    h.finalize().into()
}

pub fn rng_from(seed: [u8; 32]) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(seed)
}
