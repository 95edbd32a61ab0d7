//! Semi-honest two-party computation fed by the oblivious transfers.
//!
//! Roles: the party that holds the extension choice vector `s` is the
//! extended-OT sender. It was the receiver of the base transfers, so roles
//! flip between the quantum layer and this one.
//!
//! Layers, bottom up: ROT to chosen-message OT, IKNP extension into a pool
//! of 64-bit random OTs, Gilboa products over `Z_2^64`, Beaver triples,
//! additive sharing and the squared-distance fingerprint match.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bits::BitString;
use crate::otcore::OtResult;
use crate::transport::{tags, Frame, Lane, Transport};
use crate::Party;

pub const BASE_OTS: usize = 128;
/// Random OTs spent per ring product.
pub const OTS_PER_MUL: u64 = 64;
/// Random OTs spent per Beaver triple (two cross terms).
pub const OTS_PER_TRIPLE: u64 = 2 * OTS_PER_MUL;
pub const FRAC_BITS: u32 = 16;
pub const RECOMMENDED_N: std::ops::RangeInclusive<usize> = 256..=512;
pub const DB_MAGIC: &[u8; 8] = b"QOTFPDB1";

const CHUNK: usize = 8 << 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MpcError {
    #[error("length mismatch: {0} vs {1} bits")]
    Length(usize, usize),
    #[error("OT extension needs exactly {need} base OTs, got {got}")]
    BaseCount { need: usize, got: usize },
    #[error("base OTs mix roles or are empty")]
    BaseMixed,
    #[error("base OTs were already consumed by an earlier extension")]
    BaseReused,
    #[error("base OTs belong to the {0} side")]
    WrongSide(MpcRole),
    #[error("OT supply exhausted: need {need}, have {have}")]
    Exhausted { need: u64, have: u64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("malformed message: {0}")]
    Malformed(&'static str),
    #[error("transport: {0}")]
    Transport(String),
    #[error("fingerprint file: {0}")]
    File(String),
}

type Result<T> = std::result::Result<T, MpcError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MpcRole {
    OtSender,
    OtReceiver,
}

impl MpcRole {
    /// The quantum receiver holds the choice bits and becomes the
    /// extended-OT sender.
    pub fn from_qot(p: Party) -> Self {
        match p {
            Party::Receiver => MpcRole::OtSender,
            Party::Sender => MpcRole::OtReceiver,
        }
    }
}

impl std::fmt::Display for MpcRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MpcRole::OtSender => "ot-sender",
            MpcRole::OtReceiver => "ot-receiver",
        })
    }
}

// ---------------------------------------------------------------- ROT -> OT

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RotPair {
    Sender { r0: BitString, r1: BitString },
    Receiver { rc: BitString, c: bool },
}

impl From<OtResult> for RotPair {
    fn from(r: OtResult) -> Self {
        match r {
            OtResult::Sender { m0, m1 } => RotPair::Sender { r0: m0, r1: m1 },
            OtResult::Receiver { mc, c } => RotPair::Receiver { rc: mc, c },
        }
    }
}

impl RotPair {
    pub fn len(&self) -> usize {
        match self {
            RotPair::Sender { r0, .. } => r0.len(),
            RotPair::Receiver { rc, .. } => rc.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Receiver's correction bit `d = b xor c`.
pub fn ot_choose(rot: &RotPair, b: bool) -> bool {
    match rot {
        RotPair::Receiver { c, .. } => b ^ c,
        RotPair::Sender { .. } => panic!("ot_choose needs the receiver view"),
    }
}

/// Sender's masked pair `(m0 ^ r_d, m1 ^ r_{1^d})`.
pub fn ot_respond(rot: &RotPair, d: bool, m0: &BitString, m1: &BitString) -> Result<[BitString; 2]> {
    let RotPair::Sender { r0, r1 } = rot else {
        panic!("ot_respond needs the sender view")
    };
    for m in [m0, m1] {
        if m.len() != r0.len() {
            return Err(MpcError::Length(m.len(), r0.len()));
        }
    }
    let (a, b) = if d { (r1, r0) } else { (r0, r1) };
    Ok([m0.xor(a), m1.xor(b)])
}

pub fn ot_finish(rot: &RotPair, b: bool, ct: &[BitString; 2]) -> Result<BitString> {
    let RotPair::Receiver { rc, .. } = rot else {
        panic!("ot_finish needs the receiver view")
    };
    let x = &ct[b as usize];
    if x.len() != rc.len() {
        return Err(MpcError::Length(x.len(), rc.len()));
    }
    Ok(x.xor(rc))
}

/// Both halves of the conversion in one call, for local use and tests.
pub fn rot_to_ot(sender: &RotPair, receiver: &RotPair, m0: &BitString, m1: &BitString, b: bool) -> Result<BitString> {
    let d = ot_choose(receiver, b);
    let ct = ot_respond(sender, d, m0, m1)?;
    ot_finish(receiver, b, &ct)
}

// ---------------------------------------------------------------- ledger

/// Per-party OT accounting. Base batches are identified by a digest so a
/// copied batch is caught as well.
#[derive(Debug, Default, Clone)]
pub struct OtLedger {
    used_bases: HashSet<[u8; 32]>,
    pub base_consumed: u64,
    pub supplied: u64,
    pub consumed: u64,
}

impl OtLedger {
    pub fn available(&self) -> u64 {
        self.supplied - self.consumed
    }

    fn consume_base(&mut self, base: &ExtBase) -> Result<()> {
        if !self.used_bases.insert(base.fingerprint()) {
            return Err(MpcError::BaseReused);
        }
        self.base_consumed += BASE_OTS as u64;
        Ok(())
    }

    fn take(&mut self, n: u64) -> Result<()> {
        if n > self.available() {
            return Err(MpcError::Exhausted {
                need: n,
                have: self.available(),
            });
        }
        self.consumed += n;
        Ok(())
    }
}

// ---------------------------------------------------------------- IKNP

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExtBase {
    /// Extended-OT sender: choice vector `s` and the keys it picked.
    Sender { s: u128, keys: Vec<BitString> },
    /// Extended-OT receiver: both keys of every base transfer.
    Receiver { keys: Vec<[BitString; 2]> },
}

impl ExtBase {
    /// Builds the extension base from 128 transfers of the quantum layer,
    /// all seen from the same party.
    pub fn from_rots(rots: &[RotPair]) -> Result<Self> {
        if rots.len() != BASE_OTS {
            return Err(MpcError::BaseCount {
                need: BASE_OTS,
                got: rots.len(),
            });
        }
        if rots.iter().any(RotPair::is_empty) {
            return Err(MpcError::BaseMixed);
        }
        match &rots[0] {
            RotPair::Receiver { .. } => {
                let mut s = 0u128;
                let mut keys = Vec::with_capacity(BASE_OTS);
                for (i, r) in rots.iter().enumerate() {
                    let RotPair::Receiver { rc, c } = r else {
                        return Err(MpcError::BaseMixed);
                    };
                    s |= (*c as u128) << i;
                    keys.push(rc.clone());
                }
                Ok(ExtBase::Sender { s, keys })
            }
            RotPair::Sender { .. } => rots
                .iter()
                .map(|r| match r {
                    RotPair::Sender { r0, r1 } => Ok([r0.clone(), r1.clone()]),
                    _ => Err(MpcError::BaseMixed),
                })
                .collect::<Result<_>>()
                .map(|keys| ExtBase::Receiver { keys }),
        }
    }

    pub fn role(&self) -> MpcRole {
        match self {
            ExtBase::Sender { .. } => MpcRole::OtSender,
            ExtBase::Receiver { .. } => MpcRole::OtReceiver,
        }
    }

    fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        match self {
            ExtBase::Sender { s, keys } => {
                h.update(s.to_be_bytes());
                keys.iter().for_each(|k| h.update(k.to_bytes()));
            }
            ExtBase::Receiver { keys } => keys.iter().flatten().for_each(|k| h.update(k.to_bytes())),
        }
        h.finalize().into()
    }
}

/// Stretches a base key into a `count`-bit column, packed MSB-first.
fn prg_column(key: &BitString, count: usize) -> Vec<u8> {
    let seed: [u8; 32] = Sha256::new()
        .chain_update(b"qot-iknp-prg")
        .chain_update((key.len() as u64).to_be_bytes())
        .chain_update(key.to_bytes())
        .finalize()
        .into();
    let mut col = vec![0u8; count.div_ceil(8)];
    ChaCha20Rng::from_seed(seed).fill_bytes(&mut col);
    if count % 8 != 0 {
        *col.last_mut().unwrap() &= 0xFF << (8 - count % 8);
    }
    col
}

/// Row `j` of the 128-column matrix; bit `i` of the result is column `i`.
fn transpose(cols: &[Vec<u8>], count: usize) -> Vec<u128> {
    let mut rows = vec![0u128; count];
    for (i, col) in cols.iter().enumerate() {
        for (bi, &byte) in col.iter().enumerate() {
            if byte == 0 {
                continue;
            }
            for k in 0..8 {
                let j = bi * 8 + k;
                if j < count && byte & (0x80 >> k) != 0 {
                    rows[j] |= 1u128 << i;
                }
            }
        }
    }
    rows
}

/// Correlation-robust row hash, stretched to `nbytes`.
fn row_hash(j: u64, row: u128, nbytes: usize, out: &mut [u8]) {
    let mut ctr = 0u32;
    let mut off = 0;
    while off < nbytes {
        let d = Sha256::new()
            .chain_update(b"qot-iknp-row")
            .chain_update(j.to_be_bytes())
            .chain_update(row.to_be_bytes())
            .chain_update(ctr.to_be_bytes())
            .finalize();
        let n = (nbytes - off).min(32);
        out[off..off + n].copy_from_slice(&d[..n]);
        off += n;
        ctr += 1;
    }
}

fn pad_bits(buf: &mut [u8], len_bits: usize) {
    if len_bits % 8 != 0 {
        *buf.last_mut().unwrap() &= 0xFF << (8 - len_bits % 8);
    }
}

/// Extended-OT sender output: both pads of every transfer, flat.
#[derive(Debug, Clone)]
pub struct ExtSenderOutput {
    pub len_bits: usize,
    pads: [Vec<u8>; 2],
}

/// Extended-OT receiver output: its choice bits and the chosen pads.
#[derive(Debug, Clone)]
pub struct ExtReceiverOutput {
    pub len_bits: usize,
    pub choices: Vec<bool>,
    pads: Vec<u8>,
}

impl ExtSenderOutput {
    pub fn count(&self) -> usize {
        self.pads[0].len() / self.len_bits.div_ceil(8)
    }

    pub fn pad(&self, j: usize, b: bool) -> BitString {
        let w = self.len_bits.div_ceil(8);
        BitString::from_bytes(&self.pads[b as usize][j * w..(j + 1) * w], self.len_bits).unwrap()
    }

    /// Chosen-message step: `x_j^b ^ pad_j^b` for every transfer.
    pub fn encrypt(&self, msgs: &[[BitString; 2]]) -> Result<Vec<u8>> {
        if msgs.len() != self.count() {
            return Err(MpcError::Shape(format!("{} messages for {} OTs", msgs.len(), self.count())));
        }
        let mut out = Vec::new();
        for (j, pair) in msgs.iter().enumerate() {
            for b in [false, true] {
                let m = &pair[b as usize];
                if m.len() != self.len_bits {
                    return Err(MpcError::Length(m.len(), self.len_bits));
                }
                out.extend(m.xor(&self.pad(j, b)).to_bytes());
            }
        }
        Ok(out)
    }
}

impl ExtReceiverOutput {
    pub fn pad(&self, j: usize) -> BitString {
        let w = self.len_bits.div_ceil(8);
        BitString::from_bytes(&self.pads[j * w..(j + 1) * w], self.len_bits).unwrap()
    }

    pub fn decrypt(&self, cts: &[u8]) -> Result<Vec<BitString>> {
        let w = self.len_bits.div_ceil(8);
        if cts.len() != 2 * w * self.choices.len() {
            return Err(MpcError::Malformed("ciphertext length"));
        }
        (0..self.choices.len())
            .map(|j| {
                let off = (2 * j + self.choices[j] as usize) * w;
                let ct = BitString::from_bytes(&cts[off..off + w], self.len_bits).ok_or(MpcError::Malformed("padding"))?;
                Ok(ct.xor(&self.pad(j)))
            })
            .collect()
    }
}

/// Receiver half of the extension: returns its pads and the column
/// message `u_i = G(k_i^0) ^ G(k_i^1) ^ r` for the sender.
pub fn iknp_receiver(
    base: &ExtBase,
    choices: &[bool],
    len_bits: usize,
    ledger: &mut OtLedger,
) -> Result<(ExtReceiverOutput, Vec<u8>)> {
    let ExtBase::Receiver { keys } = base else {
        return Err(MpcError::WrongSide(base.role()));
    };
    ledger.consume_base(base)?;
    let k = choices.len();
    let r = BitString::from_bools(choices).to_bytes();
    let mut t_cols = Vec::with_capacity(BASE_OTS);
    let mut msg = Vec::with_capacity(BASE_OTS * r.len());
    for [k0, k1] in keys {
        let t = prg_column(k0, k);
        let g1 = prg_column(k1, k);
        msg.extend(t.iter().zip(&g1).zip(&r).map(|((a, b), c)| a ^ b ^ c));
        t_cols.push(t);
    }
    let rows = transpose(&t_cols, k);
    let w = len_bits.div_ceil(8);
    let mut pads = vec![0u8; k * w];
    for (j, row) in rows.iter().enumerate() {
        let p = &mut pads[j * w..(j + 1) * w];
        row_hash(j as u64, *row, w, p);
        pad_bits(p, len_bits);
    }
    ledger.supplied += k as u64;
    Ok((
        ExtReceiverOutput {
            len_bits,
            choices: choices.to_vec(),
            pads,
        },
        msg,
    ))
}

/// Sender half: `q_i = G(k_i^{s_i}) ^ s_i u_i`, rows hashed at `q_j` and
/// `q_j ^ s`.
pub fn iknp_sender(base: &ExtBase, count: usize, u: &[u8], len_bits: usize, ledger: &mut OtLedger) -> Result<ExtSenderOutput> {
    let ExtBase::Sender { s, keys } = base else {
        return Err(MpcError::WrongSide(base.role()));
    };
    let cb = count.div_ceil(8);
    if u.len() != BASE_OTS * cb {
        return Err(MpcError::Malformed("extension matrix size"));
    }
    ledger.consume_base(base)?;
    let cols: Vec<Vec<u8>> = keys
        .iter()
        .enumerate()
        .map(|(i, key)| {
            let mut q = prg_column(key, count);
            if s >> i & 1 == 1 {
                q.iter_mut().zip(&u[i * cb..(i + 1) * cb]).for_each(|(a, b)| *a ^= b);
            }
            q
        })
        .collect();
    let rows = transpose(&cols, count);
    let w = len_bits.div_ceil(8);
    let mut pads = [vec![0u8; count * w], vec![0u8; count * w]];
    for (j, q) in rows.iter().enumerate() {
        for (b, row) in [*q, q ^ s].into_iter().enumerate() {
            let p = &mut pads[b][j * w..(j + 1) * w];
            row_hash(j as u64, row, w, p);
            pad_bits(p, len_bits);
        }
    }
    ledger.supplied += count as u64;
    Ok(ExtSenderOutput { len_bits, pads })
}

/// Runs both halves locally and delivers chosen messages. Test and demo
/// harness; each side keeps its own ledger.
pub fn ot_extend(
    sender_base: &ExtBase,
    receiver_base: &ExtBase,
    msgs: &[[BitString; 2]],
    choices: &[bool],
    ledgers: (&mut OtLedger, &mut OtLedger),
) -> Result<Vec<BitString>> {
    if msgs.len() != choices.len() {
        return Err(MpcError::Shape(format!("{} messages, {} choices", msgs.len(), choices.len())));
    }
    let len_bits = msgs.first().map_or(1, |m| m[0].len());
    let (rx, u) = iknp_receiver(receiver_base, choices, len_bits, ledgers.1)?;
    let tx = iknp_sender(sender_base, choices.len(), &u, len_bits, ledgers.0)?;
    rx.decrypt(&tx.encrypt(msgs)?)
}

// ---------------------------------------------------------------- channel

/// Message channel over the frame transport. Long messages are split into
/// `MPC` frames; the first carries the total length.
pub struct MpcChannel<T> {
    inner: T,
    pub bytes_sent: u64,
    pub bytes_recv: u64,
}

impl<T: Transport> MpcChannel<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            bytes_sent: 0,
            bytes_recv: 0,
        }
    }

    pub fn into_inner(self) -> T {
        self.inner
    }

    fn frame(&mut self, payload: Vec<u8>) -> Result<()> {
        self.bytes_sent += payload.len() as u64;
        self.inner
            .send(&Frame::new(Lane::Ot, tags::MPC, 0, payload))
            .map_err(|e| MpcError::Transport(e.to_string()))
    }

    pub fn send(&mut self, msg: &[u8]) -> Result<()> {
        let mut first = (msg.len() as u64).to_be_bytes().to_vec();
        let head = msg.len().min(CHUNK);
        first.extend_from_slice(&msg[..head]);
        self.frame(first)?;
        for c in msg[head..].chunks(CHUNK) {
            self.frame(c.to_vec())?;
        }
        Ok(())
    }

    fn next(&mut self) -> Result<Vec<u8>> {
        let f = self.inner.recv().map_err(|e| MpcError::Transport(e.to_string()))?;
        if f.tag != tags::MPC {
            return Err(MpcError::Malformed("unexpected frame type"));
        }
        self.bytes_recv += f.payload.len() as u64;
        Ok(f.payload)
    }

    pub fn recv(&mut self) -> Result<Vec<u8>> {
        let first = self.next()?;
        if first.len() < 8 {
            return Err(MpcError::Malformed("short header"));
        }
        let total = u64::from_be_bytes(first[..8].try_into().unwrap()) as usize;
        let mut msg = first[8..].to_vec();
        while msg.len() < total {
            msg.extend(self.next()?);
        }
        if msg.len() != total {
            return Err(MpcError::Malformed("length overrun"));
        }
        Ok(msg)
    }

    /// Sender speaks first so two large messages never block each other.
    pub fn exchange(&mut self, role: MpcRole, msg: &[u8]) -> Result<Vec<u8>> {
        match role {
            MpcRole::OtSender => {
                self.send(msg)?;
                self.recv()
            }
            MpcRole::OtReceiver => {
                let m = self.recv()?;
                self.send(msg)?;
                Ok(m)
            }
        }
    }
}

fn u64s_to_bytes(v: &[u64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_be_bytes()).collect()
}

fn bytes_to_u64s(b: &[u8]) -> Result<Vec<u64>> {
    if b.len() % 8 != 0 {
        return Err(MpcError::Malformed("ring vector length"));
    }
    Ok(b.chunks(8).map(|c| u64::from_be_bytes(c.try_into().unwrap())).collect())
}

// ---------------------------------------------------------------- OT pool

/// Random 64-bit OTs from one extension, consumed front to back. Both
/// parties advance in lockstep.
pub struct OtPool {
    role: MpcRole,
    next: usize,
    p0: Vec<u64>,
    p1: Vec<u64>,
    choice: Vec<bool>,
    pub ledger: OtLedger,
}

impl OtPool {
    /// Runs one extension of `count` transfers over the channel. The
    /// receiver picks random choice bits; later use derandomizes them.
    pub fn extend<T: Transport, R: RngCore>(
        chan: &mut MpcChannel<T>,
        base: &ExtBase,
        count: usize,
        mut ledger: OtLedger,
        rng: &mut R,
    ) -> Result<Self> {
        let role = base.role();
        let word = |p: &[u8], j: usize| u64::from_be_bytes(p[j * 8..j * 8 + 8].try_into().unwrap());
        match role {
            MpcRole::OtReceiver => {
                let choices: Vec<bool> = (0..count).map(|_| rng.gen()).collect();
                let (out, u) = iknp_receiver(base, &choices, 64, &mut ledger)?;
                let mut hdr = (count as u64).to_be_bytes().to_vec();
                hdr.extend(u);
                chan.send(&hdr)?;
                let p1 = (0..count).map(|j| word(&out.pads, j)).collect();
                Ok(Self {
                    role,
                    next: 0,
                    p0: Vec::new(),
                    p1,
                    choice: out.choices,
                    ledger,
                })
            }
            MpcRole::OtSender => {
                let msg = chan.recv()?;
                if msg.len() < 8 {
                    return Err(MpcError::Malformed("extension header"));
                }
                let got = u64::from_be_bytes(msg[..8].try_into().unwrap()) as usize;
                if got != count {
                    return Err(MpcError::Shape(format!("extension of {got} OTs, expected {count}")));
                }
                let out = iknp_sender(base, count, &msg[8..], 64, &mut ledger)?;
                Ok(Self {
                    role,
                    next: 0,
                    p0: (0..count).map(|j| word(&out.pads[0], j)).collect(),
                    p1: (0..count).map(|j| word(&out.pads[1], j)).collect(),
                    choice: Vec::new(),
                    ledger,
                })
            }
        }
    }

    pub fn role(&self) -> MpcRole {
        self.role
    }

    pub fn remaining(&self) -> u64 {
        self.ledger.available()
    }

    fn take(&mut self, n: usize) -> Result<std::ops::Range<usize>> {
        self.ledger.take(n as u64)?;
        let r = self.next..self.next + n;
        self.next += n;
        Ok(r)
    }
}

// ---------------------------------------------------------------- arithmetic

/// Batched products: the OT sender brings `x`, the receiver `y`, each
/// side gets an additive share of `x * y mod 2^64`. 64 OTs per product.
pub fn gilboa_mul<T: Transport, R: RngCore>(
    chan: &mut MpcChannel<T>,
    pool: &mut OtPool,
    inputs: &[u64],
    rng: &mut R,
) -> Result<Vec<u64>> {
    let n = inputs.len();
    let peer_n = bytes_to_u64s(&chan.exchange(pool.role, &(n as u64).to_be_bytes())?)?;
    if peer_n != [n as u64] {
        return Err(MpcError::Shape(format!("{n} products here, {peer_n:?} at the peer")));
    }
    let range = pool.take(n * OTS_PER_MUL as usize)?;
    match pool.role {
        MpcRole::OtReceiver => {
            // derandomize: d = y_i ^ r
            let d: Vec<bool> = range
                .clone()
                .enumerate()
                .map(|(k, j)| (inputs[k / 64] >> (k % 64) & 1 == 1) ^ pool.choice[j])
                .collect();
            chan.send(&BitString::from_bools(&d).to_bytes())?;
            let ct = bytes_to_u64s(&chan.recv()?)?;
            if ct.len() != 2 * range.len() {
                return Err(MpcError::Malformed("product ciphertexts"));
            }
            Ok((0..n)
                .map(|m| {
                    (0..64).fold(0u64, |acc, i| {
                        let k = m * 64 + i;
                        let bit = (inputs[m] >> i & 1) as usize;
                        acc.wrapping_add(ct[2 * k + bit] ^ pool.p1[range.start + k])
                    })
                })
                .collect())
        }
        MpcRole::OtSender => {
            let d = BitString::from_bytes(&chan.recv()?, range.len()).ok_or(MpcError::Malformed("correction bits"))?;
            let mut ct = Vec::with_capacity(2 * range.len());
            let shares = (0..n)
                .map(|m| {
                    let mut acc = 0u64;
                    for i in 0..64 {
                        let k = m * 64 + i;
                        let j = range.start + k;
                        let s: u64 = rng.gen();
                        let msgs = [s, s.wrapping_add(inputs[m] << i)];
                        let pads = if d.get(k) { [pool.p1[j], pool.p0[j]] } else { [pool.p0[j], pool.p1[j]] };
                        ct.push(msgs[0] ^ pads[0]);
                        ct.push(msgs[1] ^ pads[1]);
                        acc = acc.wrapping_sub(s);
                    }
                    acc
                })
                .collect();
            chan.send(&u64s_to_bytes(&ct))?;
            Ok(shares)
        }
    }
}

/// One party's share of a Beaver triple `c = a * b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TripleShare {
    pub a: u64,
    pub b: u64,
    pub c: u64,
}

/// `count` random triples: both cross terms go through [`gilboa_mul`] with
/// the OT sender supplying `(a_s, b_s)` and the receiver `(b_r, a_r)`.
pub fn triple_gen<T: Transport, R: RngCore>(
    chan: &mut MpcChannel<T>,
    pool: &mut OtPool,
    count: usize,
    rng: &mut R,
) -> Result<Vec<TripleShare>> {
    let need = count as u64 * OTS_PER_TRIPLE;
    if need > pool.remaining() {
        return Err(MpcError::Exhausted {
            need,
            have: pool.remaining(),
        });
    }
    let a: Vec<u64> = (0..count).map(|_| rng.gen()).collect();
    let b: Vec<u64> = (0..count).map(|_| rng.gen()).collect();
    let inputs: Vec<u64> = match pool.role {
        MpcRole::OtSender => a.iter().chain(&b).copied().collect(),
        MpcRole::OtReceiver => b.iter().chain(&a).copied().collect(),
    };
    let z = gilboa_mul(chan, pool, &inputs, rng)?;
    Ok((0..count)
        .map(|i| TripleShare {
            a: a[i],
            b: b[i],
            c: a[i].wrapping_mul(b[i]).wrapping_add(z[i]).wrapping_add(z[count + i]),
        })
        .collect())
}

pub fn reconstruct(x: u64, y: u64) -> u64 {
    x.wrapping_add(y)
}

/// Splits `v` into two additive shares.
pub fn share<R: RngCore>(v: u64, rng: &mut R) -> (u64, u64) {
    let r = rng.next_u64();
    (v.wrapping_sub(r), r)
}

/// The owner sends a random mask per element and keeps `v - mask`; the
/// other side passes `None` and learns its mask share.
pub fn share_input<T: Transport, R: RngCore>(
    chan: &mut MpcChannel<T>,
    values: Option<&[u64]>,
    len: usize,
    rng: &mut R,
) -> Result<Vec<u64>> {
    match values {
        Some(v) => {
            let masks: Vec<u64> = (0..v.len()).map(|_| rng.next_u64()).collect();
            chan.send(&u64s_to_bytes(&masks))?;
            Ok(v.iter().zip(&masks).map(|(x, r)| x.wrapping_sub(*r)).collect())
        }
        None => {
            let m = bytes_to_u64s(&chan.recv()?)?;
            if m.len() != len {
                return Err(MpcError::Shape(format!("expected {len} shares, got {}", m.len())));
            }
            Ok(m)
        }
    }
}

// ---------------------------------------------------------------- fixed point

/// Clamps to `[-2^15, 2^15)` and scales by `2^16`.
pub fn encode_fixed(x: f64) -> u64 {
    let hi = 32768.0 - 1.0 / 65536.0;
    (x.clamp(-32768.0, hi) * 65536.0).round() as i64 as u64
}

pub fn decode_fixed(v: u64) -> f64 {
    v as i64 as f64 / 65536.0
}

/// Squared distances carry `2 * FRAC_BITS` fractional bits.
pub fn decode_distance(d: u64) -> f64 {
    d as f64 / (1u64 << (2 * FRAC_BITS)) as f64
}

pub fn encode_distance(t: f64) -> u64 {
    (t.max(0.0) * (1u64 << (2 * FRAC_BITS)) as f64).round() as u64
}

/// Plaintext reference for one entry, in ring arithmetic.
pub fn plain_distance(u: &[u64], v: &[u64]) -> u64 {
    u.iter().zip(v).fold(0u64, |acc, (a, b)| {
        let d = a.wrapping_sub(*b);
        acc.wrapping_add(d.wrapping_mul(d))
    })
}

// ---------------------------------------------------------------- matching

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchOutcome {
    /// Revealed squared distances, one per database row.
    pub distances: Vec<u64>,
    pub verdicts: Vec<bool>,
    pub multiplications: u64,
    pub additions: u64,
}

/// Squared Euclidean distance of the shared template to every shared row,
/// N Beaver products and 2N-1 additions per row. Distances are opened and
/// compared with `threshold` in the clear.
pub fn match_fingerprint<T: Transport>(
    chan: &mut MpcChannel<T>,
    role: MpcRole,
    template: &[u64],
    db: &[Vec<u64>],
    triples: &[TripleShare],
    threshold: u64,
) -> Result<MatchOutcome> {
    let n = template.len();
    if let Some(row) = db.iter().find(|r| r.len() != n) {
        return Err(MpcError::Shape(format!("row of {} features, template has {n}", row.len())));
    }
    let shape = u64s_to_bytes(&[db.len() as u64, n as u64]);
    let peer = chan.exchange(role, &shape)?;
    if peer != shape {
        return Err(MpcError::Shape(format!("peer shares have shape {:?}", bytes_to_u64s(&peer)?)));
    }
    let total = db.len() * n;
    if triples.len() < total {
        return Err(MpcError::Exhausted {
            need: total as u64,
            have: triples.len() as u64,
        });
    }
    let mut additions = 0u64;
    let mut x = Vec::with_capacity(total);
    for row in db {
        for (u, v) in template.iter().zip(row) {
            x.push(u.wrapping_sub(*v));
            additions += 1;
        }
    }
    // open e = x - a and f = x - b
    let mut ef = Vec::with_capacity(2 * total);
    for (xi, t) in x.iter().zip(triples) {
        ef.push(xi.wrapping_sub(t.a));
        ef.push(xi.wrapping_sub(t.b));
    }
    let peer = bytes_to_u64s(&chan.exchange(role, &u64s_to_bytes(&ef))?)?;
    if peer.len() != ef.len() {
        return Err(MpcError::Malformed("opening length"));
    }
    let mut dist = Vec::with_capacity(db.len());
    for m in 0..db.len() {
        let mut acc = 0u64;
        for i in 0..n {
            let k = m * n + i;
            let (e, f) = (ef[2 * k].wrapping_add(peer[2 * k]), ef[2 * k + 1].wrapping_add(peer[2 * k + 1]));
            let t = &triples[k];
            let mut z = t.c.wrapping_add(e.wrapping_mul(t.b)).wrapping_add(f.wrapping_mul(t.a));
            if role == MpcRole::OtSender {
                z = z.wrapping_add(e.wrapping_mul(f));
            }
            if i == 0 {
                acc = z;
            } else {
                acc = acc.wrapping_add(z);
                additions += 1;
            }
        }
        dist.push(acc);
    }
    let peer = bytes_to_u64s(&chan.exchange(role, &u64s_to_bytes(&dist))?)?;
    if peer.len() != dist.len() {
        return Err(MpcError::Malformed("distance opening"));
    }
    let distances: Vec<u64> = dist.iter().zip(&peer).map(|(a, b)| a.wrapping_add(*b)).collect();
    Ok(MatchOutcome {
        verdicts: distances.iter().map(|d| *d <= threshold).collect(),
        distances,
        multiplications: total as u64,
        additions,
    })
}

// ---------------------------------------------------------------- files

/// `M x N` ring elements. A template is a database with one row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FingerprintDb {
    pub n: usize,
    pub rows: Vec<Vec<u64>>,
}

impl FingerprintDb {
    pub fn new(rows: Vec<Vec<u64>>) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(MpcError::Shape("ragged or empty rows".into()));
        }
        Ok(Self { n, rows })
    }

    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows.iter().map(|r| r.iter().map(|&x| encode_fixed(x)).collect()).collect())
    }

    pub fn m(&self) -> usize {
        self.rows.len()
    }

    pub fn is_recommended_length(&self) -> bool {
        RECOMMENDED_N.contains(&self.n)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = DB_MAGIC.to_vec();
        out.extend((self.m() as u32).to_be_bytes());
        out.extend((self.n as u32).to_be_bytes());
        for r in &self.rows {
            out.extend(u64s_to_bytes(r));
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let bad = |m: &str| MpcError::File(m.to_string());
        if b.len() < 16 || &b[..8] != DB_MAGIC {
            return Err(bad("missing QOTFPDB1 header"));
        }
        let m = u32::from_be_bytes(b[8..12].try_into().unwrap()) as usize;
        let n = u32::from_be_bytes(b[12..16].try_into().unwrap()) as usize;
        if b.len() != 16 + 8 * m * n {
            return Err(bad("body length does not match the header"));
        }
        let vals = bytes_to_u64s(&b[16..])?;
        Self::new(vals.chunks(n.max(1)).map(<[u64]>::to_vec).collect())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let b = fs::read(path).map_err(|e| MpcError::File(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&b)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| MpcError::File(format!("{}: {e}", path.display())))
    }

    /// Two share files of the same shape.
    pub fn split<R: RngCore>(&self, rng: &mut R) -> (Self, Self) {
        let mut a = self.clone();
        let mut b = self.clone();
        for (ra, rb) in a.rows.iter_mut().zip(&mut b.rows) {
            for (x, y) in ra.iter_mut().zip(rb.iter_mut()) {
                (*x, *y) = share(*x, rng);
            }
        }
        (a, b)
    }
}

// ---------------------------------------------------------------- driver

/// What a party contributes to a match.
#[derive(Debug, Clone)]
pub enum MatchInput {
    Template(Vec<u64>),
    Database(FingerprintDb),
}

#[derive(Debug, Clone)]
pub struct MatchReport {
    pub outcome: MatchOutcome,
    pub m: usize,
    pub n: usize,
    pub ledger: OtLedger,
    pub bytes_sent: u64,
    pub bytes_recv: u64,
    pub secs_extend: f64,
    pub secs_triples: f64,
    pub secs_online: f64,
}

/// Full two-party match: agree on the shape, extend the base OTs into
/// exactly enough transfers, share inputs, make triples, evaluate.
pub fn run_match<T: Transport>(
    chan: &mut MpcChannel<T>,
    base: &ExtBase,
    ledger: OtLedger,
    input: &MatchInput,
    threshold: u64,
    seed: u64,
) -> Result<MatchReport> {
    let role = base.role();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mine = match input {
        MatchInput::Template(t) => [0, 1, t.len() as u64],
        MatchInput::Database(d) => [1, d.m() as u64, d.n as u64],
    };
    let theirs = bytes_to_u64s(&chan.exchange(role, &u64s_to_bytes(&mine))?)?;
    if theirs.len() != 3 || theirs[0] == mine[0] || theirs[2] != mine[2] {
        return Err(MpcError::Shape(format!("local {mine:?}, peer {theirs:?}")));
    }
    let (m, n) = if mine[0] == 1 { (mine[1], mine[2]) } else { (theirs[1], theirs[2]) };
    let (m, n) = (m as usize, n as usize);

    let t0 = Instant::now();
    let mut pool = OtPool::extend(chan, base, m * n * OTS_PER_TRIPLE as usize, ledger, &mut rng)?;
    let secs_extend = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let triples = triple_gen(chan, &mut pool, m * n, &mut rng)?;
    let secs_triples = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    // the template owner shares first, then the database owner
    let (tpl, db) = match input {
        MatchInput::Template(t) => {
            let tpl = share_input(chan, Some(t), n, &mut rng)?;
            let flat = share_input(chan, None, m * n, &mut rng)?;
            (tpl, flat)
        }
        MatchInput::Database(d) => {
            let tpl = share_input(chan, None, n, &mut rng)?;
            let flat: Vec<u64> = d.rows.concat();
            (tpl, share_input(chan, Some(&flat), m * n, &mut rng)?)
        }
    };
    let rows: Vec<Vec<u64>> = db.chunks(n).map(<[u64]>::to_vec).collect();
    let outcome = match_fingerprint(chan, role, &tpl, &rows, &triples, threshold)?;
    Ok(MatchReport {
        outcome,
        m,
        n,
        ledger: pool.ledger.clone(),
        bytes_sent: chan.bytes_sent,
        bytes_recv: chan.bytes_recv,
        secs_extend,
        secs_triples,
        secs_online: t2.elapsed().as_secs_f64(),
    })
}

/// Trusted-dealer base transfers for tests and offline demos, in place of
/// a quantum run: `(sender view, receiver view)` of 128 ROTs.
pub fn dealer_rots(seed: u64, len_bits: usize) -> (Vec<RotPair>, Vec<RotPair>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let rand_bits = |rng: &mut ChaCha20Rng| BitString::from_fn(len_bits, |_| rng.gen());
    (0..BASE_OTS)
        .map(|_| {
            let r0 = rand_bits(&mut rng);
            let r1 = rand_bits(&mut rng);
            let c: bool = rng.gen();
            let rc = if c { r1.clone() } else { r0.clone() };
            (RotPair::Sender { r0, r1 }, RotPair::Receiver { rc, c })
        })
        .unzip()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{loopback_pair, Loopback};
    use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};

    fn bases(seed: u64) -> (ExtBase, ExtBase) {
        let (s, r) = dealer_rots(seed, 128);
        // quantum sender's view feeds the extended-OT receiver
        (ExtBase::from_rots(&r).unwrap(), ExtBase::from_rots(&s).unwrap())
    }

    fn bits(v: u64, len: usize) -> BitString {
        BitString::from_fn(len, |i| v >> (len - 1 - i) & 1 == 1)
    }

    /// Runs `f` for both roles on a loopback pair.
    fn both<A: Send, B: Send>(
        fa: impl FnOnce(&mut MpcChannel<Loopback>) -> A + Send,
        fb: impl FnOnce(&mut MpcChannel<Loopback>) -> B + Send,
    ) -> (A, B) {
        let (ta, tb) = loopback_pair();
        let (mut ca, mut cb) = (MpcChannel::new(ta), MpcChannel::new(tb));
        std::thread::scope(|s| {
            let h = s.spawn(move || fa(&mut ca));
            let b = fb(&mut cb);
            (h.join().unwrap(), b)
        })
    }

    fn pools(seed: u64, count: usize) -> (OtPool, OtPool) {
        let (bs, br) = bases(seed);
        let (a, b) = both(
            |c| OtPool::extend(c, &bs, count, OtLedger::default(), &mut ChaCha20Rng::seed_from_u64(1)),
            |c| OtPool::extend(c, &br, count, OtLedger::default(), &mut ChaCha20Rng::seed_from_u64(2)),
        );
        (a.unwrap(), b.unwrap())
    }

    #[test]
    fn rot_to_ot_exhaustive() {
        let mut cases = 0;
        for c in [false, true] {
            for b in [false, true] {
                for m0 in 0..4u64 {
                    for m1 in 0..4u64 {
                        let (r0, r1) = (bits(0b01, 2), bits(0b10, 2));
                        let rc = if c { r1.clone() } else { r0.clone() };
                        let s = RotPair::Sender { r0: r0.clone(), r1: r1.clone() };
                        let r = RotPair::Receiver { rc: rc.clone(), c };
                        let (m0b, m1b) = (bits(m0, 2), bits(m1, 2));
                        let got = rot_to_ot(&s, &r, &m0b, &m1b, b).unwrap();
                        assert_eq!(got, if b { m1b.clone() } else { m0b.clone() });
                        // the other ciphertext stays masked by r0 ^ r1
                        let ct = ot_respond(&s, ot_choose(&r, b), &m0b, &m1b).unwrap();
                        let other = if b { &m0b } else { &m1b };
                        assert_eq!(ct[!b as usize].xor(&rc), other.xor(&r0.xor(&r1)));
                        cases += 1;
                    }
                }
            }
        }
        assert_eq!(cases, 64);
    }

    #[test]
    fn aligned_choice_sends_zero_correction() {
        let (s, r) = dealer_rots(1, 16);
        let RotPair::Receiver { c, .. } = r[0] else { unreachable!() };
        assert!(!ot_choose(&r[0], c));
        let m = bits(0xBEEF, 16);
        assert_eq!(rot_to_ot(&s[0], &r[0], &m, &bits(0, 16), false).unwrap().len(), 16);
        assert_eq!(
            ot_respond(&s[0], false, &bits(1, 8), &m),
            Err(MpcError::Length(8, 16))
        );
    }

    #[test]
    fn correction_bit_is_uniform() {
        let (_, r) = dealer_rots(3, 8);
        let ones = r.iter().filter(|x| ot_choose(x, true)).count();
        assert!((40..=88).contains(&ones), "{ones}");
    }

    #[test]
    fn extension_matches_oracle() {
        for (k, len) in [(1usize, 128usize), (256, 128), (512, 64), (77, 13)] {
            let (bs, br) = bases(k as u64);
            let mut rng = ChaCha20Rng::seed_from_u64(9);
            let msgs: Vec<[BitString; 2]> = (0..k)
                .map(|_| [0, 1].map(|_| BitString::from_fn(len, |_| rng.gen())))
                .collect();
            let choices: Vec<bool> = (0..k).map(|_| rng.gen()).collect();
            let (mut la, mut lb) = (OtLedger::default(), OtLedger::default());
            let out = ot_extend(&bs, &br, &msgs, &choices, (&mut la, &mut lb)).unwrap();
            for j in 0..k {
                assert_eq!(out[j], msgs[j][choices[j] as usize]);
                assert_ne!(out[j], msgs[j][!choices[j] as usize]);
            }
            assert_eq!((la.supplied, lb.supplied, la.base_consumed), (k as u64, k as u64, 128));
        }
    }

    #[test]
    fn base_reuse_and_count_guards() {
        let (bs, br) = bases(4);
        let msgs = vec![[bits(1, 8), bits(2, 8)]];
        let (mut la, mut lb) = (OtLedger::default(), OtLedger::default());
        ot_extend(&bs, &br, &msgs, &[true], (&mut la, &mut lb)).unwrap();
        assert_eq!(
            ot_extend(&bs, &br, &msgs, &[true], (&mut la, &mut lb)),
            Err(MpcError::BaseReused)
        );
        let (s, _) = dealer_rots(5, 128);
        assert_eq!(
            ExtBase::from_rots(&s[..127]),
            Err(MpcError::BaseCount { need: 128, got: 127 })
        );
        let (s2, r2) = dealer_rots(6, 128);
        let mut mixed = s2;
        mixed[5] = r2[5].clone();
        assert_eq!(ExtBase::from_rots(&mixed), Err(MpcError::BaseMixed));
    }

    #[test]
    fn gilboa_products_reconstruct() {
        let n = 1000;
        let (mut pa, mut pb) = pools(7, n * 64);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let x: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
        let mut y: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
        y[0] = 0;
        let (za, zb) = both(
            |c| gilboa_mul(c, &mut pa, &x, &mut ChaCha20Rng::seed_from_u64(1)).unwrap(),
            |c| gilboa_mul(c, &mut pb, &y, &mut ChaCha20Rng::seed_from_u64(2)).unwrap(),
        );
        for i in 0..n {
            assert_eq!(reconstruct(za[i], zb[i]), x[i].wrapping_mul(y[i]));
        }
        assert_eq!(reconstruct(za[0], zb[0]), 0);
        assert_eq!(pa.remaining(), 0);
        assert_eq!(pa.ledger.consumed, pa.ledger.supplied);
    }

    #[test]
    fn triples_are_consistent_and_exhaustion_is_reported() {
        let (mut pa, mut pb) = pools(9, 100 * 128);
        let (ta, tb) = both(
            |c| triple_gen(c, &mut pa, 100, &mut ChaCha20Rng::seed_from_u64(3)).unwrap(),
            |c| triple_gen(c, &mut pb, 100, &mut ChaCha20Rng::seed_from_u64(4)).unwrap(),
        );
        for (x, y) in ta.iter().zip(&tb) {
            let (a, b) = (reconstruct(x.a, y.a), reconstruct(x.b, y.b));
            assert_eq!(reconstruct(x.c, y.c), a.wrapping_mul(b));
        }
        let (ra, _) = both(
            |c| triple_gen(c, &mut pa, 1, &mut ChaCha20Rng::seed_from_u64(3)),
            |_| (),
        );
        assert_eq!(ra, Err(MpcError::Exhausted { need: 128, have: 0 }));
    }

    #[test]
    fn fixed_point_encoding() {
        assert_eq!(encode_fixed(1.0), 1 << 16);
        assert_eq!(decode_fixed(encode_fixed(-2.5)), -2.5);
        assert_eq!(decode_fixed(encode_fixed(1e9)), 32768.0 - 1.0 / 65536.0);
        assert_eq!(decode_fixed(encode_fixed(-1e9)), -32768.0);
        let d = plain_distance(&[encode_fixed(1.5)], &[encode_fixed(-0.5)]);
        assert_eq!(decode_distance(d), 4.0);
        assert_eq!(encode_distance(4.0), d);
    }

    fn toy_db(seed: u64, m: usize, n: usize) -> (Vec<u64>, FingerprintDb) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let feat = |rng: &mut ChaCha20Rng| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let tpl = feat(&mut rng);
        let mut rows: Vec<Vec<f64>> = (0..m).map(|_| feat(&mut rng)).collect();
        rows[3] = tpl.clone();
        let tpl = tpl.into_iter().map(encode_fixed).collect();
        (tpl, FingerprintDb::from_features(&rows).unwrap())
    }

    #[test]
    fn match_equals_plaintext() {
        let (tpl, db) = toy_db(1, 10, 16);
        let (bs, br) = bases(11);
        let thr = encode_distance(1e-6);
        let ti = MatchInput::Template(tpl.clone());
        let di = MatchInput::Database(db.clone());
        let (ra, rb) = both(
            |c| run_match(c, &bs, OtLedger::default(), &ti, thr, 1).unwrap(),
            |c| run_match(c, &br, OtLedger::default(), &di, thr, 2).unwrap(),
        );
        let want: Vec<u64> = db.rows.iter().map(|r| plain_distance(&tpl, r)).collect();
        assert_eq!(ra.outcome, rb.outcome);
        assert_eq!(ra.outcome.distances, want);
        assert_eq!(ra.outcome.distances[3], 0);
        assert_eq!(ra.outcome.verdicts.iter().filter(|v| **v).count(), 1);
        assert!(ra.outcome.verdicts[3]);
        assert_eq!(ra.outcome.multiplications, 160);
        assert_eq!(ra.outcome.additions, 10 * (2 * 16 - 1));
        assert_eq!(ra.ledger.consumed, 160 * 128);
        assert_eq!(ra.ledger.consumed, ra.ledger.supplied);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let (_, db) = toy_db(2, 4, 16);
        let (bs, br) = bases(12);
        let ti = MatchInput::Template(vec![0; 8]);
        let di = MatchInput::Database(db);
        let (ra, rb) = both(
            |c| run_match(c, &bs, OtLedger::default(), &ti, 0, 1),
            |c| run_match(c, &br, OtLedger::default(), &di, 0, 2),
        );
        assert!(matches!(ra, Err(MpcError::Shape(_))));
        assert!(matches!(rb, Err(MpcError::Shape(_))));
    }

    #[test]
    fn db_file_round_trip() {
        let (_, db) = toy_db(3, 5, 16);
        let b = db.to_bytes();
        assert_eq!(&b[..8], b"QOTFPDB1");
        assert_eq!(b.len(), 16 + 8 * 5 * 16);
        assert_eq!(FingerprintDb::from_bytes(&b).unwrap(), db);
        assert!(FingerprintDb::from_bytes(&b[..b.len() - 1]).is_err());
        let (x, y) = db.split(&mut ChaCha20Rng::seed_from_u64(1));
        assert_eq!((x.m(), x.n), (db.m(), db.n));
        assert_eq!(reconstruct(x.rows[2][7], y.rows[2][7]), db.rows[2][7]);
        assert!(!db.is_recommended_length());
    }

    #[test]
    fn channel_chunks_long_messages() {
        let msg: Vec<u8> = (0..CHUNK * 2 + 5).map(|i| i as u8).collect();
        let m2 = msg.clone();
        let (_, got) = both(move |c| c.send(&m2).unwrap(), |c| c.recv().unwrap());
        assert_eq!(got, msg);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn shares_reconstruct(v: u64, seed: u64) {
            let (a, b) = share(v, &mut ChaCha20Rng::seed_from_u64(seed));
            prop_assert_eq!(reconstruct(a, b), v);
        }

        #[test]
        fn fixed_point_round_trips_on_grid(k in -(1i64 << 31)..(1i64 << 31)) {
            let x = k as f64 / 65536.0;
            prop_assert_eq!(decode_fixed(encode_fixed(x)), x);
        }
    }
}
