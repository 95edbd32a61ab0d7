//! Statistical stand-in for the entangled-photon source and detectors.
//!
//! Each coincidence carries a basis bit (0 = HV, 1 = DA) and an outcome bit
//! per party. Loss lowers the true-coincidence rate while a constant
//! accidental floor (uniformly random outcomes) pushes the QBER towards 1/2.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::bits::BitString;
use crate::Party;

#[derive(Debug, Error)]
pub enum RawFileError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported raw file version {0}")]
    Version(u16),
    #[error("bad party byte {0}")]
    Party(u8),
    #[error("truncated raw file: expected {expected} body bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("empty block")]
    Empty,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn qber_from_visibility(v: f64) -> f64 {
    (1.0 - v) / 2.0
}

/// Loss at which the mean QBER hits the protocol threshold.
pub const CALIBRATION_LOSS_DB: f64 = 8.47;
pub const CALIBRATION_QBER: f64 = 0.014;
/// Fiber length that corresponds to the calibration loss.
pub const CALIBRATION_FIBER_KM: f64 = 25.8;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelModel {
    /// Total coincidence rate (true plus accidental) at 0 dB.
    pub base_coincidence_hz: f64,
    /// Observed per-basis QBER at 0 dB.
    pub qber_hv_0: f64,
    pub qber_da_0: f64,
    /// Accidental-to-true coincidence ratio at 0 dB.
    pub accidental_floor: f64,
    /// Operating point used by `generate_block`.
    pub loss_db: f64,
    pub fiber_db_per_km: f64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self::calibrated(28_300.0, 0.005, 0.012, CALIBRATION_LOSS_DB, CALIBRATION_QBER)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelPoint {
    pub coincidence_hz: f64,
    pub qber_hv: f64,
    pub qber_da: f64,
}

impl ChannelPoint {
    pub fn mean_qber(&self) -> f64 {
        0.5 * (self.qber_hv + self.qber_da)
    }

    pub fn qber(&self, basis: bool) -> f64 {
        if basis {
            self.qber_da
        } else {
            self.qber_hv
        }
    }
}

fn transmittance(loss_db: f64) -> f64 {
    10f64.powf(-loss_db / 10.0)
}

impl ChannelModel {
    /// Solves for the accidental ratio so the mean QBER reaches `target_qber`
    /// at `target_loss_db`, given the 0 dB per-basis values.
    pub fn calibrated(
        base_coincidence_hz: f64,
        qber_hv_0: f64,
        qber_da_0: f64,
        target_loss_db: f64,
        target_qber: f64,
    ) -> Self {
        let q0 = 0.5 * (qber_hv_0 + qber_da_0);
        let t = transmittance(target_loss_db);
        let x = (target_qber - q0) * t / (0.5 - target_qber - (0.5 - q0) * t);
        Self {
            base_coincidence_hz,
            qber_hv_0,
            qber_da_0,
            accidental_floor: x.max(0.0),
            loss_db: 0.0,
            fiber_db_per_km: target_loss_db / CALIBRATION_FIBER_KM,
        }
    }

    pub fn noiseless() -> Self {
        Self {
            qber_hv_0: 0.0,
            qber_da_0: 0.0,
            accidental_floor: 0.0,
            ..Self::default()
        }
    }

    /// Flat QBER in both bases, independent of loss.
    pub fn with_qber(q: f64) -> Self {
        Self {
            qber_hv_0: q,
            qber_da_0: q,
            accidental_floor: 0.0,
            ..Self::default()
        }
    }

    pub fn at_loss(mut self, loss_db: f64) -> Self {
        self.loss_db = loss_db;
        self
    }

    fn intrinsic(&self, q0: f64) -> f64 {
        let x = self.accidental_floor;
        q0 * (1.0 + x) - 0.5 * x
    }

    pub fn channel_at(&self, loss_db: f64) -> ChannelPoint {
        let loss_db = loss_db.max(0.0);
        let x = self.accidental_floor;
        let t = transmittance(loss_db);
        let true_hz = self.base_coincidence_hz / (1.0 + x) * t;
        let acc_hz = self.base_coincidence_hz * x / (1.0 + x);
        let q = |q0: f64| {
            if true_hz + acc_hz == 0.0 {
                0.5
            } else {
                (self.intrinsic(q0) * t + 0.5 * x) / (t + x)
            }
        };
        ChannelPoint {
            coincidence_hz: true_hz + acc_hz,
            qber_hv: q(self.qber_hv_0),
            qber_da: q(self.qber_da_0),
        }
    }

    pub fn fiber_km(&self, loss_db: f64) -> f64 {
        loss_db / self.fiber_db_per_km
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawEventBlock {
    pub party: Party,
    pub bases: BitString,
    pub outcomes: BitString,
    pub block_id: u64,
    /// Short fingerprint of the generating seed; not stored in files.
    pub seed_tag: u64,
}

impl RawEventBlock {
    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }

    pub fn slice(&self, start: usize, end: usize) -> RawEventBlock {
        RawEventBlock {
            party: self.party,
            bases: self.bases.slice(start, end),
            outcomes: self.outcomes.slice(start, end),
            block_id: self.block_id,
            seed_tag: self.seed_tag,
        }
    }
}

fn seed_tag(seed: &[u8; 32]) -> u64 {
    u64::from_be_bytes(seed[..8].try_into().unwrap())
}

pub fn generate_block(
    model: &ChannelModel,
    n0: usize,
    seed: [u8; 32],
) -> (RawEventBlock, RawEventBlock) {
    generate_block_with_id(model, n0, seed, 0)
}

pub fn generate_block_with_id(
    model: &ChannelModel,
    n0: usize,
    seed: [u8; 32],
    block_id: u64,
) -> (RawEventBlock, RawEventBlock) {
    let point = model.channel_at(model.loss_db);
    let mut rng = ChaCha20Rng::from_seed(seed);
    let mut ba = BitString::zeros(n0);
    let mut bb = BitString::zeros(n0);
    let mut xa = BitString::zeros(n0);
    let mut xb = BitString::zeros(n0);
    for i in 0..n0 {
        let r: u8 = rng.gen();
        let (ta, tb, a) = (r & 1 == 1, r & 2 == 2, r & 4 == 4);
        let b = if ta == tb {
            let q = point.qber(ta);
            a ^ (q > 0.0 && rng.gen_bool(q))
        } else {
            r & 8 == 8
        };
        ba.set(i, ta);
        bb.set(i, tb);
        xa.set(i, a);
        xb.set(i, b);
    }
    let tag = seed_tag(&seed);
    (
        RawEventBlock {
            party: Party::Sender,
            bases: ba,
            outcomes: xa,
            block_id,
            seed_tag: tag,
        },
        RawEventBlock {
            party: Party::Receiver,
            bases: bb,
            outcomes: xb,
            block_id,
            seed_tag: tag,
        },
    )
}

pub const RAW_MAGIC: &[u8; 8] = b"QOTRAW1\0";
pub const RAW_VERSION: u16 = 1;

pub fn encode_raw(block: &RawEventBlock) -> Result<Vec<u8>, RawFileError> {
    let n = block.len();
    if n == 0 {
        return Err(RawFileError::Empty);
    }
    if block.outcomes.len() != n {
        return Err(RawFileError::Length(format!(
            "{} bases vs {} outcomes",
            n,
            block.outcomes.len()
        )));
    }
    let count = u32::try_from(n).map_err(|_| RawFileError::Length(format!("{n} events")))?;
    let mut out = Vec::with_capacity(16 + (2 * n).div_ceil(8));
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&RAW_VERSION.to_be_bytes());
    out.push(block.party as u8);
    out.push(0);
    out.extend_from_slice(&count.to_be_bytes());
    let mut byte = 0u8;
    for i in 0..n {
        let pair = ((block.bases.get(i) as u8) << 1) | block.outcomes.get(i) as u8;
        byte |= pair << (6 - 2 * (i % 4));
        if i % 4 == 3 {
            out.push(byte);
            byte = 0;
        }
    }
    if n % 4 != 0 {
        out.push(byte);
    }
    Ok(out)
}

pub fn decode_raw(bytes: &[u8], block_id: u64) -> Result<RawEventBlock, RawFileError> {
    if bytes.len() < 16 {
        return Err(RawFileError::Truncated {
            expected: 16,
            found: bytes.len(),
        });
    }
    if &bytes[..8] != RAW_MAGIC {
        return Err(RawFileError::BadMagic);
    }
    let version = u16::from_be_bytes([bytes[8], bytes[9]]);
    if version != RAW_VERSION {
        return Err(RawFileError::Version(version));
    }
    let party = Party::from_u8(bytes[10]).ok_or(RawFileError::Party(bytes[10]))?;
    let n = u32::from_be_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if n == 0 {
        return Err(RawFileError::Empty);
    }
    let body = &bytes[16..];
    let expected = (2 * n).div_ceil(8);
    if body.len() < expected {
        return Err(RawFileError::Truncated {
            expected,
            found: body.len(),
        });
    }
    if body.len() > expected {
        return Err(RawFileError::Length(format!(
            "{} trailing bytes",
            body.len() - expected
        )));
    }
    let mut bases = BitString::zeros(n);
    let mut outcomes = BitString::zeros(n);
    for i in 0..n {
        let pair = (body[i / 4] >> (6 - 2 * (i % 4))) & 3;
        bases.set(i, pair & 2 != 0);
        outcomes.set(i, pair & 1 != 0);
    }
    if n % 4 != 0 && body[expected - 1] & (0xFFu8 >> (2 * (n % 4))) != 0 {
        return Err(RawFileError::Length("nonzero padding".into()));
    }
    Ok(RawEventBlock {
        party,
        bases,
        outcomes,
        block_id,
        seed_tag: 0,
    })
}

pub fn raw_file_name(block_id: u64, party: Party) -> String {
    format!("block_{block_id}_{}.qraw", party.name())
}

/// Parses `block_<id>_<party>.qraw`.
pub fn parse_raw_file_name(name: &str) -> Option<(u64, Party)> {
    let stem = name.strip_prefix("block_")?.strip_suffix(".qraw")?;
    let (id, party) = stem.split_once('_')?;
    Some((id.parse().ok()?, Party::from_name(party)?))
}

/// Writes the block into `dir` under its canonical file name.
pub fn write_raw(dir: &Path, block: &RawEventBlock) -> Result<PathBuf, RawFileError> {
    let bytes = encode_raw(block)?;
    let path = dir.join(raw_file_name(block.block_id, block.party));
    // rename so a reader polling the directory never sees a partial file
    let tmp = path.with_extension("qraw.part");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, &path)?;
    Ok(path)
}

pub fn read_raw(path: &Path) -> Result<RawEventBlock, RawFileError> {
    let bytes = fs::read(path)?;
    let id = path
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(parse_raw_file_name)
        .map(|(id, _)| id)
        .unwrap_or(0);
    decode_raw(&bytes, id)
}
