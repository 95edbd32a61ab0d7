//! One party's pipeline endpoint: stage sequencing, authenticated stage
//! boundaries, the OT session and the QKD refill rounds.
//!
//! Every stage runs under its own one-time MAC context. A stage ends with a
//! boundary exchange: STATUS (absorbed), then AUTH_TAG and AUTH_ACK (not
//! absorbed). A local failure skips straight to the boundary, so a corrupted
//! frame always surfaces as `auth_fail` rather than as whatever symptom it
//! caused downstream.

use std::fmt;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::auth::{verify_exchange, AuthContext, SecretStore, Tag, KEY_QUOTA};
use crate::bits::BitString;
use crate::cascade::{
    measure_efficiency, receiver_verify, seed_from, sender_verify_msg, CascadeConfig, CascadeError,
    CascadeReceiver, CascadeSender, ParityMsg, PassStats, VerifyMsg,
};
use crate::commitment::{commit_batch, sample_public, Commitment, Opening, PublicString, COMMIT_BYTES, OPENING_BYTES};
use crate::otcore::{
    build_split, choose_test_set, complement, decode_index_set, decode_pair, encode_index_set, encode_pair,
    estimate, extract_receiver, extract_sender, validate_pair, AbortReason, OtResult, TestSelection, Verdict,
};
use crate::pa::{amplify_receiver, amplify_sender, toeplitz_hash, ToeplitzSeed};
use crate::params::{max_secure_length, ProtocolParams};
use crate::qkdlane::{choose_sample, extractable_bits, final_length, sift_indices, split_sample, QkdBuffer, QkdConfig};
use crate::qsim::RawEventBlock;
use crate::transport::{handshake, tags, Frame, Handshake, Lane, Transport, TransportError, TypeTag, DEFAULT_TIMEOUT};
use crate::Party;

use super::source::{Mux, RawSource, Resizer};

/// MAC contexts one OT session consumes (commit, open, separate, reconcile,
/// amplify).
pub const OT_STAGES: usize = 5;
/// MAC contexts one QKD round consumes (sift, reconcile, amplify).
pub const QKD_STAGES: usize = 3;
/// Smallest refill worth a round trip.
pub const MIN_REFILL_BITS: u64 = 256;

const COMMIT_CHUNK: usize = 1 << 16;
const OPENING_CHUNK: usize = 1 << 18;
const ACK_OK: u8 = 0xA5;
const ACK_FAIL: u8 = 0x5A;

#[derive(Debug, Clone)]
pub struct EndpointConfig {
    pub role: Party,
    pub params: ProtocolParams,
    pub cascade: CascadeConfig,
    pub qkd: QkdConfig,
    /// How long a stage waits for raw events before giving up.
    pub raw_wait: Duration,
    /// Per-frame receive timeout.
    pub frame_timeout: Duration,
    /// Seeds this party's private randomness (mixed with the role).
    pub seed: [u8; 32],
    /// QKD rounds attempted before an OT session may give up on the budget.
    pub max_qkd_rounds: usize,
}

impl EndpointConfig {
    pub fn new(role: Party, params: ProtocolParams) -> Self {
        Self {
            role,
            params,
            cascade: CascadeConfig::default(),
            qkd: QkdConfig::default(),
            raw_wait: Duration::from_secs(10),
            frame_timeout: DEFAULT_TIMEOUT,
            seed: [0; 32],
            max_qkd_rounds: 8,
        }
    }
}

/// Protocol phases in their mandatory order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    QuantumLoad,
    Commit,
    Open,
    Estimate,
    Separate,
    Reconcile,
    Amplify,
    Done,
    Aborted(AbortReason),
}

impl Phase {
    fn rank(self) -> usize {
        match self {
            Phase::QuantumLoad => 0,
            Phase::Commit => 1,
            Phase::Open => 2,
            Phase::Estimate => 3,
            Phase::Separate => 4,
            Phase::Reconcile => 5,
            Phase::Amplify => 6,
            Phase::Done => 7,
            Phase::Aborted(_) => 8,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::QuantumLoad => "quantum-load",
            Phase::Commit => "commit",
            Phase::Open => "open",
            Phase::Estimate => "estimate",
            Phase::Separate => "separate",
            Phase::Reconcile => "reconcile",
            Phase::Amplify => "amplify",
            Phase::Done => "done",
            Phase::Aborted(_) => "aborted",
        };
        f.write_str(s)
    }
}

/// Phase tracker for one OT session. Transitions move exactly one step
/// forward; `aborted` is reachable from any live phase and is terminal.
#[derive(Debug, Clone)]
pub struct SessionState {
    phase: Phase,
    pub transitions: Vec<(f64, Phase)>,
}

impl SessionState {
    pub fn new(ts: f64) -> Self {
        Self {
            phase: Phase::QuantumLoad,
            transitions: vec![(ts, Phase::QuantumLoad)],
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn advance(&mut self, next: Phase, ts: f64) {
        let ok = match next {
            Phase::Aborted(_) => self.phase.rank() < Phase::Done.rank(),
            _ => next.rank() == self.phase.rank() + 1,
        };
        assert!(ok, "illegal phase transition {} -> {}", self.phase, next);
        self.phase = next;
        self.transitions.push((ts, next));
    }
}

/// One line of the structured session log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub ts: f64,
    pub phase: String,
    pub event: String,
    pub detail: String,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6} {} {} {}", self.ts, self.phase, self.event, self.detail)
    }
}

/// Checks the mandatory OT ordering in one party's log: commitments, test
/// set, openings, basis disclosure, ordered pair. Sessions that never got
/// that far are ignored.
pub fn check_phase_order(log: &[LogRecord]) -> bool {
    const ORDER: [&str; 5] = ["commitments", "test_set", "openings", "theta_a", "ordered_pair"];
    let mut seen: std::collections::HashMap<&str, usize> = Default::default();
    for r in log {
        let Some(sid) = r.detail.split_whitespace().next() else {
            continue;
        };
        if !sid.starts_with("ot#") {
            continue;
        }
        if let Some(k) = ORDER.iter().position(|e| *e == r.event) {
            let prev = seen.entry(sid).or_insert(0);
            if k != *prev {
                return false;
            }
            *prev += 1;
        }
    }
    true
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageRecord {
    pub name: &'static str,
    pub sent_msgs: u64,
    pub sent_bytes: u64,
    pub recv_msgs: u64,
    pub recv_bytes: u64,
    pub secs: f64,
    pub auth_ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionReport {
    pub lane: Lane,
    pub session: u64,
    pub block_id: Option<u64>,
    pub outcome: Result<(), AbortReason>,
    pub p_hat: Option<f64>,
    pub f_actual: Option<f64>,
    pub leak: Option<u64>,
    pub bound: Option<u64>,
    pub cascade_rounds: u64,
    /// Sender-side per-pass Cascade counters (empty at the receiver).
    pub pass_stats: Vec<PassStats>,
    pub stages: Vec<StageRecord>,
    /// Receiver only: its own hash of the uncorrelated position, the best it
    /// can say about `m_{1-c}`.
    pub shadow: Option<BitString>,
    /// Key bytes added to the secret store (QKD rounds).
    pub replenished: usize,
    pub secs: f64,
}

impl SessionReport {
    fn new(lane: Lane, session: u64) -> Self {
        Self {
            lane,
            session,
            block_id: None,
            outcome: Ok(()),
            p_hat: None,
            f_actual: None,
            leak: None,
            bound: None,
            cascade_rounds: 0,
            pass_stats: Vec::new(),
            stages: Vec::new(),
            shadow: None,
            replenished: 0,
            secs: 0.0,
        }
    }
}

/// Aggregates over every report of an endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub ots_done: usize,
    pub ots_aborted: usize,
    pub qkd_rounds: usize,
    pub qber_meas: Option<f64>,
    pub f_meas: Option<f64>,
    pub ot_per_s: f64,
    pub busy_secs: f64,
}

pub fn summarize(reports: &[SessionReport]) -> Summary {
    let ots: Vec<_> = reports.iter().filter(|r| r.lane == Lane::Ot).collect();
    let done: Vec<_> = ots.iter().filter(|r| r.outcome.is_ok()).collect();
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let busy: f64 = reports.iter().map(|r| r.secs).sum();
    Summary {
        ots_done: done.len(),
        ots_aborted: ots.len() - done.len(),
        qkd_rounds: reports.iter().filter(|r| r.lane == Lane::Qkd).count(),
        qber_meas: mean(ots.iter().filter_map(|r| r.p_hat).collect()),
        f_meas: mean(done.iter().filter_map(|r| r.f_actual).collect()),
        ot_per_s: if busy > 0.0 { done.len() as f64 / busy } else { 0.0 },
        busy_secs: busy,
    }
}

/// Outcome of one QKD round that did not abort.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QkdProgress {
    /// Sifted material was buffered but is not yet enough for a refill.
    NeedMore,
    Replenished(usize),
}

/// Why a stage body stopped early.
enum Interrupt {
    Local(AbortReason),
    /// The peer's STATUS arrived while a protocol frame was expected.
    Peer,
    Transport,
}

impl From<AbortReason> for Interrupt {
    fn from(r: AbortReason) -> Self {
        Interrupt::Local(r)
    }
}

impl From<CascadeError> for Interrupt {
    fn from(e: CascadeError) -> Self {
        Interrupt::Local(match e {
            CascadeError::IrFail => AbortReason::IrFail,
            CascadeError::IrStuck(_) => AbortReason::IrStuck,
            CascadeError::Protocol(_) => AbortReason::ProtocolViolation,
        })
    }
}

fn violation() -> Interrupt {
    Interrupt::Local(AbortReason::ProtocolViolation)
}

type Step<T> = Result<T, Interrupt>;

struct Stage {
    name: &'static str,
    lane: Lane,
    session: u64,
    ctx: AuthContext,
    rec: StageRecord,
    started: Instant,
    peer_status: Option<Vec<u8>>,
}

/// Reads big-endian integers off the front of a payload.
struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Step<&'a [u8]> {
        if self.0.len() < n {
            return Err(violation());
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }
    fn u32(&mut self) -> Step<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Step<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.0)
    }
}

fn bits_from(bytes: &[u8], len: usize) -> Step<BitString> {
    if bytes.len() != len.div_ceil(8) {
        return Err(violation());
    }
    BitString::from_bytes(bytes, len).ok_or_else(violation)
}

fn encode_msgs(msgs: &[ParityMsg]) -> Vec<u8> {
    let mut out = (msgs.len() as u32).to_be_bytes().to_vec();
    for m in msgs {
        let b = m.to_bytes();
        out.extend_from_slice(&(b.len() as u32).to_be_bytes());
        out.extend_from_slice(&b);
    }
    out
}

fn decode_msgs(bytes: &[u8]) -> Step<Vec<ParityMsg>> {
    let mut r = Reader(bytes);
    let n = r.u32()? as usize;
    if n > 2 {
        return Err(violation());
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        out.push(ParityMsg::from_bytes(r.take(len)?).map_err(|_| violation())?);
    }
    if !r.rest().is_empty() {
        return Err(violation());
    }
    Ok(out)
}

/// Cascade seed bound to an earlier authenticated tag and the session.
fn cascade_seed(last_tag: &Tag, lane: Lane, session: u64) -> [u8; 32] {
    let mut data = last_tag.to_vec();
    data.push(lane as u8);
    data.extend_from_slice(&session.to_be_bytes());
    seed_from(b"qot-cascade", &data)
}

/// Everything a receiver carries between OT stages.
struct ReceiverOt {
    choice: Option<bool>,
    block: Option<RawEventBlock>,
    openings: Vec<Opening>,
    i_t: Vec<u32>,
    p_hat: f64,
    raw: Option<BitString>,
    other: Option<BitString>,
    c: bool,
    corrected: Option<BitString>,
}

/// Everything a sender carries between OT stages.
struct SenderOt {
    block: Option<RawEventBlock>,
    public: Option<PublicString>,
    commitments: Vec<Commitment>,
    i_t: Vec<u32>,
    p_hat: f64,
    blocks: Option<[BitString; 2]>,
}

/// One party's pipeline instance over one connection.
pub struct Endpoint<T: Transport> {
    pub cfg: EndpointConfig,
    transport: T,
    store: SecretStore,
    source: Box<dyn RawSource>,
    resizer: Resizer,
    mux: Mux,
    rng: ChaCha20Rng,
    next_handle: u64,
    sessions: [u64; 2],
    hello: Option<Handshake>,
    last_tag: Tag,
    qkd_buf: QkdBuffer,
    log: Vec<LogRecord>,
    reports: Vec<SessionReport>,
    broken: bool,
    started: Instant,
}

impl<T: Transport> Endpoint<T> {
    /// Runs the HELLO exchange (version, role, parameter digest). Both HELLO
    /// payloads are bound into the first authenticated stage.
    pub fn connect(
        cfg: EndpointConfig,
        mut transport: T,
        store: SecretStore,
        source: Box<dyn RawSource>,
    ) -> Result<Self, TransportError> {
        transport.set_timeout(cfg.frame_timeout.max(cfg.raw_wait + Duration::from_secs(5)));
        let hello = handshake(&mut transport, cfg.role, &cfg.params.digest())?;
        let mut seed = cfg.seed.to_vec();
        seed.push(cfg.role as u8);
        let rng = ChaCha20Rng::from_seed(seed_from(b"qot-endpoint", &seed));
        let started = Instant::now();
        let mut ep = Self {
            resizer: Resizer::new(cfg.role),
            cfg,
            transport,
            store,
            source,
            mux: Mux::default(),
            rng,
            next_handle: 0,
            sessions: [0; 2],
            hello: Some(hello),
            last_tag: [0; 16],
            qkd_buf: QkdBuffer::default(),
            log: Vec::new(),
            reports: Vec::new(),
            broken: false,
            started,
        };
        ep.note("connect", "handshake", format!("peer={}", ep.cfg.role.peer()));
        Ok(ep)
    }

    pub fn role(&self) -> Party {
        self.cfg.role
    }

    pub fn is_broken(&self) -> bool {
        self.broken
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn reports(&self) -> &[SessionReport] {
        &self.reports
    }

    pub fn summary(&self) -> Summary {
        summarize(&self.reports)
    }

    pub fn mux(&self) -> &Mux {
        &self.mux
    }

    pub fn resizer(&self) -> &Resizer {
        &self.resizer
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn store(&self) -> &SecretStore {
        &self.store
    }

    pub fn qkd_buffer(&self) -> &QkdBuffer {
        &self.qkd_buf
    }

    fn now(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    fn note(&mut self, phase: impl fmt::Display, event: &str, detail: String) {
        let ts = self.now();
        self.log.push(LogRecord {
            ts,
            phase: phase.to_string(),
            event: event.to_string(),
            detail,
        });
    }

    fn enter(&mut self, state: &mut SessionState, next: Phase, sid: u64) {
        let ts = self.now();
        state.advance(next, ts);
        let detail = match next {
            Phase::Aborted(r) => format!("ot#{sid} reason={r}"),
            _ => format!("ot#{sid}"),
        };
        self.note(next, "enter", detail);
    }

    /// Pulls fragments until `n` events are buffered or `raw_wait` passes.
    fn fill(&mut self, n: usize) -> bool {
        let deadline = Instant::now() + self.cfg.raw_wait;
        while self.resizer.buffered() < n {
            match self.source.next_fragment() {
                Ok(Some(f)) => self.resizer.push(&f),
                Ok(None) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(20)),
                Ok(None) => return false,
                Err(e) => {
                    self.note("quantum-load", "raw_error", e.to_string());
                    return false;
                }
            }
        }
        true
    }

    fn peek_raw(&mut self, n: usize) -> Option<RawEventBlock> {
        if self.fill(n) {
            self.resizer.peek(n)
        } else {
            None
        }
    }

    fn consume_raw(&mut self, lane: Lane, block: &RawEventBlock) {
        assert_eq!(block.block_id, self.resizer.next_event(), "raw events consumed out of order");
        self.resizer.discard(block.len());
        self.mux.route(lane, block.block_id, block.len() as u64);
    }

    // ---- stage machinery ----

    fn open_stage(&mut self, name: &'static str, lane: Lane, session: u64) -> Result<Stage, AbortReason> {
        if self.broken {
            return Err(AbortReason::Transport);
        }
        let handle = self.next_handle;
        let mut ctx = AuthContext::open(handle, &mut self.store).map_err(|_| AbortReason::AuthFail)?;
        self.next_handle += 1;
        if let Some(h) = self.hello.take() {
            let role = self.cfg.role;
            ctx.absorb(role, &h.local).expect("fresh context");
            ctx.absorb(role.peer(), &h.remote).expect("fresh context");
        }
        Ok(Stage {
            name,
            lane,
            session,
            ctx,
            rec: StageRecord {
                name,
                ..Default::default()
            },
            started: Instant::now(),
            peer_status: None,
        })
    }

    fn send_raw(&mut self, st: &mut Stage, tag: TypeTag, payload: Vec<u8>, absorb: bool) -> Step<()> {
        let frame = Frame::new(st.lane, tag, st.session, payload);
        if absorb {
            st.ctx.absorb(self.cfg.role, &frame.body()).expect("live context");
        }
        st.rec.sent_msgs += 1;
        st.rec.sent_bytes += frame.payload.len() as u64;
        self.transport.send(&frame).map_err(|e| self.transport_failed(e))
    }

    fn send(&mut self, st: &mut Stage, tag: TypeTag, payload: Vec<u8>) -> Step<()> {
        self.send_raw(st, tag, payload, true)
    }

    fn transport_failed(&mut self, e: TransportError) -> Interrupt {
        self.broken = true;
        self.note("transport", "error", e.to_string());
        Interrupt::Transport
    }

    fn recv_frame(&mut self, st: &mut Stage, absorb: bool) -> Step<Frame> {
        let f = self.transport.recv().map_err(|e| self.transport_failed(e))?;
        if absorb {
            st.ctx.absorb(self.cfg.role.peer(), &f.body()).expect("live context");
        }
        st.rec.recv_msgs += 1;
        st.rec.recv_bytes += f.payload.len() as u64;
        Ok(f)
    }

    /// Receives the next protocol frame, which must carry one of `expect`.
    fn recv_any(&mut self, st: &mut Stage, expect: &[TypeTag]) -> Step<(TypeTag, Vec<u8>)> {
        let f = self.recv_frame(st, true)?;
        if f.tag == tags::STATUS {
            st.peer_status = Some(f.payload);
            return Err(Interrupt::Peer);
        }
        if f.lane != st.lane || f.session != st.session || !expect.contains(&f.tag) {
            return Err(violation());
        }
        Ok((f.tag, f.payload))
    }

    fn recv(&mut self, st: &mut Stage, expect: TypeTag) -> Step<Vec<u8>> {
        Ok(self.recv_any(st, &[expect])?.1)
    }

    /// Stage boundary. Returns the peer's STATUS detail when both parties
    /// finished the stage cleanly and both tags verified.
    fn close_stage(&mut self, mut st: Stage, body: Step<Vec<u8>>, report: &mut SessionReport) -> Result<Vec<u8>, AbortReason> {
        let result = self.boundary(&mut st, body);
        st.rec.secs = st.started.elapsed().as_secs_f64();
        st.rec.auth_ok = !matches!(result, Err(AbortReason::AuthFail) | Err(AbortReason::Transport));
        let detail = match &result {
            Ok(_) => "ok".to_string(),
            Err(r) => r.to_string(),
        };
        self.note(
            st.name,
            "boundary",
            format!("{}#{} handle={} {}", lane_name(st.lane), st.session, st.ctx.key_handle, detail),
        );
        report.stages.push(st.rec);
        result
    }

    fn boundary(&mut self, st: &mut Stage, body: Step<Vec<u8>>) -> Result<Vec<u8>, AbortReason> {
        let (local, interrupted) = match body {
            Err(Interrupt::Transport) => return Err(AbortReason::Transport),
            Ok(detail) => (Ok(detail), false),
            Err(Interrupt::Local(r)) => (Err(r), false),
            Err(Interrupt::Peer) => (Err(AbortReason::ProtocolViolation), true),
        };
        let mut status = vec![match &local {
            Ok(_) => 0,
            Err(r) => r.code(),
        }];
        if let Ok(d) = &local {
            status.extend_from_slice(d);
        }
        let io = |_: Interrupt| AbortReason::Transport;
        self.send(st, tags::STATUS, status).map_err(io)?;
        let peer = loop {
            if let Some(p) = st.peer_status.take() {
                break p;
            }
            let f = self.recv_frame(st, true).map_err(io)?;
            if f.tag == tags::STATUS {
                st.peer_status = Some(f.payload);
            }
        };
        let tag = st.ctx.finalize_tag().expect("context finalized once");
        let mut tag_msg = st.ctx.key_handle.to_be_bytes().to_vec();
        tag_msg.extend_from_slice(&tag);
        self.send_raw(st, tags::AUTH_TAG, tag_msg.clone(), false).map_err(io)?;
        let theirs = self.recv_frame(st, false).map_err(io)?;
        let tag_ok = theirs.tag == tags::AUTH_TAG
            && theirs.payload.len() == 24
            && theirs.payload[..8] == tag_msg[..8]
            && verify_exchange(&tag, theirs.payload[8..].try_into().unwrap()).is_ok();
        self.send_raw(st, tags::AUTH_ACK, vec![if tag_ok { ACK_OK } else { ACK_FAIL }], false)
            .map_err(io)?;
        let ack = self.recv_frame(st, false).map_err(io)?;
        let ack_ok = ack.tag == tags::AUTH_ACK && ack.payload == [ACK_OK];
        if !(tag_ok && ack_ok) {
            return Err(AbortReason::AuthFail);
        }
        self.last_tag = tag;
        let peer_code = peer.first().copied();
        let peer_reason = match peer_code {
            Some(0) => None,
            Some(c) => Some(AbortReason::from_code(c).unwrap_or(AbortReason::ProtocolViolation)),
            None => Some(AbortReason::ProtocolViolation),
        };
        if interrupted {
            return Err(peer_reason.unwrap_or(AbortReason::ProtocolViolation));
        }
        match (local, peer_reason) {
            (Err(r), _) => Err(r),
            (Ok(_), Some(r)) => Err(r),
            (Ok(_), None) => Ok(peer[1..].to_vec()),
        }
    }

    // ---- auth budget ----

    /// Runs QKD rounds until the store is above its watermark and holds a
    /// full OT session's worth of keys.
    pub fn ensure_auth_budget(&mut self) -> Result<(), AbortReason> {
        let need = OT_STAGES * KEY_QUOTA;
        let mut rounds = 0;
        while self.store.needs_replenish() || self.store.available() < need {
            if rounds == self.cfg.max_qkd_rounds || self.store.available() < QKD_STAGES * KEY_QUOTA {
                break;
            }
            rounds += 1;
            match self.run_qkd_round() {
                Ok(_) => {}
                Err(AbortReason::Transport) => return Err(AbortReason::Transport),
                Err(_) => {}
            }
        }
        if self.store.available() < need {
            return Err(AbortReason::AuthFail);
        }
        Ok(())
    }

    // ---- OT lane ----

    /// Runs one OT session of `length` output bits. `choice` is the
    /// receiver's bit; the sender passes `None`. The report is kept either
    /// way.
    pub fn run_ot(&mut self, length: usize, choice: Option<bool>) -> Result<OtResult, AbortReason> {
        if self.broken {
            return Err(AbortReason::Transport);
        }
        self.ensure_auth_budget()?;
        let sid = self.sessions[0];
        self.sessions[0] += 1;
        let t0 = Instant::now();
        let mut report = SessionReport::new(Lane::Ot, sid);
        let mut state = SessionState::new(self.now());
        self.note(Phase::QuantumLoad, "enter", format!("ot#{sid}"));
        let out = match self.cfg.role {
            Party::Sender => self.ot_sender(sid, length, &mut state, &mut report),
            Party::Receiver => self.ot_receiver(sid, length, choice, &mut state, &mut report),
        };
        match &out {
            Ok(_) => self.enter(&mut state, Phase::Done, sid),
            Err(r) => self.enter(&mut state, Phase::Aborted(*r), sid),
        }
        report.outcome = out.as_ref().map(|_| ()).map_err(|r| *r);
        report.secs = t0.elapsed().as_secs_f64();
        self.reports.push(report);
        out
    }

    fn ot_sender(&mut self, sid: u64, length: usize, state: &mut SessionState, rep: &mut SessionReport) -> Result<OtResult, AbortReason> {
        let p = self.cfg.params.clone();
        let dc = p.derived_counts();
        let n0 = p.n0 as usize;
        let mut s = SenderOt {
            block: None,
            public: None,
            commitments: Vec::new(),
            i_t: Vec::new(),
            p_hat: f64::NAN,
            blocks: None,
        };

        self.enter(state, Phase::Commit, sid);
        let mut st = self.open_stage("commit", Lane::Ot, sid)?;
        let body = self.s_commit(&mut st, &mut s, sid, n0, length);
        let res = self.close_stage(st, body, rep);
        self.settle_raw(Lane::Ot, &s.block, &res);
        res?;
        let block = s.block.take().expect("loaded");
        rep.block_id = Some(block.block_id);

        self.enter(state, Phase::Open, sid);
        let mut st = self.open_stage("open", Lane::Ot, sid)?;
        let body = self.s_open(&mut st, &mut s, &block, sid, state, &p);
        if let Some(ph) = (!s.p_hat.is_nan()).then_some(s.p_hat) {
            rep.p_hat = Some(ph);
        }
        self.close_stage(st, body, rep)?;
        drop(std::mem::take(&mut s.commitments));

        // the ordered pair depends on c, so the shuffles are bound to the tag before it
        let seed = cascade_seed(&self.last_tag, Lane::Ot, sid);
        self.enter(state, Phase::Separate, sid);
        let mut st = self.open_stage("separate", Lane::Ot, sid)?;
        let body = self.s_separate(&mut st, &mut s, &block, sid, dc.n_raw);
        self.close_stage(st, body, rep)?;
        let [b0, b1] = s.blocks.take().expect("extracted");

        self.enter(state, Phase::Reconcile, sid);
        let mut st = self.open_stage("reconcile", Lane::Ot, sid)?;
        let mut leak = 0;
        let body = self.cascade_sender(&mut st, vec![b0.clone(), b1.clone()], s.p_hat, &seed, rep, &mut leak);
        self.close_stage(st, body, rep)?;
        rep.leak = Some(leak);

        self.enter(state, Phase::Amplify, sid);
        let (f, bound) = self.pa_bound(leak, dc.n_raw, s.p_hat);
        rep.f_actual = f;
        rep.bound = Some(bound);
        let mut st = self.open_stage("amplify", Lane::Ot, sid)?;
        let mut keys = None;
        let body = self.s_amplify(&mut st, [&b0, &b1], bound, length, &mut keys);
        self.close_stage(st, body, rep)?;
        let [m0, m1] = keys.expect("amplified");
        Ok(OtResult::Sender { m0, m1 })
    }

    /// Consumes the stage's raw block unless the stage failed for lack of
    /// raw data on either side.
    fn settle_raw(&mut self, lane: Lane, block: &Option<RawEventBlock>, res: &Result<Vec<u8>, AbortReason>) {
        if let Some(b) = block {
            if res != &Err(AbortReason::InsufficientRaw) {
                self.consume_raw(lane, b);
            }
        }
    }

    fn pa_bound(&self, leak: u64, n_raw: u64, p_hat: f64) -> (Option<f64>, u64) {
        let p = &self.cfg.params;
        let f = measure_efficiency(leak, n_raw as usize, p_hat);
        let bound = max_secure_length(n_raw, p, f.unwrap_or(p.f_ec), p.eps_total_target);
        (f, bound)
    }

    fn s_commit(&mut self, st: &mut Stage, s: &mut SenderOt, sid: u64, n0: usize, length: usize) -> Step<Vec<u8>> {
        let block = self.peek_raw(n0).ok_or(AbortReason::InsufficientRaw)?;
        let mut req = block.block_id.to_be_bytes().to_vec();
        req.extend_from_slice(&(n0 as u64).to_be_bytes());
        req.extend_from_slice(&(length as u32).to_be_bytes());
        s.block = Some(block);
        self.send(st, tags::OT_REQ, req)?;
        // r1 is fresh for every execution
        let public = sample_public(&mut self.rng);
        self.send(st, tags::PUBLIC, public.r1().to_vec())?;
        s.public = Some(public);
        let mut commitments = Vec::with_capacity(n0);
        while commitments.len() < n0 {
            let payload = self.recv(st, tags::COMMITS)?;
            let mut r = Reader(&payload);
            let offset = r.u64()? as usize;
            let count = r.u32()? as usize;
            let rest = r.rest();
            if offset != commitments.len() || count == 0 || offset + count > n0 || rest.len() != count * COMMIT_BYTES {
                return Err(violation());
            }
            for c in rest.chunks_exact(COMMIT_BYTES) {
                commitments.push(Commitment::from_bytes(c).map_err(|_| violation())?);
            }
        }
        s.commitments = commitments;
        self.note(Phase::Commit, "commitments", format!("ot#{sid} n={n0}"));
        Ok(Vec::new())
    }

    fn s_open(
        &mut self,
        st: &mut Stage,
        s: &mut SenderOt,
        block: &RawEventBlock,
        sid: u64,
        state: &mut SessionState,
        p: &ProtocolParams,
    ) -> Step<Vec<u8>> {
        let n0 = block.len();
        let i_t = choose_test_set(&mut self.rng, n0 as u64, p.alpha).map_err(|_| AbortReason::CheckSize)?;
        let mut msg = Vec::new();
        encode_index_set(&i_t, &mut msg);
        self.send(st, tags::TEST_SET, msg)?;
        self.note(Phase::Open, "test_set", format!("ot#{sid} n={}", i_t.len()));
        let mut openings = Vec::with_capacity(i_t.len());
        while openings.len() < i_t.len() {
            let payload = self.recv(st, tags::OPENINGS)?;
            let mut r = Reader(&payload);
            let offset = r.u64()? as usize;
            let count = r.u32()? as usize;
            let rest = r.rest();
            if offset != openings.len() || count == 0 || offset + count > i_t.len() || rest.len() != count * OPENING_BYTES {
                return Err(violation());
            }
            for o in rest.chunks_exact(OPENING_BYTES) {
                openings.push(Opening::from_bytes(o).map_err(|_| violation())?);
            }
        }
        self.note(Phase::Open, "openings", format!("ot#{sid} n={}", openings.len()));
        self.enter(state, Phase::Estimate, sid);
        let test = TestSelection { i_t, openings };
        let est = estimate(
            &test,
            &block.bases,
            &block.outcomes,
            s.public.as_ref().expect("public sampled"),
            &s.commitments,
            p.derived_counts().n_check,
            p.p_max,
        );
        s.i_t = test.i_t;
        s.p_hat = est.p_hat;
        self.note(
            Phase::Estimate,
            "estimate",
            format!("ot#{sid} n_s={} errors={} p_hat={:.6}", est.i_s.len(), est.errors, est.p_hat),
        );
        if let Verdict::Abort(r) = est.verdict {
            return Err(r.into());
        }
        let mut detail = est.errors.to_be_bytes().to_vec();
        detail.extend_from_slice(&(est.i_s.len() as u64).to_be_bytes());
        Ok(detail)
    }

    fn s_separate(&mut self, st: &mut Stage, s: &mut SenderOt, block: &RawEventBlock, sid: u64, n_raw: u64) -> Step<Vec<u8>> {
        let rest = complement(&s.i_t, block.len());
        self.send(st, tags::THETA_A, block.bases.select(&rest).to_bytes())?;
        self.note(Phase::Separate, "theta_a", format!("ot#{sid} n={}", rest.len()));
        let payload = self.recv(st, tags::PAIR)?;
        let (first, second) = decode_pair(&payload)?;
        validate_pair(&first, &second, &s.i_t, block.len(), n_raw)?;
        self.note(Phase::Separate, "ordered_pair", format!("ot#{sid} n={}", first.len()));
        s.blocks = Some(extract_sender(&block.outcomes, &first, &second)?);
        Ok(Vec::new())
    }

    /// Sender half of Cascade plus the verification message. The STATUS
    /// detail carries the leakage and round count.
    fn cascade_sender(
        &mut self,
        st: &mut Stage,
        blocks: Vec<BitString>,
        p_hat: f64,
        seed: &[u8; 32],
        rep: &mut SessionReport,
        leak_out: &mut u64,
    ) -> Step<Vec<u8>> {
        let refs: Vec<BitString> = blocks.clone();
        let mut alice = CascadeSender::new(blocks, p_hat, seed, &self.cfg.cascade)?;
        while let Some(msgs) = alice.next_round()? {
            self.send(st, tags::CASC_PAR, encode_msgs(&msgs))?;
            let rsp = decode_msgs(&self.recv(st, tags::CASC_RSP)?)?;
            alice.on_responses(&rsp)?;
        }
        let views: Vec<&BitString> = refs.iter().collect();
        let ver = sender_verify_msg(&views, self.cfg.cascade.hash_bits_verify, &mut self.rng);
        self.send(st, tags::CASC_VER, ver.to_bytes())?;
        let leak = alice.leak_bits().into_iter().max().unwrap_or(0);
        *leak_out = leak;
        rep.cascade_rounds = alice.rounds();
        rep.pass_stats = alice.pass_stats().into_iter().next().unwrap_or_default();
        let mut detail = leak.to_be_bytes().to_vec();
        detail.extend_from_slice(&alice.rounds().to_be_bytes());
        Ok(detail)
    }

    fn s_amplify(
        &mut self,
        st: &mut Stage,
        blocks: [&BitString; 2],
        bound: u64,
        length: usize,
        keys: &mut Option<[BitString; 2]>,
    ) -> Step<Vec<u8>> {
        if (length as u64) > bound {
            return Err(AbortReason::PaBound.into());
        }
        let seed = ToeplitzSeed::random(&mut self.rng, blocks[0].len(), length);
        self.send(st, tags::PA_SEED, seed.to_bytes())?;
        *keys = Some(amplify_sender(blocks, &seed, bound).map_err(|_| AbortReason::PaBound)?);
        Ok(Vec::new())
    }

    fn ot_receiver(
        &mut self,
        sid: u64,
        length: usize,
        choice: Option<bool>,
        state: &mut SessionState,
        rep: &mut SessionReport,
    ) -> Result<OtResult, AbortReason> {
        let p = self.cfg.params.clone();
        let dc = p.derived_counts();
        let mut r = ReceiverOt {
            choice,
            block: None,
            openings: Vec::new(),
            i_t: Vec::new(),
            p_hat: f64::NAN,
            raw: None,
            other: None,
            c: false,
            corrected: None,
        };

        self.enter(state, Phase::Commit, sid);
        let mut st = self.open_stage("commit", Lane::Ot, sid)?;
        let body = self.r_commit(&mut st, &mut r, sid, length);
        let res = self.close_stage(st, body, rep);
        self.settle_raw(Lane::Ot, &r.block, &res);
        res?;
        let block = r.block.take().expect("loaded");
        rep.block_id = Some(block.block_id);

        self.enter(state, Phase::Open, sid);
        let mut st = self.open_stage("open", Lane::Ot, sid)?;
        let body = self.r_open(&mut st, &mut r, &block, sid, dc.n_test);
        let detail = self.close_stage(st, body, rep)?;
        self.enter(state, Phase::Estimate, sid);
        let mut rd = Reader(&detail);
        let (errors, n_s) = match (rd.u64(), rd.u64()) {
            (Ok(e), Ok(n)) if n > 0 => (e, n),
            _ => return Err(AbortReason::ProtocolViolation),
        };
        r.p_hat = errors as f64 / n_s as f64;
        rep.p_hat = Some(r.p_hat);
        self.note(Phase::Estimate, "estimate", format!("ot#{sid} n_s={n_s} errors={errors} p_hat={:.6}", r.p_hat));

        // the ordered pair depends on c, so the shuffles are bound to the tag before it
        let seed = cascade_seed(&self.last_tag, Lane::Ot, sid);
        self.enter(state, Phase::Separate, sid);
        let mut st = self.open_stage("separate", Lane::Ot, sid)?;
        let body = self.r_separate(&mut st, &mut r, &block, sid, dc.n_raw);
        self.close_stage(st, body, rep)?;
        drop(block);

        self.enter(state, Phase::Reconcile, sid);
        let mut st = self.open_stage("reconcile", Lane::Ot, sid)?;
        let raw = r.raw.take().expect("separated");
        let body = self.cascade_receiver(&mut st, raw, r.c as usize, 2, r.p_hat, &seed, &mut r.corrected);
        let detail = self.close_stage(st, body, rep)?;
        let (leak, rounds) = parse_leak(&detail)?;
        rep.leak = Some(leak);
        rep.cascade_rounds = rounds;

        self.enter(state, Phase::Amplify, sid);
        let (f, bound) = self.pa_bound(leak, dc.n_raw, r.p_hat);
        rep.f_actual = f;
        rep.bound = Some(bound);
        let mut st = self.open_stage("amplify", Lane::Ot, sid)?;
        let corrected = r.corrected.take().expect("reconciled");
        let mut key = None;
        let other = r.other.take().expect("separated");
        let body = self.r_amplify(&mut st, &corrected, &other, bound, length, &mut key, &mut rep.shadow);
        self.close_stage(st, body, rep)?;
        Ok(OtResult::Receiver {
            mc: key.expect("amplified"),
            c: r.c,
        })
    }

    fn r_commit(&mut self, st: &mut Stage, r: &mut ReceiverOt, sid: u64, length: usize) -> Step<Vec<u8>> {
        let req = self.recv(st, tags::OT_REQ)?;
        let mut rd = Reader(&req);
        let (block_id, n0, n_out) = (rd.u64()?, rd.u64()?, rd.u32()?);
        if !rd.rest().is_empty() {
            return Err(violation());
        }
        let block = self.peek_raw(self.cfg.params.n0 as usize).ok_or(AbortReason::InsufficientRaw)?;
        let ok = n0 == self.cfg.params.n0 && block_id == block.block_id && n_out as usize == length;
        r.block = Some(block);
        if !ok {
            return Err(violation());
        }
        let public = PublicString::from_bytes(&self.recv(st, tags::PUBLIC)?).map_err(|_| violation())?;
        let block = r.block.as_ref().expect("just loaded");
        let openings: Vec<Opening> = (0..block.len())
            .map(|j| Opening::random(&mut self.rng, block.bases.get(j), block.outcomes.get(j)))
            .collect();
        let commitments = commit_batch(&public, &openings);
        for (k, chunk) in commitments.chunks(COMMIT_CHUNK).enumerate() {
            let mut msg = ((k * COMMIT_CHUNK) as u64).to_be_bytes().to_vec();
            msg.extend_from_slice(&(chunk.len() as u32).to_be_bytes());
            msg.reserve(chunk.len() * COMMIT_BYTES);
            for c in chunk {
                msg.extend_from_slice(&c.to_bytes());
            }
            self.send(st, tags::COMMITS, msg)?;
        }
        self.note(Phase::Commit, "commitments", format!("ot#{sid} n={}", commitments.len()));
        r.openings = openings;
        Ok(Vec::new())
    }

    fn r_open(&mut self, st: &mut Stage, r: &mut ReceiverOt, block: &RawEventBlock, sid: u64, n_test: u64) -> Step<Vec<u8>> {
        let msg = self.recv(st, tags::TEST_SET)?;
        let (i_t, used) = decode_index_set(&msg)?;
        let n0 = block.len();
        if used != msg.len() || i_t.len() as u64 != n_test || i_t.last().is_some_and(|&l| l as usize >= n0) {
            return Err(violation());
        }
        self.note(Phase::Open, "test_set", format!("ot#{sid} n={}", i_t.len()));
        let openings = std::mem::take(&mut r.openings);
        if openings.len() != n0 {
            return Err(violation());
        }
        for (k, chunk) in i_t.chunks(OPENING_CHUNK).enumerate() {
            let mut msg = ((k * OPENING_CHUNK) as u64).to_be_bytes().to_vec();
            msg.extend_from_slice(&(chunk.len() as u32).to_be_bytes());
            for &j in chunk {
                msg.extend_from_slice(&openings[j as usize].to_bytes());
            }
            self.send(st, tags::OPENINGS, msg)?;
        }
        self.note(Phase::Open, "openings", format!("ot#{sid} n={}", i_t.len()));
        r.i_t = i_t;
        Ok(Vec::new())
    }

    fn r_separate(&mut self, st: &mut Stage, r: &mut ReceiverOt, block: &RawEventBlock, sid: u64, n_raw: u64) -> Step<Vec<u8>> {
        let n0 = block.len();
        let rest = complement(&r.i_t, n0);
        let theta = bits_from(&self.recv(st, tags::THETA_A)?, rest.len())?;
        self.note(Phase::Separate, "theta_a", format!("ot#{sid} n={}", rest.len()));
        let mut theta_a = BitString::zeros(n0);
        for (k, &j) in rest.iter().enumerate() {
            theta_a.set(j as usize, theta.get(k));
        }
        let split = build_split(&rest, &theta_a, &block.bases, n_raw, r.choice, &mut self.rng)?;
        let (first, second) = split.ordered_pair();
        self.send(st, tags::PAIR, encode_pair(first, second))?;
        self.note(Phase::Separate, "ordered_pair", format!("ot#{sid} n={}", first.len()));
        r.raw = Some(extract_receiver(&block.outcomes, &split)?);
        r.other = Some(block.outcomes.select(&split.i1));
        r.c = split.c;
        Ok(Vec::new())
    }

    #[allow(clippy::too_many_arguments)]
    fn cascade_receiver(
        &mut self,
        st: &mut Stage,
        raw: BitString,
        c: usize,
        positions: usize,
        p_hat: f64,
        seed: &[u8; 32],
        out: &mut Option<BitString>,
    ) -> Step<Vec<u8>> {
        let mut bob = CascadeReceiver::new(raw, c, positions, p_hat, seed, &self.cfg.cascade, &mut self.rng)?;
        let ver = loop {
            let (tag, payload) = self.recv_any(st, &[tags::CASC_PAR, tags::CASC_VER])?;
            if tag == tags::CASC_VER {
                break VerifyMsg::from_bytes(&payload)?;
            }
            let rsp = bob.on_queries(&decode_msgs(&payload)?)?;
            self.send(st, tags::CASC_RSP, encode_msgs(&rsp))?;
        };
        if !bob.is_done()? || ver.hashes.len() != positions {
            return Err(violation());
        }
        let corrected = bob.corrected();
        receiver_verify(&corrected, c, &ver, self.cfg.cascade.hash_bits_verify)?;
        *out = Some(corrected);
        Ok(Vec::new())
    }

    #[allow(clippy::too_many_arguments)]
    fn r_amplify(
        &mut self,
        st: &mut Stage,
        block: &BitString,
        other: &BitString,
        bound: u64,
        length: usize,
        key: &mut Option<BitString>,
        shadow: &mut Option<BitString>,
    ) -> Step<Vec<u8>> {
        if (length as u64) > bound {
            return Err(AbortReason::PaBound.into());
        }
        let seed = ToeplitzSeed::from_bytes(&self.recv(st, tags::PA_SEED)?).map_err(|_| violation())?;
        if seed.n_in != block.len() || seed.n_out != length {
            return Err(violation());
        }
        *key = Some(amplify_receiver(block, &seed, bound).map_err(|_| AbortReason::PaBound)?);
        *shadow = toeplitz_hash(other, &seed).ok();
        Ok(Vec::new())
    }

    // ---- QKD lane ----

    /// One refill round: sift a fresh block into the buffer and, once the
    /// buffer is large enough, reconcile, amplify and register the key.
    pub fn run_qkd_round(&mut self) -> Result<QkdProgress, AbortReason> {
        if self.broken {
            return Err(AbortReason::Transport);
        }
        let sid = self.sessions[1];
        self.sessions[1] += 1;
        let t0 = Instant::now();
        let mut rep = SessionReport::new(Lane::Qkd, sid);
        let out = self.qkd_round(sid, &mut rep);
        rep.outcome = out.as_ref().map(|_| ()).map_err(|r| *r);
        rep.secs = t0.elapsed().as_secs_f64();
        self.note(
            "qkd",
            "round",
            format!(
                "qkd#{sid} {}",
                match &out {
                    Ok(QkdProgress::NeedMore) => "need_more".to_string(),
                    Ok(QkdProgress::Replenished(n)) => format!("replenished={n}"),
                    Err(r) => r.to_string(),
                }
            ),
        );
        self.reports.push(rep);
        out
    }

    fn qkd_round(&mut self, sid: u64, rep: &mut SessionReport) -> Result<QkdProgress, AbortReason> {
        let cfg = self.cfg.qkd.clone();
        let mut block = None;
        let mut sifted = None;
        let mut st = self.open_stage("qkd-sift", Lane::Qkd, sid)?;
        let body = self.qkd_sift(&mut st, &cfg, &mut block, &mut sifted);
        let res = self.close_stage(st, body, rep);
        self.settle_raw(Lane::Qkd, &block, &res);
        res?;
        rep.block_id = block.map(|b| b.block_id);
        let (key, mine, theirs) = sifted.expect("sifted");
        self.qkd_buf.absorb(&key, &mine, &theirs);
        let q = self.qkd_buf.q_est();
        rep.p_hat = Some(q);
        if let Err(r) = self.qkd_buf.check(&cfg) {
            self.qkd_buf.clear();
            return Err(r);
        }
        let request_bits = 8 * cfg.request_bytes as u64;
        let verify_bits = self.cfg.cascade.hash_bits_verify as u64;
        let n = self.qkd_buf.key.len() as u64;
        if extractable_bits(n, q, cfg.precheck_f, cfg.safety_bits) < request_bits + verify_bits {
            return Ok(QkdProgress::NeedMore);
        }
        let key = std::mem::take(&mut self.qkd_buf).key;

        let seed = cascade_seed(&self.last_tag, Lane::Qkd, sid);
        let mut st = self.open_stage("qkd-reconcile", Lane::Qkd, sid)?;
        let mut leak = 0;
        let mut corrected = None;
        let body = match self.cfg.role {
            Party::Sender => self.cascade_sender(&mut st, vec![key.clone()], q, &seed, rep, &mut leak),
            Party::Receiver => self.cascade_receiver(&mut st, key.clone(), 0, 1, q, &seed, &mut corrected),
        };
        let detail = self.close_stage(st, body, rep)?;
        if self.cfg.role == Party::Receiver {
            let (l, rounds) = parse_leak(&detail)?;
            leak = l;
            rep.cascade_rounds = rounds;
        }
        rep.leak = Some(leak);
        rep.f_actual = measure_efficiency(leak, n as usize, q);
        let final_key = corrected.unwrap_or(key);

        let out_bits = request_bits.min(final_length(n, leak, verify_bits, cfg.safety_bits)) / 8 * 8;
        rep.bound = Some(out_bits);
        let mut st = self.open_stage("qkd-amplify", Lane::Qkd, sid)?;
        let mut fresh = None;
        let body = self.qkd_amplify(&mut st, &final_key, out_bits, &mut fresh);
        self.close_stage(st, body, rep)?;
        let (handle, bytes) = fresh.expect("amplified");
        self.store.replenish(handle, &bytes).map_err(|_| AbortReason::ProtocolViolation)?;
        rep.replenished = bytes.len();
        Ok(QkdProgress::Replenished(bytes.len()))
    }

    #[allow(clippy::type_complexity)]
    fn qkd_sift(
        &mut self,
        st: &mut Stage,
        cfg: &QkdConfig,
        block_out: &mut Option<RawEventBlock>,
        out: &mut Option<(BitString, BitString, BitString)>,
    ) -> Step<Vec<u8>> {
        let n = cfg.block_events;
        let bases_msg = |b: &RawEventBlock| {
            let mut m = b.block_id.to_be_bytes().to_vec();
            m.extend_from_slice(&(b.len() as u32).to_be_bytes());
            m.extend_from_slice(&b.bases.to_bytes());
            m
        };
        let parse_bases = |payload: &[u8], own: &RawEventBlock| -> Step<BitString> {
            let mut r = Reader(payload);
            let (id, len) = (r.u64()?, r.u32()? as usize);
            if id != own.block_id || len != own.len() {
                return Err(violation());
            }
            bits_from(r.rest(), len)
        };
        match self.cfg.role {
            Party::Sender => {
                let block = self.peek_raw(n).ok_or(AbortReason::InsufficientRaw)?;
                let msg = bases_msg(&block);
                *block_out = Some(block.clone());
                self.send(st, tags::QKD_BAS, msg)?;
                let theirs = parse_bases(&self.recv(st, tags::QKD_BAS)?, &block)?;
                let sifted = sift_indices(&block.bases, &theirs);
                let sample = choose_sample(&mut self.rng, sifted.len(), cfg.sample_fraction);
                let (key, mine) = split_sample(&block, &sifted, &sample);
                let mut msg = Vec::new();
                encode_index_set(&sample, &mut msg);
                msg.extend_from_slice(&mine.to_bytes());
                self.send(st, tags::QKD_SMP, msg)?;
                let their_bits = bits_from(&self.recv(st, tags::QKD_SMP)?, sample.len())?;
                *out = Some((key, mine, their_bits));
            }
            Party::Receiver => {
                let payload = self.recv(st, tags::QKD_BAS)?;
                let block = self.peek_raw(n).ok_or(AbortReason::InsufficientRaw)?;
                *block_out = Some(block.clone());
                let theirs = parse_bases(&payload, &block)?;
                self.send(st, tags::QKD_BAS, bases_msg(&block))?;
                let sifted = sift_indices(&theirs, &block.bases);
                let msg = self.recv(st, tags::QKD_SMP)?;
                let (sample, used) = decode_index_set(&msg)?;
                if sample.last().is_some_and(|&l| l as usize >= sifted.len()) {
                    return Err(violation());
                }
                let their_bits = bits_from(&msg[used..], sample.len())?;
                let (key, mine) = split_sample(&block, &sifted, &sample);
                self.send(st, tags::QKD_SMP, mine.to_bytes())?;
                *out = Some((key, mine, their_bits));
            }
        }
        Ok(Vec::new())
    }

    fn qkd_amplify(&mut self, st: &mut Stage, key: &BitString, out_bits: u64, fresh: &mut Option<(u64, Vec<u8>)>) -> Step<Vec<u8>> {
        if out_bits < MIN_REFILL_BITS {
            return Err(AbortReason::PaBound.into());
        }
        let handle = self.store.next_replenish_handle();
        let bytes = (out_bits / 8) as usize;
        let seed = match self.cfg.role {
            Party::Sender => {
                let seed = ToeplitzSeed::random(&mut self.rng, key.len(), out_bits as usize);
                self.send(st, tags::PA_SEED, seed.to_bytes())?;
                let mut m = handle.to_be_bytes().to_vec();
                m.extend_from_slice(&(bytes as u32).to_be_bytes());
                self.send(st, tags::REPLEN, m)?;
                seed
            }
            Party::Receiver => {
                let seed = ToeplitzSeed::from_bytes(&self.recv(st, tags::PA_SEED)?).map_err(|_| violation())?;
                let m = self.recv(st, tags::REPLEN)?;
                let mut r = Reader(&m);
                let ok = seed.n_in == key.len()
                    && seed.n_out as u64 == out_bits
                    && r.u64()? == handle
                    && r.u32()? as usize == bytes
                    && r.rest().is_empty();
                if !ok {
                    return Err(violation());
                }
                seed
            }
        };
        let k = toeplitz_hash(key, &seed).map_err(|_| violation())?;
        *fresh = Some((handle, k.to_bytes()));
        Ok(Vec::new())
    }

    /// Tells the peer this endpoint is done. Best effort.
    /// Hands the connection to another protocol layer; no BYE is sent.
    pub fn into_transport(self) -> T {
        self.transport
    }

    pub fn close(mut self) -> (Vec<LogRecord>, Vec<SessionReport>) {
        if !self.broken {
            let _ = self.transport.send(&Frame::new(Lane::Ot, tags::BYE, 0, Vec::new()));
        }
        (std::mem::take(&mut self.log), std::mem::take(&mut self.reports))
    }
}

fn parse_leak(detail: &[u8]) -> Result<(u64, u64), AbortReason> {
    let mut r = Reader(detail);
    match (r.u64(), r.u64()) {
        (Ok(l), Ok(n)) => Ok((l, n)),
        _ => Err(AbortReason::ProtocolViolation),
    }
}

fn lane_name(l: Lane) -> &'static str {
    match l {
        Lane::Ot => "ot",
        Lane::Qkd => "qkd",
    }
}
