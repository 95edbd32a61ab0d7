//! Framed, ordered duplex transport with lane multiplexing.
//!
//! Wire frame: `len u32 | lane u8 | tag [u8; 8] | session u64 | payload`,
//! big-endian, where `len` counts every byte after itself.

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::Party;

pub const MAX_PAYLOAD: usize = 16 << 20;
pub const HEADER_LEN: usize = 1 + 8 + 8;
pub const PROTOCOL_VERSION: u16 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

pub type TypeTag = [u8; 8];

/// Registered frame types. Anything else is a protocol violation.
pub mod tags {
    use super::TypeTag;

    const fn pad(s: &[u8]) -> TypeTag {
        let mut t = [b' '; 8];
        let mut i = 0;
        while i < s.len() {
            t[i] = s[i];
            i += 1;
        }
        t
    }

    pub const HELLO: TypeTag = pad(b"HELLO");
    pub const STATUS: TypeTag = pad(b"STATUS");
    pub const AUTH_TAG: TypeTag = pad(b"AUTH_TAG");
    pub const AUTH_ACK: TypeTag = pad(b"AUTH_ACK");
    pub const OT_REQ: TypeTag = pad(b"OT_REQ");
    pub const PUBLIC: TypeTag = pad(b"PUBLIC");
    pub const COMMITS: TypeTag = pad(b"COMMITS");
    pub const TEST_SET: TypeTag = pad(b"TEST_SET");
    pub const OPENINGS: TypeTag = pad(b"OPENINGS");
    pub const THETA_A: TypeTag = pad(b"THETA_A");
    pub const PAIR: TypeTag = pad(b"PAIR");
    pub const CASC_PAR: TypeTag = pad(b"CASC_PAR");
    pub const CASC_RSP: TypeTag = pad(b"CASC_RSP");
    pub const CASC_VER: TypeTag = pad(b"CASC_VER");
    pub const PA_SEED: TypeTag = pad(b"PA_SEED");
    pub const QKD_BAS: TypeTag = pad(b"QKD_BAS");
    pub const QKD_SMP: TypeTag = pad(b"QKD_SMP");
    pub const REPLEN: TypeTag = pad(b"REPLEN");
    pub const MPC: TypeTag = pad(b"MPC");
    pub const BYE: TypeTag = pad(b"BYE");

    pub const ALL: [TypeTag; 20] = [
        HELLO, STATUS, AUTH_TAG, AUTH_ACK, OT_REQ, PUBLIC, COMMITS, TEST_SET, OPENINGS, THETA_A, PAIR, CASC_PAR,
        CASC_RSP, CASC_VER, PA_SEED, QKD_BAS, QKD_SMP, REPLEN, MPC, BYE,
    ];

    pub fn is_known(t: &TypeTag) -> bool {
        ALL.contains(t)
    }

    pub fn name(t: &TypeTag) -> String {
        String::from_utf8_lossy(t).trim_end().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Lane {
    Ot = 0,
    Qkd = 1,
}

impl Lane {
    pub fn from_u8(b: u8) -> Option<Self> {
        match b {
            0 => Some(Lane::Ot),
            1 => Some(Lane::Qkd),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("timed out waiting for a frame")]
    Timeout,
    #[error("peer closed the connection")]
    Closed,
    #[error("payload of {0} bytes exceeds the 16 MiB limit")]
    Oversize(usize),
    #[error("truncated frame")]
    Truncated,
    #[error("unknown lane {0}")]
    UnknownLane(u8),
    #[error("unknown frame type {0:?}")]
    UnknownTag(TypeTag),
    #[error("protocol version mismatch: local {local}, remote {remote}")]
    VersionMismatch { local: u16, remote: u16 },
    #[error("role conflict: both endpoints are {0}")]
    RoleConflict(Party),
    #[error("parameter digest mismatch")]
    ParamsMismatch,
    #[error("malformed handshake")]
    BadHello,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub lane: Lane,
    pub tag: TypeTag,
    pub session: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(lane: Lane, tag: TypeTag, session: u64, payload: Vec<u8>) -> Self {
        Self {
            lane,
            tag,
            session,
            payload,
        }
    }

    /// Bytes after the length prefix; this is also what auth contexts absorb.
    pub fn body(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.push(self.lane as u8);
        out.extend_from_slice(&self.tag);
        out.extend_from_slice(&self.session.to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn encode(&self) -> Result<Vec<u8>, TransportError> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(TransportError::Oversize(self.payload.len()));
        }
        let body = self.body();
        let mut out = Vec::with_capacity(4 + body.len());
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn decode_body(body: &[u8]) -> Result<Self, TransportError> {
        if body.len() < HEADER_LEN {
            return Err(TransportError::Truncated);
        }
        if body.len() - HEADER_LEN > MAX_PAYLOAD {
            return Err(TransportError::Oversize(body.len() - HEADER_LEN));
        }
        let lane = Lane::from_u8(body[0]).ok_or(TransportError::UnknownLane(body[0]))?;
        let tag: TypeTag = body[1..9].try_into().unwrap();
        if !tags::is_known(&tag) {
            return Err(TransportError::UnknownTag(tag));
        }
        Ok(Self {
            lane,
            tag,
            session: u64::from_be_bytes(body[9..17].try_into().unwrap()),
            payload: body[HEADER_LEN..].to_vec(),
        })
    }

    /// Decodes one frame from the front of `buf`, returning bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(Self, usize), TransportError> {
        let len = buf.get(..4).ok_or(TransportError::Truncated)?;
        let len = u32::from_be_bytes(len.try_into().unwrap()) as usize;
        if len > HEADER_LEN + MAX_PAYLOAD {
            return Err(TransportError::Oversize(len.saturating_sub(HEADER_LEN)));
        }
        let body = buf.get(4..4 + len).ok_or(TransportError::Truncated)?;
        Ok((Self::decode_body(body)?, 4 + len))
    }
}

pub trait Transport: Send {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError>;
    fn recv(&mut self) -> Result<Frame, TransportError>;
    fn set_timeout(&mut self, timeout: Duration);
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        (**self).send(frame)
    }
    fn recv(&mut self) -> Result<Frame, TransportError> {
        (**self).recv()
    }
    fn set_timeout(&mut self, timeout: Duration) {
        (**self).set_timeout(timeout)
    }
}

/// In-process transport; frames still pass through the wire encoding.
pub struct Loopback {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    timeout: Duration,
}

pub fn loopback_pair() -> (Loopback, Loopback) {
    let (ta, ra) = mpsc::channel();
    let (tb, rb) = mpsc::channel();
    let mk = |tx, rx| Loopback {
        tx,
        rx,
        timeout: DEFAULT_TIMEOUT,
    };
    (mk(ta, rb), mk(tb, ra))
}

impl Transport for Loopback {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        self.tx.send(frame.encode()?).map_err(|_| TransportError::Closed)
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        let bytes = self.rx.recv_timeout(self.timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => TransportError::Timeout,
            RecvTimeoutError::Disconnected => TransportError::Closed,
        })?;
        let (frame, used) = Frame::decode(&bytes)?;
        if used != bytes.len() {
            return Err(TransportError::Truncated);
        }
        Ok(frame)
    }

    fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }
}

pub struct TcpTransport {
    stream: TcpStream,
}

impl TcpTransport {
    pub fn from_stream(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(DEFAULT_TIMEOUT))?;
        Ok(Self { stream })
    }

    /// Accepts exactly one peer.
    pub fn listen(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let (stream, _) = listener.accept()?;
        Self::from_stream(stream)
    }

    /// Connects, retrying until `wait` elapses so either side may start first.
    pub fn connect(addr: impl ToSocketAddrs + Clone, wait: Duration) -> io::Result<Self> {
        let start = Instant::now();
        loop {
            match TcpStream::connect(addr.clone()) {
                Ok(s) => return Self::from_stream(s),
                Err(e) if start.elapsed() >= wait => return Err(e),
                Err(_) => std::thread::sleep(Duration::from_millis(50)),
            }
        }
    }

    pub fn local_addr(&self) -> io::Result<std::net::SocketAddr> {
        self.stream.local_addr()
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        // one write per frame so frames never interleave
        self.stream.write_all(&frame.encode()?)?;
        Ok(())
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        let mut len = [0u8; 4];
        read_exact(&mut self.stream, &mut len, true)?;
        let len = u32::from_be_bytes(len) as usize;
        if len > HEADER_LEN + MAX_PAYLOAD {
            return Err(TransportError::Oversize(len.saturating_sub(HEADER_LEN)));
        }
        let mut body = vec![0u8; len];
        read_exact(&mut self.stream, &mut body, false)?;
        Frame::decode_body(&body)
    }

    fn set_timeout(&mut self, timeout: Duration) {
        let _ = self.stream.set_read_timeout(Some(timeout));
    }
}

fn read_exact(s: &mut TcpStream, buf: &mut [u8], at_boundary: bool) -> Result<(), TransportError> {
    let mut got = 0;
    while got < buf.len() {
        match s.read(&mut buf[got..]) {
            Ok(0) if got == 0 && at_boundary => return Err(TransportError::Closed),
            Ok(0) => return Err(TransportError::Truncated),
            Ok(n) => got += n,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                return Err(TransportError::Timeout)
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

/// HELLO payload: version u16, role u8, params digest (32 bytes).
pub fn hello_payload(version: u16, role: Party, digest: &[u8; 32]) -> Vec<u8> {
    let mut p = version.to_be_bytes().to_vec();
    p.push(role as u8);
    p.extend_from_slice(digest);
    p
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Handshake {
    pub local: Vec<u8>,
    pub remote: Vec<u8>,
}

/// Exchanges HELLO frames. Both payloads are returned so the caller can bind
/// them into the first authenticated stage.
pub fn handshake<T: Transport + ?Sized>(
    t: &mut T,
    role: Party,
    digest: &[u8; 32],
) -> Result<Handshake, TransportError> {
    handshake_with_version(t, role, digest, PROTOCOL_VERSION)
}

pub fn handshake_with_version<T: Transport + ?Sized>(
    t: &mut T,
    role: Party,
    digest: &[u8; 32],
    version: u16,
) -> Result<Handshake, TransportError> {
    let local = hello_payload(version, role, digest);
    t.send(&Frame::new(Lane::Ot, tags::HELLO, 0, local.clone()))?;
    let f = t.recv()?;
    if f.tag != tags::HELLO || f.payload.len() != 35 {
        return Err(TransportError::BadHello);
    }
    let remote_version = u16::from_be_bytes([f.payload[0], f.payload[1]]);
    if remote_version != version {
        return Err(TransportError::VersionMismatch {
            local: version,
            remote: remote_version,
        });
    }
    let remote_role = Party::from_u8(f.payload[2]).ok_or(TransportError::BadHello)?;
    if remote_role == role {
        return Err(TransportError::RoleConflict(role));
    }
    if &f.payload[3..] != digest {
        return Err(TransportError::ParamsMismatch);
    }
    Ok(Handshake {
        local,
        remote: f.payload,
    })
}

/// Which outgoing frame to corrupt, for fault-injection harnesses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TamperRule {
    pub lane: Lane,
    pub tag: TypeTag,
    /// Zero-based index among matching frames with a non-empty payload.
    pub nth: usize,
    /// Payload bit to flip, reduced modulo the payload length.
    pub bit: usize,
}

/// Wraps a transport and flips one payload bit in a selected outgoing frame.
pub struct Tampering<T> {
    inner: T,
    rule: TamperRule,
    seen: usize,
    fired: bool,
}

impl<T> Tampering<T> {
    pub fn new(inner: T, rule: TamperRule) -> Self {
        Self {
            inner,
            rule,
            seen: 0,
            fired: false,
        }
    }

    pub fn fired(&self) -> bool {
        self.fired
    }
}

impl<T: Transport> Transport for Tampering<T> {
    fn send(&mut self, frame: &Frame) -> Result<(), TransportError> {
        if !self.fired && frame.lane == self.rule.lane && frame.tag == self.rule.tag && !frame.payload.is_empty() {
            if self.seen == self.rule.nth {
                self.fired = true;
                let mut f = frame.clone();
                let bit = self.rule.bit % (8 * f.payload.len());
                f.payload[bit / 8] ^= 0x80 >> (bit % 8);
                return self.inner.send(&f);
            }
            self.seen += 1;
        }
        self.inner.send(frame)
    }

    fn recv(&mut self) -> Result<Frame, TransportError> {
        self.inner.recv()
    }

    fn set_timeout(&mut self, timeout: Duration) {
        self.inner.set_timeout(timeout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(n: usize) -> Frame {
        Frame::new(Lane::Qkd, tags::CASC_PAR, 7, vec![0xAB; n])
    }

    #[test]
    fn layout() {
        let f = Frame::new(Lane::Ot, tags::STATUS, 0x0102030405060708, vec![9]);
        let b = f.encode().unwrap();
        assert_eq!(&b[..4], &[0, 0, 0, 18]);
        assert_eq!(b[4], 0);
        assert_eq!(&b[5..13], b"STATUS  ");
        assert_eq!(&b[13..21], &[1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(b[21], 9);
        assert_eq!(Frame::decode(&b).unwrap(), (f, 22));
    }

    #[test]
    fn zero_length_payload_is_legal() {
        let (mut a, mut b) = loopback_pair();
        a.send(&frame(0)).unwrap();
        assert_eq!(b.recv().unwrap(), frame(0));
    }

    #[test]
    fn oversize_rejected_before_send() {
        let (mut a, _b) = loopback_pair();
        assert!(matches!(a.send(&frame(MAX_PAYLOAD + 1)), Err(TransportError::Oversize(_))));
        assert!(a.send(&frame(MAX_PAYLOAD)).is_ok());
    }

    #[test]
    fn unknown_tag_and_lane() {
        let mut b = frame(3).encode().unwrap();
        b[5] = b'Z';
        assert!(matches!(Frame::decode(&b), Err(TransportError::UnknownTag(_))));
        let mut b = frame(3).encode().unwrap();
        b[4] = 2;
        assert!(matches!(Frame::decode(&b), Err(TransportError::UnknownLane(2))));
    }

    #[test]
    fn loopback_timeout() {
        let (mut a, _b) = loopback_pair();
        a.set_timeout(Duration::from_millis(20));
        assert!(matches!(a.recv(), Err(TransportError::Timeout)));
    }

    #[test]
    fn handshake_outcomes() {
        let d = [5u8; 32];
        let run = |ra: Party, rb: Party, va: u16, db: [u8; 32]| {
            let (mut a, mut b) = loopback_pair();
            let h = std::thread::spawn(move || handshake_with_version(&mut b, rb, &db, PROTOCOL_VERSION));
            let ra = handshake_with_version(&mut a, ra, &d, va);
            (ra, h.join().unwrap())
        };
        let (x, y) = run(Party::Sender, Party::Receiver, 1, d);
        assert!(x.is_ok() && y.is_ok());
        let (x, _) = run(Party::Sender, Party::Sender, 1, d);
        assert!(matches!(x, Err(TransportError::RoleConflict(Party::Sender))));
        let (x, y) = run(Party::Sender, Party::Receiver, 2, d);
        assert!(matches!(x, Err(TransportError::VersionMismatch { local: 2, remote: 1 })));
        assert!(matches!(y, Err(TransportError::VersionMismatch { local: 1, remote: 2 })));
        let (x, _) = run(Party::Sender, Party::Receiver, 1, [6; 32]);
        assert!(matches!(x, Err(TransportError::ParamsMismatch)));
    }

    #[test]
    fn tampering_flips_exactly_one_bit() {
        let (a, mut b) = loopback_pair();
        let rule = TamperRule {
            lane: Lane::Qkd,
            tag: tags::CASC_PAR,
            nth: 1,
            bit: 3,
        };
        let mut a = Tampering::new(a, rule);
        for _ in 0..3 {
            a.send(&frame(4)).unwrap();
        }
        assert!(a.fired());
        let got: Vec<_> = (0..3).map(|_| b.recv().unwrap()).collect();
        assert_eq!(got[0], frame(4));
        assert_eq!(got[1].payload[0], 0xAB ^ 0x10);
        assert_eq!(got[2], frame(4));
    }

    proptest! {
        #[test]
        fn decode_never_overreads(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            if let Ok((_, used)) = Frame::decode(&bytes) {
                prop_assert!(used <= bytes.len());
            }
        }

        #[test]
        fn round_trip(lane in 0u8..2, t in 0usize..tags::ALL.len(), s in any::<u64>(),
                      p in proptest::collection::vec(any::<u8>(), 0..300)) {
            let f = Frame::new(Lane::from_u8(lane).unwrap(), tags::ALL[t], s, p);
            let enc = f.encode().unwrap();
            prop_assert_eq!(Frame::decode(&enc).unwrap(), (f, enc.len()));
        }
    }
}
