//! Per-party orchestration: raw input, lane routing, authenticated stage
//! sequencing and the client interfaces.

pub mod client;
pub mod control;
pub mod faults;
pub mod session;
pub mod source;

pub use client::{Client, OtRequest, PollResult, RequestError};
pub use session::{
    check_phase_order, summarize, Endpoint, EndpointConfig, LogRecord, Phase, QkdProgress, SessionReport,
    SessionState, StageRecord, Summary,
};
pub use source::{resize, FileSource, Mux, RawSource, Resizer, SimSource};

use crate::auth::SecretStore;
use crate::cascade::{rng_from, seed_from};
use crate::otcore::{AbortReason, OtResult};
use crate::params::ProtocolParams;
use crate::qsim::ChannelModel;
use crate::transport::{loopback_pair, Loopback, Transport, TransportError};
use crate::Party;
use rand::RngCore;

/// Deterministic shared bootstrap secret for demos and tests.
pub fn demo_secret(len: usize, seed: u64) -> Vec<u8> {
    let mut out = vec![0u8; len];
    rng_from(seed_from(b"qot-bootstrap", &seed.to_be_bytes())).fill_bytes(&mut out);
    out
}

/// Connects two endpoints concurrently (the handshake blocks on both ends).
pub fn connect_pair<T: Transport>(
    sender: (EndpointConfig, T, Box<dyn RawSource>),
    receiver: (EndpointConfig, T, Box<dyn RawSource>),
    store: &SecretStore,
) -> Result<(Endpoint<T>, Endpoint<T>), TransportError> {
    let (sa, sb) = (store.clone(), store.clone());
    std::thread::scope(|s| {
        let h = s.spawn(move || Endpoint::connect(sender.0, sender.1, sa, sender.2));
        let b = Endpoint::connect(receiver.0, receiver.1, sb, receiver.2);
        let a = h.join().expect("handshake thread panicked");
        Ok((a?, b?))
    })
}

/// Both parties over the given transports, fed by the same simulated
/// channel. `seed` fixes the channel and both parties' private randomness.
pub fn sim_endpoints<T: Transport>(
    params: &ProtocolParams,
    model: &ChannelModel,
    seed: u64,
    store: &SecretStore,
    transports: (T, T),
) -> Result<(Endpoint<T>, Endpoint<T>), TransportError> {
    let sim_seed = seed_from(b"qot-sim", &seed.to_be_bytes());
    let fragment = 100_000;
    let mk = |role: Party| {
        let mut cfg = EndpointConfig::new(role, params.clone());
        cfg.seed = seed_from(b"qot-party", &seed.to_be_bytes());
        let src: Box<dyn RawSource> = Box::new(SimSource::new(model.clone(), role, fragment, sim_seed));
        (cfg, src)
    };
    let (ca, sa) = mk(Party::Sender);
    let (cb, sb) = mk(Party::Receiver);
    connect_pair((ca, transports.0, sa), (cb, transports.1, sb), store)
}

/// [`sim_endpoints`] over an in-process loopback.
pub fn loopback_endpoints(
    params: &ProtocolParams,
    model: &ChannelModel,
    seed: u64,
    store: &SecretStore,
) -> Result<(Endpoint<Loopback>, Endpoint<Loopback>), TransportError> {
    sim_endpoints(params, model, seed, store, loopback_pair())
}

pub type OtOutcome = Result<OtResult, AbortReason>;

/// Runs `choices.len()` OT sessions on both endpoints in lockstep.
pub fn run_pair<T: Transport>(
    sender: &mut Endpoint<T>,
    receiver: &mut Endpoint<T>,
    length: usize,
    choices: &[bool],
) -> (Vec<OtOutcome>, Vec<OtOutcome>) {
    std::thread::scope(|s| {
        let h = s.spawn(|| choices.iter().map(|_| sender.run_ot(length, None)).collect::<Vec<_>>());
        let b: Vec<_> = choices.iter().map(|&c| receiver.run_ot(length, Some(c))).collect();
        (h.join().expect("sender thread panicked"), b)
    })
}
