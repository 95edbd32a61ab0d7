//! Fault-injection harness: flip one payload bit in one frame of one stage
//! and check the session dies with `auth_fail` and releases nothing.
//!
//! HELLO is outside the sweep (the handshake compares digests directly) and
//! so is AUTH_ACK, the final confirmation byte after both tags were compared.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::auth::SecretStore;
use crate::otcore::AbortReason;
use crate::params::ProtocolParams;
use crate::qsim::ChannelModel;
use crate::transport::{loopback_pair, tags, Lane, Loopback, TamperRule, Tampering, TypeTag};
use crate::Party;

use super::session::QkdProgress;
use super::{demo_secret, run_pair, sim_endpoints, OtOutcome};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultCase {
    pub stage: &'static str,
    pub from: Party,
    pub rule: TamperRule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultOutcome {
    pub case: FaultCase,
    pub fired: bool,
    pub sender: Result<(), AbortReason>,
    pub receiver: Result<(), AbortReason>,
    /// OT strings or key bytes that left the pipeline anyway.
    pub released: usize,
}

impl FaultOutcome {
    pub fn caught(&self) -> bool {
        self.fired
            && self.sender == Err(AbortReason::AuthFail)
            && self.receiver == Err(AbortReason::AuthFail)
            && self.released == 0
    }
}

fn case(stage: &'static str, from: Party, lane: Lane, tag: TypeTag, nth: usize) -> FaultCase {
    FaultCase {
        stage,
        from,
        rule: TamperRule { lane, tag, nth, bit: 0 },
    }
}

/// Every tamperable frame of the five OT stages, from the party that sends it.
pub fn ot_cases() -> Vec<FaultCase> {
    use Party::{Receiver as R, Sender as S};
    let mut v = vec![
        case("commit", S, Lane::Ot, tags::OT_REQ, 0),
        case("commit", S, Lane::Ot, tags::PUBLIC, 0),
        case("commit", R, Lane::Ot, tags::COMMITS, 0),
        case("open", S, Lane::Ot, tags::TEST_SET, 0),
        case("open", R, Lane::Ot, tags::OPENINGS, 0),
        case("separate", S, Lane::Ot, tags::THETA_A, 0),
        case("separate", R, Lane::Ot, tags::PAIR, 0),
        case("reconcile", S, Lane::Ot, tags::CASC_PAR, 0),
        case("reconcile", R, Lane::Ot, tags::CASC_RSP, 0),
        case("reconcile", S, Lane::Ot, tags::CASC_VER, 0),
        case("amplify", S, Lane::Ot, tags::PA_SEED, 0),
    ];
    for (k, stage) in ["commit", "open", "separate", "reconcile", "amplify"].into_iter().enumerate() {
        for from in [S, R] {
            v.push(case(stage, from, Lane::Ot, tags::STATUS, k));
            v.push(case(stage, from, Lane::Ot, tags::AUTH_TAG, k));
        }
    }
    v
}

/// Every tamperable frame of the three QKD stages.
pub fn qkd_cases() -> Vec<FaultCase> {
    use Party::{Receiver as R, Sender as S};
    let mut v = vec![
        case("qkd-sift", S, Lane::Qkd, tags::QKD_BAS, 0),
        case("qkd-sift", R, Lane::Qkd, tags::QKD_BAS, 0),
        case("qkd-sift", S, Lane::Qkd, tags::QKD_SMP, 0),
        case("qkd-sift", R, Lane::Qkd, tags::QKD_SMP, 0),
        case("qkd-reconcile", S, Lane::Qkd, tags::CASC_PAR, 0),
        case("qkd-reconcile", R, Lane::Qkd, tags::CASC_RSP, 0),
        case("qkd-reconcile", S, Lane::Qkd, tags::CASC_VER, 0),
        case("qkd-amplify", S, Lane::Qkd, tags::PA_SEED, 0),
        case("qkd-amplify", S, Lane::Qkd, tags::REPLEN, 0),
    ];
    for (k, stage) in ["qkd-sift", "qkd-reconcile", "qkd-amplify"].into_iter().enumerate() {
        for from in [S, R] {
            v.push(case(stage, from, Lane::Qkd, tags::STATUS, k));
            v.push(case(stage, from, Lane::Qkd, tags::AUTH_TAG, k));
        }
    }
    v
}

/// Assigns each case a random bit position.
pub fn with_random_bits(cases: Vec<FaultCase>, seed: u64) -> Vec<FaultCase> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    cases
        .into_iter()
        .map(|mut c| {
            c.rule.bit = rng.gen_range(0..1 << 30);
            c
        })
        .collect()
}

type Tampered = Tampering<Loopback>;

fn endpoints(
    params: &ProtocolParams,
    model: &ChannelModel,
    seed: u64,
    store: &SecretStore,
    c: &FaultCase,
) -> (super::Endpoint<Tampered>, super::Endpoint<Tampered>) {
    let (ta, tb) = loopback_pair();
    // a rule that can never match leaves the other side untouched
    let idle = TamperRule {
        lane: c.rule.lane,
        tag: tags::HELLO,
        nth: usize::MAX,
        bit: 0,
    };
    let (ra, rb) = match c.from {
        Party::Sender => (c.rule.clone(), idle),
        Party::Receiver => (idle, c.rule.clone()),
    };
    sim_endpoints(params, model, seed, store, (Tampering::new(ta, ra), Tampering::new(tb, rb)))
        .expect("handshake is never tampered")
}

fn outcome(r: &OtOutcome) -> Result<(), AbortReason> {
    r.as_ref().map(|_| ()).map_err(|e| *e)
}

/// One OT session with the fault armed.
pub fn run_ot_case(params: &ProtocolParams, model: &ChannelModel, seed: u64, c: &FaultCase) -> FaultOutcome {
    let store = SecretStore::new(&demo_secret(4096, seed));
    let (mut a, mut b) = endpoints(params, model, seed, &store, c);
    let (ra, rb) = run_pair(&mut a, &mut b, params.n_out, &[seed % 2 == 1]);
    let released = ra.iter().chain(&rb).filter(|r| r.is_ok()).count();
    FaultOutcome {
        case: c.clone(),
        fired: a.transport_fired() || b.transport_fired(),
        sender: outcome(&ra[0]),
        receiver: outcome(&rb[0]),
        released,
    }
}

/// One QKD refill round with the fault armed.
pub fn run_qkd_case(params: &ProtocolParams, model: &ChannelModel, seed: u64, c: &FaultCase) -> FaultOutcome {
    let store = SecretStore::new(&demo_secret(4096, seed));
    let (mut a, mut b) = endpoints(params, model, seed, &store, c);
    let (x, y) = std::thread::scope(|s| {
        let h = s.spawn(|| a.run_qkd_round());
        let y = b.run_qkd_round();
        (h.join().expect("sender thread panicked"), y)
    });
    let released = [&x, &y]
        .iter()
        .map(|r| match r {
            Ok(QkdProgress::Replenished(n)) => *n,
            _ => 0,
        })
        .sum::<usize>()
        + a.store().next_replenish_handle() as usize
        + b.store().next_replenish_handle() as usize;
    let strip = |r: Result<QkdProgress, AbortReason>| r.map(|_| ());
    FaultOutcome {
        case: c.clone(),
        fired: a.transport_fired() || b.transport_fired(),
        sender: strip(x),
        receiver: strip(y),
        released,
    }
}

impl super::Endpoint<Tampered> {
    fn transport_fired(&self) -> bool {
        self.transport().fired()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_lists_cover_every_stage() {
        let ot = ot_cases();
        for s in ["commit", "open", "separate", "reconcile", "amplify"] {
            assert!(ot.iter().filter(|c| c.stage == s).count() >= 5, "{s}");
        }
        let q = qkd_cases();
        for s in ["qkd-sift", "qkd-reconcile", "qkd-amplify"] {
            assert!(q.iter().filter(|c| c.stage == s).count() >= 5, "{s}");
        }
    }

    #[test]
    fn random_bits_are_deterministic() {
        assert_eq!(with_random_bits(ot_cases(), 3), with_random_bits(ot_cases(), 3));
    }
}
