//! Entanglement-based quantum oblivious transfer post-processing.
//!
//! The crate turns paired raw detection records into random oblivious
//! transfers: commitment-backed parameter estimation, position-hiding
//! Cascade reconciliation, Toeplitz privacy amplification and a one-time MAC
//! replenished by a parallel QKD lane. On top sits a small semi-honest
//! two-party computation layer (OT extension, Beaver triples, private
//! fingerprint matching).

pub mod auth;
pub mod bits;
pub mod cascade;
pub mod cli;
pub mod pa;
pub mod params;
pub mod pipeline;
pub mod commitment;
pub mod mpc;
pub mod otcore;
pub mod qkdlane;
pub mod qsim;
pub mod stats;
pub mod transport;

use std::fmt;

/// The two protocol roles. The sender (Alice) ends with `(m0, m1)`, the
/// receiver (Bob) with `(m_c, c)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Party {
    Sender = 0,
    Receiver = 1,
}

impl Party {
    pub fn from_u8(b: u8) -> Option<Self> {
        match b {
            0 => Some(Party::Sender),
            1 => Some(Party::Receiver),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Party::Sender => "sender",
            Party::Receiver => "receiver",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "sender" | "alice" => Some(Party::Sender),
            "receiver" | "bob" => Some(Party::Receiver),
            _ => None,
        }
    }

    pub fn peer(self) -> Self {
        match self {
            Party::Sender => Party::Receiver,
            Party::Receiver => Party::Sender,
        }
    }
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
