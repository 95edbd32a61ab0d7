//! Raw-event input: sources, block resizing and lane routing.

use std::fs;
use std::path::{Path, PathBuf};

use crate::bits::BitString;
use crate::cascade::seed_from;
use crate::qsim::{generate_block_with_id, parse_raw_file_name, read_raw, ChannelModel, RawEventBlock, RawFileError};
use crate::transport::Lane;
use crate::Party;

/// Produces this party's raw fragments in the order shared with the peer.
pub trait RawSource: Send {
    /// `Ok(None)` means nothing is available right now; callers may retry.
    fn next_fragment(&mut self) -> Result<Option<RawEventBlock>, RawFileError>;
}

/// Live simulation. Both parties run it with the same seed and keep their
/// own half of every generated pair.
pub struct SimSource {
    pub model: ChannelModel,
    pub party: Party,
    pub fragment_events: usize,
    pub seed: [u8; 32],
    next: u64,
    /// Stop after this many fragments, to exercise backpressure.
    pub limit: Option<u64>,
}

impl SimSource {
    pub fn new(model: ChannelModel, party: Party, fragment_events: usize, seed: [u8; 32]) -> Self {
        Self {
            model,
            party,
            fragment_events,
            seed,
            next: 0,
            limit: None,
        }
    }
}

impl RawSource for SimSource {
    fn next_fragment(&mut self) -> Result<Option<RawEventBlock>, RawFileError> {
        if self.limit.is_some_and(|l| self.next >= l) {
            return Ok(None);
        }
        let id = self.next;
        self.next += 1;
        let seed = seed_from(b"qot-sim-fragment", &[&self.seed[..], &id.to_be_bytes()].concat());
        let (a, b) = generate_block_with_id(&self.model, self.fragment_events, seed, id);
        Ok(Some(if self.party == Party::Sender { a } else { b }))
    }
}

/// Pre-recorded `block_<id>_<party>.qraw` files, consumed in id order. The
/// directory is rescanned when exhausted, so a simulator can refill it.
pub struct FileSource {
    dir: PathBuf,
    party: Party,
    next_min_id: u64,
}

impl FileSource {
    pub fn new(dir: &Path, party: Party) -> Self {
        Self {
            dir: dir.to_path_buf(),
            party,
            next_min_id: 0,
        }
    }

    fn pending(&self) -> Result<Vec<(u64, PathBuf)>, RawFileError> {
        let mut found: Vec<(u64, PathBuf)> = fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                let (id, party) = parse_raw_file_name(&name)?;
                (party == self.party && id >= self.next_min_id).then(|| (id, e.path()))
            })
            .collect();
        found.sort();
        Ok(found)
    }
}

impl RawSource for FileSource {
    fn next_fragment(&mut self) -> Result<Option<RawEventBlock>, RawFileError> {
        let Some((id, path)) = self.pending()?.into_iter().next() else {
            return Ok(None);
        };
        let block = read_raw(&path)?;
        if block.party != self.party {
            return Err(RawFileError::Party(block.party as u8));
        }
        self.next_min_id = id + 1;
        Ok(Some(block))
    }
}

/// Accumulates fragments and cuts blocks of requested sizes, preserving
/// event order. Emitted blocks are identified by their first event id.
#[derive(Debug, Clone)]
pub struct Resizer {
    party: Party,
    bases: BitString,
    outcomes: BitString,
    /// Global id of the first buffered event.
    start: u64,
    pushed: u64,
}

impl Resizer {
    pub fn new(party: Party) -> Self {
        Self {
            party,
            bases: BitString::zeros(0),
            outcomes: BitString::zeros(0),
            start: 0,
            pushed: 0,
        }
    }

    pub fn buffered(&self) -> usize {
        self.bases.len()
    }

    pub fn total_pushed(&self) -> u64 {
        self.pushed
    }

    pub fn push(&mut self, frag: &RawEventBlock) {
        self.bases.extend_from(&frag.bases);
        self.outcomes.extend_from(&frag.outcomes);
        self.pushed += frag.len() as u64;
    }

    /// Global id of the next event to be emitted.
    pub fn next_event(&self) -> u64 {
        self.start
    }

    /// Copies the next `n` events without consuming them.
    pub fn peek(&self, n: usize) -> Option<RawEventBlock> {
        if n == 0 || self.buffered() < n {
            return None;
        }
        Some(RawEventBlock {
            party: self.party,
            bases: self.bases.slice(0, n),
            outcomes: self.outcomes.slice(0, n),
            block_id: self.start,
            seed_tag: 0,
        })
    }

    /// Drops the next `n` buffered events.
    pub fn discard(&mut self, n: usize) {
        let total = self.buffered();
        let n = n.min(total);
        self.bases = self.bases.slice(n, total);
        self.outcomes = self.outcomes.slice(n, total);
        self.start += n as u64;
    }

    /// Cuts the next `n` events, if buffered.
    pub fn take(&mut self, n: usize) -> Option<RawEventBlock> {
        let block = self.peek(n)?;
        self.discard(n);
        Some(block)
    }
}

/// Pushes `incoming` and emits every complete block of `n0` events.
pub fn resize(acc: &mut Resizer, incoming: &[RawEventBlock], n0: usize) -> Vec<RawEventBlock> {
    for f in incoming {
        acc.push(f);
    }
    std::iter::from_fn(|| acc.take(n0)).collect()
}

/// Exclusive routing ledger of event ranges to lanes.
#[derive(Debug, Clone, Default)]
pub struct Mux {
    routes: Vec<(Lane, u64, u64)>,
}

impl Mux {
    /// Records `[start, start + len)` for `lane`. Ranges must not overlap.
    pub fn route(&mut self, lane: Lane, start: u64, len: u64) {
        if let Some(&(_, s, l)) = self.routes.last() {
            assert!(start >= s + l, "raw events routed twice");
        }
        self.routes.push((lane, start, len));
    }

    pub fn routes(&self) -> &[(Lane, u64, u64)] {
        &self.routes
    }

    pub fn events(&self, lane: Lane) -> u64 {
        self.routes.iter().filter(|r| r.0 == lane).map(|r| r.2).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qsim::{generate_block, write_raw};
    use proptest::prelude::*;

    fn frag(n: usize, seed: u8) -> RawEventBlock {
        generate_block(&ChannelModel::noiseless(), n, [seed; 32]).0
    }

    #[test]
    fn two_fragments_one_block() {
        let mut r = Resizer::new(Party::Sender);
        let out = resize(&mut r, &[frag(2_000, 1), frag(2_000, 2)], 3_200);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].len(), 3_200);
        assert_eq!(r.buffered(), 800);
        // exact size passes through
        let mut r = Resizer::new(Party::Sender);
        let f = frag(3_200, 3);
        let out = resize(&mut r, std::slice::from_ref(&f), 3_200);
        assert_eq!(out[0].bases, f.bases);
        assert_eq!(r.buffered(), 0);
    }

    proptest! {
        #[test]
        fn emitted_stream_is_concatenation(sizes in proptest::collection::vec(1usize..300, 1..12), n0 in 1usize..400) {
            let frags: Vec<_> = sizes.iter().enumerate().map(|(i, &n)| frag(n, i as u8)).collect();
            let mut cat = BitString::zeros(0);
            for f in &frags { cat.extend_from(&f.outcomes); }
            let mut r = Resizer::new(Party::Sender);
            let out = resize(&mut r, &frags, n0);
            prop_assert_eq!(out.len(), cat.len() / n0);
            for (k, b) in out.iter().enumerate() {
                prop_assert_eq!(b.block_id, (k * n0) as u64);
                prop_assert_eq!(&b.outcomes, &cat.slice(k * n0, (k + 1) * n0));
            }
            prop_assert_eq!(r.buffered(), cat.len() % n0);
        }
    }

    #[test]
    fn mux_ranges_are_exclusive() {
        let mut m = Mux::default();
        m.route(Lane::Ot, 0, 100);
        m.route(Lane::Qkd, 100, 50);
        assert_eq!(m.events(Lane::Ot), 100);
        assert_eq!(m.events(Lane::Qkd), 50);
        let r = std::panic::catch_unwind(move || m.route(Lane::Ot, 120, 10));
        assert!(r.is_err());
    }

    #[test]
    fn sim_source_parties_pair_up() {
        let mut a = SimSource::new(ChannelModel::noiseless(), Party::Sender, 500, [7; 32]);
        let mut b = SimSource::new(ChannelModel::noiseless(), Party::Receiver, 500, [7; 32]);
        for _ in 0..3 {
            let (fa, fb) = (a.next_fragment().unwrap().unwrap(), b.next_fragment().unwrap().unwrap());
            assert_eq!(fa.block_id, fb.block_id);
            for i in 0..500 {
                if fa.bases.get(i) == fb.bases.get(i) {
                    assert_eq!(fa.outcomes.get(i), fb.outcomes.get(i));
                }
            }
        }
    }

    #[test]
    fn file_source_rescans() {
        let dir = tempfile::tempdir().unwrap();
        let mut src = FileSource::new(dir.path(), Party::Receiver);
        assert!(src.next_fragment().unwrap().is_none());
        for id in [3u64, 1] {
            let (_, mut b) = generate_block(&ChannelModel::noiseless(), 64, [id as u8; 32]);
            b.block_id = id;
            write_raw(dir.path(), &b).unwrap();
        }
        assert_eq!(src.next_fragment().unwrap().unwrap().block_id, 1);
        assert_eq!(src.next_fragment().unwrap().unwrap().block_id, 3);
        assert!(src.next_fragment().unwrap().is_none());
    }
}
