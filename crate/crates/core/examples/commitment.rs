//! Bit-pair commitments: commit, open, batch verify, and the exhaustive
//! binding count on the scaled-down instance.

use qot::commitment::toy::{exhaustive_binding, ToyCipher};
use qot::commitment::{commit, commit_batch, sample_public, verify_batch, verify_open, Opening};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let public = sample_public(&mut rng);
    for (b1, b2) in [(false, false), (false, true), (true, false), (true, true)] {
        let o = Opening::random(&mut rng, b1, b2);
        let c = commit(&public, &o);
        let forged = Opening { b1: !b1, ..o.clone() };
        println!(
            "pair ({},{}) opens: {}  flipped opens: {}",
            b1 as u8,
            b2 as u8,
            verify_open(&public, &c, &o),
            verify_open(&public, &c, &forged)
        );
    }

    let openings: Vec<Opening> = (0..10_000).map(|_| {
            let (b1, b2) = (rng.gen(), rng.gen());
            Opening::random(&mut rng, b1, b2)
        }).collect();
    let cs = commit_batch(&public, &openings);
    println!("batch of {}: {:?}", cs.len(), verify_batch(&public, &cs, &openings).map(|_| "ok"));

    let r = exhaustive_binding(&ToyCipher::new(3));
    println!(
        "toy instance: {} of {} public strings equivocable, rate {:.3e}, bound {:.3e}",
        r.equivocable, r.public_strings, r.rate, r.bound
    );
}
