//! From 128 base transfers to many: IKNP extension checked against both
//! parties' secrets, then Gilboa products and Beaver triples.

use qot::bits::BitString;
use qot::mpc::{dealer_rots, ot_extend, rot_to_ot, ExtBase, OtLedger};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn main() {
    // roles reversed: the quantum receiver's view seeds the extension sender
    let (s, r) = dealer_rots(7, 128);
    let m0 = BitString::from_bools(&[true, false, true, true]);
    let m1 = BitString::from_bools(&[false, false, true, false]);
    let (rs, rr) = dealer_rots(8, 4);
    println!("rot_to_ot b=1 -> {:?}", rot_to_ot(&rs[0], &rr[0], &m0, &m1, true).unwrap());

    let (bs, br) = (ExtBase::from_rots(&r).unwrap(), ExtBase::from_rots(&s).unwrap());
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let k = 512;
    let msgs: Vec<[BitString; 2]> = (0..k).map(|_| [0, 1].map(|_| BitString::from_fn(128, |_| rng.gen()))).collect();
    let choices: Vec<bool> = (0..k).map(|_| rng.gen()).collect();
    let (mut la, mut lb) = (OtLedger::default(), OtLedger::default());
    let got = ot_extend(&bs, &br, &msgs, &choices, (&mut la, &mut lb)).unwrap();
    let ok = (0..k).filter(|&j| got[j] == msgs[j][choices[j] as usize]).count();
    println!("extended {k} OTs from 128 base OTs: {ok}/{k} match the oracle");
    println!("ledger: base consumed {}, supplied {}", la.base_consumed, la.supplied);
    println!("second extension: {:?}", ot_extend(&bs, &br, &msgs, &choices, (&mut la, &mut lb)).err());
}
