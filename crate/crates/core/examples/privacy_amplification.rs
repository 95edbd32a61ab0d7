//! Toeplitz extraction: fast hash against the explicit matrix, and the
//! length bound that refuses an over-long output.

use qot::bits::BitString;
use qot::pa::{amplify_receiver, amplify_sender, toeplitz_naive, ToeplitzSeed};
use qot::params::{max_secure_length, ProtocolParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let p = ProtocolParams::default();
    let n_raw = p.derived_counts().n_raw;
    let bound = max_secure_length(n_raw, &p, p.f_ec, p.eps_total_target);
    println!("n_raw={n_raw}, certified output bound at f={}: {bound} bits", p.f_ec);

    let n_in = 20_000;
    let x0 = BitString::from_fn(n_in, |_| rng.gen());
    let x1 = BitString::from_fn(n_in, |_| rng.gen());
    let seed = ToeplitzSeed::random(&mut rng, n_in, 128);
    let [m0, m1] = amplify_sender([&x0, &x1], &seed, 128).expect("within bound");
    let mb = amplify_receiver(&x1, &seed, 128).expect("within bound");
    assert_eq!(mb, m1);
    assert_eq!(m0, toeplitz_naive(&x0, &seed));
    println!("m0 = {}", hex::encode(m0.to_bytes()));
    println!("m1 = {}", hex::encode(m1.to_bytes()));
    println!("bound 100 < 128: {:?}", amplify_receiver(&x1, &seed, 100).err());
}
