//! Position-hiding Cascade on two sender blocks, one of which the receiver
//! holds with channel noise.

use qot::bits::BitString;
use qot::cascade::{reconcile_local, CascadeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn main() {
    let n = 100_000;
    let q = 0.01;
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let x0 = BitString::from_fn(n, |_| rng.gen());
    let x1 = BitString::from_fn(n, |_| rng.gen());
    for c in [0usize, 1] {
        let own = if c == 0 { &x0 } else { &x1 };
        let noisy = BitString::from_fn(n, |i| own.get(i) ^ rng.gen_bool(q));
        let errors = noisy.hamming_distance(own);
        let out = reconcile_local(&[&x0, &x1], &noisy, c, q, &[9; 32], &CascadeConfig::default(), &mut rng)
            .expect("cascade");
        println!(
            "c={c}: {errors} errors, {} corrected, leak {:?}, f={:.3}, rounds {}, verify {:?}",
            out.corrections,
            out.leak_bits_per_position,
            out.f_actual.unwrap_or(f64::NAN),
            out.rounds,
            out.verified
        );
        assert_eq!(&out.corrected_receiver_block, own);
    }
}
