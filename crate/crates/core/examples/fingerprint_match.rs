//! End to end: 128 base OTs from desk-scale quantum sessions, extended and
//! spent on a private squared-distance match against a small database.

use qot::auth::SecretStore;
use qot::mpc::{self, ExtBase, FingerprintDb, MatchInput, MpcChannel, OtLedger, RotPair};
use qot::params::ProtocolParams;
use qot::pipeline::{demo_secret, loopback_endpoints, run_pair};
use qot::qsim::ChannelModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn main() {
    let params = ProtocolParams::smoke_scale();
    let store = SecretStore::new(&demo_secret(8192, 6));
    let (mut a, mut b) = loopback_endpoints(&params, &ChannelModel::with_qber(0.0075), 6, &store).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let (mut rs, mut rr) = (Vec::new(), Vec::<RotPair>::new());
    let mut aborted = 0;
    while rs.len() < mpc::BASE_OTS {
        let (ra, rb) = run_pair(&mut a, &mut b, 128, &[rng.gen()]);
        match (ra.into_iter().next().unwrap(), rb.into_iter().next().unwrap()) {
            (Ok(x), Ok(y)) => {
                rs.push(x.into());
                rr.push(y.into());
            }
            // statistical aborts are symmetric and leave the endpoints usable
            _ => aborted += 1,
        }
    }
    println!("base OTs: {} ({aborted} sessions aborted)", rs.len());

    let feats: Vec<Vec<f64>> = (0..10).map(|_| (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let db = FingerprintDb::from_features(&feats).unwrap();
    let noisy: Vec<u64> = feats[2].iter().map(|x| mpc::encode_fixed(x + 0.01)).collect();
    let threshold = mpc::encode_distance(0.05);

    let (bs, br) = (ExtBase::from_rots(&rr).unwrap(), ExtBase::from_rots(&rs).unwrap());
    let (mut ca, mut cb) = (MpcChannel::new(a.into_transport()), MpcChannel::new(b.into_transport()));
    let (x, y) = std::thread::scope(|s| {
        let h = s.spawn(|| mpc::run_match(&mut cb, &bs, OtLedger::default(), &MatchInput::Template(noisy.clone()), threshold, 1));
        let x = mpc::run_match(&mut ca, &br, OtLedger::default(), &MatchInput::Database(db.clone()), threshold, 2);
        (x.unwrap(), h.join().unwrap().unwrap())
    });
    assert_eq!(x.outcome, y.outcome);
    for (i, (d, v)) in x.outcome.distances.iter().zip(&x.outcome.verdicts).enumerate() {
        let plain = mpc::plain_distance(&noisy, &db.rows[i]);
        println!("row {i}: distance {:.5} match {v} plaintext-equal {}", mpc::decode_distance(*d), *d == plain);
    }
    println!(
        "multiplications {} additions {} extended OTs {} (distances are revealed to both sides)",
        x.outcome.multiplications, x.outcome.additions, x.ledger.consumed
    );
}
