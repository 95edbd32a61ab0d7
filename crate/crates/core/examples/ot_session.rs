//! Desk-scale OT sessions over an in-process loopback: outputs, the stage
//! log and the throughput summary.

use qot::auth::SecretStore;
use qot::otcore::OtResult;
use qot::params::ProtocolParams;
use qot::pipeline::{demo_secret, loopback_endpoints, run_pair};
use qot::qsim::ChannelModel;

fn main() {
    let params = ProtocolParams::desk_scale();
    let store = SecretStore::new(&demo_secret(4096, 1));
    let (mut alice, mut bob) =
        loopback_endpoints(&params, &ChannelModel::with_qber(0.0075), 1, &store).expect("handshake");
    let choices = [false, true, true];
    let (ra, rb) = run_pair(&mut alice, &mut bob, params.n_out, &choices);
    for (a, b) in ra.iter().zip(&rb) {
        match (a, b) {
            (Ok(OtResult::Sender { m0, m1 }), Ok(OtResult::Receiver { mc, c })) => {
                let want = if *c { m1 } else { m0 };
                println!("c={} mc={} ok={}", *c as u8, hex::encode(mc.to_bytes()), mc == want);
            }
            other => println!("aborted: {other:?}"),
        }
    }
    for r in alice.log().iter().take(12) {
        println!("{r}");
    }
    let s = alice.summary();
    println!(
        "ots={} qber_meas={:.4} f_meas={:.3} ot_per_s={:.2}",
        s.ots_done,
        s.qber_meas.unwrap_or(f64::NAN),
        s.f_meas.unwrap_or(f64::NAN),
        s.ot_per_s
    );
}
