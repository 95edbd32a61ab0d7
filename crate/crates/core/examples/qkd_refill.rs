//! The QKD lane topping up the authentication pool: one explicit round,
//! then a low-watermark store that forces refills before OT sessions.

use qot::auth::SecretStore;
use qot::params::ProtocolParams;
use qot::pipeline::{demo_secret, loopback_endpoints, run_pair, QkdProgress};
use qot::qsim::ChannelModel;

fn main() {
    let params = ProtocolParams::smoke_scale();
    let model = ChannelModel::with_qber(0.0075);
    let store = SecretStore::new(&demo_secret(1024, 3));
    let (mut a, mut b) = loopback_endpoints(&params, &model, 3, &store).expect("handshake");
    let before = a.store().available();
    let (x, y) = std::thread::scope(|s| {
        let h = s.spawn(|| a.run_qkd_round());
        let y = b.run_qkd_round();
        (h.join().unwrap(), y)
    });
    println!("round: sender {x:?}, receiver {y:?}");
    if let Ok(QkdProgress::Replenished(n)) = x {
        println!("pool {before} -> {} bytes (+{n})", a.store().available());
    }

    let tight = SecretStore::new(&demo_secret(5 * 32 + 64, 4)).with_watermark(256);
    let (mut a, mut b) = loopback_endpoints(&params, &model, 4, &tight).expect("handshake");
    let (ra, _) = run_pair(&mut a, &mut b, 128, &[true, false]);
    let s = a.summary();
    println!("ots ok: {}, qkd rounds: {}", ra.iter().filter(|r| r.is_ok()).count(), s.qkd_rounds);
    for (lane, start, len) in a.mux().routes() {
        println!("  route {lane:?} events {start}..{}", start + len);
    }
}
