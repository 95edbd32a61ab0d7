//! OT rate against epsilon and loss, as CSV, plus the block size each
//! epsilon needs.

use qot::params::{n0_for_epsilon, ot_rate_curve, rates_to_csv, ProtocolParams};
use qot::qsim::ChannelModel;

fn main() {
    let p = ProtocolParams::default();
    let model = ChannelModel::default();
    let eps = [1e-8, 1e-3];
    let loss: Vec<f64> = (0..=12).map(f64::from).collect();
    print!("{}", rates_to_csv(&ot_rate_curve(&model, &p, &eps, &loss)));
    for e in eps {
        let n0 = n0_for_epsilon(&p, e).unwrap();
        println!("eps={e:e}: N0={n0}, {:.1} s of coincidences at 0 dB", n0 as f64 / model.channel_at(0.0).coincidence_hz);
    }
}
