//! Simulated entanglement source: QBER against loss, one raw block pair
//! written to disk and read back.

use qot::qsim::{generate_block, read_raw, write_raw, ChannelModel};

fn main() {
    let model = ChannelModel::default();
    for loss in [0.0, 4.0, 8.47, 10.0] {
        let pt = model.channel_at(loss);
        println!(
            "loss {loss:>5.2} dB  fiber {:>5.1} km  coincidences {:>8.1} Hz  qber {:.4}",
            model.fiber_km(loss),
            pt.coincidence_hz,
            pt.mean_qber()
        );
    }

    let (a, b) = generate_block(&ChannelModel::with_qber(0.0075), 200_000, [7; 32]);
    let (mut same, mut err) = (0usize, 0usize);
    for i in 0..a.len() {
        if a.bases.get(i) == b.bases.get(i) {
            same += 1;
            err += (a.outcomes.get(i) != b.outcomes.get(i)) as usize;
        }
    }
    println!("matching bases {same} of {}, observed qber {:.4}", a.len(), err as f64 / same as f64);

    let dir = tempfile::tempdir().expect("tempdir");
    let path = write_raw(dir.path(), &a).expect("write");
    let back = read_raw(&path).expect("read");
    // the seed tag is not part of the file format
    assert_eq!((back.bases, back.outcomes, back.block_id), (a.bases, a.outcomes, a.block_id));
    println!("round trip ok: {}", path.file_name().unwrap().to_string_lossy());
}
