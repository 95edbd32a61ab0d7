//! Flips one bit in every tamperable frame type of every stage and checks
//! that both parties abort with auth_fail and release nothing.

use qot::params::ProtocolParams;
use qot::pipeline::faults::{ot_cases, qkd_cases, run_ot_case, run_qkd_case, with_random_bits, FaultOutcome};
use qot::qsim::ChannelModel;
use qot::transport::tags;

fn sweep() -> Vec<FaultOutcome> {
    let p = ProtocolParams::smoke_scale();
    let m = ChannelModel::with_qber(0.0075);
    let mut out: Vec<FaultOutcome> = with_random_bits(ot_cases(), 1)
        .iter()
        .enumerate()
        .map(|(i, c)| run_ot_case(&p, &m, i as u64, c))
        .collect();
    out.extend(
        with_random_bits(qkd_cases(), 2)
            .iter()
            .enumerate()
            .map(|(i, c)| run_qkd_case(&p, &m, 1000 + i as u64, c)),
    );
    out
}

#[allow(dead_code)]
fn main() {
    let results = sweep();
    for o in &results {
        println!(
            "{:<14} {:<8} {:<9} nth={} caught={}",
            o.case.stage,
            tags::name(&o.case.rule.tag),
            o.case.from,
            o.case.rule.nth,
            o.caught()
        );
    }
    let caught = results.iter().filter(|o| o.caught()).count();
    println!("{caught}/{} faults caught", results.len());
}
