//! Security calculus at the default parameters: key-rate bracket, epsilon
//! terms, the QBER root and the longest certifiable output.

use qot::params::{
    asymptotic_key_rate, epsilon_budget, max_secure_length, n0_for_epsilon, rate_bracket, ProtocolParams,
};

/// Bisection on the bracket in `p_max`.
fn bracket_root(base: &ProtocolParams) -> f64 {
    let (mut lo, mut hi) = (0.001, 0.05);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let p = ProtocolParams { p_max: mid, ..base.clone() };
        if rate_bracket(&p, p.f_ec) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn main() {
    let p = ProtocolParams::default();
    let counts = p.derived_counts();
    let bracket = rate_bracket(&p, p.f_ec);
    println!("n_test={} n_check={} n_raw={}", counts.n_test, counts.n_check, counts.n_raw);
    println!("bracket={bracket:.6e} rate={:.6e}", asymptotic_key_rate(&p));
    println!("n_raw * bracket = {:.1} bits", counts.n_raw as f64 * bracket);
    println!("bracket root in p_max = {:.6}", bracket_root(&p));

    let b = epsilon_budget(&p, p.n_out as u64).expect("valid params");
    println!("eps_correct={:.3e} eps_sender={:.3e} eps_total={:.3e}", b.eps_correct, b.eps_sender, b.eps_total);
    println!("eps_bind={:.3e}", b.eps_bind);
    for (name, t) in ["sampling", "split", "pa"].iter().zip(b.sender_terms()) {
        println!("  sender {name:<8} log2 = {:.2}", t.0);
    }
    if let Some(n0) = n0_for_epsilon(&p, 1e-8) {
        println!("N0 needed for eps=1e-8: {n0}");
    }
    println!(
        "longest output at f=1.027: {} bits",
        max_secure_length(counts.n_raw, &p, p.f_ec, p.eps_total_target)
    );

    let d = ProtocolParams::desk_scale();
    let dc = d.derived_counts();
    let eps = epsilon_budget(&d, d.n_out as u64).unwrap().eps_total;
    println!("desk preset: n0={} n_raw={} eps_total={eps:.3}", d.n0, dc.n_raw);
}
