//! Protocol parameters and the security/performance calculus.
//!
//! Every epsilon term is evaluated in double-double precision and carried in
//! the log2 domain, so terms like `2^-253` neither underflow nor lose the
//! small residual of the key-rate bracket (about `2e-4` at the defaults).

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;
use twofloat::TwoFloat;

use crate::qsim::ChannelModel;

#[derive(Debug, Error, PartialEq)]
pub enum ParamsError {
    #[error("{name} = {value} outside its domain ({domain})")]
    Domain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("requested length {n} exceeds raw block length {n_raw}")]
    LengthExceedsRaw { n: u64, n_raw: u64 },
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
}

fn domain(name: &'static str, value: f64, domain: &'static str) -> ParamsError {
    ParamsError::Domain {
        name,
        value,
        domain,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolParams {
    /// Fraction of events opened for parameter estimation.
    pub alpha: f64,
    /// Nominal error-correction efficiency.
    pub f_ec: f64,
    /// Shared entangled states per block.
    pub n0: u64,
    pub p_max: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub eps_ir: f64,
    pub eps_bind: f64,
    /// Final OT string length in bits.
    pub n_out: usize,
    pub eps_total_target: f64,
    /// Share of the epsilon target allotted to each of the three sender-security terms.
    pub budget_split: [f64; 3],
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self {
            alpha: 0.35,
            f_ec: 1.0270,
            n0: 3_200_000,
            p_max: 0.014,
            delta1: 1.34e-2,
            delta2: 5e-3,
            eps_ir: 2f64.powi(-96),
            eps_bind: 2f64.powi(-253),
            n_out: 128,
            eps_total_target: 2.35e-8,
            budget_split: [1.0 / 3.0; 3],
        }
    }
}

impl ProtocolParams {
    /// Reduced-scale preset for desk runs: ten times fewer events. `p_max`
    /// is lowered and `delta2` widened so a 128-bit output survives a
    /// realistic reconciliation efficiency at 0.75% QBER; the epsilon target
    /// is relaxed to what this block size can certify (about 0.12).
    pub fn desk_scale() -> Self {
        Self {
            n0: 320_000,
            p_max: 0.0095,
            delta1: 0.015,
            delta2: 0.01,
            eps_total_target: 0.2,
            ..Self::default()
        }
    }

    /// Fast preset for plumbing tests: 64k events, a looser sampling margin
    /// and an epsilon target of 1, so it certifies nothing. Only for
    /// exercising the pipeline.
    pub fn smoke_scale() -> Self {
        Self {
            n0: 64_000,
            delta1: 0.012,
            eps_total_target: 1.0,
            ..Self::desk_scale()
        }
    }

    pub fn validate(&self) -> Result<(), ParamsError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(domain("alpha", self.alpha, "0 < alpha < 1"));
        }
        if !(self.p_max > 0.0 && self.p_max <= 0.5) {
            return Err(domain("p_max", self.p_max, "0 < p_max <= 1/2"));
        }
        if !(self.delta1 > 0.0 && self.delta1 < 0.5) {
            return Err(domain("delta1", self.delta1, "0 < delta1 < 1/2"));
        }
        if !(self.delta2 > 0.0 && self.delta2 < 0.5) {
            return Err(domain("delta2", self.delta2, "0 < delta2 < 1/2"));
        }
        if !(self.f_ec >= 1.0) {
            return Err(domain("f_ec", self.f_ec, "f_ec >= 1"));
        }
        if self.n_out < 1 {
            return Err(domain("n_out", self.n_out as f64, "n_out >= 1"));
        }
        if self.n0 < 1 {
            return Err(domain("n0", self.n0 as f64, "n0 >= 1"));
        }
        for (name, v) in [
            ("eps_ir", self.eps_ir),
            ("eps_bind", self.eps_bind),
            ("eps_total_target", self.eps_total_target),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(domain(name, v, "0 < eps <= 1"));
            }
        }
        let split_sum: f64 = self.budget_split.iter().sum();
        if self.budget_split.iter().any(|&s| s <= 0.0) || (split_sum - 1.0).abs() > 1e-9 {
            return Err(domain("budget_split", split_sum, "positive shares summing to 1"));
        }
        Ok(())
    }

    pub fn derived_counts(&self) -> DerivedCounts {
        DerivedCounts::new(self.n0, self.alpha, self.delta2)
    }

    /// Flat `key=value` rendering using the table symbol names.
    pub fn to_config(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "alpha={}", self.alpha);
        let _ = writeln!(s, "f_ec={}", self.f_ec);
        let _ = writeln!(s, "n0={}", self.n0);
        let _ = writeln!(s, "p_max={}", self.p_max);
        let _ = writeln!(s, "delta1={}", self.delta1);
        let _ = writeln!(s, "delta2={}", self.delta2);
        let _ = writeln!(s, "eps_ir={:e}", self.eps_ir);
        let _ = writeln!(s, "eps_bind={:e}", self.eps_bind);
        let _ = writeln!(s, "n_out={}", self.n_out);
        let _ = writeln!(s, "eps_total_target={:e}", self.eps_total_target);
        s
    }

    /// Parses a flat `key=value` file. Unlisted keys keep their defaults;
    /// `#` starts a comment. `eps_ir` and `eps_bind` also accept `2^-k`.
    pub fn from_config(text: &str) -> Result<Self, ParamsError> {
        let mut p = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ParamsError::Config {
                line: idx + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = || parse_number(v).ok_or_else(|| err(format!("bad number {v:?}")));
            match k {
                "alpha" => p.alpha = num()?,
                "f_ec" | "f" => p.f_ec = num()?,
                "n0" => p.n0 = num()? as u64,
                "p_max" => p.p_max = num()?,
                "delta1" => p.delta1 = num()?,
                "delta2" => p.delta2 = num()?,
                "eps_ir" => p.eps_ir = num()?,
                "eps_bind" => p.eps_bind = num()?,
                "n_out" => p.n_out = num()? as usize,
                "eps_total_target" | "eps_tot" => p.eps_total_target = num()?,
                _ => return Err(err(format!("unknown key {k:?}"))),
            }
        }
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_config(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    /// SHA-256 over the canonical config text; both parties must agree on it.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"qot-params-v1\n");
        h.update(self.to_config().as_bytes());
        h.finalize().into()
    }
}

fn parse_number(v: &str) -> Option<f64> {
    if let Some(exp) = v.strip_prefix("2^") {
        return exp.parse::<f64>().ok().map(|e| 2f64.powf(e));
    }
    v.parse::<f64>().ok()
}

/// Floor that treats values within rounding noise of an integer as that
/// integer; the parameters are decimal literals such as `0.35 * 3.2e6`.
pub fn floor_tolerant(x: f64) -> u64 {
    let r = x.round();
    let v = if (x - r).abs() <= 1e-9 * x.abs().max(1.0) { r } else { x.floor() };
    v.max(0.0) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DerivedCounts {
    pub n_test: u64,
    pub n_check: u64,
    pub n_raw: u64,
}

impl DerivedCounts {
    pub fn new(n0: u64, alpha: f64, delta2: f64) -> Self {
        let floor = floor_tolerant;
        let n0f = n0 as f64;
        let half_minus = 0.5 - delta2;
        Self {
            n_test: floor(alpha * n0f),
            n_check: floor(half_minus * alpha * n0f),
            n_raw: floor(half_minus * (1.0 - alpha) * n0f),
        }
    }
}

fn dd(x: f64) -> TwoFloat {
    TwoFloat::from(x)
}

fn dd_ln(x: TwoFloat) -> TwoFloat {
    if x == 1.0 {
        TwoFloat::from(0.0)
    } else {
        x.ln()
    }
}

fn dd_log2(x: TwoFloat) -> TwoFloat {
    dd_ln(x) / twofloat::consts::LN_2
}

fn entropy_dd(p: TwoFloat) -> TwoFloat {
    if p == 0.0 || p == 1.0 {
        return dd(0.0);
    }
    let q = dd(1.0) - p;
    -(p * dd_log2(p)) - q * dd_log2(q)
}

/// Binary entropy `h(p)` in bits.
pub fn binary_entropy(p: f64) -> Result<f64, ParamsError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(domain("p", p, "0 <= p <= 1"));
    }
    Ok(entropy_dd(dd(p)).hi())
}

/// Binary relative entropy `D(p || q)` in bits.
pub fn kl_divergence_binary(p: f64, q: f64) -> Result<f64, ParamsError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(domain("p", p, "0 < p < 1"));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(domain("q", q, "0 < q < 1"));
    }
    Ok(kl_dd(dd(p), dd(q)).hi())
}

fn kl_dd(p: TwoFloat, q: TwoFloat) -> TwoFloat {
    if p == q {
        return dd(0.0);
    }
    let one = dd(1.0);
    p * dd_log2(p / q) + (one - p) * dd_log2((one - p) / (one - q))
}

/// The inner bracket of the asymptotic rate,
/// `1/2 - d2 - h((p_max + d1) / (1/2 - d2)) - f * h(p_max + d1)`.
pub fn rate_bracket(params: &ProtocolParams, f: f64) -> f64 {
    rate_bracket_dd(params.p_max, params.delta1, params.delta2, f).hi()
}

fn rate_bracket_dd(p_max: f64, delta1: f64, delta2: f64, f: f64) -> TwoFloat {
    let half_minus = dd(0.5) - dd(delta2);
    let p = dd(p_max) + dd(delta1);
    let scaled = p / half_minus;
    let h_scaled = if scaled >= 1.0 { dd(0.0) } else { entropy_dd(scaled) };
    if scaled > 0.5 {
        // beyond the entropy maximum the bracket has no meaning; force it negative
        return dd(-1.0);
    }
    half_minus - h_scaled - dd(f) * entropy_dd(p)
}

/// Asymptotic oblivious-key rate in bits per shared state. May be negative.
pub fn asymptotic_key_rate(params: &ProtocolParams) -> f64 {
    let half_minus = dd(0.5) - dd(params.delta2);
    let prefactor = (dd(1.0) - dd(params.alpha)) * half_minus;
    (prefactor * rate_bracket_dd(params.p_max, params.delta1, params.delta2, params.f_ec)).hi()
}

/// A probability stored as `log2(p)`; `NEG_INFINITY` encodes zero.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Log2Prob(pub f64);

impl Log2Prob {
    pub fn value(self) -> f64 {
        self.0.exp2()
    }

    pub fn from_value(p: f64) -> Self {
        Log2Prob(p.log2())
    }

    /// `log2(2^a + 2^b)` without leaving the log domain.
    pub fn add(self, other: Log2Prob) -> Log2Prob {
        let (hi, lo) = if self.0 >= other.0 {
            (self.0, other.0)
        } else {
            (other.0, self.0)
        };
        if hi == f64::NEG_INFINITY {
            return Log2Prob(hi);
        }
        Log2Prob(hi + (1.0 + (lo - hi).exp2()).log2())
    }
}

/// Term-by-term breakdown of the correctness and sender-security bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct SecurityBudget {
    /// `2^-(N_raw - n)/2`
    pub correct_length_term: Log2Prob,
    /// `2 * eps_IR`
    pub correct_ir_term: Log2Prob,
    /// `sqrt(2) * (exp(-(1-a)^2 N_test d1^2 / 2) + exp(-N_check d1^2 / 2))^(1/2)`
    pub sender_sampling_term: Log2Prob,
    /// `exp(-D(1/2 - d2 || 1/2) (1-a) N0)`
    pub sender_split_term: Log2Prob,
    /// `2^(n - N_raw * bracket) / 2`
    pub sender_pa_term: Log2Prob,
    /// Correctness epsilon.
    pub eps_correct: f64,
    /// Security for an honest sender.
    pub eps_sender: f64,
    /// `eps_correct + eps_sender`; the commitment contribution is reported
    /// separately in `eps_bind`.
    pub eps_total: f64,
    pub eps_bind: f64,
}

impl SecurityBudget {
    pub fn sender_terms(&self) -> [Log2Prob; 3] {
        [
            self.sender_sampling_term,
            self.sender_split_term,
            self.sender_pa_term,
        ]
    }

    pub fn log2_total(&self) -> Log2Prob {
        self.correct_length_term
            .add(self.correct_ir_term)
            .add(self.sender_sampling_term)
            .add(self.sender_split_term)
            .add(self.sender_pa_term)
    }
}

fn log2_of_exp_neg(x: TwoFloat) -> f64 {
    // log2(e^-x)
    (-x / twofloat::consts::LN_2).hi()
}

/// Evaluates the correctness and sender-security bounds for an `n`-bit output.
pub fn epsilon_budget(params: &ProtocolParams, n: u64) -> Result<SecurityBudget, ParamsError> {
    epsilon_budget_with_f(params, n, params.f_ec)
}

pub fn epsilon_budget_with_f(
    params: &ProtocolParams,
    n: u64,
    f: f64,
) -> Result<SecurityBudget, ParamsError> {
    params.validate()?;
    let counts = params.derived_counts();
    if n > counts.n_raw {
        return Err(ParamsError::LengthExceedsRaw {
            n,
            n_raw: counts.n_raw,
        });
    }
    let n_raw = dd(counts.n_raw as f64);
    let correct_length_term = Log2Prob(-((n_raw - dd(n as f64)) / 2.0).hi());
    let correct_ir_term = Log2Prob(1.0 + params.eps_ir.log2());

    let a = dd(params.alpha);
    let d1 = dd(params.delta1);
    let one_minus_a = dd(1.0) - a;
    let x1 = one_minus_a * one_minus_a * dd(counts.n_test as f64) * d1 * d1 / 2.0;
    let x2 = dd(counts.n_check as f64) * d1 * d1 / 2.0;
    let inner = Log2Prob(log2_of_exp_neg(x1)).add(Log2Prob(log2_of_exp_neg(x2)));
    let sender_sampling_term = Log2Prob(0.5 + inner.0 / 2.0);

    let half_minus = dd(0.5) - dd(params.delta2);
    let kl = kl_dd(half_minus, dd(0.5));
    let sender_split_term =
        Log2Prob(log2_of_exp_neg(kl * one_minus_a * dd(params.n0 as f64)));

    let bracket = rate_bracket_dd(params.p_max, params.delta1, params.delta2, f);
    let sender_pa_term = Log2Prob((dd(n as f64) - n_raw * bracket).hi() - 1.0);

    let eps_correct = correct_length_term.add(correct_ir_term).value();
    let eps_sender = sender_sampling_term
        .add(sender_split_term)
        .add(sender_pa_term)
        .value();
    Ok(SecurityBudget {
        correct_length_term,
        correct_ir_term,
        sender_sampling_term,
        sender_split_term,
        sender_pa_term,
        eps_correct,
        eps_sender,
        eps_total: eps_correct + eps_sender,
        eps_bind: params.eps_bind,
    })
}

/// log2 of the privacy-amplification term `2^(n - n_raw * bracket) / 2`.
pub fn pa_term_log2(n: u64, n_raw: u64, params: &ProtocolParams, f: f64) -> f64 {
    let bracket = rate_bracket_dd(params.p_max, params.delta1, params.delta2, f);
    (dd(n as f64) - dd(n_raw as f64) * bracket).hi() - 1.0
}

/// Largest output length whose privacy-amplification term, evaluated with the
/// measured efficiency `f_actual`, stays within its share of `eps_target`.
/// Returns 0 when no positive length qualifies.
pub fn max_secure_length(n_raw: u64, params: &ProtocolParams, f_actual: f64, eps_target: f64) -> u64 {
    let allowed = (eps_target * params.budget_split[2]).log2();
    let fits = |n: u64| pa_term_log2(n, n_raw, params, f_actual) <= allowed;
    let bracket = rate_bracket_dd(params.p_max, params.delta1, params.delta2, f_actual);
    let guess = (dd(n_raw as f64) * bracket + dd(allowed + 1.0)).hi().floor();
    if !(guess >= 1.0) {
        return if fits(1) { 1 } else { 0 };
    }
    let mut n = (guess as u64).min(n_raw);
    while n > 0 && !fits(n) {
        n -= 1;
    }
    while n < n_raw && fits(n + 1) {
        n += 1;
    }
    n
}

/// Smallest block size whose total epsilon for `params.n_out` bits is at most
/// `eps_target`, or `None` when even very large blocks fail.
pub fn n0_for_epsilon(params: &ProtocolParams, eps_target: f64) -> Option<u64> {
    let target = eps_target.log2();
    let ok = |n0: u64| -> bool {
        let p = ProtocolParams {
            n0,
            ..params.clone()
        };
        let counts = p.derived_counts();
        if counts.n_raw < p.n_out as u64 || counts.n_check == 0 {
            return false;
        }
        match epsilon_budget(&p, p.n_out as u64) {
            Ok(b) => b.log2_total().0 <= target,
            Err(_) => false,
        }
    };
    let mut hi: u64 = 1 << 20;
    while !ok(hi) {
        hi = hi.checked_mul(2)?;
        if hi > 1 << 40 {
            return None;
        }
    }
    let mut lo = 1u64;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Some(lo)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateRow {
    pub eps: f64,
    pub loss_db: f64,
    pub fiber_km: f64,
    pub n0: Option<u64>,
    pub qber: f64,
    pub ot_per_s: f64,
    pub feasible: bool,
}

impl RateRow {
    /// Seconds of source time needed to collect one block.
    pub fn accumulation_s(&self, coincidence_hz: f64) -> Option<f64> {
        self.n0.map(|n| n as f64 / coincidence_hz)
    }
}

/// OT rate over an `(eps, loss)` grid: the block size needed for each epsilon,
/// divided into the coincidence rate at each loss. Points whose mean QBER
/// exceeds `p_max` are infeasible.
pub fn ot_rate_curve(
    model: &ChannelModel,
    params: &ProtocolParams,
    eps_grid: &[f64],
    loss_grid: &[f64],
) -> Vec<RateRow> {
    let mut rows = Vec::with_capacity(eps_grid.len() * loss_grid.len());
    for &eps in eps_grid {
        let n0 = n0_for_epsilon(params, eps);
        for &loss_db in loss_grid {
            let point = model.channel_at(loss_db);
            let qber = point.mean_qber();
            let feasible = n0.is_some() && qber <= params.p_max;
            let ot_per_s = match (feasible, n0) {
                (true, Some(n)) => point.coincidence_hz / n as f64,
                _ => 0.0,
            };
            rows.push(RateRow {
                eps,
                loss_db,
                fiber_km: model.fiber_km(loss_db),
                n0,
                qber,
                ot_per_s,
                feasible,
            });
        }
    }
    rows
}

pub const RATE_CSV_HEADER: &str = "eps,loss_db,fiber_km,n0,qber,ot_per_s,feasible";

pub fn rates_to_csv(rows: &[RateRow]) -> String {
    let mut out = String::from(RATE_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let n0 = r.n0.map(|n| n.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{:e},{:.3},{:.3},{},{:.6},{:.6e},{}",
            r.eps, r.loss_db, r.fiber_km, n0, r.qber, r.ot_per_s, r.feasible
        );
    }
    out
}
