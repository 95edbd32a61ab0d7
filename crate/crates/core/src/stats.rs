//! Two-sample Kolmogorov-Smirnov test, used to compare Cascade statistics
//! across choice bits.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub d: f64,
    pub p_value: f64,
}

/// Largest gap between the two empirical CDFs. Ties are stepped together.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    d
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powi(k as i32 - 1) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Asymptotic p-value with the usual small-sample correction of the
/// effective size.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    assert!(!a.is_empty() && !b.is_empty(), "empty sample");
    let d = ks_statistic(a, b);
    let en = ((a.len() * b.len()) as f64 / (a.len() + b.len()) as f64).sqrt();
    let p_value = kolmogorov_sf((en + 0.12 + 0.11 / en) * d);
    KsResult { d, p_value }
}
