use statrs::function::gamma::ln_gamma;

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Inverse-Gamma log-density β^α/Γ(α) z^{-α-1} e^{-β/z}.
#[inline]
pub fn ln_inv_gamma(z: f64, alpha: f64, beta: f64) -> f64 {
    if z <= 0.0 {
        return f64::NEG_INFINITY;
    }
    alpha * beta.ln() - ln_gamma(alpha) - (alpha + 1.0) * z.ln() - beta / z
}

#[inline]
pub fn ln_normal(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

/// Isotropic Gaussian N(0, var·I) on a vector.
pub fn ln_normal_iso(x: &[f64], var: f64) -> f64 {
    let ss: f64 = x.iter().map(|v| v * v).sum();
    -0.5 * (x.len() as f64 * (LN_2PI + var.ln()) + ss / var)
}

/// Stable log Σ exp.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// log(e^a + e^b).
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ig_reference_value() {
        // 3 log 20 - log Γ(3) - 4 log 10 - 2
        let expected = 3.0 * 20f64.ln() - 2f64.ln() - 4.0 * 10f64.ln() - 2.0;
        assert!((ln_inv_gamma(10.0, 3.0, 20.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn ig_beta_doubling_shift() {
        for &z in &[0.5, 3.0, 40.0] {
            let d = ln_inv_gamma(z, 3.0, 40.0) - ln_inv_gamma(z, 3.0, 20.0);
            assert!((d - (3.0 * 2f64.ln() - 20.0 / z)).abs() < 1e-12);
        }
    }

    #[test]
    fn lse() {
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((log_add_exp(1000.0, 1000.0) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
