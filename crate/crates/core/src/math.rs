//! Small numerical helpers shared by the density and estimator code.

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `log(Σ exp(x_i))` with max subtraction.
///
/// Returns `-inf` for an empty slice or when every entry is `-inf`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    log_mean_exp_scaled(xs, 1.0)
}

/// `log((1/n) Σ exp(x_i))`.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    log_mean_exp_scaled(xs, xs.len() as f64)
}

/// `log((1/divisor) Σ exp(x_i))`, evaluated as `m + ln(Σ exp(x_i - m) / divisor)`.
///
/// Dividing inside the logarithm means `n` identical inputs with `divisor = n`
/// return the input bit-for-bit.
pub fn log_mean_exp_scaled(xs: &[f64], divisor: f64) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY || m.is_nan() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + (s / divisor).ln()
}

/// Arithmetic mean; `NaN` for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean and standard error of the mean. The error is zero for fewer than two values.
pub fn mean_and_std_error(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let m = mean(xs);
    if n < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// Log-density of `N(x | mean, sd²)` in one dimension.
#[inline]
pub fn normal_log_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let u = (x - mean) / sd;
    -0.5 * u * u - sd.ln() - 0.5 * LN_2PI
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_matches_naive_on_moderate_inputs() {
        let xs = [0.3, -1.2, 2.5];
        let naive = xs.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((logsumexp(&xs) - naive).abs() < 1e-14);
    }

    #[test]
    fn logsumexp_survives_extreme_inputs() {
        let xs = [-5000.0, -5001.0];
        let v = logsumexp(&xs);
        assert!(v.is_finite());
        assert!((v - (-5000.0 + (1.0 + (-1.0f64).exp()).ln())).abs() < 1e-12);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
    }

    #[test]
    fn log_mean_exp_of_identical_values_is_exact() {
        for &a in &[-3.7, 0.0, 12.25, -1234.5678] {
            for n in 1..8 {
                assert_eq!(log_mean_exp(&vec![a; n]), a);
            }
        }
    }

    #[test]
    fn two_point_log_mean_exp() {
        let v = log_mean_exp(&[0.0, 1.0]);
        let expected = ((1.0 + std::f64::consts::E) / 2.0).ln();
        assert!((v - expected).abs() < 1e-15);
    }

    #[test]
    fn std_error_zero_for_single_value() {
        assert_eq!(mean_and_std_error(&[4.0]), (4.0, 0.0));
        let (m, se) = mean_and_std_error(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-15);
    }
}
