//! Scalar special functions used by the denoisers and state evolution.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

pub const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Scaled complementary error function `exp(x^2) erfc(x)` for `x >= 0`,
/// without overflow or underflow for large `x`.
pub fn erfcx(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 * (x * x).exp() - erfcx(-x);
    }
    if x < 25.0 {
        return (x * x).exp() * libm::erfc(x);
    }
    // asymptotic series; terms shrink like k / (2 x^2) so 6 terms is plenty
    let inv2x2 = 1.0 / (2.0 * x * x);
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..7 {
        term *= -((2 * k - 1) as f64) * inv2x2;
        sum += term;
    }
    sum / (x * PI.sqrt())
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// `Phi(-u) / phi(u)`, the Mills ratio. Stable for all `u >= 0`.
pub fn mills_ratio(u: f64) -> f64 {
    (PI / 2.0).sqrt() * erfcx(u * FRAC_1_SQRT_2)
}

/// `ln Phi(t)`.
pub fn norm_logcdf(t: f64) -> f64 {
    if t > -5.0 {
        norm_cdf(t).ln()
    } else {
        -0.5 * t * t - LN_SQRT_2PI + mills_ratio(-t).ln()
    }
}

/// `ln(t Phi(t) + phi(t))`, i.e. the log of `E[(t + Z)_+]`.
pub fn log_partial_first_moment(t: f64) -> f64 {
    if t > -5.0 {
        (t * norm_cdf(t) + norm_pdf(t)).ln()
    } else {
        let u = -t;
        -0.5 * t * t - LN_SQRT_2PI + (1.0 - u * mills_ratio(u)).ln()
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Derivative of arcsin, with the argument clamped away from +-1.
pub fn arcsin_prime(x: f64, clamp: f64) -> f64 {
    let x = x.clamp(-clamp, clamp);
    1.0 / (1.0 - x * x).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn erfcx_continuous_at_switch() {
        let lo = (24.999f64 * 24.999).exp() * libm::erfc(24.999);
        assert_relative_eq!(erfcx(24.999), lo, max_relative = 1e-12);
        assert_relative_eq!(erfcx(25.0), erfcx(24.999_999_999), max_relative = 1e-9);
        assert_relative_eq!(erfcx(0.0), 1.0);
    }

    #[test]
    fn logcdf_branches_agree() {
        for &t in &[-4.99, -5.0, -5.01] {
            assert_relative_eq!(norm_logcdf(t), norm_cdf(t).ln(), max_relative = 1e-10);
        }
        // deep tail: ln Phi(-40) ~ -804.6
        assert!((norm_logcdf(-40.0) + 804.608_442).abs() < 1e-4);
    }

    #[test]
    fn partial_moment_branches_agree() {
        for &t in &[-4.5, -5.0, -5.5] {
            let direct = (t * norm_cdf(t) + norm_pdf(t)).ln();
            assert_relative_eq!(log_partial_first_moment(t), direct, max_relative = 1e-7);
        }
    }

    #[test]
    fn mills_ratio_large_argument() {
        // R(u) ~ 1/u - 1/u^3
        let u = 60.0;
        assert_relative_eq!(mills_ratio(u), 1.0 / u - 1.0 / u.powi(3) + 3.0 / u.powi(5), max_relative = 1e-9);
    }
}
