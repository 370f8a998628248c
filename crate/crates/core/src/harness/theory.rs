//! Theoretical convergence rates.

use crate::error::{Error, Result};

/// Sampling rate `ε(N)` of empirical measures in `W_k`, for an initial law
/// with a finite `q`-th moment (`q = None` for bounded support, which drops
/// the moment term).
///
/// * `k > d/2`: `N^{-1/2} + N^{-(q-k)/q}`, needs `q ≠ 2k`;
/// * `k = d/2`: `N^{-1/2} log(1+N) + N^{-(q-k)/q}`, needs `q ≠ 2k`;
/// * `k < d/2`: `N^{-k/d} + N^{-(q-k)/q}`, needs `q ≠ d/(d-k)`.
pub fn epsilon_rate(n: f64, k: f64, d: usize, q: Option<f64>) -> Result<f64> {
    if !(n >= 1.0) || !n.is_finite() {
        return Err(Error::param(format!("N must be a finite number >= 1, got {n}")));
    }
    if !(k > 0.0) || !k.is_finite() {
        return Err(Error::param(format!("moment order k must be positive, got {k}")));
    }
    if d == 0 {
        return Err(Error::param("dimension must be positive"));
    }
    let half = d as f64 / 2.0;
    if let Some(q) = q {
        if !(q > k) {
            return Err(Error::UnsupportedParameters(format!("need q > k, got q = {q}, k = {k}")));
        }
        if k >= half && q == 2.0 * k {
            return Err(Error::UnsupportedParameters(format!("q = 2k = {q} is excluded when k >= d/2")));
        }
        if k < half && q == d as f64 / (d as f64 - k) {
            return Err(Error::UnsupportedParameters(format!("q = d/(d-k) = {q} is excluded when k < d/2")));
        }
    }
    let sampling = if k > half {
        n.powf(-0.5)
    } else if k == half {
        n.powf(-0.5) * (1.0 + n).ln()
    } else {
        n.powf(-k / d as f64)
    };
    let tail = q.map_or(0.0, |q| n.powf(-(q - k) / q));
    Ok(sampling + tail)
}

/// Exponent `α min((q-k)/(m+αq), 1)` on `ε(N)` in the derivative-flow
/// bounds; `q = None` is the limit `q → ∞`, where the ratio tends to `1/α`.
pub fn theoretical_exponent(alpha: f64, q: Option<f64>, k: f64, m: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::param(format!("α must lie in (0, 1], got {alpha}")));
    }
    if !(k >= 2.0) || !k.is_finite() {
        return Err(Error::param(format!("k must be >= 2, got {k}")));
    }
    if !(m >= 0.0) || !m.is_finite() {
        return Err(Error::param(format!("m must be >= 0, got {m}")));
    }
    let ratio = match q {
        None => 1.0 / alpha,
        Some(q) if q > k => (q - k) / (m + alpha * q),
        Some(q) => return Err(Error::param(format!("need q > k, got q = {q}, k = {k}"))),
    };
    Ok(alpha * ratio.min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_values() {
        assert!((epsilon_rate(100.0, 2.0, 1, None).unwrap() - 0.1).abs() < 1e-12);
        let v = 0.1 + 100f64.powf(-0.6);
        assert!((epsilon_rate(100.0, 2.0, 1, Some(5.0)).unwrap() - v).abs() < 1e-12);
        assert!((v - 0.16310).abs() < 5e-6);
        let w = epsilon_rate(16.0, 1.0, 4, Some(3.0)).unwrap();
        assert!((w - (0.5 + 16f64.powf(-2.0 / 3.0))).abs() < 1e-12);
        assert!((w - 0.65749).abs() < 5e-6);
        assert_eq!(theoretical_exponent(1.0, None, 2.0, 0.0).unwrap(), 1.0);
        assert!((theoretical_exponent(1.0, Some(10.0), 2.0, 0.0).unwrap() - 0.8).abs() < 1e-12);
        assert!((theoretical_exponent(0.5, Some(10.0), 2.0, 1.0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn excluded_cases_name_the_condition() {
        let e = epsilon_rate(10.0, 2.0, 1, Some(4.0)).unwrap_err();
        assert!(matches!(e, Error::UnsupportedParameters(ref s) if s.contains("2k")));
        let e = epsilon_rate(10.0, 1.0, 4, Some(4.0 / 3.0)).unwrap_err();
        assert!(matches!(e, Error::UnsupportedParameters(ref s) if s.contains("d/(d-k)")));
        assert!(epsilon_rate(10.0, 2.0, 1, Some(1.5)).is_err());
        assert!(theoretical_exponent(1.5, None, 2.0, 0.0).is_err());
        assert!(theoretical_exponent(1.0, Some(2.0), 2.0, 0.0).is_err());
    }

    #[test]
    fn critical_dimension_has_log_factor() {
        let v = epsilon_rate(99.0, 1.0, 2, None).unwrap();
        assert!((v - 99f64.powf(-0.5) * 100f64.ln()).abs() < 1e-12);
    }
}
