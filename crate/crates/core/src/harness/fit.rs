//! Weighted log-log fits of convergence rates.

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// One ladder point: a moment estimate at `N` with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitPoint {
    pub n: usize,
    pub moment: f64,
    pub std_error: f64,
}

/// Fitted `log moment = intercept + slope · log N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_std_error: f64,
    /// 95% interval for the slope.
    pub ci_low: f64,
    pub ci_high: f64,
    pub points_used: usize,
}

/// Weighted least squares on `(log N, log moment)`. The weight of a point
/// is the inverse variance of `log moment` by the delta method,
/// `(moment / std_error)²`; points with zero standard error are weighted
/// like the most precise point. Non-positive moments are dropped with a
/// warning; fewer than three remaining points is an error.
pub fn fit_rate(points: &[FitPoint]) -> Result<RateFit> {
    let kept: Vec<&FitPoint> = points
        .iter()
        .filter(|p| {
            let ok = p.moment > 0.0 && p.moment.is_finite() && p.n > 0;
            if !ok {
                warn!("dropping ladder point N = {} with moment {}", p.n, p.moment);
            }
            ok
        })
        .collect();
    if kept.len() < 3 {
        return Err(Error::Fit(format!("need 3 positive points, have {}", kept.len())));
    }
    let rel: Vec<f64> = kept.iter().map(|p| p.std_error.abs() / p.moment).collect();
    let floor = rel.iter().copied().filter(|r| *r > 0.0).fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = rel
        .iter()
        .map(|&r| {
            let r = if r > 0.0 { r } else if floor.is_finite() { floor } else { 1.0 };
            1.0 / (r * r)
        })
        .collect();
    let xs: Vec<f64> = kept.iter().map(|p| (p.n as f64).ln()).collect();
    let ys: Vec<f64> = kept.iter().map(|p| p.moment.ln()).collect();
    let sw: f64 = weights.iter().sum();
    let xm = weights.iter().zip(&xs).map(|(w, x)| w * x).sum::<f64>() / sw;
    let ym = weights.iter().zip(&ys).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = weights.iter().zip(&xs).map(|(w, x)| w * (x - xm).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::Fit("ladder needs at least two distinct N".into()));
    }
    let sxy: f64 = weights
        .iter()
        .zip(xs.iter().zip(&ys))
        .map(|(w, (x, y))| w * (x - xm) * (y - ym))
        .sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    // Scale the covariance by the reduced chi-square, so that the interval
    // reflects the observed scatter when the standard errors are off.
    let dof = kept.len() - 2;
    let chi2: f64 = weights
        .iter()
        .zip(xs.iter().zip(&ys))
        .map(|(w, (x, y))| w * (y - intercept - slope * x).powi(2))
        .sum();
    let slope_std_error = (chi2 / dof as f64 / sxx).sqrt();
    let t = student_t_975(dof);
    Ok(RateFit {
        slope,
        intercept,
        slope_std_error,
        ci_low: slope - t * slope_std_error,
        ci_high: slope + t * slope_std_error,
        points_used: kept.len(),
    })
}

/// Two-sided 95% quantile of Student's t.
fn student_t_975(dof: usize) -> f64 {
    StudentsT::new(0.0, 1.0, dof as f64).map_or(f64::INFINITY, |t| t.inverse_cdf(0.975))
}
