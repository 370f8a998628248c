//! Self-checks of a model's declared derivatives and monotonicity bound on
//! random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::measures::EmpiricalMeasure;
use crate::models::{check_drift_gradient, check_lions_kernel, one_sided_bound_sides, ModelSpec};
use crate::noise::derive_seed;
use crate::particle_sim::{wasserstein, InitialLaw};

const LABEL_VALIDATE: u64 = 0x5641_4c49; // "VALI"

/// Tolerance of the finite-difference checks.
pub const FD_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub samples: usize,
    /// Largest entry error of `∇b` against central differences.
    pub gradient_error: f64,
    /// Largest entry error of `D^L b` against central differences.
    pub lions_error: f64,
    /// Largest `lhs - rhs` of the one-sided bound; `≤ 0` when it holds.
    pub one_sided_excess: f64,
    pub one_sided_violations: usize,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.gradient_error <= FD_TOLERANCE && self.lions_error <= FD_TOLERANCE && self.one_sided_violations == 0
    }
}

/// Runs the checks on `samples` random configurations. Points are drawn
/// from `init`; measures have `atoms` points. The bound uses `W_k` with the
/// model's `k`.
pub fn validate_model(
    model: &ModelSpec,
    init: &InitialLaw,
    samples: usize,
    atoms: usize,
    seed: u64,
) -> Result<ValidationReport> {
    let d = model.dim();
    let k = model.admissibility().k;
    let h = 1e-5;
    let mut report = ValidationReport {
        samples,
        gradient_error: 0.0,
        lions_error: 0.0,
        one_sided_excess: f64::NEG_INFINITY,
        one_sided_violations: 0,
    };
    for s in 0..samples {
        let base = derive_seed(seed, LABEL_VALIDATE, s as u64);
        let mu = EmpiricalMeasure::new(init.sample(base, atoms, d), d)?;
        let nu = EmpiricalMeasure::new(init.sample(base ^ 1, atoms, d), d)?;
        let mut rng = ChaCha8Rng::seed_from_u64(base);
        let t = rng.random::<f64>();
        let x = init.sample(base ^ 2, 1, d);
        let y = init.sample(base ^ 3, 1, d);
        let atom = mu.point(rng.random_range(0..atoms)).to_vec();
        report.gradient_error = report.gradient_error.max(check_drift_gradient(model, t, &x, &mu, h)?);
        report.lions_error = report.lions_error.max(check_lions_kernel(model, t, &x, &mu, &atom, h)?);
        let w = wasserstein(&mu, &nu, k)?;
        let (lhs, rhs) = one_sided_bound_sides(model, t, &x, &mu, &y, &nu, w);
        let excess = lhs - rhs;
        report.one_sided_excess = report.one_sided_excess.max(excess);
        if excess > 1e-12 * (1.0 + rhs.abs()) {
            report.one_sided_violations += 1;
        }
    }
    Ok(report)
}
