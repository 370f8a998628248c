//! Estimators of the intrinsic derivative `D_φ^I (P_T f)(μ)` of
//! `μ ↦ E f(X_T)` for the particle system and for its limit.
//!
//! * `bsmn_particle`: `E[F̄ Σ_i Σ_n ⟨h'^i_{t_n}, ΔW^i_n⟩]` with
//!   `h' = σ*a^{-1} g' v` and `F̄ = (1/N) Σ_j f(X_T^{j,N})`.
//! * `zeta_limit`: `E[f(X_T) Σ_n ⟨ζ_{t_n}, ΔW_n⟩]` over limit copies, with
//!   `ζ = σ*a^{-1}(g' v + g E⟨D^L b(y, μ)(X), v⟩|_{y = X})`.
//! * `finite_difference`: central difference in the shift `x ↦ x ± εφ(x)` of
//!   every initial value, with common noise.
//! * `pathwise_grad`: `E⟨∇f(X_T), v_T⟩`.
//!
//! Stochastic integrals use left-point sums on the simulation grid. Both
//! weighted estimators subtract a leave-one-out mean of `f` from the test
//! function value before multiplying by the weight; the weights have mean
//! zero and are independent of the other replications, so this removes
//! variance without adding bias.

use serde::{Deserialize, Serialize};

use crate::coupled::{run_replications, Components, CoupledSpec, ReplicationSummary};
use crate::error::{Error, Result};
use crate::harness::fit::{fit_rate, FitPoint, RateFit};
use crate::measures::mean_and_std_error;

/// Replications simulated together; bounds the memory of one batch.
const BATCH: usize = 256;

/// Built-in test functions of the first coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum TestFunction {
    /// `f(x) = x_1`.
    Linear,
    /// `f(x) = tanh(x_1)`.
    #[default]
    Tanh,
    /// `f(x) = cos(x_1)`.
    Cos,
    /// `f(x) = c`.
    Constant { value: f64 },
}


impl TestFunction {
    pub fn id(&self) -> &'static str {
        match self {
            TestFunction::Linear => "linear",
            TestFunction::Tanh => "tanh",
            TestFunction::Cos => "cos",
            TestFunction::Constant { .. } => "constant",
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match *self {
            TestFunction::Linear => x[0],
            TestFunction::Tanh => x[0].tanh(),
            TestFunction::Cos => x[0].cos(),
            TestFunction::Constant { value } => value,
        }
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        out[0] = match *self {
            TestFunction::Linear => 1.0,
            TestFunction::Tanh => 1.0 - x[0].tanh().powi(2),
            TestFunction::Cos => -x[0].sin(),
            TestFunction::Constant { .. } => 0.0,
        };
    }

    /// Sup norm of the Hessian.
    pub fn hess_bound(&self) -> f64 {
        match self {
            TestFunction::Linear | TestFunction::Constant { .. } => 0.0,
            // max |2 tanh(x)(1 - tanh²(x))| = 4 / (3√3)
            TestFunction::Tanh => 4.0 / (3.0 * 3f64.sqrt()),
            TestFunction::Cos => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMethod {
    BsmnParticle,
    ZetaLimit,
    FiniteDifference,
    PathwiseGrad,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicDerivEstimate {
    pub value: f64,
    pub std_error: f64,
    pub replications: usize,
    pub method: EstimatorMethod,
}

/// Which system a finite difference or pathwise estimate targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Particle,
    Limit,
}

fn check_replications(replications: usize) -> Result<()> {
    if replications < 2 {
        return Err(Error::param(format!("need at least 2 replications, got {replications}")));
    }
    Ok(())
}

fn jobs(n: usize, replications: usize) -> Vec<(usize, usize)> {
    (0..replications).map(|r| (n, r)).collect()
}

fn with_components(spec: &CoupledSpec, components: Components) -> CoupledSpec {
    let mut s = spec.clone();
    s.components = components;
    s.initial_shift = 0.0;
    s
}

fn estimate(values: &[f64], method: EstimatorMethod) -> IntrinsicDerivEstimate {
    let (value, std_error) = mean_and_std_error(values);
    IntrinsicDerivEstimate {
        value,
        std_error,
        replications: values.len(),
        method,
    }
}

/// `x_r - mean_{r' ≠ r} x_{r'}`.
fn leave_one_out_centered(xs: &[f64]) -> Vec<f64> {
    let total: f64 = xs.iter().sum();
    let others = (xs.len() - 1) as f64;
    xs.iter().map(|x| x - (total - x) / others).collect()
}

/// Per-replication particle Bismut estimates.
pub fn bsmn_values(summaries: &[ReplicationSummary]) -> Vec<f64> {
    let f: Vec<f64> = summaries.iter().map(|s| s.terminal.f_mean).collect();
    leave_one_out_centered(&f)
        .iter()
        .zip(summaries)
        .map(|(c, s)| c * s.terminal.bsmn_weight)
        .collect()
}

/// Per-replication limit estimates, `(1/N) Σ_i (f_i - c_{-r}) Z_i`.
pub fn zeta_values(summaries: &[ReplicationSummary]) -> Vec<f64> {
    let means: Vec<f64> = summaries
        .iter()
        .map(|s| s.terminal.limit_f / s.n_particles as f64)
        .collect();
    let total: f64 = means.iter().sum();
    let others = (means.len() - 1) as f64;
    summaries
        .iter()
        .zip(&means)
        .map(|(s, m)| {
            let c = (total - m) / others;
            (s.terminal.limit_fz - c * s.terminal.limit_z) / s.n_particles as f64
        })
        .collect()
}

/// Particle Bismut estimator with `N` particles.
pub fn estimate_bsmn_particle(spec: &CoupledSpec, n: usize, replications: usize) -> Result<IntrinsicDerivEstimate> {
    check_replications(replications)?;
    let components = Components {
        directional: true,
        bismut: true,
        ..Components::positions_only()
    };
    let s = with_components(spec, components);
    let summaries = run_replications(&s, &jobs(n, replications), BATCH)?;
    Ok(estimate(&bsmn_values(&summaries), EstimatorMethod::BsmnParticle))
}

/// Limit estimator over `copies` limit copies per replication.
pub fn estimate_zeta_limit(spec: &CoupledSpec, copies: usize, replications: usize) -> Result<IntrinsicDerivEstimate> {
    check_replications(replications)?;
    let components = Components {
        limit: true,
        directional: true,
        bismut: true,
        ..Components::positions_only()
    };
    let s = with_components(spec, components);
    let summaries = run_replications(&s, &jobs(copies, replications), BATCH)?;
    Ok(estimate(&zeta_values(&summaries), EstimatorMethod::ZetaLimit))
}

/// Pathwise estimator `E⟨∇f(X_T), v_T⟩`.
pub fn estimate_pathwise(
    spec: &CoupledSpec,
    target: Target,
    n: usize,
    replications: usize,
) -> Result<IntrinsicDerivEstimate> {
    check_replications(replications)?;
    let components = Components {
        limit: target == Target::Limit,
        directional: true,
        ..Components::positions_only()
    };
    let s = with_components(spec, components);
    let summaries = run_replications(&s, &jobs(n, replications), BATCH)?;
    let values: Vec<f64> = summaries
        .iter()
        .map(|r| match target {
            Target::Particle => r.terminal.pathwise,
            Target::Limit => r.terminal.limit_pathwise,
        })
        .collect();
    Ok(estimate(&values, EstimatorMethod::PathwiseGrad))
}

/// Central difference `(E f(X_T^{+ε}) - E f(X_T^{-ε})) / 2ε` with every
/// initial value shifted by `±εφ` and common noise in both runs.
pub fn finite_difference_intrinsic(
    spec: &CoupledSpec,
    target: Target,
    epsilon: f64,
    n: usize,
    replications: usize,
) -> Result<IntrinsicDerivEstimate> {
    check_replications(replications)?;
    if !(epsilon > 0.0) {
        return Err(Error::param(format!("finite-difference step must be positive, got {epsilon}")));
    }
    let components = Components {
        limit: target == Target::Limit,
        ..Components::positions_only()
    };
    let run = |shift: f64| -> Result<Vec<f64>> {
        let mut s = with_components(spec, components);
        s.initial_shift = shift;
        let summaries = run_replications(&s, &jobs(n, replications), BATCH)?;
        Ok(summaries
            .iter()
            .map(|r| match target {
                Target::Particle => r.terminal.f_mean,
                Target::Limit => r.terminal.limit_f / r.n_particles as f64,
            })
            .collect())
    };
    let plus = run(epsilon)?;
    let minus = run(-epsilon)?;
    let values: Vec<f64> = plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * epsilon)).collect();
    Ok(estimate(&values, EstimatorMethod::FiniteDifference))
}

/// One ladder point of [`compare_convergence`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n_particles: usize,
    pub bsmn: IntrinsicDerivEstimate,
    pub zeta: IntrinsicDerivEstimate,
    /// `|mean_r (bsmn_r - zeta_r)|`.
    pub gap: f64,
    /// Standard error of the paired differences.
    pub gap_std_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// Log-log fit of the gaps, when at least three are positive.
    pub fit: Option<RateFit>,
}

/// Rows of the convergence table from engine summaries covering every
/// `(N, r)` in `ladder x 0..replications`.
pub fn convergence_rows(summaries: &[ReplicationSummary], ladder: &[usize]) -> Result<Vec<ConvergenceRow>> {
    ladder
        .iter()
        .map(|&n| {
            let group: Vec<ReplicationSummary> =
                summaries.iter().filter(|s| s.n_particles == n).cloned().collect();
            check_replications(group.len())?;
            let b = bsmn_values(&group);
            let z = zeta_values(&group);
            let diffs: Vec<f64> = b.iter().zip(&z).map(|(b, z)| b - z).collect();
            let (d, se) = mean_and_std_error(&diffs);
            Ok(ConvergenceRow {
                n_particles: n,
                bsmn: estimate(&b, EstimatorMethod::BsmnParticle),
                zeta: estimate(&z, EstimatorMethod::ZetaLimit),
                gap: d.abs(),
                gap_std_error: se,
            })
        })
        .collect()
}

/// `|D^I(P^N f) - D^I(P f)|` along the ladder. Replication `r` uses the same
/// seed at every `N`, and the two estimators of one replication share the
/// Brownian increments, so the differences are paired.
pub fn compare_convergence(spec: &CoupledSpec, ladder: &[usize], replications: usize) -> Result<ConvergenceTable> {
    check_replications(replications)?;
    let components = Components {
        limit: true,
        directional: true,
        bismut: true,
        ..Components::positions_only()
    };
    let s = with_components(spec, components);
    let all: Vec<(usize, usize)> = ladder.iter().flat_map(|&n| jobs(n, replications)).collect();
    let summaries = run_replications(&s, &all, BATCH)?;
    let rows = convergence_rows(&summaries, ladder)?;
    let points: Vec<FitPoint> = rows
        .iter()
        .map(|r| FitPoint {
            n: r.n_particles,
            moment: r.gap,
            std_error: r.gap_std_error,
        })
        .collect();
    let fit = fit_rate(&points).ok();
    Ok(ConvergenceTable { rows, fit })
}
