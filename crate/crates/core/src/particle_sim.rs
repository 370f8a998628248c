//! Euler-Maruyama integration of the interacting particle system, of its
//! synchronously coupled McKean-Vlasov copies, and of the large reference
//! ensemble that stands in for the limit law.
//!
//! Every step is fully explicit: drift and diffusion of all particles are
//! evaluated at the pre-step positions (and the pre-step empirical measure)
//! before any position moves. Reductions over particles run in index order,
//! so results do not depend on the thread count.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{self, EmpiricalMeasure};
use crate::models::ModelSpec;
use crate::noise::{derive_seed, IncrementSource, NoiseBank, TimeGrid};

/// Positions beyond this magnitude abort the run.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

/// Reference ensembles smaller than this multiple of the largest ladder size
/// are rejected.
pub const REFERENCE_FLOOR_FACTOR: usize = 8;

/// Initial law of the particles. Particle `i` draws from its own keyed
/// stream, so the first `N` initial values agree across ladder sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialLaw {
    /// Dirac mass at `value` in every coordinate.
    Constant { value: f64 },
    /// Independent uniform coordinates on `[low, high]`.
    Uniform { low: f64, high: f64 },
    /// Independent Gaussian coordinates.
    Normal { mean: f64, std_dev: f64 },
    /// Independent Student-t coordinates with `nu` degrees of freedom, scaled.
    StudentT { nu: f64, scale: f64 },
}

impl Default for InitialLaw {
    fn default() -> Self {
        InitialLaw::Uniform { low: -1.0, high: 1.0 }
    }
}

impl InitialLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            InitialLaw::Constant { value } if !value.is_finite() => {
                Err(Error::param("constant initial value must be finite"))
            }
            InitialLaw::Uniform { low, high } if !(low < high) => {
                Err(Error::param(format!("uniform initial law needs low < high, got [{low}, {high}]")))
            }
            InitialLaw::Normal { std_dev, .. } if !(std_dev >= 0.0) => {
                Err(Error::param("normal initial law needs std_dev >= 0"))
            }
            InitialLaw::StudentT { nu, scale } if !(nu > 0.0 && scale > 0.0) => {
                Err(Error::param("student-t initial law needs nu > 0 and scale > 0"))
            }
            _ => Ok(()),
        }
    }

    /// Mean and variance of one coordinate, when finite.
    pub fn moments(&self) -> Option<(f64, f64)> {
        match *self {
            InitialLaw::Constant { value } => Some((value, 0.0)),
            InitialLaw::Uniform { low, high } => Some((0.5 * (low + high), (high - low).powi(2) / 12.0)),
            InitialLaw::Normal { mean, std_dev } => Some((mean, std_dev * std_dev)),
            InitialLaw::StudentT { nu, scale } if nu > 2.0 => Some((0.0, scale * scale * nu / (nu - 2.0))),
            InitialLaw::StudentT { .. } => None,
        }
    }

    /// Largest moment order `q` that is finite (`None` for all orders).
    pub fn moment_order(&self) -> Option<f64> {
        match *self {
            InitialLaw::StudentT { nu, .. } => Some(nu),
            _ => None,
        }
    }

    /// `n` initial points in dimension `d`, flat row-major.
    pub fn sample(&self, seed: u64, n: usize, d: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1417, i as u64));
            for _ in 0..d {
                out.push(self.draw(&mut rng));
            }
        }
        out
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            InitialLaw::Constant { value } => value,
            InitialLaw::Uniform { low, high } => rng.random_range(low..=high),
            InitialLaw::Normal { mean, std_dev } => mean + std_dev * rng.sample::<f64, _>(StandardNormal),
            InitialLaw::StudentT { nu, scale } => scale * StudentT::new(nu).expect("validated nu").sample(rng),
        }
    }
}

/// Positions of the `N`-particle system at one grid node.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleCloud {
    positions: EmpiricalMeasure,
    node: usize,
}

impl ParticleCloud {
    pub fn new(positions: Vec<f64>, dim: usize) -> Result<Self> {
        Ok(Self {
            positions: EmpiricalMeasure::new(positions, dim)?,
            node: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.positions.dim()
    }

    pub fn node(&self) -> usize {
        self.node
    }

    pub fn positions(&self) -> &[f64] {
        self.positions.as_flat()
    }

    /// The empirical measure `μ̂ᴺ` of the current positions.
    pub fn measure(&self) -> &EmpiricalMeasure {
        &self.positions
    }

    pub(crate) fn positions_mut(&mut self) -> &mut [f64] {
        self.positions.as_flat_mut()
    }

    pub(crate) fn set_node(&mut self, node: usize) {
        self.node = node;
    }
}

/// Synchronously coupled McKean-Vlasov copies: the same initial values and
/// Brownian streams as the particles, but interacting with the frozen law
/// instead of with each other.
#[derive(Clone, Debug, PartialEq)]
pub struct LimitCloud {
    positions: Vec<f64>,
    dim: usize,
    node: usize,
}

impl LimitCloud {
    pub fn new(positions: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || positions.is_empty() || !positions.len().is_multiple_of(dim) {
            return Err(Error::dim("limit cloud needs a non-empty whole number of d-vectors"));
        }
        Ok(Self { positions, dim, node: 0 })
    }

    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node(&self) -> usize {
        self.node
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub(crate) fn positions_mut(&mut self) -> &mut [f64] {
        &mut self.positions
    }

    pub(crate) fn set_node(&mut self, node: usize) {
        self.node = node;
    }
}

/// Per-node empirical proxy of the limit law `μ_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenLaw {
    nodes: Vec<EmpiricalMeasure>,
}

impl FrozenLaw {
    pub fn new(nodes: Vec<EmpiricalMeasure>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::param("frozen law needs at least one node"));
        }
        Ok(Self { nodes })
    }

    pub fn at(&self, node: usize) -> &EmpiricalMeasure {
        &self.nodes[node]
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn sample_size(&self) -> usize {
        self.nodes[0].len()
    }
}

/// Scratch buffers for one Euler step.
#[derive(Debug, Default)]
pub struct StepScratch {
    drift: Vec<f64>,
    diffusion: Vec<f64>,
    incr: Vec<f64>,
}

/// Euler increments `b(t, x_i, μ) dt + σ(t, x_i, μ) ΔW_i` of every point
/// of `xs`, written to the scratch buffer and returned.
pub(crate) fn euler_increments<'s>(
    model: &ModelSpec,
    t: f64,
    dt: f64,
    xs: &[f64],
    mu: &EmpiricalMeasure,
    dw: &[f64],
    scratch: &'s mut StepScratch,
) -> &'s [f64] {
    let (d, m) = (model.dim(), model.noise_dim());
    let n = xs.len() / d;
    scratch.drift.resize(n * d, 0.0);
    scratch.diffusion.resize(n * d * m, 0.0);
    scratch.incr.resize(n * d, 0.0);
    model.drift_batch(t, xs, mu, &mut scratch.drift);
    model.diffusion_batch(t, xs, mu, &mut scratch.diffusion);
    for i in 0..n {
        let sig = &scratch.diffusion[i * d * m..(i + 1) * d * m];
        let w = &dw[i * m..(i + 1) * m];
        for r in 0..d {
            let noise: f64 = (0..m).map(|c| sig[r * m + c] * w[c]).sum();
            scratch.incr[i * d + r] = scratch.drift[i * d + r] * dt + noise;
        }
    }
    &scratch.incr
}

/// One explicit Euler step of `xs` with coefficients evaluated against `mu`.
/// `mu` is the pre-step empirical measure of `xs` when `None` (particle
/// system) and the frozen law for limit copies.
pub(crate) fn euler_step(
    model: &ModelSpec,
    t: f64,
    dt: f64,
    xs: &mut [f64],
    mu: Option<&EmpiricalMeasure>,
    dw: &[f64],
    scratch: &mut StepScratch,
) {
    let owned;
    let mu = match mu {
        Some(mu) => mu,
        None => {
            owned = EmpiricalMeasure::new(xs.to_vec(), model.dim()).expect("non-empty cloud");
            &owned
        }
    };
    let incr = euler_increments(model, t, dt, xs, mu, dw, scratch);
    xs.iter_mut().zip(incr).for_each(|(x, a)| *x += a);
}

pub(crate) fn check_finite(stage: &'static str, xs: &[f64], dim: usize, node: usize) -> Result<()> {
    for (i, v) in xs.iter().enumerate() {
        if !v.is_finite() || v.abs() > DIVERGENCE_THRESHOLD {
            return Err(Error::Divergence {
                stage,
                particle: i / dim,
                node,
                value: *v,
            });
        }
    }
    Ok(())
}

fn check_bank(model: &ModelSpec, bank: &NoiseBank, grid: &TimeGrid, n: usize) -> Result<()> {
    if bank.noise_dim() != model.noise_dim() {
        return Err(Error::dim(format!(
            "noise bank has m = {} but the model needs m = {}",
            bank.noise_dim(),
            model.noise_dim()
        )));
    }
    if bank.n_particles() < n {
        return Err(Error::dim(format!(
            "noise bank holds {} streams, {n} needed",
            bank.n_particles()
        )));
    }
    if bank.n_steps() != grid.n_steps() || (bank.dt() - grid.dt()).abs() > 1e-15 * grid.dt() {
        return Err(Error::param("noise bank and time grid disagree on the step"));
    }
    Ok(())
}

/// Advances the particle system one node using stream `i` of the bank for
/// particle `i`.
pub fn step_particles(model: &ModelSpec, cloud: &mut ParticleCloud, bank: &NoiseBank, grid: &TimeGrid) -> Result<()> {
    let node = cloud.node();
    if node >= grid.n_steps() {
        return Err(Error::param("particle cloud is already at the final node"));
    }
    check_bank(model, bank, grid, cloud.len())?;
    if cloud.dim() != model.dim() {
        return Err(Error::dim("cloud dimension differs from the model"));
    }
    let mut dw = vec![0.0; cloud.len() * model.noise_dim()];
    bank.fill_step(node, &mut dw);
    let mut scratch = StepScratch::default();
    euler_step(model, grid.node(node), grid.dt(), cloud.positions_mut(), None, &dw, &mut scratch);
    check_finite("particle system", cloud.positions(), cloud.dim(), node + 1)?;
    cloud.set_node(node + 1);
    Ok(())
}

/// Advances the limit copies one node against the frozen law, with the same
/// increments the particle system receives.
pub fn step_limit_copies(
    model: &ModelSpec,
    limit: &mut LimitCloud,
    law: &FrozenLaw,
    bank: &NoiseBank,
    grid: &TimeGrid,
) -> Result<()> {
    let node = limit.node();
    if node >= grid.n_steps() {
        return Err(Error::param("limit cloud is already at the final node"));
    }
    if law.n_nodes() != grid.n_nodes() {
        return Err(Error::param(format!(
            "frozen law has {} nodes but the grid has {}",
            law.n_nodes(),
            grid.n_nodes()
        )));
    }
    check_bank(model, bank, grid, limit.len())?;
    let mut dw = vec![0.0; limit.len() * model.noise_dim()];
    bank.fill_step(node, &mut dw);
    let mut scratch = StepScratch::default();
    let dim = limit.dim();
    euler_step(model, grid.node(node), grid.dt(), limit.positions_mut(), Some(law.at(node)), &dw, &mut scratch);
    check_finite("limit copies", limit.positions(), dim, node + 1)?;
    limit.set_node(node + 1);
    Ok(())
}

/// Runs an `M`-particle system from `init` on `bank_ref` and records its
/// empirical measure at every node.
pub fn run_reference(
    model: &ModelSpec,
    sample_size: usize,
    bank_ref: &NoiseBank,
    grid: &TimeGrid,
    init: &InitialLaw,
    init_seed: u64,
) -> Result<FrozenLaw> {
    let mut source = bank_ref;
    check_bank(model, bank_ref, grid, sample_size)?;
    run_reference_from(model, init.sample(init_seed, sample_size, model.dim()), &mut source, grid)
}

/// As [`run_reference`] but from explicit initial positions and any
/// increment source.
pub fn run_reference_from<S: IncrementSource>(
    model: &ModelSpec,
    initial: Vec<f64>,
    noise: &mut S,
    grid: &TimeGrid,
) -> Result<FrozenLaw> {
    if initial.is_empty() || !initial.len().is_multiple_of(model.dim()) {
        return Err(Error::dim("initial positions must be a non-empty whole number of d-vectors"));
    }
    let d = model.dim();
    let mut xs = initial;
    let mut nodes = Vec::with_capacity(grid.n_nodes());
    nodes.push(EmpiricalMeasure::new(xs.clone(), d)?);
    let mut dw = vec![0.0; xs.len() / d * model.noise_dim()];
    let mut scratch = StepScratch::default();
    for n in 0..grid.n_steps() {
        noise.fill(n, &mut dw);
        euler_step(model, grid.node(n), grid.dt(), &mut xs, None, &dw, &mut scratch);
        check_finite("reference ensemble", &xs, d, n + 1)?;
        nodes.push(EmpiricalMeasure::new(xs.clone(), d)?);
    }
    FrozenLaw::new(nodes)
}

/// Closed-form mean and variance at time `t` of one coordinate of the
/// mean-field OU limit `dX = (aX + b E X) dt + σ dW` started from a law with
/// mean `m0` and variance `v0`.
pub fn ou_analytic_law(a: f64, b: f64, sigma: f64, m0: f64, v0: f64, t: f64) -> (f64, f64) {
    let mean = m0 * ((a + b) * t).exp();
    let growth = (2.0 * a * t).exp();
    let var = if a.abs() < 1e-14 {
        v0 + sigma * sigma * t
    } else {
        v0 * growth + sigma * sigma * (growth - 1.0) / (2.0 * a)
    };
    (mean, var)
}

/// Running statistics of the particle/limit gap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathStats {
    /// `max_{s ≤ t} |X^{i,N}_s - X^i_s|` per particle.
    pub sup_gap: Vec<f64>,
    /// `W_k(μ̂ᴺ_t, μ_t)` at every node visited so far.
    pub wasserstein: Vec<f64>,
}

impl PathStats {
    pub fn new(n_particles: usize) -> Self {
        Self {
            sup_gap: vec![0.0; n_particles],
            wasserstein: Vec::new(),
        }
    }
}

/// Settings for [`collect_path_stats`].
#[derive(Clone, Debug)]
pub struct MetricsConfig {
    pub k: f64,
    /// Indices into the frozen law used for the equal-size comparison.
    pub subsample: Vec<usize>,
}

impl MetricsConfig {
    /// Seeded subsample of `n` distinct indices out of `m` law points.
    pub fn seeded(k: f64, n: usize, m: usize, seed: u64) -> Result<Self> {
        if n > m {
            return Err(Error::param(format!("cannot subsample {n} points from a law of {m}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subsample = rand::seq::index::sample(&mut rng, m, n).into_vec();
        Ok(Self { k, subsample })
    }
}

/// Folds the current node into the running statistics: updates the sup-gap
/// of every particle and appends `W_k(μ̂ᴺ_t, μ_t)` computed against an
/// equal-size subsample of the law.
pub fn collect_path_stats(
    particles: &ParticleCloud,
    limits: &LimitCloud,
    law_at_node: &EmpiricalMeasure,
    cfg: &MetricsConfig,
    stats: &mut PathStats,
) -> Result<()> {
    if particles.node() != limits.node() {
        return Err(Error::param(format!(
            "particles at node {} but limits at node {}",
            particles.node(),
            limits.node()
        )));
    }
    update_sup_gap(particles.positions(), limits.positions(), particles.dim(), &mut stats.sup_gap);
    let reference = law_at_node.subsample(&cfg.subsample)?;
    stats.wasserstein.push(wasserstein(particles.measure(), &reference, cfg.k)?);
    Ok(())
}

pub(crate) fn update_sup_gap(a: &[f64], b: &[f64], d: usize, sup: &mut [f64]) {
    for ((x, y), s) in a.chunks_exact(d).zip(b.chunks_exact(d)).zip(sup.iter_mut()) {
        let g = measures::distance(x, y);
        if g > *s {
            *s = g;
        }
    }
}

/// Exact `W_k`, sorting in one dimension and assignment otherwise.
pub fn wasserstein(a: &EmpiricalMeasure, b: &EmpiricalMeasure, k: f64) -> Result<f64> {
    if a.dim() == 1 {
        measures::wasserstein_1d(a, b, k)
    } else {
        measures::wasserstein_assignment(a, b, k)
    }
}

/// Writes one CSV row per particle: `index,t,x0,x1,...`.
pub fn dump_cloud_csv<W: Write>(out: W, t: f64, positions: &[f64], dim: usize, header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    if header {
        let mut h = vec!["index".to_string(), "t".to_string()];
        h.extend((0..dim).map(|c| format!("x{c}")));
        w.write_record(&h)?;
    }
    for (i, p) in positions.chunks_exact(dim).enumerate() {
        let mut row = vec![i.to_string(), format!("{t}")];
        row.extend(p.iter().map(|v| format!("{v}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{make_mf_ou, Coefficients, MeanFieldOu};
    use crate::noise::make_noise_bank;
    use std::sync::Arc;

    fn raw_ou(a: f64, b: f64, sigma: f64) -> ModelSpec {
        let adm = *make_mf_ou(a, b, 1.0, 1).unwrap().admissibility();
        ModelSpec::new("mf_ou", Arc::new(MeanFieldOu { a, b, sigma, d: 1 }), adm, true).unwrap()
    }

    struct ConstantDrift(f64);

    impl Coefficients for ConstantDrift {
        fn dim(&self) -> usize {
            1
        }
        fn noise_dim(&self) -> usize {
            1
        }
        fn drift(&self, _: f64, _: &[f64], _: &EmpiricalMeasure, out: &mut [f64]) {
            out[0] = self.0;
        }
        fn diffusion(&self, _: f64, _: &[f64], _: &EmpiricalMeasure, out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn drift_grad(&self, _: f64, _: &[f64], _: &EmpiricalMeasure, out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn diffusion_grad(&self, _: f64, _: &[f64], _: &EmpiricalMeasure, _: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn lions_drift(&self, _: f64, _: &[f64], _: &EmpiricalMeasure, _: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
        fn lions_diffusion(&self, _: f64, _: &[f64], _: &EmpiricalMeasure, _: &[f64], _: &[f64], out: &mut [f64]) {
            out[0] = 0.0;
        }
    }

    fn constant(b: f64) -> ModelSpec {
        let adm = *make_mf_ou(0.0, 0.0, 1.0, 1).unwrap().admissibility();
        ModelSpec::new("const", Arc::new(ConstantDrift(b)), adm, false).unwrap()
    }

    #[test]
    fn euler_examples() {
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let bank = make_noise_bank(1, 3, 100, grid.dt(), 1).unwrap();

        let mut cloud = ParticleCloud::new(vec![0.5, -1.0, 2.0], 1).unwrap();
        step_particles(&constant(0.0), &mut cloud, &bank, &grid).unwrap();
        assert_eq!(cloud.positions(), &[0.5, -1.0, 2.0]);

        let mut cloud = ParticleCloud::new(vec![0.0, 0.0, 0.0], 1).unwrap();
        step_particles(&constant(1.0), &mut cloud, &bank, &grid).unwrap();
        assert!((cloud.positions()[0] - 0.01).abs() < 1e-16);

        let mut cloud = ParticleCloud::new(vec![1.0; 3], 1).unwrap();
        step_particles(&raw_ou(-1.0, 0.5, 0.0), &mut cloud, &bank, &grid).unwrap();
        for x in cloud.positions() {
            assert!((x - (1.0 + (-1.0 + 0.5) * 0.01)).abs() < 1e-15);
        }
    }

    #[test]
    fn deterministic_reference_follows_scalar_ode() {
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let bank = make_noise_bank(2, 16, 1000, grid.dt(), 1).unwrap();
        let law = run_reference(&raw_ou(-1.0, 0.0, 0.0), 16, &bank, &grid, &InitialLaw::Constant { value: 1.0 }, 0).unwrap();
        for x in law.at(1000).as_flat() {
            // Euler for x' = -x: (1 - dt)^n, within O(dt) of e^{-1}.
            assert!((x - (-1.0f64).exp()).abs() < 2e-3 * 0.36788 + 1e-3);
            assert_eq!(*x, (1.0f64 - 1e-3).powi(1000));
        }
    }

    #[test]
    fn decoupled_limit_copies_track_particles_exactly() {
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let model = make_mf_ou(-1.0, 0.0, 0.3, 1).unwrap();
        let bank = make_noise_bank(5, 32, 50, grid.dt(), 1).unwrap();
        let init = InitialLaw::default().sample(9, 32, 1);
        let law = run_reference(&model, 256, &make_noise_bank(6, 256, 50, grid.dt(), 1).unwrap(), &grid, &InitialLaw::default(), 10).unwrap();
        let mut p = ParticleCloud::new(init.clone(), 1).unwrap();
        let mut l = LimitCloud::new(init, 1).unwrap();
        let cfg = MetricsConfig::seeded(2.0, 32, 256, 1).unwrap();
        let mut stats = PathStats::new(32);
        for _ in 0..50 {
            step_particles(&model, &mut p, &bank, &grid).unwrap();
            step_limit_copies(&model, &mut l, &law, &bank, &grid).unwrap();
            assert_eq!(p.positions(), l.positions());
            collect_path_stats(&p, &l, law.at(p.node()), &cfg, &mut stats).unwrap();
        }
        assert!(stats.sup_gap.iter().all(|g| *g == 0.0));
        assert_eq!(stats.wasserstein.len(), 50);
    }

    #[test]
    fn path_stats_examples() {
        let p = ParticleCloud::new(vec![0.0, 2.0], 1).unwrap();
        let l = LimitCloud::new(vec![1.0, 3.0], 1).unwrap();
        let law = EmpiricalMeasure::from_scalars(&[1.0, 3.0]).unwrap();
        let cfg = MetricsConfig { k: 2.0, subsample: vec![0, 1] };
        let mut stats = PathStats::new(2);
        collect_path_stats(&p, &l, &law, &cfg, &mut stats).unwrap();
        assert_eq!(stats.wasserstein, vec![1.0]);
        assert_eq!(stats.sup_gap, vec![1.0, 1.0]);
        let same = LimitCloud::new(vec![0.0, 2.0], 1).unwrap();
        let mut zero = PathStats::new(2);
        let law = EmpiricalMeasure::from_scalars(&[0.0, 2.0]).unwrap();
        collect_path_stats(&p, &same, &law, &cfg, &mut zero).unwrap();
        assert_eq!(zero.sup_gap, vec![0.0, 0.0]);
        assert_eq!(zero.wasserstein, vec![0.0]);
    }

    #[test]
    fn divergence_is_reported() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let bank = make_noise_bank(1, 1, 10, grid.dt(), 1).unwrap();
        let mut cloud = ParticleCloud::new(vec![0.0], 1).unwrap();
        let err = step_particles(&constant(1e15), &mut cloud, &bank, &grid).unwrap_err();
        assert!(matches!(err, Error::Divergence { particle: 0, node: 1, .. }), "{err}");
    }

    #[test]
    fn analytic_ou_law() {
        let (m, v) = ou_analytic_law(-1.0, 0.0, 0.3, 0.0, 0.0, 1.0);
        assert_eq!(m, 0.0);
        assert!((v - 0.09 * (1.0 - (-2.0f64).exp()) / 2.0).abs() < 1e-15);
        assert!((v - 0.03891).abs() < 1e-5);
    }

    #[test]
    fn csv_dump_has_one_row_per_particle() {
        let mut buf = Vec::new();
        dump_cloud_csv(&mut buf, 0.5, &[1.0, 2.0, 3.0, 4.0], 2, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().nth(2).unwrap(), "1,0.5,3,4");
    }
}
