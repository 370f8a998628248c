//! Lockstep simulation of many coupled replications against one shared
//! reference ensemble.
//!
//! A replication `(N, r)` holds an `N`-particle system, its synchronously
//! coupled limit copies, and the derivative flows of both. All replications
//! advance one grid step at a time together with the reference ensemble
//! (the frozen-law proxy) and the auxiliary ensemble of position/flow pairs
//! that supplies the expectation term of the limit flows. Nothing is stored
//! per node except the running statistics, so memory is `O(M + Σ N)`.
//!
//! Replication `r` draws its initial values and Brownian streams from seeds
//! that depend on `r` only, so the `N = 64` system is embedded in the first
//! 64 streams of the `N = 128` system. Replications run in parallel; every
//! reduction happens inside one replication in index order, so results do
//! not depend on the thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bismut::TestFunction;
use crate::derivative_sim::{
    advance_flow, drift_gradients, malliavin_integrand, DirectionSpec, FlowScratch, Interaction, Linearization, Mask,
    Source, WeightFunction,
};
use crate::error::{Error, Result};
use crate::measures::{self, EmpiricalMeasure, MAX_ASSIGNMENT_SIZE};
use crate::models::ModelSpec;
use crate::noise::{derive_seed, NoiseStreams, TimeGrid};
use crate::particle_sim::{check_finite, euler_increments, InitialLaw, StepScratch};

const LABEL_REPLICATION: u64 = 0x5245_504c; // "REPL"
const LABEL_REPLICATION_INIT: u64 = 0x5245_5049; // "REPI"
const LABEL_REFERENCE: u64 = 0x5245_4653; // "REFS"
const LABEL_REFERENCE_INIT: u64 = 0x5245_4649; // "REFI"
const LABEL_AUX: u64 = 0x4155_5853; // "AUXS"
const LABEL_AUX_INIT: u64 = 0x4155_5849; // "AUXI"
const LABEL_SUBSAMPLE: u64 = 0x5355_4253; // "SUBS"

/// Points per chunk when the expectation term is evaluated over all limit
/// copies at once. Fixed so that results do not depend on the thread count.
const FIELD_CHUNK: usize = 4096;

/// Which parts of the coupled system to integrate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    /// Limit copies (needs the reference ensemble).
    pub limit: bool,
    /// Directional flows (with `limit`, also the auxiliary ensemble).
    pub directional: bool,
    /// Malliavin flows; needs `directional`.
    pub malliavin: bool,
    /// Stochastic-integral weights of the Bismut estimators; needs
    /// `directional`.
    pub bismut: bool,
    /// `W_k` between the particle cloud and the frozen law at every node;
    /// needs `limit`.
    pub wasserstein: bool,
    /// Fluctuation of the empirical interaction term at `T/2`; needs `limit`
    /// and `directional`.
    pub zeta_diagnostic: bool,
}

impl Components {
    pub fn all() -> Self {
        Self {
            limit: true,
            directional: true,
            malliavin: true,
            bismut: true,
            wasserstein: true,
            zeta_diagnostic: true,
        }
    }

    pub fn positions_only() -> Self {
        Self {
            limit: false,
            directional: false,
            malliavin: false,
            bismut: false,
            wasserstein: false,
            zeta_diagnostic: false,
        }
    }
}

/// Settings shared by every replication of a run.
#[derive(Clone, Debug)]
pub struct CoupledSpec {
    pub model: ModelSpec,
    /// Grid of the unrefined noise.
    pub base_grid: TimeGrid,
    /// Number of dt-halvings applied to `base_grid`; the noise is refined by
    /// Brownian bridges so every level sees the same Brownian path.
    pub refinements: u32,
    pub init: InitialLaw,
    pub direction: DirectionSpec,
    pub weight: WeightFunction,
    pub test_function: TestFunction,
    /// Moment order of the tracked gaps.
    pub k: f64,
    pub reference_size: usize,
    pub aux_size: usize,
    pub seed: u64,
    /// Particle whose own Malliavin component is tracked.
    pub tag: usize,
    /// Initial values are moved to `x + shift · φ(x)` in every ensemble.
    pub initial_shift: f64,
    pub components: Components,
    /// Orders of the fluctuation diagnostic.
    pub zeta_orders: Vec<f64>,
}

impl CoupledSpec {
    /// Grid actually integrated.
    pub fn grid(&self) -> TimeGrid {
        let mut g = self.base_grid;
        for _ in 0..self.refinements {
            g = g.halved();
        }
        g
    }

    fn validate(&self, jobs: &[(usize, usize)]) -> Result<()> {
        let c = self.components;
        if (c.malliavin || c.bismut) && !c.directional {
            return Err(Error::Config("Malliavin flows and Bismut weights need directional flows".into()));
        }
        if (c.wasserstein || c.zeta_diagnostic) && !c.limit {
            return Err(Error::Config("Wasserstein gaps and the fluctuation diagnostic need limit copies".into()));
        }
        if c.zeta_diagnostic && !c.directional {
            return Err(Error::Config("the fluctuation diagnostic needs directional flows".into()));
        }
        if c.malliavin || c.bismut {
            self.model.require_malliavin()?;
        }
        if c.limit && c.directional && !self.model.constant_diffusion() && !self.model.dist_free_diffusion() {
            return Err(Error::UnsupportedModel(
                "limit flows with a measure-dependent diffusion are not supported".into(),
            ));
        }
        if !(self.k >= 1.0) {
            return Err(Error::param(format!("moment order must be >= 1, got {}", self.k)));
        }
        self.init.validate()?;
        if jobs.is_empty() {
            return Err(Error::param("no replications requested"));
        }
        let max_n = jobs.iter().map(|j| j.0).max().unwrap_or(0);
        if jobs.iter().any(|j| j.0 == 0) {
            return Err(Error::param("particle counts must be positive"));
        }
        if c.malliavin && self.tag >= jobs.iter().map(|j| j.0).min().unwrap_or(0) {
            return Err(Error::param("tagged particle index exceeds the smallest particle count"));
        }
        if c.limit && self.reference_size < max_n {
            return Err(Error::param(format!(
                "reference ensemble of {} points is smaller than N = {max_n}",
                self.reference_size
            )));
        }
        if c.limit && c.directional && self.aux_size == 0 {
            return Err(Error::Config("limit directional flows need an auxiliary ensemble".into()));
        }
        if c.wasserstein && self.model.dim() > 1 && max_n > MAX_ASSIGNMENT_SIZE {
            return Err(Error::param(format!(
                "exact W_k in d = {} is capped at N = {MAX_ASSIGNMENT_SIZE}",
                self.model.dim()
            )));
        }
        Ok(())
    }

    fn initial(&self, seed: u64, n: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.model.dim();
        let x0 = self.init.sample(seed, n, d);
        let eta = self.direction.initial_flows(&x0, d);
        let mut x = x0;
        if self.initial_shift != 0.0 {
            x.iter_mut().zip(&eta).for_each(|(x, e)| *x += self.initial_shift * e);
        }
        (x, eta)
    }
}

/// Values at the final node that feed the derivative estimators.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Terminal {
    /// `(1/N) Σ_j f(X_T^{j,N})`.
    pub f_mean: f64,
    /// `Σ_i Σ_n ⟨h'^{i,N}_{t_n}, ΔW^i_n⟩`.
    pub bsmn_weight: f64,
    /// `(1/N) Σ_j ⟨∇f(X_T^{j,N}), v_T^{j,N}⟩`.
    pub pathwise: f64,
    /// `Σ_i f(X_T^i) Z^i` over limit copies, `Z^i = Σ_n ⟨ζ^i_{t_n}, ΔW^i_n⟩`.
    pub limit_fz: f64,
    /// `Σ_i Z^i`.
    pub limit_z: f64,
    /// `Σ_i f(X_T^i)`.
    pub limit_f: f64,
    /// `(1/N) Σ_i ⟨∇f(X_T^i), v_T^i⟩`.
    pub limit_pathwise: f64,
}

/// Largest gap over particles, over all nodes and at the final node.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentityGap {
    pub max: f64,
    pub terminal: f64,
}

impl IdentityGap {
    fn record(&mut self, node_max: f64, finished: bool) {
        self.max = self.max.max(node_max);
        if finished {
            self.terminal = node_max;
        }
    }
}

/// Running statistics of one replication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationSummary {
    pub n_particles: usize,
    pub replication: usize,
    /// `(1/N) Σ_i sup_t |X^{i,N}_t - X^i_t|^k`.
    pub pos_gap: f64,
    /// `(1/N) Σ_i sup_t |v^{i,N}_t - v^i_t|^k`.
    pub dir_gap: f64,
    /// `sup_t |w^{tag,(tag)}_t - w^{tag}_t|^k`.
    pub mall_gap: f64,
    /// `sup_t |Σ_{l≠tag} w^{tag,(l)}_t - w^{ĥ,tag}_t|^k`.
    pub hhat_gap: f64,
    /// `(1/(N-1)) Σ_{i≠tag} sup_t |w^{i,(tag)}_t|^k`, single off-diagonal
    /// components of the particle Malliavin flow.
    pub cross_component: f64,
    /// `(1/N) Σ_i sup_t |X^{i,N}_t|^k`.
    pub pos_moment: f64,
    /// `(1/N) Σ_i sup_t |v^{i,N}_t|^k`.
    pub dir_moment: f64,
    /// `W_k^k` between the particle cloud and a seeded `N`-point subsample
    /// of the reference ensemble, at every node.
    pub wasserstein: Vec<f64>,
    /// `|w^{i,N}_t - g_t v^{i,N}_t|` for the full particle flow.
    pub identity_particle: IdentityGap,
    /// `|w^i_t + w^{ĥ,i}_t - g_t v^i_t|`.
    pub identity_limit: IdentityGap,
    /// `|w^i_t - g_t v^i_t|`, which vanishes only when the expectation term
    /// does.
    pub identity_limit_plain: IdentityGap,
    pub terminal: Terminal,
    /// `(1/N) Σ_i |ζ^{i,N}_{T/2}|^k` for each configured order.
    pub zeta: Vec<f64>,
}

struct Reference {
    law: EmpiricalMeasure,
    noise: NoiseStreams,
    dw: Vec<f64>,
    scratch: StepScratch,
    aux: Option<Aux>,
}

struct Aux {
    x: EmpiricalMeasure,
    v: Vec<f64>,
    noise: NoiseStreams,
    dw: Vec<f64>,
    scratch: StepScratch,
    flow_scratch: FlowScratch,
    grad: Vec<f64>,
}

struct Job {
    n: usize,
    replication: usize,
    /// Reference points standing in for the law in `W_k`.
    subsample: Vec<usize>,
    noise: NoiseStreams,
    dw: Vec<f64>,
    x: EmpiricalMeasure,
    v: Vec<f64>,
    w_own: Vec<f64>,
    w_cross: Vec<f64>,
    limit: Option<LimitState>,
    grad: Vec<f64>,
    h: Vec<f64>,
    scratch: StepScratch,
    flow_scratch: FlowScratch,
    stats: Stats,
}

struct LimitState {
    x: Vec<f64>,
    v: Vec<f64>,
    w: Vec<f64>,
    hhat: Vec<f64>,
    z: Vec<f64>,
    grad: Vec<f64>,
    zeta_src: Vec<f64>,
}

#[derive(Default)]
struct Stats {
    pos_sup: Vec<f64>,
    dir_sup: Vec<f64>,
    x_sup: Vec<f64>,
    v_sup: Vec<f64>,
    own_sup: Vec<f64>,
    mall_sup: f64,
    hhat_sup: f64,
    wasserstein: Vec<f64>,
    identity_particle: IdentityGap,
    identity_limit: IdentityGap,
    identity_limit_plain: IdentityGap,
    terminal: Terminal,
    zeta: Vec<f64>,
    sort_buf: Vec<f64>,
    sub_buf: Vec<f64>,
}

/// Per-step inputs shared by all replications.
struct StepCtx<'a> {
    spec: &'a CoupledSpec,
    t: f64,
    dt: f64,
    g: f64,
    gp: f64,
    law: Option<&'a EmpiricalMeasure>,
}

/// The coupled simulation of a set of replications.
pub struct CoupledEngine {
    spec: CoupledSpec,
    grid: TimeGrid,
    node: usize,
    zeta_node: usize,
    reference: Option<Reference>,
    jobs: Vec<Job>,
}

impl CoupledEngine {
    /// Sets up replications `jobs = [(N, r), ...]`.
    pub fn new(spec: CoupledSpec, jobs: &[(usize, usize)]) -> Result<Self> {
        spec.validate(jobs)?;
        let grid = spec.grid();
        let (d, m) = (spec.model.dim(), spec.model.noise_dim());
        let base_dt = spec.base_grid.dt();
        let c = spec.components;
        let reference = if c.limit {
            let (x, _) = spec.initial(derive_seed(spec.seed, LABEL_REFERENCE_INIT, 0), spec.reference_size);
            let aux = (c.directional).then(|| {
                let (x, v) = spec.initial(derive_seed(spec.seed, LABEL_AUX_INIT, 0), spec.aux_size);
                Aux {
                    x: EmpiricalMeasure::new(x, d).expect("non-empty auxiliary ensemble"),
                    v,
                    noise: NoiseStreams::refined(
                        derive_seed(spec.seed, LABEL_AUX, 0),
                        spec.aux_size,
                        base_dt,
                        m,
                        spec.refinements,
                    ),
                    dw: vec![0.0; spec.aux_size * m],
                    scratch: StepScratch::default(),
                    flow_scratch: FlowScratch::default(),
                    grad: Vec::new(),
                }
            });
            Some(Reference {
                law: EmpiricalMeasure::new(x, d)?,
                noise: NoiseStreams::refined(
                    derive_seed(spec.seed, LABEL_REFERENCE, 0),
                    spec.reference_size,
                    base_dt,
                    m,
                    spec.refinements,
                ),
                dw: vec![0.0; spec.reference_size * m],
                scratch: StepScratch::default(),
                aux,
            })
        } else {
            None
        };
        let built: Vec<Job> = jobs
            .par_iter()
            .map(|&(n, r)| {
                let (x, v) = spec.initial(derive_seed(spec.seed, LABEL_REPLICATION_INIT, r as u64), n);
                let limit = c.limit.then(|| LimitState {
                    x: x.clone(),
                    v: if c.directional { v.clone() } else { Vec::new() },
                    w: vec![0.0; if c.malliavin { n * d } else { 0 }],
                    hhat: vec![0.0; if c.malliavin { n * d } else { 0 }],
                    z: vec![0.0; if c.bismut { n } else { 0 }],
                    grad: Vec::new(),
                    zeta_src: Vec::new(),
                });
                let zeros = |on: bool| vec![0.0; if on { n * d } else { 0 }];
                let subsample = if c.wasserstein {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, LABEL_SUBSAMPLE, r as u64));
                    rand::seq::index::sample(&mut rng, spec.reference_size, n).into_vec()
                } else {
                    Vec::new()
                };
                Job {
                    n,
                    replication: r,
                    subsample,
                    noise: NoiseStreams::refined(
                        derive_seed(spec.seed, LABEL_REPLICATION, r as u64),
                        n,
                        base_dt,
                        m,
                        spec.refinements,
                    ),
                    dw: vec![0.0; n * m],
                    w_own: zeros(c.malliavin),
                    w_cross: zeros(c.malliavin),
                    v: if c.directional { v } else { Vec::new() },
                    x: EmpiricalMeasure::new(x, d).expect("non-empty replication"),
                    limit,
                    grad: Vec::new(),
                    h: Vec::new(),
                    scratch: StepScratch::default(),
                    flow_scratch: FlowScratch::default(),
                    stats: Stats {
                        pos_sup: vec![0.0; n],
                        dir_sup: vec![0.0; n],
                        x_sup: vec![0.0; n],
                        v_sup: vec![0.0; n],
                        own_sup: vec![0.0; n],
                        zeta: vec![0.0; spec.zeta_orders.len()],
                        ..Stats::default()
                    },
                }
            })
            .collect();
        let zeta_node = grid.nearest_node(0.5 * grid.horizon());
        let mut engine = Self {
            spec,
            grid,
            node: 0,
            zeta_node,
            reference,
            jobs: built,
        };
        engine.observe()?;
        Ok(engine)
    }

    pub fn node(&self) -> usize {
        self.node
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn is_finished(&self) -> bool {
        self.node == self.grid.n_steps()
    }

    pub fn n_replications(&self) -> usize {
        self.jobs.len()
    }

    /// Particle positions of replication `j` at the current node.
    pub fn particle_positions(&self, j: usize) -> &[f64] {
        self.jobs[j].x.as_flat()
    }

    /// Limit-copy positions of replication `j`, when integrated.
    pub fn limit_positions(&self, j: usize) -> Option<&[f64]> {
        self.jobs[j].limit.as_ref().map(|l| l.x.as_slice())
    }

    /// Particle directional flows of replication `j`.
    pub fn particle_flows(&self, j: usize) -> &[f64] {
        &self.jobs[j].v
    }

    /// Limit directional flows of replication `j`.
    pub fn limit_flows(&self, j: usize) -> Option<&[f64]> {
        self.jobs[j].limit.as_ref().map(|l| l.v.as_slice())
    }

    /// `(w_own, w_cross_sum)` of the particle Malliavin flow of replication `j`.
    pub fn malliavin_flows(&self, j: usize) -> (&[f64], &[f64]) {
        (&self.jobs[j].w_own, &self.jobs[j].w_cross)
    }

    /// `(w_limit, hhat)` of replication `j`.
    pub fn limit_malliavin_flows(&self, j: usize) -> Option<(&[f64], &[f64])> {
        self.jobs[j].limit.as_ref().map(|l| (l.w.as_slice(), l.hhat.as_slice()))
    }

    /// Frozen-law proxy at the current node.
    pub fn law(&self) -> Option<&EmpiricalMeasure> {
        self.reference.as_ref().map(|r| &r.law)
    }

    /// Expectation term of the limit flow at every limit copy, all
    /// replications concatenated.
    fn expectation_fields(&self, t: f64) -> Option<Vec<f64>> {
        let reference = self.reference.as_ref()?;
        let aux = reference.aux.as_ref()?;
        let gathered: Vec<f64> = self
            .jobs
            .iter()
            .flat_map(|j| j.limit.as_ref().map(|l| l.x.as_slice()).unwrap_or(&[]).iter().copied())
            .collect();
        let model = &self.spec.model;
        let d = model.dim();
        let mut field = vec![0.0; gathered.len()];
        gathered
            .par_chunks(FIELD_CHUNK * d)
            .zip(field.par_chunks_mut(FIELD_CHUNK * d))
            .for_each(|(xs, out)| model.lions_drift_action(t, xs, &reference.law, aux.x.as_flat(), &aux.v, out));
        Some(field)
    }

    fn split_field<'a>(&self, field: &'a Option<Vec<f64>>) -> Vec<Option<&'a [f64]>> {
        let d = self.spec.model.dim();
        let mut out = Vec::with_capacity(self.jobs.len());
        let mut rest: &[f64] = field.as_deref().unwrap_or(&[]);
        for j in &self.jobs {
            if field.is_some() && j.limit.is_some() {
                let (head, tail) = rest.split_at(j.n * d);
                out.push(Some(head));
                rest = tail;
            } else {
                out.push(None);
            }
        }
        out
    }

    /// Advances every replication and the reference ensembles one node.
    pub fn step(&mut self) -> Result<()> {
        if self.is_finished() {
            return Err(Error::param("coupled run is already at the final node"));
        }
        let n = self.node;
        let t = self.grid.node(n);
        let c = self.spec.components;
        let field = if c.limit && c.directional {
            self.expectation_fields(t)
        } else {
            None
        };
        let fields = self.split_field(&field);
        if c.zeta_diagnostic && n == self.zeta_node {
            self.record_zeta(t, &fields);
        }
        let ctx = StepCtx {
            spec: &self.spec,
            t,
            dt: self.grid.dt(),
            g: self.spec.weight.value(t),
            gp: self.spec.weight.derivative(t),
            law: self.reference.as_ref().map(|r| &r.law),
        };
        let results: Vec<Result<()>> = self
            .jobs
            .par_iter_mut()
            .zip(fields.into_par_iter())
            .map(|(job, field)| job.step(&ctx, field, n))
            .collect();
        results.into_iter().collect::<Result<Vec<()>>>()?;
        if let Some(reference) = self.reference.as_mut() {
            reference.step(&self.spec, t, self.grid.dt(), n)?;
        }
        self.node += 1;
        self.observe()
    }

    /// Runs to the final node.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(())
    }

    fn record_zeta(&mut self, t: f64, fields: &[Option<&[f64]>]) {
        let spec = &self.spec;
        let law = &self.reference.as_ref().expect("limit copies need a reference").law;
        self.jobs.par_iter_mut().zip(fields.par_iter()).for_each(|(job, field)| {
            let (Some(lim), Some(field)) = (job.limit.as_ref(), field) else {
                return;
            };
            let mut emp = vec![0.0; lim.x.len()];
            spec.model.lions_drift_action(t, &lim.x, law, &lim.x, &lim.v, &mut emp);
            let d = spec.model.dim();
            for (slot, &k) in job.stats.zeta.iter_mut().zip(&spec.zeta_orders) {
                let total: f64 = field
                    .chunks_exact(d)
                    .zip(emp.chunks_exact(d))
                    .map(|(a, b)| {
                        let diff: Vec<f64> = a.iter().zip(b).map(|(a, b)| a - b).collect();
                        measures::norm(&diff).powf(k)
                    })
                    .sum();
                *slot = total / job.n as f64;
            }
        });
    }

    fn observe(&mut self) -> Result<()> {
        let node = self.node;
        let t = self.grid.node(node);
        let finished = self.is_finished();
        let law = self.reference.as_ref().map(|r| &r.law);
        let g = self.spec.weight.value(t);
        let spec = &self.spec;
        let results: Vec<Result<()>> = self
            .jobs
            .par_iter_mut()
            .map(|job| job.observe(spec, g, law, finished))
            .collect();
        results.into_iter().collect::<Result<Vec<()>>>()?;
        if finished && spec.components.zeta_diagnostic && self.zeta_node == node {
            // Only reached on one-step grids, where T/2 rounds to T.
            let field = self.expectation_fields(t);
            let fields = self.split_field(&field);
            self.record_zeta(t, &fields);
        }
        Ok(())
    }

    /// Running statistics of every replication, in the order requested.
    pub fn summaries(&self) -> Vec<ReplicationSummary> {
        let k = self.spec.k;
        let tag = self.spec.tag;
        self.jobs
            .iter()
            .map(|job| {
                let s = &job.stats;
                let mean_pow = |v: &[f64]| v.iter().map(|x| x.powf(k)).sum::<f64>() / v.len() as f64;
                let cross_component = if job.n > 1 {
                    s.own_sup
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| *i != tag)
                        .map(|(_, x)| x.powf(k))
                        .sum::<f64>()
                        / (job.n - 1) as f64
                } else {
                    0.0
                };
                ReplicationSummary {
                    n_particles: job.n,
                    replication: job.replication,
                    pos_gap: mean_pow(&s.pos_sup),
                    dir_gap: mean_pow(&s.dir_sup),
                    mall_gap: s.mall_sup.powf(k),
                    hhat_gap: s.hhat_sup.powf(k),
                    cross_component,
                    pos_moment: mean_pow(&s.x_sup),
                    dir_moment: mean_pow(&s.v_sup),
                    wasserstein: s.wasserstein.clone(),
                    identity_particle: s.identity_particle,
                    identity_limit: s.identity_limit,
                    identity_limit_plain: s.identity_limit_plain,
                    terminal: s.terminal.clone(),
                    zeta: s.zeta.clone(),
                }
            })
            .collect()
    }
}

impl Reference {
    fn step(&mut self, spec: &CoupledSpec, t: f64, dt: f64, node: usize) -> Result<()> {
        let model = &spec.model;
        let d = model.dim();
        if let Some(aux) = self.aux.as_mut() {
            aux.noise.next_step(&mut aux.dw);
            drift_gradients(model, t, aux.x.as_flat(), &aux.x, &mut aux.grad);
            let lin = Linearization {
                t,
                xs: aux.x.as_flat(),
                mu: &aux.x,
                grad: &aux.grad,
            };
            advance_flow(model, &lin, dt, &mut aux.v, Interaction::Own, Source::None, &aux.dw, &mut aux.flow_scratch);
            let incr = euler_increments(model, t, dt, aux.x.as_flat(), &aux.x, &aux.dw, &mut aux.scratch).to_vec();
            aux.x.as_flat_mut().iter_mut().zip(&incr).for_each(|(x, a)| *x += a);
            check_finite("auxiliary ensemble", aux.x.as_flat(), d, node + 1)?;
            check_finite("auxiliary directional flow", &aux.v, d, node + 1)?;
        }
        self.noise.next_step(&mut self.dw);
        let incr = euler_increments(model, t, dt, self.law.as_flat(), &self.law, &self.dw, &mut self.scratch).to_vec();
        self.law.as_flat_mut().iter_mut().zip(&incr).for_each(|(x, a)| *x += a);
        check_finite("reference ensemble", self.law.as_flat(), d, node + 1)
    }
}

impl Job {
    fn step(&mut self, ctx: &StepCtx<'_>, field: Option<&[f64]>, node: usize) -> Result<()> {
        let spec = ctx.spec;
        let model = &spec.model;
        let c = spec.components;
        let (d, m) = (model.dim(), model.noise_dim());
        self.noise.next_step(&mut self.dw);

        if c.directional {
            drift_gradients(model, ctx.t, self.x.as_flat(), &self.x, &mut self.grad);
            let lin = Linearization {
                t: ctx.t,
                xs: self.x.as_flat(),
                mu: &self.x,
                grad: &self.grad,
            };
            if c.bismut && ctx.gp != 0.0 {
                self.h.resize(self.n * m, 0.0);
                malliavin_integrand(model, ctx.t, self.x.as_flat(), &self.x, ctx.gp, &self.v, &mut self.h)?;
                let s: f64 = self.h.iter().zip(&self.dw).map(|(h, w)| h * w).sum();
                self.stats.terminal.bsmn_weight += s;
            }
            if c.malliavin {
                let own = Source::Scaled {
                    coef: ctx.gp,
                    vs: &self.v,
                    mask: Mask::Only(spec.tag),
                };
                advance_flow(model, &lin, ctx.dt, &mut self.w_own, Interaction::Own, own, &self.dw, &mut self.flow_scratch);
                let cross = Source::Scaled {
                    coef: ctx.gp,
                    vs: &self.v,
                    mask: Mask::AllBut(spec.tag),
                };
                advance_flow(model, &lin, ctx.dt, &mut self.w_cross, Interaction::Own, cross, &self.dw, &mut self.flow_scratch);
            }
            advance_flow(model, &lin, ctx.dt, &mut self.v, Interaction::Own, Source::None, &self.dw, &mut self.flow_scratch);
        }
        let incr = euler_increments(model, ctx.t, ctx.dt, self.x.as_flat(), &self.x, &self.dw, &mut self.scratch);
        let incr = incr.to_vec();
        self.x.as_flat_mut().iter_mut().zip(&incr).for_each(|(x, a)| *x += a);
        check_finite("particle system", self.x.as_flat(), d, node + 1)?;
        if c.directional {
            check_finite("particle directional flow", &self.v, d, node + 1)?;
        }
        if c.malliavin {
            check_finite("particle Malliavin flow", &self.w_own, d, node + 1)?;
            check_finite("particle Malliavin flow", &self.w_cross, d, node + 1)?;
        }

        if let Some(lim) = self.limit.as_mut() {
            let law = ctx.law.expect("limit copies need a reference");
            let dw = &self.dw;
            if c.directional {
                let field = field.expect("expectation field for limit flows");
                drift_gradients(model, ctx.t, &lim.x, law, &mut lim.grad);
                let lin = Linearization {
                    t: ctx.t,
                    xs: &lim.x,
                    mu: law,
                    grad: &lim.grad,
                };
                if c.bismut && (ctx.gp != 0.0 || ctx.g != 0.0) {
                    // ζ = σ*a^{-1}(x) (g' v + g E)
                    lim.zeta_src.clear();
                    lim.zeta_src
                        .extend(lim.v.iter().zip(field).map(|(v, e)| ctx.gp * v + ctx.g * e));
                    self.h.resize(self.n * m, 0.0);
                    malliavin_integrand(model, ctx.t, &lim.x, law, 1.0, &lim.zeta_src, &mut self.h)?;
                    for (i, z) in lim.z.iter_mut().enumerate() {
                        *z += (0..m).map(|r| self.h[i * m + r] * dw[i * m + r]).sum::<f64>();
                    }
                }
                if c.malliavin {
                    let src = Source::Scaled {
                        coef: ctx.gp,
                        vs: &lim.v,
                        mask: Mask::All,
                    };
                    advance_flow(model, &lin, ctx.dt, &mut lim.w, Interaction::None, src, dw, &mut self.flow_scratch);
                    let src = Source::Field { coef: ctx.g, field };
                    advance_flow(model, &lin, ctx.dt, &mut lim.hhat, Interaction::None, src, dw, &mut self.flow_scratch);
                }
                let inter = Interaction::Field {
                    drift: field,
                    diffusion: None,
                };
                advance_flow(model, &lin, ctx.dt, &mut lim.v, inter, Source::None, dw, &mut self.flow_scratch);
                check_finite("limit directional flow", &lim.v, d, node + 1)?;
            }
            let incr = euler_increments(model, ctx.t, ctx.dt, &lim.x, law, dw, &mut self.scratch);
            lim.x.iter_mut().zip(incr).for_each(|(x, a)| *x += a);
            check_finite("limit copies", &lim.x, d, node + 1)?;
        }
        Ok(())
    }

    fn observe(
        &mut self,
        spec: &CoupledSpec,
        g: f64,
        law: Option<&EmpiricalMeasure>,
        finished: bool,
    ) -> Result<()> {
        let model = &spec.model;
        let d = model.dim();
        let c = spec.components;
        let tag = spec.tag;
        let st = &mut self.stats;
        let x = self.x.as_flat();
        for (i, p) in x.chunks_exact(d).enumerate() {
            st.x_sup[i] = st.x_sup[i].max(measures::norm(p));
        }
        if c.directional {
            for (i, v) in self.v.chunks_exact(d).enumerate() {
                st.v_sup[i] = st.v_sup[i].max(measures::norm(v));
            }
        }
        if c.malliavin {
            for (i, w) in self.w_own.chunks_exact(d).enumerate() {
                st.own_sup[i] = st.own_sup[i].max(measures::norm(w));
            }
            let mut node_max = 0.0f64;
            for i in 0..self.n {
                let gap: Vec<f64> = (0..d)
                    .map(|r| self.w_own[i * d + r] + self.w_cross[i * d + r] - g * self.v[i * d + r])
                    .collect();
                node_max = node_max.max(measures::norm(&gap));
            }
            st.identity_particle.record(node_max, finished);
        }
        if let Some(lim) = self.limit.as_ref() {
            sup_gaps(x, &lim.x, d, &mut st.pos_sup);
            if c.directional {
                sup_gaps(&self.v, &lim.v, d, &mut st.dir_sup);
            }
            if c.malliavin {
                let own = &self.w_own[tag * d..(tag + 1) * d];
                let lw = &lim.w[tag * d..(tag + 1) * d];
                st.mall_sup = st.mall_sup.max(measures::distance(own, lw));
                let cross = &self.w_cross[tag * d..(tag + 1) * d];
                let hh = &lim.hhat[tag * d..(tag + 1) * d];
                st.hhat_sup = st.hhat_sup.max(measures::distance(cross, hh));
                let (mut full_max, mut plain_max) = (0.0f64, 0.0f64);
                for i in 0..self.n {
                    let mut full = vec![0.0; d];
                    let mut plain = vec![0.0; d];
                    for r in 0..d {
                        let gv = g * lim.v[i * d + r];
                        full[r] = lim.w[i * d + r] + lim.hhat[i * d + r] - gv;
                        plain[r] = lim.w[i * d + r] - gv;
                    }
                    full_max = full_max.max(measures::norm(&full));
                    plain_max = plain_max.max(measures::norm(&plain));
                }
                st.identity_limit.record(full_max, finished);
                st.identity_limit_plain.record(plain_max, finished);
            }
            if let (Some(law), true) = (law, c.wasserstein) {
                let w = if d == 1 {
                    let k = spec.k;
                    st.sort_buf.clear();
                    st.sort_buf.extend_from_slice(x);
                    st.sort_buf.sort_by(f64::total_cmp);
                    st.sub_buf.clear();
                    st.sub_buf.extend(self.subsample.iter().map(|&j| law.point(j)[0]));
                    st.sub_buf.sort_by(f64::total_cmp);
                    st.sort_buf
                        .iter()
                        .zip(&st.sub_buf)
                        .map(|(a, b)| (a - b).abs().powf(k))
                        .sum::<f64>()
                        / self.n as f64
                } else {
                    let sub = law.subsample(&self.subsample)?;
                    measures::wasserstein_assignment(&self.x, &sub, spec.k)?.powf(spec.k)
                };
                st.wasserstein.push(w);
            }
        }
        if finished {
            let f = &spec.test_function;
            let mut grad = vec![0.0; d];
            let mut f_sum = 0.0;
            let mut path_sum = 0.0;
            for (i, p) in x.chunks_exact(d).enumerate() {
                f_sum += f.value(p);
                if c.directional {
                    f.gradient(p, &mut grad);
                    path_sum += grad.iter().zip(&self.v[i * d..(i + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            st.terminal.f_mean = f_sum / self.n as f64;
            st.terminal.pathwise = path_sum / self.n as f64;
            if let Some(lim) = self.limit.as_ref() {
                let (mut fz, mut z, mut fs, mut ps) = (0.0, 0.0, 0.0, 0.0);
                for (i, p) in lim.x.chunks_exact(d).enumerate() {
                    let fv = f.value(p);
                    fs += fv;
                    if c.bismut {
                        fz += fv * lim.z[i];
                        z += lim.z[i];
                    }
                    if c.directional {
                        f.gradient(p, &mut grad);
                        ps += grad.iter().zip(&lim.v[i * d..(i + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                st.terminal.limit_fz = fz;
                st.terminal.limit_z = z;
                st.terminal.limit_f = fs;
                st.terminal.limit_pathwise = ps / self.n as f64;
            }
        }
        Ok(())
    }
}

/// Runs replications `jobs` in batches of at most `batch` so that memory
/// stays bounded. The reference ensemble is recomputed for every batch;
/// it depends on the seed only, so the result does not depend on `batch`.
pub fn run_replications(spec: &CoupledSpec, jobs: &[(usize, usize)], batch: usize) -> Result<Vec<ReplicationSummary>> {
    let batch = batch.max(1);
    let mut out = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(batch) {
        let mut engine = CoupledEngine::new(spec.clone(), chunk)?;
        engine.run()?;
        out.extend(engine.summaries());
    }
    Ok(out)
}

fn sup_gaps(a: &[f64], b: &[f64], d: usize, sup: &mut [f64]) {
    for ((x, y), s) in a.chunks_exact(d).zip(b.chunks_exact(d)).zip(sup.iter_mut()) {
        *s = s.max(measures::distance(x, y));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{make_kuramoto, make_mf_ou};

    fn spec(model: ModelSpec, steps: usize) -> CoupledSpec {
        CoupledSpec {
            model,
            base_grid: TimeGrid::new(1.0, steps).unwrap(),
            refinements: 0,
            init: InitialLaw::default(),
            direction: DirectionSpec::Linear { scale: 1.0 },
            weight: WeightFunction::linear(0.0, 1.0).unwrap(),
            test_function: TestFunction::Tanh,
            k: 2.0,
            reference_size: 512,
            aux_size: 512,
            seed: 11,
            tag: 0,
            initial_shift: 0.0,
            components: Components::all(),
            zeta_orders: vec![2.0, 4.0],
        }
    }

    #[test]
    fn decoupled_model_has_zero_pathwise_gaps() {
        let s = spec(make_mf_ou(-1.0, 0.0, 0.3, 1).unwrap(), 40);
        let mut e = CoupledEngine::new(s, &[(16, 0), (32, 0), (32, 1)]).unwrap();
        e.run().unwrap();
        for r in e.summaries() {
            assert_eq!(r.pos_gap, 0.0);
            assert_eq!(r.dir_gap, 0.0);
            assert_eq!(r.mall_gap, 0.0);
            assert_eq!(r.hhat_gap, 0.0);
            assert_eq!(r.cross_component, 0.0);
            assert_eq!(r.zeta, vec![0.0, 0.0]);
            assert_eq!(r.wasserstein.len(), 41);
        }
    }

    #[test]
    fn replications_are_prefix_coupled() {
        let s = spec(make_kuramoto(1.0, 0.5).unwrap(), 20);
        let mut small = CoupledEngine::new(s.clone(), &[(16, 3)]).unwrap();
        let mut big = CoupledEngine::new(s, &[(32, 3), (16, 4)]).unwrap();
        // Positions of the N=16 system differ from the first 16 of N=32 only
        // through the interaction, so at node 0 they coincide exactly.
        assert_eq!(small.particle_positions(0), &big.particle_positions(0)[..16]);
        small.run().unwrap();
        big.run().unwrap();
        assert_eq!(small.limit_positions(0).unwrap(), &big.limit_positions(0).unwrap()[..16]);
    }

    #[test]
    fn identity_holds_to_first_order() {
        let s = spec(make_kuramoto(1.0, 0.5).unwrap(), 100);
        let mut e = CoupledEngine::new(s, &[(32, 0)]).unwrap();
        e.run().unwrap();
        let r = &e.summaries()[0];
        assert!(r.identity_particle.max < 0.05, "{:?}", r.identity_particle);
        assert!(r.identity_limit.max < 0.05, "{:?}", r.identity_limit);
        assert!(r.identity_limit.terminal <= r.identity_limit.max);
    }

    #[test]
    fn invalid_component_sets_are_rejected() {
        let mut s = spec(make_mf_ou(-1.0, 0.5, 0.3, 1).unwrap(), 10);
        s.components.directional = false;
        assert!(CoupledEngine::new(s.clone(), &[(8, 0)]).is_err());
        s.components = Components::positions_only();
        s.components.wasserstein = true;
        assert!(CoupledEngine::new(s, &[(8, 0)]).is_err());
    }
}
