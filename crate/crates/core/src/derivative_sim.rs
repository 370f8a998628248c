//! Derivative flows of the particle system and of its limit: directional
//! flows with respect to the initial values, and Malliavin flows along
//! Cameron-Martin directions built from them.
//!
//! All flows are linear SDEs driven by the same Brownian increments as the
//! positions they differentiate. They share one explicit Euler kernel,
//! [`advance_flow`], which evaluates every coefficient at the pre-step
//! positions and pre-step flow values. Because each update is a linear
//! combination of the pre-step state, scaling the initial direction by a
//! power of two scales every flow by the same factor bit for bit.
//!
//! The `N²` Malliavin components `w^{i,(l)}` are never stored. The tagged
//! own component `w^{·,(tag)}` is one linear system with its source at the
//! tagged particle only; the sum over all other components is a second
//! system whose source is present at every particle except the tag.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::models::ModelSpec;
use crate::noise::{NoiseBank, TimeGrid};
use crate::particle_sim::{check_finite, FrozenLaw, LimitCloud, ParticleCloud};

/// Perturbation field `φ` applied to the initial values, `η = φ(X_0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DirectionSpec {
    Zero,
    /// `φ(x) = c` in every coordinate.
    Constant { value: f64 },
    /// `φ(x) = c x`.
    Linear { scale: f64 },
    /// `φ(x) = c sin(x)` coordinatewise.
    Sine { scale: f64 },
    /// `Σ α_j φ_j`.
    Combination { terms: Vec<(f64, DirectionSpec)> },
}

impl Default for DirectionSpec {
    fn default() -> Self {
        DirectionSpec::Linear { scale: 1.0 }
    }
}

impl DirectionSpec {
    pub fn tag(&self) -> String {
        match self {
            DirectionSpec::Zero => "zero".into(),
            DirectionSpec::Constant { value } => format!("const({value})"),
            DirectionSpec::Linear { scale } => format!("linear({scale})"),
            DirectionSpec::Sine { scale } => format!("sine({scale})"),
            DirectionSpec::Combination { terms } => {
                let parts: Vec<String> = terms.iter().map(|(a, p)| format!("{a}*{}", p.tag())).collect();
                parts.join("+")
            }
        }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        match self {
            DirectionSpec::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            DirectionSpec::Constant { value } => out.iter_mut().for_each(|o| *o = *value),
            DirectionSpec::Linear { scale } => out.iter_mut().zip(x).for_each(|(o, x)| *o = scale * x),
            DirectionSpec::Sine { scale } => out.iter_mut().zip(x).for_each(|(o, x)| *o = scale * x.sin()),
            DirectionSpec::Combination { terms } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                let mut part = vec![0.0; out.len()];
                for (alpha, phi) in terms {
                    phi.apply(x, &mut part);
                    out.iter_mut().zip(&part).for_each(|(o, p)| *o += alpha * p);
                }
            }
        }
    }

    /// `η^i = φ(X_0^i)` for a flat cloud.
    pub fn initial_flows(&self, positions: &[f64], dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; positions.len()];
        for (x, o) in positions.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
            self.apply(x, o);
        }
        out
    }

    /// Smallest `C` with `|φ(x)| ≤ C(1 + |x|)` over the sample points. Fails
    /// on non-finite values or when `C` exceeds `limit`.
    pub fn check_growth(&self, samples: &[f64], dim: usize, limit: f64) -> Result<f64> {
        let mut worst = 0.0f64;
        let mut out = vec![0.0; dim];
        for x in samples.chunks_exact(dim) {
            self.apply(x, &mut out);
            let n = crate::measures::norm(&out);
            if !n.is_finite() {
                return Err(Error::param(format!("direction {} is not finite at {x:?}", self.tag())));
            }
            worst = worst.max(n / (1.0 + crate::measures::norm(x)));
        }
        if worst > limit {
            return Err(Error::param(format!(
                "direction {} grows faster than {limit}(1 + |x|)",
                self.tag()
            )));
        }
        Ok(worst)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightShape {
    #[default]
    Linear,
    /// `sin²(π s / 2)` in the rescaled time `s = (t - r)/(T - r)`.
    SinSquared,
}

/// Time weight `g` on `[r, T]` with `g_r = 0` and `g_T = 1`, extended by 0
/// before `r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightFunction {
    start: f64,
    horizon: f64,
    shape: WeightShape,
}

impl WeightFunction {
    pub fn new(start: f64, horizon: f64, shape: WeightShape) -> Result<Self> {
        if !(start >= 0.0 && start < horizon && horizon.is_finite()) {
            return Err(Error::param(format!("weight needs 0 <= r < T, got r = {start}, T = {horizon}")));
        }
        Ok(Self { start, horizon, shape })
    }

    pub fn linear(start: f64, horizon: f64) -> Result<Self> {
        Self::new(start, horizon, WeightShape::Linear)
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn shape(&self) -> WeightShape {
        self.shape
    }

    fn rescaled(&self, t: f64) -> Option<f64> {
        if t < self.start {
            None
        } else {
            Some(((t - self.start) / (self.horizon - self.start)).min(1.0))
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        match (self.rescaled(t), self.shape) {
            (None, _) => 0.0,
            (Some(s), WeightShape::Linear) => s,
            (Some(s), WeightShape::SinSquared) => (0.5 * std::f64::consts::PI * s).sin().powi(2),
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let len = self.horizon - self.start;
        match (self.rescaled(t), self.shape) {
            (None, _) => 0.0,
            (Some(_), WeightShape::Linear) => 1.0 / len,
            (Some(s), WeightShape::SinSquared) => 0.5 * std::f64::consts::PI * (std::f64::consts::PI * s).sin() / len,
        }
    }

    /// `(g, g')` at every grid node.
    pub fn on_grid(&self, grid: &TimeGrid) -> (Vec<f64>, Vec<f64>) {
        (0..grid.n_nodes())
            .map(|n| (self.value(grid.node(n)), self.derivative(grid.node(n))))
            .unzip()
    }
}

/// Directional flows of the particle system, of its limit copies, and of
/// the auxiliary ensemble that carries the limit flow's expectation term.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionalFlows {
    pub v_particle: Vec<f64>,
    pub v_limit: Vec<f64>,
    pub v_aux: Vec<f64>,
}

impl DirectionalFlows {
    pub fn new(direction: &DirectionSpec, particles: &ParticleCloud, aux: &ParticleCloud) -> Self {
        let d = particles.dim();
        let v = direction.initial_flows(particles.positions(), d);
        Self {
            v_particle: v.clone(),
            v_limit: v,
            v_aux: direction.initial_flows(aux.positions(), d),
        }
    }
}

/// Malliavin flows: `w_limit` solves the limit equation for every copy,
/// `w_own` is the component with source at the tagged particle only,
/// `w_cross_sum` is the sum of all other components, and `hhat` is the limit
/// flow along the correction direction built from the expectation term.
#[derive(Clone, Debug, PartialEq)]
pub struct MalliavinFlows {
    pub tag: usize,
    pub w_limit: Vec<f64>,
    pub w_own: Vec<f64>,
    pub w_cross_sum: Vec<f64>,
    pub hhat: Vec<f64>,
    /// Particle integrands `h'` at every visited node, when recorded.
    pub h_paths: Option<Vec<Vec<f64>>>,
}

impl MalliavinFlows {
    pub fn zeros(n: usize, d: usize, tag: usize, record: bool) -> Result<Self> {
        if tag >= n {
            return Err(Error::param(format!("tagged particle {tag} out of range for N = {n}")));
        }
        Ok(Self {
            tag,
            w_limit: vec![0.0; n * d],
            w_own: vec![0.0; n * d],
            w_cross_sum: vec![0.0; n * d],
            hhat: vec![0.0; n * d],
            h_paths: record.then(Vec::new),
        })
    }
}

/// Interaction term of a linear flow.
#[derive(Clone, Copy)]
pub(crate) enum Interaction<'a> {
    None,
    /// `(1/N) Σ_j D^L b(x_i, μ)(x_j) w_j` over the flow's own cloud.
    Own,
    /// A precomputed drift field (and diffusion field, `d x m` blocks).
    Field {
        drift: &'a [f64],
        diffusion: Option<&'a [f64]>,
    },
}

/// Inhomogeneous drift source of a linear flow.
#[derive(Clone, Copy)]
pub(crate) enum Source<'a> {
    None,
    /// `coef · v_i`, with particles selected by `mask`.
    Scaled { coef: f64, vs: &'a [f64], mask: Mask },
    /// `coef · field_i`.
    Field { coef: f64, field: &'a [f64] },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Mask {
    All,
    Only(usize),
    AllBut(usize),
}

impl Mask {
    fn admits(self, i: usize) -> bool {
        match self {
            Mask::All => true,
            Mask::Only(t) => i == t,
            Mask::AllBut(t) => i != t,
        }
    }
}

/// Scratch buffers for [`advance_flow`].
#[derive(Debug, Default)]
pub(crate) struct FlowScratch {
    inter: Vec<f64>,
    sig: Vec<f64>,
    sig_inter: Vec<f64>,
    incr: Vec<f64>,
}

/// Pre-step point of a cloud: positions, the measure the coefficients see,
/// and `∇b` at every position.
pub(crate) struct Linearization<'a> {
    pub t: f64,
    pub xs: &'a [f64],
    pub mu: &'a EmpiricalMeasure,
    pub grad: &'a [f64],
}

pub(crate) fn drift_gradients(model: &ModelSpec, t: f64, xs: &[f64], mu: &EmpiricalMeasure, out: &mut Vec<f64>) {
    let d = model.dim();
    out.resize(xs.len() * d, 0.0);
    model.drift_grad_batch(t, xs, mu, out);
}

/// One explicit Euler step of the linear flow `ws` along `lin`:
/// `w_i += (∇b_i w_i + I_i + S_i) dt + (∇_{w_i}σ + J_i) ΔW_i`.
pub(crate) fn advance_flow(
    model: &ModelSpec,
    lin: &Linearization<'_>,
    dt: f64,
    ws: &mut [f64],
    interaction: Interaction<'_>,
    source: Source<'_>,
    dw: &[f64],
    scratch: &mut FlowScratch,
) {
    let (d, m) = (model.dim(), model.noise_dim());
    let n = ws.len() / d;
    let FlowScratch { inter, sig, sig_inter, incr } = scratch;
    incr.resize(n * d, 0.0);
    for i in 0..n {
        let g = &lin.grad[i * d * d..(i + 1) * d * d];
        let w = &ws[i * d..(i + 1) * d];
        for r in 0..d {
            incr[i * d + r] = (0..d).map(|c| g[r * d + c] * w[c]).sum::<f64>();
        }
    }
    let inter_drift: Option<&[f64]> = match interaction {
        Interaction::None => None,
        Interaction::Own => {
            inter.resize(n * d, 0.0);
            model.lions_drift_action(lin.t, lin.xs, lin.mu, lin.xs, ws, inter);
            Some(inter.as_slice())
        }
        Interaction::Field { drift, .. } => Some(drift),
    };
    if let Some(f) = inter_drift {
        incr.iter_mut().zip(f).for_each(|(a, b)| *a += b);
    }
    match source {
        Source::None => {}
        Source::Scaled { coef, vs, mask } => {
            if coef != 0.0 {
                for i in (0..n).filter(|&i| mask.admits(i)) {
                    for r in 0..d {
                        incr[i * d + r] += coef * vs[i * d + r];
                    }
                }
            }
        }
        Source::Field { coef, field } => {
            if coef != 0.0 {
                incr.iter_mut().zip(field).for_each(|(a, f)| *a += coef * f);
            }
        }
    }
    incr.iter_mut().for_each(|a| *a *= dt);

    if !model.constant_diffusion() {
        sig.resize(n * d * m, 0.0);
        model.diffusion_grad_batch(lin.t, lin.xs, lin.mu, ws, sig);
        let sig_field: Option<&[f64]> = match interaction {
            Interaction::None => None,
            Interaction::Own if !model.dist_free_diffusion() => {
                sig_inter.resize(n * d * m, 0.0);
                model.lions_diffusion_action(lin.t, lin.xs, lin.mu, lin.xs, ws, sig_inter);
                Some(sig_inter.as_slice())
            }
            Interaction::Own => None,
            Interaction::Field { diffusion, .. } => diffusion,
        };
        if let Some(f) = sig_field {
            sig.iter_mut().zip(f).for_each(|(a, b)| *a += b);
        }
        for i in 0..n {
            let s = &sig[i * d * m..(i + 1) * d * m];
            let w = &dw[i * m..(i + 1) * m];
            for r in 0..d {
                incr[i * d + r] += (0..m).map(|c| s[r * m + c] * w[c]).sum::<f64>();
            }
        }
    }
    ws.iter_mut().zip(incr.iter()).for_each(|(w, a)| *w += a);
}

/// The expectation term of the limit flow at every evaluation point,
/// `(1/M) Σ_m D^L b(x_i, μ_t)(X̄^m) v̄^m`, plus its diffusion analogue when σ
/// depends on the measure.
pub(crate) fn expectation_field(
    model: &ModelSpec,
    t: f64,
    xs: &[f64],
    law: &EmpiricalMeasure,
    aux_x: &[f64],
    aux_v: &[f64],
) -> (Vec<f64>, Option<Vec<f64>>) {
    let (d, m) = (model.dim(), model.noise_dim());
    let mut drift = vec![0.0; xs.len()];
    model.lions_drift_action(t, xs, law, aux_x, aux_v, &mut drift);
    let diffusion = (!model.dist_free_diffusion() && !model.constant_diffusion()).then(|| {
        let mut out = vec![0.0; xs.len() / d * d * m];
        model.lions_diffusion_action(t, xs, law, aux_x, aux_v, &mut out);
        out
    });
    (drift, diffusion)
}

/// Malliavin integrands `h'_i = σ*a^{-1}(x_i) · coef · u_i` (`m`-vectors).
pub(crate) fn malliavin_integrand(
    model: &ModelSpec,
    t: f64,
    xs: &[f64],
    mu: &EmpiricalMeasure,
    coef: f64,
    us: &[f64],
    out: &mut [f64],
) -> Result<()> {
    let (d, m) = (model.dim(), model.noise_dim());
    let n = xs.len() / d;
    let mut s = vec![0.0; m * d];
    let constant = model.constant_diffusion();
    if constant {
        model.sigma_star_a_inv(t, &xs[..d], mu, &mut s)?;
    }
    for i in 0..n {
        if !constant {
            model.sigma_star_a_inv(t, &xs[i * d..(i + 1) * d], mu, &mut s)?;
        }
        let u = &us[i * d..(i + 1) * d];
        for r in 0..m {
            out[i * m + r] = coef * (0..d).map(|c| s[r * d + c] * u[c]).sum::<f64>();
        }
    }
    Ok(())
}

fn bank_step(bank: &NoiseBank, node: usize, n: usize, m: usize) -> Result<Vec<f64>> {
    if bank.n_particles() < n || bank.noise_dim() != m {
        return Err(Error::dim("noise bank does not cover the flows"));
    }
    if node >= bank.n_steps() {
        return Err(Error::param("flows are already at the final node"));
    }
    let mut dw = vec![0.0; n * m];
    bank.fill_step(node, &mut dw);
    Ok(dw)
}

fn check_flow_dims(model: &ModelSpec, flows: &[f64], positions: &[f64]) -> Result<()> {
    if flows.len() != positions.len() || !positions.len().is_multiple_of(model.dim()) {
        return Err(Error::dim("flow and position arrays disagree"));
    }
    Ok(())
}

/// Advances the particle directional flow one node. `particles` must still
/// be at the pre-step node; step the flows before the positions.
pub fn step_directional_particle(
    model: &ModelSpec,
    particles: &ParticleCloud,
    flows: &mut DirectionalFlows,
    bank: &NoiseBank,
    grid: &TimeGrid,
) -> Result<()> {
    let node = particles.node();
    check_flow_dims(model, &flows.v_particle, particles.positions())?;
    let dw = bank_step(bank, node, particles.len(), model.noise_dim())?;
    let t = grid.node(node);
    let mut grad = Vec::new();
    drift_gradients(model, t, particles.positions(), particles.measure(), &mut grad);
    let lin = Linearization { t, xs: particles.positions(), mu: particles.measure(), grad: &grad };
    let mut scratch = FlowScratch::default();
    advance_flow(model, &lin, grid.dt(), &mut flows.v_particle, Interaction::Own, Source::None, &dw, &mut scratch);
    check_finite("particle directional flow", &flows.v_particle, model.dim(), node + 1)
}

/// Advances the auxiliary ensemble's flow (an `M`-particle flow on its own
/// noise `aux_bank`) and the limit flow of every copy, whose expectation
/// term is averaged over the auxiliary pairs. `limits` and `aux` must be at
/// the pre-step node.
pub fn step_directional_limit(
    model: &ModelSpec,
    limits: &LimitCloud,
    law: &FrozenLaw,
    aux: Option<&ParticleCloud>,
    flows: &mut DirectionalFlows,
    bank: &NoiseBank,
    aux_bank: &NoiseBank,
    grid: &TimeGrid,
) -> Result<()> {
    let aux = aux.ok_or_else(|| Error::Config("limit directional flow needs an auxiliary ensemble".into()))?;
    let node = limits.node();
    if aux.node() != node {
        return Err(Error::param("auxiliary ensemble and limit copies are at different nodes"));
    }
    check_flow_dims(model, &flows.v_limit, limits.positions())?;
    check_flow_dims(model, &flows.v_aux, aux.positions())?;
    let t = grid.node(node);
    let mu = law.at(node);
    let (field, sig_field) = expectation_field(model, t, limits.positions(), mu, aux.positions(), &flows.v_aux);
    let dw = bank_step(bank, node, limits.len(), model.noise_dim())?;
    let mut grad = Vec::new();
    drift_gradients(model, t, limits.positions(), mu, &mut grad);
    let lin = Linearization { t, xs: limits.positions(), mu, grad: &grad };
    let mut scratch = FlowScratch::default();
    let interaction = Interaction::Field { drift: &field, diffusion: sig_field.as_deref() };
    advance_flow(model, &lin, grid.dt(), &mut flows.v_limit, interaction, Source::None, &dw, &mut scratch);

    let aux_dw = bank_step(aux_bank, node, aux.len(), model.noise_dim())?;
    drift_gradients(model, t, aux.positions(), aux.measure(), &mut grad);
    let lin = Linearization { t, xs: aux.positions(), mu: aux.measure(), grad: &grad };
    advance_flow(model, &lin, grid.dt(), &mut flows.v_aux, Interaction::Own, Source::None, &aux_dw, &mut scratch);
    check_finite("limit directional flow", &flows.v_limit, model.dim(), node + 1)?;
    check_finite("auxiliary directional flow", &flows.v_aux, model.dim(), node + 1)
}

/// Integrands `h'_t = 1_{t ≥ r} σ*a^{-1}(x) g'_t v_t` at one node, one
/// `m`-vector per particle.
pub fn build_malliavin_direction(
    model: &ModelSpec,
    g: &WeightFunction,
    t: f64,
    flows: &[f64],
    positions: &[f64],
    mu: &EmpiricalMeasure,
) -> Result<Vec<f64>> {
    model.require_malliavin()?;
    check_flow_dims(model, flows, positions)?;
    let mut out = vec![0.0; positions.len() / model.dim() * model.noise_dim()];
    malliavin_integrand(model, t, positions, mu, g.derivative(t), flows, &mut out)?;
    Ok(out)
}

/// Advances the tagged own component and the aggregated cross component of
/// the particle Malliavin flow one node. Uses the pre-step particle flow as
/// source; call before stepping the directional flow and the positions.
pub fn step_malliavin_component(
    model: &ModelSpec,
    particles: &ParticleCloud,
    v_particle: &[f64],
    g: &WeightFunction,
    flows: &mut MalliavinFlows,
    bank: &NoiseBank,
    grid: &TimeGrid,
) -> Result<()> {
    model.require_malliavin()?;
    let node = particles.node();
    check_flow_dims(model, &flows.w_own, particles.positions())?;
    let dw = bank_step(bank, node, particles.len(), model.noise_dim())?;
    let t = grid.node(node);
    let mut grad = Vec::new();
    drift_gradients(model, t, particles.positions(), particles.measure(), &mut grad);
    let lin = Linearization { t, xs: particles.positions(), mu: particles.measure(), grad: &grad };
    let coef = g.derivative(t);
    let mut scratch = FlowScratch::default();
    if let Some(paths) = flows.h_paths.as_mut() {
        paths.push(build_malliavin_direction(model, g, t, v_particle, particles.positions(), particles.measure())?);
    }
    let own = Source::Scaled { coef, vs: v_particle, mask: Mask::Only(flows.tag) };
    advance_flow(model, &lin, grid.dt(), &mut flows.w_own, Interaction::Own, own, &dw, &mut scratch);
    let cross = Source::Scaled { coef, vs: v_particle, mask: Mask::AllBut(flows.tag) };
    advance_flow(model, &lin, grid.dt(), &mut flows.w_cross_sum, Interaction::Own, cross, &dw, &mut scratch);
    check_finite("particle Malliavin flow", &flows.w_own, model.dim(), node + 1)?;
    check_finite("particle Malliavin flow", &flows.w_cross_sum, model.dim(), node + 1)
}

/// Advances the limit Malliavin flow of every copy one node, with source
/// `g' v` and no interaction term.
pub fn step_malliavin_limit(
    model: &ModelSpec,
    limits: &LimitCloud,
    law: &FrozenLaw,
    v_limit: &[f64],
    g: &WeightFunction,
    flows: &mut MalliavinFlows,
    bank: &NoiseBank,
    grid: &TimeGrid,
) -> Result<()> {
    model.require_malliavin()?;
    let node = limits.node();
    check_flow_dims(model, &flows.w_limit, limits.positions())?;
    let dw = bank_step(bank, node, limits.len(), model.noise_dim())?;
    let t = grid.node(node);
    let mu = law.at(node);
    let mut grad = Vec::new();
    drift_gradients(model, t, limits.positions(), mu, &mut grad);
    let lin = Linearization { t, xs: limits.positions(), mu, grad: &grad };
    let src = Source::Scaled { coef: g.derivative(t), vs: v_limit, mask: Mask::All };
    let mut scratch = FlowScratch::default();
    advance_flow(model, &lin, grid.dt(), &mut flows.w_limit, Interaction::None, src, &dw, &mut scratch);
    check_finite("limit Malliavin flow", &flows.w_limit, model.dim(), node + 1)
}

/// Advances the limit flow along the correction direction: the limit
/// Malliavin equation with source `g_t · E⟨D^L b(x, μ_t)(X̄), v̄⟩` taken over
/// the auxiliary pairs.
pub fn step_hhat_limit(
    model: &ModelSpec,
    limits: &LimitCloud,
    law: &FrozenLaw,
    aux: Option<(&ParticleCloud, &[f64])>,
    g: &WeightFunction,
    flows: &mut MalliavinFlows,
    bank: &NoiseBank,
    grid: &TimeGrid,
) -> Result<()> {
    model.require_malliavin()?;
    let (aux, v_aux) = aux.ok_or_else(|| Error::Config("correction flow needs an auxiliary ensemble".into()))?;
    let node = limits.node();
    check_flow_dims(model, &flows.hhat, limits.positions())?;
    let dw = bank_step(bank, node, limits.len(), model.noise_dim())?;
    let t = grid.node(node);
    let mu = law.at(node);
    let (field, _) = expectation_field(model, t, limits.positions(), mu, aux.positions(), v_aux);
    let mut grad = Vec::new();
    drift_gradients(model, t, limits.positions(), mu, &mut grad);
    let lin = Linearization { t, xs: limits.positions(), mu, grad: &grad };
    let src = Source::Field { coef: g.value(t), field: &field };
    let mut scratch = FlowScratch::default();
    advance_flow(model, &lin, grid.dt(), &mut flows.hhat, Interaction::None, src, &dw, &mut scratch);
    check_finite("correction flow", &flows.hhat, model.dim(), node + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{make_kuramoto, make_mf_ou, Admissibility, MeanFieldOu};
    use crate::noise::make_noise_bank;
    use std::sync::Arc;
    use crate::particle_sim::{run_reference, step_limit_copies, step_particles, InitialLaw};

    fn ou_zero_noise(a: f64, b: f64) -> ModelSpec {
        let mut adm = Admissibility::lipschitz_default(2.0 * a.abs() + b.abs());
        adm.globally_lipschitz = true;
        ModelSpec::new("mf_ou", Arc::new(MeanFieldOu { a, b, sigma: 0.0, d: 1 }), adm, true).unwrap()
    }

    #[test]
    fn weight_functions_hit_endpoints() {
        for shape in [WeightShape::Linear, WeightShape::SinSquared] {
            let g = WeightFunction::new(0.25, 1.0, shape).unwrap();
            assert_eq!(g.value(0.1), 0.0);
            assert_eq!(g.derivative(0.1), 0.0);
            assert!(g.value(0.25).abs() < 1e-15);
            assert!((g.value(1.0) - 1.0).abs() < 1e-15);
            let h = 1e-6;
            let fd = (g.value(0.6 + h) - g.value(0.6 - h)) / (2.0 * h);
            assert!((fd - g.derivative(0.6)).abs() < 1e-8);
        }
        assert!(WeightFunction::linear(1.0, 1.0).is_err());
    }

    #[test]
    fn direction_growth_and_combination() {
        let samples = [-3.0, 0.0, 2.0, 10.0];
        assert!(DirectionSpec::Linear { scale: 1.0 }.check_growth(&samples, 1, 1.0).unwrap() <= 1.0);
        assert!(DirectionSpec::Constant { value: 5.0 }.check_growth(&samples, 1, 1.0).is_err());
        let combo = DirectionSpec::Combination {
            terms: vec![(2.0, DirectionSpec::Linear { scale: 1.0 }), (-1.0, DirectionSpec::Constant { value: 1.0 })],
        };
        let mut out = [0.0];
        combo.apply(&[3.0], &mut out);
        assert_eq!(out[0], 5.0);
    }

    #[test]
    fn zero_direction_gives_zero_flows() {
        let model = make_mf_ou(-1.0, 0.5, 0.3, 1).unwrap();
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let bank = make_noise_bank(3, 16, 20, grid.dt(), 1).unwrap();
        let mut p = ParticleCloud::new(InitialLaw::default().sample(1, 16, 1), 1).unwrap();
        let mut flows = DirectionalFlows::new(&DirectionSpec::Zero, &p, &p.clone());
        for _ in 0..20 {
            step_directional_particle(&model, &p, &mut flows, &bank, &grid).unwrap();
            step_particles(&model, &mut p, &bank, &grid).unwrap();
        }
        assert!(flows.v_particle.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn particle_flow_matches_scalar_ode() {
        // φ ≡ 1: all flows equal and solve v' = (a + b) v.
        let model = make_mf_ou(-1.0, 0.5, 0.3, 1).unwrap();
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let bank = make_noise_bank(3, 8, 1000, grid.dt(), 1).unwrap();
        let mut p = ParticleCloud::new(InitialLaw::default().sample(1, 8, 1), 1).unwrap();
        let mut flows = DirectionalFlows::new(&DirectionSpec::Constant { value: 1.0 }, &p, &p.clone());
        for _ in 0..1000 {
            step_directional_particle(&model, &p, &mut flows, &bank, &grid).unwrap();
            step_particles(&model, &mut p, &bank, &grid).unwrap();
        }
        for v in &flows.v_particle {
            assert!((v - (-0.5f64).exp()).abs() < 2e-3, "{v}");
        }
    }

    #[test]
    fn malliavin_flows_follow_the_weighted_directional_flow() {
        let model = make_kuramoto(1.0, 0.5).unwrap();
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let (n, m_aux) = (16, 64);
        let bank = make_noise_bank(3, n, 200, grid.dt(), 1).unwrap();
        let aux_bank = make_noise_bank(4, m_aux, 200, grid.dt(), 1).unwrap();
        let ref_bank = make_noise_bank(5, 128, 200, grid.dt(), 1).unwrap();
        let init = InitialLaw::default();
        let law = run_reference(&model, 128, &ref_bank, &grid, &init, 7).unwrap();
        let x0 = init.sample(1, n, 1);
        let mut p = ParticleCloud::new(x0.clone(), 1).unwrap();
        let mut l = LimitCloud::new(x0, 1).unwrap();
        let mut aux = ParticleCloud::new(init.sample(2, m_aux, 1), 1).unwrap();
        let dir = DirectionSpec::Linear { scale: 1.0 };
        let mut flows = DirectionalFlows::new(&dir, &p, &aux);
        let g = WeightFunction::linear(0.5, 1.0).unwrap();
        let mut mf = MalliavinFlows::zeros(n, 1, 0, true).unwrap();
        let mut worst_particle = 0.0f64;
        let mut worst_limit = 0.0f64;
        for node in 0..200 {
            step_malliavin_component(&model, &p, &flows.v_particle, &g, &mut mf, &bank, &grid).unwrap();
            step_malliavin_limit(&model, &l, &law, &flows.v_limit, &g, &mut mf, &bank, &grid).unwrap();
            step_hhat_limit(&model, &l, &law, Some((&aux, &flows.v_aux)), &g, &mut mf, &bank, &grid).unwrap();
            step_directional_particle(&model, &p, &mut flows, &bank, &grid).unwrap();
            step_directional_limit(&model, &l, &law, Some(&aux), &mut flows, &bank, &aux_bank, &grid).unwrap();
            step_particles(&model, &mut p, &bank, &grid).unwrap();
            step_limit_copies(&model, &mut l, &law, &bank, &grid).unwrap();
            step_particles(&model, &mut aux, &aux_bank, &grid).unwrap();
            let gt = g.value(grid.node(node + 1));
            for i in 0..n {
                let lhs = mf.w_own[i] + mf.w_cross_sum[i];
                worst_particle = worst_particle.max((lhs - gt * flows.v_particle[i]).abs());
                let lhs = mf.w_limit[i] + mf.hhat[i];
                worst_limit = worst_limit.max((lhs - gt * flows.v_limit[i]).abs());
            }
        }
        assert!(worst_particle < 0.02, "{worst_particle}");
        assert!(worst_limit < 0.02, "{worst_limit}");
        assert_eq!(mf.h_paths.as_ref().unwrap().len(), 200);
        assert!(mf.h_paths.as_ref().unwrap()[50].iter().all(|h| *h == 0.0));
    }

    #[test]
    fn malliavin_direction_is_flow_over_sigma() {
        let model = make_mf_ou(-1.0, 0.5, 0.3, 1).unwrap();
        let g = WeightFunction::linear(0.5, 1.0).unwrap();
        let xs = [0.1, -0.2];
        let mu = EmpiricalMeasure::from_scalars(&xs).unwrap();
        let h = build_malliavin_direction(&model, &g, 0.75, &[0.6, 1.2], &xs, &mu).unwrap();
        assert!((h[0] - 0.6 / (0.3 * 0.5)).abs() < 1e-12);
        assert!((h[1] - 1.2 / (0.3 * 0.5)).abs() < 1e-12);
        let early = build_malliavin_direction(&model, &g, 0.25, &[0.6, 1.2], &xs, &mu).unwrap();
        assert_eq!(early, vec![0.0, 0.0]);
        assert!(build_malliavin_direction(&ou_zero_noise(-1.0, 0.5), &g, 0.75, &[1.0], &[0.0], &mu).is_err());
    }
}
