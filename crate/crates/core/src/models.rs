//! Coefficient bundles for McKean-Vlasov dynamics
//! `dX = b_t(X, L_X) dt + σ_t(X, L_X) dW` and the built-in models.
//!
//! A model supplies the drift `b`, the diffusion `σ` (a `d x m` matrix), the
//! spatial gradients `∇b`, `∇_v σ`, and the Lions kernels `D^L b(x, μ)(y)`
//! and `<D^L σ(x, μ)(y), v>`. Measure arguments are always
//! [`EmpiricalMeasure`]s. Lions kernels are declared analytically;
//! [`check_lions_kernel`] verifies them against finite differences on the
//! atoms of an empirical measure.
//!
//! Matrices are row-major: `drift_grad` writes `∂b_r/∂x_c` at `r * d + c`,
//! `lions_drift` writes `(D^L b)_{rc}` at `r * d + c`, diffusion-shaped
//! outputs are `d x m`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::measures::{self, EmpiricalMeasure};

/// Pointwise and batched coefficient maps of a mean-field model.
///
/// The batched methods have generic defaults built from the pointwise maps.
/// Those defaults are `O(n · |μ|)`; models with convolution structure should
/// override them with separable `O(n + |μ|)` forms.
pub trait Coefficients: Send + Sync {
    fn dim(&self) -> usize;
    fn noise_dim(&self) -> usize;

    fn drift(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);
    fn diffusion(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);
    fn drift_grad(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]);
    /// `∇_v σ_t(x, μ)`, a `d x m` matrix.
    fn diffusion_grad(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, v: &[f64], out: &mut [f64]);
    fn lions_drift(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, y: &[f64], out: &mut [f64]);
    /// `<D^L σ_t(x, μ)(y), v>`, a `d x m` matrix.
    fn lions_diffusion(
        &self,
        t: f64,
        x: &[f64],
        mu: &EmpiricalMeasure,
        y: &[f64],
        v: &[f64],
        out: &mut [f64],
    );

    /// True when σ does not depend on `(t, x, μ)`; derivative terms of σ are
    /// then skipped by the integrators.
    fn constant_diffusion(&self) -> bool {
        false
    }

    /// `σ^T (σσ^T)^{-1}` at `x` as an `m x d` matrix. Only meaningful for
    /// distribution-free diffusions. The default inverts `σσ^T` numerically.
    fn sigma_star_a_inv(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) -> bool {
        let (d, m) = (self.dim(), self.noise_dim());
        let mut sigma = vec![0.0; d * m];
        self.diffusion(t, x, mu, &mut sigma);
        match linalg::sigma_star_a_inv(&sigma, d, m) {
            Some(s) => {
                out.copy_from_slice(&s);
                true
            }
            None => false,
        }
    }

    fn drift_batch(&self, t: f64, xs: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let d = self.dim();
        for (x, o) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            self.drift(t, x, mu, o);
        }
    }

    fn drift_grad_batch(&self, t: f64, xs: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let d = self.dim();
        for (x, o) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d * d)) {
            self.drift_grad(t, x, mu, o);
        }
    }

    fn diffusion_batch(&self, t: f64, xs: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let (d, m) = (self.dim(), self.noise_dim());
        for (x, o) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d * m)) {
            self.diffusion(t, x, mu, o);
        }
    }

    /// `out_i = (1/|ys|) Σ_j D^L b(x_i, μ)(y_j) v_j` for every evaluation
    /// point `x_i`.
    fn lions_drift_action(
        &self,
        t: f64,
        xs: &[f64],
        mu: &EmpiricalMeasure,
        ys: &[f64],
        vs: &[f64],
        out: &mut [f64],
    ) {
        let d = self.dim();
        let count = ys.len() / d;
        let mut kernel = vec![0.0; d * d];
        for (x, o) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            o.iter_mut().for_each(|v| *v = 0.0);
            for (y, v) in ys.chunks_exact(d).zip(vs.chunks_exact(d)) {
                self.lions_drift(t, x, mu, y, &mut kernel);
                linalg::mat_vec_add(&kernel, d, d, v, o);
            }
            o.iter_mut().for_each(|v| *v /= count as f64);
        }
    }

    /// `out_i = ∇_{v_i} σ(x_i, μ)`, `d x m` blocks.
    fn diffusion_grad_batch(
        &self,
        t: f64,
        xs: &[f64],
        mu: &EmpiricalMeasure,
        vs: &[f64],
        out: &mut [f64],
    ) {
        let (d, m) = (self.dim(), self.noise_dim());
        for ((x, v), o) in xs
            .chunks_exact(d)
            .zip(vs.chunks_exact(d))
            .zip(out.chunks_exact_mut(d * m))
        {
            self.diffusion_grad(t, x, mu, v, o);
        }
    }

    /// `out_i = (1/|ys|) Σ_j <D^L σ(x_i, μ)(y_j), v_j>`, `d x m` blocks.
    fn lions_diffusion_action(
        &self,
        t: f64,
        xs: &[f64],
        mu: &EmpiricalMeasure,
        ys: &[f64],
        vs: &[f64],
        out: &mut [f64],
    ) {
        let (d, m) = (self.dim(), self.noise_dim());
        let count = ys.len() / d;
        let mut block = vec![0.0; d * m];
        for (x, o) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d * m)) {
            o.iter_mut().for_each(|v| *v = 0.0);
            for (y, v) in ys.chunks_exact(d).zip(vs.chunks_exact(d)) {
                self.lions_diffusion(t, x, mu, y, v, &mut block);
                for (acc, b) in o.iter_mut().zip(&block) {
                    *acc += b;
                }
            }
            o.iter_mut().for_each(|v| *v /= count as f64);
        }
    }
}

/// Regularity constants attached to a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Admissibility {
    /// Integrability order `k ≥ 2`.
    pub k: f64,
    /// Moment order `q > k`; `None` stands for `q = ∞`.
    pub q: Option<f64>,
    /// Hölder exponent of the derivative coefficients, in `(0, 1]`.
    pub holder_alpha: f64,
    /// Polynomial growth exponent `m ≥ 0` of the Hölder constants.
    pub growth_m: f64,
    /// One-sided Lipschitz constant `K`.
    pub lipschitz: f64,
    /// Whether the globally Lipschitz assumptions hold. Models without it are
    /// for exploratory runs only.
    pub globally_lipschitz: bool,
}

impl Admissibility {
    pub fn validate(&self) -> Result<()> {
        if !(self.k >= 2.0) {
            return Err(Error::param(format!("admissibility k must be >= 2, got {}", self.k)));
        }
        if let Some(q) = self.q {
            if !(q > self.k) {
                return Err(Error::param(format!("admissibility needs q > k, got q = {q}, k = {}", self.k)));
            }
        }
        if !(self.holder_alpha > 0.0 && self.holder_alpha <= 1.0) {
            return Err(Error::param(format!("holder alpha must lie in (0, 1], got {}", self.holder_alpha)));
        }
        if !(self.growth_m >= 0.0) {
            return Err(Error::param(format!("growth exponent m must be >= 0, got {}", self.growth_m)));
        }
        if let Some(q) = self.q {
            let cap = q * (self.k - self.holder_alpha);
            if self.growth_m > cap {
                return Err(Error::param(format!(
                    "growth exponent m = {} exceeds q(k - alpha) = {cap}",
                    self.growth_m
                )));
            }
        }
        Ok(())
    }

    pub fn lipschitz_default(lipschitz: f64) -> Self {
        Self {
            k: 2.0,
            q: None,
            holder_alpha: 1.0,
            growth_m: 0.0,
            lipschitz,
            globally_lipschitz: true,
        }
    }
}

/// A coefficient bundle with its metadata.
#[derive(Clone)]
pub struct ModelSpec {
    id: String,
    coeffs: Arc<dyn Coefficients>,
    admissibility: Admissibility,
    dist_free_diffusion: bool,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("id", &self.id)
            .field("d", &self.dim())
            .field("m", &self.noise_dim())
            .field("admissibility", &self.admissibility)
            .field("dist_free_diffusion", &self.dist_free_diffusion)
            .finish()
    }
}

impl ModelSpec {
    /// Wraps user coefficients. `dist_free_diffusion` declares that σ does
    /// not depend on the measure; only such models support Malliavin flows.
    pub fn new(
        id: impl Into<String>,
        coeffs: Arc<dyn Coefficients>,
        admissibility: Admissibility,
        dist_free_diffusion: bool,
    ) -> Result<Self> {
        admissibility.validate()?;
        if coeffs.dim() == 0 || coeffs.noise_dim() == 0 {
            return Err(Error::dim("model dimensions d and m must be positive"));
        }
        Ok(Self {
            id: id.into(),
            coeffs,
            admissibility,
            dist_free_diffusion,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dim(&self) -> usize {
        self.coeffs.dim()
    }

    pub fn noise_dim(&self) -> usize {
        self.coeffs.noise_dim()
    }

    pub fn admissibility(&self) -> &Admissibility {
        &self.admissibility
    }

    pub fn dist_free_diffusion(&self) -> bool {
        self.dist_free_diffusion
    }

    pub fn coefficients(&self) -> &dyn Coefficients {
        self.coeffs.as_ref()
    }

    /// `(σ^T a^{-1})(x)` as an `m x d` matrix; refuses models whose
    /// diffusion depends on the measure or is degenerate.
    pub fn sigma_star_a_inv(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) -> Result<()> {
        self.require_malliavin()?;
        if !self.coeffs.sigma_star_a_inv(t, x, mu, out) {
            return Err(Error::UnsupportedModel(format!(
                "model `{}` has a singular diffusion matrix σσ^T",
                self.id
            )));
        }
        Ok(())
    }

    /// Errors unless the model has a distribution-free diffusion.
    pub fn require_malliavin(&self) -> Result<()> {
        if !self.dist_free_diffusion {
            return Err(Error::UnsupportedModel(format!(
                "model `{}` has a measure-dependent diffusion; Malliavin flows need σ_t(x, μ) = σ_t(x)",
                self.id
            )));
        }
        Ok(())
    }
}

impl std::ops::Deref for ModelSpec {
    type Target = dyn Coefficients;

    fn deref(&self) -> &Self::Target {
        self.coeffs.as_ref()
    }
}

/// Built-in model identifiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinModel {
    MfOu,
    Kuramoto,
    DoubleWell,
}

impl BuiltinModel {
    pub fn as_str(self) -> &'static str {
        match self {
            BuiltinModel::MfOu => "mf_ou",
            BuiltinModel::Kuramoto => "kuramoto",
            BuiltinModel::DoubleWell => "double_well",
        }
    }
}

impl std::str::FromStr for BuiltinModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mf_ou" => Ok(BuiltinModel::MfOu),
            "kuramoto" => Ok(BuiltinModel::Kuramoto),
            "double_well" => Ok(BuiltinModel::DoubleWell),
            other => Err(Error::Config(format!(
                "unknown model id `{other}` (expected mf_ou, kuramoto or double_well)"
            ))),
        }
    }
}

/// Linear mean-field Ornstein-Uhlenbeck model
/// `b(x, μ) = a·x + b·mean(μ)`, `σ = sigma·I`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanFieldOu {
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
    pub d: usize,
}

impl Coefficients for MeanFieldOu {
    fn dim(&self) -> usize {
        self.d
    }

    fn noise_dim(&self) -> usize {
        self.d
    }

    fn drift(&self, _t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let mean = mu.cached_stat("mean", EmpiricalMeasure::mean);
        for ((o, xi), mi) in out.iter_mut().zip(x).zip(mean.iter()) {
            *o = self.a * xi + self.b * mi;
        }
    }

    fn diffusion(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        scaled_identity(self.sigma, self.d, out);
    }

    fn drift_grad(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        scaled_identity(self.a, self.d, out);
    }

    fn diffusion_grad(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, _v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }

    fn lions_drift(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, _y: &[f64], out: &mut [f64]) {
        scaled_identity(self.b, self.d, out);
    }

    fn lions_diffusion(
        &self,
        _t: f64,
        _x: &[f64],
        _mu: &EmpiricalMeasure,
        _y: &[f64],
        _v: &[f64],
        out: &mut [f64],
    ) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }

    fn constant_diffusion(&self) -> bool {
        true
    }

    fn sigma_star_a_inv(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) -> bool {
        if self.sigma == 0.0 {
            return false;
        }
        scaled_identity(1.0 / self.sigma, self.d, out);
        true
    }

    fn drift_batch(&self, _t: f64, xs: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let mean = mu.cached_stat("mean", EmpiricalMeasure::mean);
        for (x, o) in xs.chunks_exact(self.d).zip(out.chunks_exact_mut(self.d)) {
            for c in 0..self.d {
                o[c] = self.a * x[c] + self.b * mean[c];
            }
        }
    }

    fn lions_drift_action(
        &self,
        _t: f64,
        xs: &[f64],
        _mu: &EmpiricalMeasure,
        ys: &[f64],
        vs: &[f64],
        out: &mut [f64],
    ) {
        let d = self.d;
        let count = ys.len() / d;
        let mut vbar = vec![0.0; d];
        for v in vs.chunks_exact(d) {
            for (s, x) in vbar.iter_mut().zip(v) {
                *s += x;
            }
        }
        for s in &mut vbar {
            *s = self.b * *s / count as f64;
        }
        for o in out.chunks_exact_mut(d).take(xs.len() / d) {
            o.copy_from_slice(&vbar);
        }
    }

    fn diffusion_grad_batch(&self, _t: f64, _xs: &[f64], _mu: &EmpiricalMeasure, _vs: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }

    fn lions_diffusion_action(
        &self,
        _t: f64,
        _xs: &[f64],
        _mu: &EmpiricalMeasure,
        _ys: &[f64],
        _vs: &[f64],
        out: &mut [f64],
    ) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
}

/// Noisy Kuramoto model on the line, `b(x, μ) = κ ∫ sin(y - x) μ(dy)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kuramoto {
    pub kappa: f64,
    pub sigma: f64,
}

impl Kuramoto {
    /// `(mean sin y, mean cos y)`.
    fn moments(mu: &EmpiricalMeasure) -> (f64, f64) {
        let m = mu.cached_stat("sin_cos_mean", |mu| {
            let (mut s, mut c) = (0.0, 0.0);
            for &y in mu.as_flat() {
                let (sy, cy) = y.sin_cos();
                s += sy;
                c += cy;
            }
            let n = mu.len() as f64;
            vec![s / n, c / n]
        });
        (m[0], m[1])
    }
}

impl Coefficients for Kuramoto {
    fn dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn drift(&self, _t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let sum: f64 = mu.as_flat().iter().map(|y| (y - x[0]).sin()).sum();
        out[0] = self.kappa * sum / mu.len() as f64;
    }

    fn diffusion(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = self.sigma;
    }

    fn drift_grad(&self, _t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let sum: f64 = mu.as_flat().iter().map(|y| (y - x[0]).cos()).sum();
        out[0] = -self.kappa * sum / mu.len() as f64;
    }

    fn diffusion_grad(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, _v: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn lions_drift(&self, _t: f64, x: &[f64], _mu: &EmpiricalMeasure, y: &[f64], out: &mut [f64]) {
        out[0] = self.kappa * (y[0] - x[0]).cos();
    }

    fn lions_diffusion(
        &self,
        _t: f64,
        _x: &[f64],
        _mu: &EmpiricalMeasure,
        _y: &[f64],
        _v: &[f64],
        out: &mut [f64],
    ) {
        out[0] = 0.0;
    }

    fn constant_diffusion(&self) -> bool {
        true
    }

    fn sigma_star_a_inv(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) -> bool {
        if self.sigma == 0.0 {
            return false;
        }
        out[0] = 1.0 / self.sigma;
        true
    }

    // sin(y - x) = sin y cos x - cos y sin x
    fn drift_batch(&self, _t: f64, xs: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let (s, c) = Self::moments(mu);
        for (x, o) in xs.iter().zip(out.iter_mut()) {
            let (sx, cx) = x.sin_cos();
            *o = self.kappa * (s * cx - c * sx);
        }
    }

    // cos(y - x) = cos y cos x + sin y sin x
    fn drift_grad_batch(&self, _t: f64, xs: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let (s, c) = Self::moments(mu);
        for (x, o) in xs.iter().zip(out.iter_mut()) {
            let (sx, cx) = x.sin_cos();
            *o = -self.kappa * (c * cx + s * sx);
        }
    }

    fn lions_drift_action(
        &self,
        _t: f64,
        xs: &[f64],
        _mu: &EmpiricalMeasure,
        ys: &[f64],
        vs: &[f64],
        out: &mut [f64],
    ) {
        let (mut cv, mut sv) = (0.0, 0.0);
        for (y, v) in ys.iter().zip(vs) {
            let (sy, cy) = y.sin_cos();
            cv += cy * v;
            sv += sy * v;
        }
        let n = ys.len() as f64;
        cv /= n;
        sv /= n;
        for (x, o) in xs.iter().zip(out.iter_mut()) {
            let (sx, cx) = x.sin_cos();
            *o = self.kappa * (cx * cv + sx * sv);
        }
    }

    fn diffusion_grad_batch(&self, _t: f64, _xs: &[f64], _mu: &EmpiricalMeasure, _vs: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }

    fn lions_diffusion_action(
        &self,
        _t: f64,
        _xs: &[f64],
        _mu: &EmpiricalMeasure,
        _ys: &[f64],
        _vs: &[f64],
        out: &mut [f64],
    ) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
}

/// Double-well potential with mean attraction,
/// `b(x, μ) = -θx³ + x + κ(mean(μ) - x)`. One-sided Lipschitz only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DoubleWell {
    pub theta: f64,
    pub kappa: f64,
    pub sigma: f64,
}

impl Coefficients for DoubleWell {
    fn dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn drift(&self, _t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let m = mu.mean()[0];
        let x = x[0];
        out[0] = -self.theta * x * x * x + x + self.kappa * (m - x);
    }

    fn diffusion(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = self.sigma;
    }

    fn drift_grad(&self, _t: f64, x: &[f64], _mu: &EmpiricalMeasure, out: &mut [f64]) {
        out[0] = -3.0 * self.theta * x[0] * x[0] + 1.0 - self.kappa;
    }

    fn diffusion_grad(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, _v: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }

    fn lions_drift(&self, _t: f64, _x: &[f64], _mu: &EmpiricalMeasure, _y: &[f64], out: &mut [f64]) {
        out[0] = self.kappa;
    }

    fn lions_diffusion(
        &self,
        _t: f64,
        _x: &[f64],
        _mu: &EmpiricalMeasure,
        _y: &[f64],
        _v: &[f64],
        out: &mut [f64],
    ) {
        out[0] = 0.0;
    }

    fn constant_diffusion(&self) -> bool {
        true
    }

    fn drift_batch(&self, _t: f64, xs: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) {
        let m = mu.cached_stat("mean", EmpiricalMeasure::mean)[0];
        for (x, o) in xs.iter().zip(out.iter_mut()) {
            *o = -self.theta * x * x * x + x + self.kappa * (m - x);
        }
    }

    fn lions_drift_action(
        &self,
        _t: f64,
        xs: &[f64],
        _mu: &EmpiricalMeasure,
        ys: &[f64],
        vs: &[f64],
        out: &mut [f64],
    ) {
        let vbar = self.kappa * vs.iter().sum::<f64>() / ys.len() as f64;
        out.iter_mut().take(xs.len()).for_each(|o| *o = vbar);
    }

    fn diffusion_grad_batch(&self, _t: f64, _xs: &[f64], _mu: &EmpiricalMeasure, _vs: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }

    fn lions_diffusion_action(
        &self,
        _t: f64,
        _xs: &[f64],
        _mu: &EmpiricalMeasure,
        _ys: &[f64],
        _vs: &[f64],
        out: &mut [f64],
    ) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
}

fn scaled_identity(s: f64, d: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for i in 0..d {
        out[i * d + i] = s;
    }
}

/// Mean-field OU model; see [`MeanFieldOu`].
pub fn make_mf_ou(a_coef: f64, b_coef: f64, sigma_coef: f64, d: usize) -> Result<ModelSpec> {
    if !(sigma_coef > 0.0) {
        return Err(Error::param(format!("mf_ou needs sigma > 0, got {sigma_coef}")));
    }
    if d == 0 {
        return Err(Error::dim("mf_ou needs d >= 1"));
    }
    let coeffs = MeanFieldOu {
        a: a_coef,
        b: b_coef,
        sigma: sigma_coef,
        d,
    };
    ModelSpec::new(
        BuiltinModel::MfOu.as_str(),
        Arc::new(coeffs),
        Admissibility::lipschitz_default(2.0 * a_coef.abs() + b_coef.abs()),
        true,
    )
}

/// Noisy Kuramoto model; see [`Kuramoto`].
pub fn make_kuramoto(coupling: f64, noise: f64) -> Result<ModelSpec> {
    if !(noise > 0.0) {
        return Err(Error::param(format!("kuramoto needs sigma > 0, got {noise}")));
    }
    ModelSpec::new(
        BuiltinModel::Kuramoto.as_str(),
        Arc::new(Kuramoto {
            kappa: coupling,
            sigma: noise,
        }),
        Admissibility::lipschitz_default(3.0 * coupling.abs()),
        true,
    )
}

/// Double-well model; see [`DoubleWell`]. Not globally Lipschitz, so it is
/// flagged for exploratory runs only.
pub fn make_double_well(theta: f64, coupling: f64, noise: f64) -> Result<ModelSpec> {
    if !(theta > 0.0) {
        return Err(Error::param(format!("double_well needs theta > 0, got {theta}")));
    }
    if !(noise > 0.0) {
        return Err(Error::param(format!("double_well needs sigma > 0, got {noise}")));
    }
    let admissibility = Admissibility {
        // One-sided constant of x - θx³ - κx: sup of 2(1 - κ - 3θx²)⁺ plus the
        // mean-coupling contribution.
        lipschitz: 2.0 * (1.0 - coupling).max(0.0) + 2.0 * coupling.abs(),
        globally_lipschitz: false,
        ..Admissibility::lipschitz_default(0.0)
    };
    ModelSpec::new(
        BuiltinModel::DoubleWell.as_str(),
        Arc::new(DoubleWell {
            theta,
            kappa: coupling,
            sigma: noise,
        }),
        admissibility,
        true,
    )
}

/// Finite-difference check of the declared Lions kernel `D^L b(x, μ)(y)`.
///
/// `y` must be an atom of `μ`. All atoms at `y` are pushed along each
/// coordinate direction by `±h` and the drift is central-differenced; the
/// result divided by the mass at `y` approximates column `c` of
/// `D^L b(x, μ)(y)`. Returns the largest absolute entry error.
pub fn check_lions_kernel(
    model: &ModelSpec,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    y: &[f64],
    h: f64,
) -> Result<f64> {
    let d = model.dim();
    if !(h > 0.0) {
        return Err(Error::param(format!("finite-difference step must be > 0, got {h}")));
    }
    if x.len() != d || y.len() != d || mu.dim() != d {
        return Err(Error::dim("x, y and μ must match the model dimension"));
    }
    let atoms: Vec<usize> = (0..mu.len())
        .filter(|&j| measures::distance(mu.point(j), y) <= 1e-12 * (1.0 + measures::norm(y)))
        .collect();
    if atoms.is_empty() {
        return Err(Error::param(
            "y must be a support point of μ (the intrinsic derivative of an empirical measure lives on its atoms)",
        ));
    }
    let mass = atoms.len() as f64 / mu.len() as f64;

    let mut declared = vec![0.0; d * d];
    model.lions_drift(t, x, mu, y, &mut declared);

    let mut plus = vec![0.0; d];
    let mut minus = vec![0.0; d];
    let mut worst = 0.0f64;
    for c in 0..d {
        let shifted = |sign: f64| {
            let mut pts = mu.as_flat().to_vec();
            for &j in &atoms {
                pts[j * d + c] += sign * h;
            }
            EmpiricalMeasure::new(pts, d)
        };
        model.drift(t, x, &shifted(1.0)?, &mut plus);
        model.drift(t, x, &shifted(-1.0)?, &mut minus);
        for r in 0..d {
            let fd = (plus[r] - minus[r]) / (2.0 * h * mass);
            worst = worst.max((fd - declared[r * d + c]).abs());
        }
    }
    Ok(worst)
}

/// Largest absolute error between `drift_grad` and a central difference of
/// the drift in `x`.
pub fn check_drift_gradient(model: &ModelSpec, t: f64, x: &[f64], mu: &EmpiricalMeasure, h: f64) -> Result<f64> {
    let d = model.dim();
    if !(h > 0.0) {
        return Err(Error::param(format!("finite-difference step must be > 0, got {h}")));
    }
    if x.len() != d || mu.dim() != d {
        return Err(Error::dim("x and μ must match the model dimension"));
    }
    let mut declared = vec![0.0; d * d];
    model.drift_grad(t, x, mu, &mut declared);
    let mut plus = vec![0.0; d];
    let mut minus = vec![0.0; d];
    let mut worst = 0.0f64;
    for c in 0..d {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[c] += h;
        xm[c] -= h;
        model.drift(t, &xp, mu, &mut plus);
        model.drift(t, &xm, mu, &mut minus);
        for r in 0..d {
            let fd = (plus[r] - minus[r]) / (2.0 * h);
            worst = worst.max((fd - declared[r * d + c]).abs());
        }
    }
    Ok(worst)
}

/// Evaluates both sides of the one-sided monotonicity bound
/// `2<x-y, b(x,μ)-b(y,ν)>⁺ + ‖σ(x,μ)-σ(y,ν)‖² ≤ K(|x-y|² + W_k(μ,ν)²)`.
/// `w_k` is supplied by the caller. Returns `(lhs, rhs)`.
pub fn one_sided_bound_sides(
    model: &ModelSpec,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    y: &[f64],
    nu: &EmpiricalMeasure,
    w_k: f64,
) -> (f64, f64) {
    let (d, m) = (model.dim(), model.noise_dim());
    let mut bx = vec![0.0; d];
    let mut by = vec![0.0; d];
    model.drift(t, x, mu, &mut bx);
    model.drift(t, y, nu, &mut by);
    let mut sx = vec![0.0; d * m];
    let mut sy = vec![0.0; d * m];
    model.diffusion(t, x, mu, &mut sx);
    model.diffusion(t, y, nu, &mut sy);
    let inner: f64 = (0..d).map(|i| (x[i] - y[i]) * (bx[i] - by[i])).sum();
    let hs: f64 = sx.iter().zip(&sy).map(|(a, b)| (a - b) * (a - b)).sum();
    let lhs = 2.0 * inner.max(0.0) + hs;
    let gap2: f64 = (0..d).map(|i| (x[i] - y[i]).powi(2)).sum();
    (lhs, model.admissibility().lipschitz * (gap2 + w_k * w_k))
}
