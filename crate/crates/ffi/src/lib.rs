//! C ABI for chaosflow.
//!
//! Objects are opaque handles created by `cf_*_new` style functions and
//! released with the matching `cf_*_free`. Every fallible call returns a
//! [`CfStatus`]; on failure the message is kept per thread and can be read
//! with [`cf_last_error_message`]. Panics are caught at the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use chaosflow::bismut::TestFunction;
use chaosflow::coupled::{Components, CoupledEngine, CoupledSpec};
use chaosflow::derivative_sim::{DirectionSpec, WeightFunction};
use chaosflow::harness::{epsilon_rate, run_experiment_in, theoretical_exponent, ExperimentConfig};
use chaosflow::models::{make_double_well, make_kuramoto, make_mf_ou, ModelSpec};
use chaosflow::noise::TimeGrid;
use chaosflow::particle_sim::InitialLaw;
use chaosflow::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    UnsupportedModel = 4,
    UnsupportedParameters = 5,
    Divergence = 6,
    Config = 7,
    Fit = 8,
    Io = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

impl From<&Error> for CfStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension(_) => CfStatus::Dimension,
            Error::Parameter(_) => CfStatus::InvalidArgument,
            Error::UnsupportedModel(_) => CfStatus::UnsupportedModel,
            Error::UnsupportedParameters(_) => CfStatus::UnsupportedParameters,
            Error::Divergence { .. } => CfStatus::Divergence,
            Error::Config(_) => CfStatus::Config,
            Error::Fit(_) => CfStatus::Fit,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => CfStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(status: CfStatus, msg: impl Into<String>) -> CfStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), CfStatus>) -> CfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            CfStatus::Ok
        }
        Ok(Err(status)) => status,
        Err(_) => fail(CfStatus::Panic, "panic inside chaosflow"),
    }
}

fn check<T>(r: chaosflow::Result<T>) -> Result<T, CfStatus> {
    r.map_err(|e| fail(CfStatus::from(&e), e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), CfStatus> {
    if p.is_null() {
        Err(fail(CfStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn c_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, CfStatus> {
    non_null(s, what)?;
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(CfStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Copies the last error message of this thread into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cf_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// A model: coefficients and metadata.
pub struct CfModel(ModelSpec);

/// A coupled simulation of several replications.
pub struct CfEngine(CoupledEngine);

fn new_model(out: *mut *mut CfModel, build: impl FnOnce() -> chaosflow::Result<ModelSpec>) -> CfStatus {
    guard(|| {
        non_null(out, "out")?;
        let model = check(build())?;
        unsafe { *out = Box::into_raw(Box::new(CfModel(model))) };
        Ok(())
    })
}

/// Mean-field OU model `b(x, μ) = a x + b mean(μ)`, `σ = sigma I`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_model_mf_ou(a: f64, b: f64, sigma: f64, d: usize, out: *mut *mut CfModel) -> CfStatus {
    new_model(out, || make_mf_ou(a, b, sigma, d))
}

/// Kuramoto model `b(x, μ) = κ ∫ sin(y - x) μ(dy)`, `σ = sigma`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_model_kuramoto(coupling: f64, sigma: f64, out: *mut *mut CfModel) -> CfStatus {
    new_model(out, || make_kuramoto(coupling, sigma))
}

/// Double-well model `b(x, μ) = x - θx³ + κ(mean(μ) - x)`, `σ = sigma`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_model_double_well(theta: f64, coupling: f64, sigma: f64, out: *mut *mut CfModel) -> CfStatus {
    new_model(out, || make_double_well(theta, coupling, sigma))
}

/// State dimension of the model, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cf_model_dim(model: *const CfModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.dim())
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cf_model_free(model: *mut CfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Sampling rate `ε(N)`; pass `q = INFINITY` for a bounded initial law.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_epsilon_rate(n: f64, k: f64, d: usize, q: f64, out: *mut f64) -> CfStatus {
    guard(|| {
        non_null(out, "out")?;
        let q = (!q.is_infinite()).then_some(q);
        *out = check(epsilon_rate(n, k, d, q))?;
        Ok(())
    })
}

/// Exponent `α min((q-k)/(m+αq), 1)`; pass `q = INFINITY` for the limit.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_theoretical_exponent(alpha: f64, q: f64, k: f64, m: f64, out: *mut f64) -> CfStatus {
    guard(|| {
        non_null(out, "out")?;
        let q = (!q.is_infinite()).then_some(q);
        *out = check(theoretical_exponent(alpha, q, k, m))?;
        Ok(())
    })
}

/// Settings of [`cf_engine_new`]. The initial law is uniform on
/// `[init_low, init_high]`, the direction is `φ(x) = x`, the Malliavin
/// weight is linear on `[0, horizon]`, and every component is enabled.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CfEngineOptions {
    pub horizon: f64,
    pub n_steps: usize,
    pub n_particles: usize,
    pub replications: usize,
    pub reference_size: usize,
    pub aux_size: usize,
    pub seed: u64,
    /// Moment order of the tracked gaps.
    pub k: f64,
    pub init_low: f64,
    pub init_high: f64,
}

/// Fills `opts` with a small default setup.
///
/// # Safety
/// `opts` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cf_engine_options_default(opts: *mut CfEngineOptions) -> CfStatus {
    guard(|| {
        non_null(opts, "opts")?;
        *opts = CfEngineOptions {
            horizon: 1.0,
            n_steps: 100,
            n_particles: 64,
            replications: 4,
            reference_size: 1024,
            aux_size: 1024,
            seed: 0,
            k: 2.0,
            init_low: -1.0,
            init_high: 1.0,
        };
        Ok(())
    })
}

/// Creates an engine for replications `0..replications` of the
/// `n_particles` system. The model handle may be freed afterwards.
///
/// # Safety
/// `model` and `opts` must be live, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn cf_engine_new(
    model: *const CfModel,
    opts: *const CfEngineOptions,
    out: *mut *mut CfEngine,
) -> CfStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(opts, "opts")?;
        non_null(out, "out")?;
        let (model, o) = (&(*model).0, *opts);
        let spec = CoupledSpec {
            model: model.clone(),
            base_grid: check(TimeGrid::new(o.horizon, o.n_steps))?,
            refinements: 0,
            init: InitialLaw::Uniform {
                low: o.init_low,
                high: o.init_high,
            },
            direction: DirectionSpec::Linear { scale: 1.0 },
            weight: check(WeightFunction::linear(0.0, o.horizon))?,
            test_function: TestFunction::Tanh,
            k: o.k,
            reference_size: o.reference_size,
            aux_size: o.aux_size,
            seed: o.seed,
            tag: 0,
            initial_shift: 0.0,
            components: Components {
                wasserstein: model.dim() == 1 || o.n_particles <= chaosflow::measures::MAX_ASSIGNMENT_SIZE,
                ..Components::all()
            },
            zeta_orders: vec![2.0, 4.0],
        };
        let jobs: Vec<(usize, usize)> = (0..o.replications).map(|r| (o.n_particles, r)).collect();
        let engine = check(CoupledEngine::new(spec, &jobs))?;
        *out = Box::into_raw(Box::new(CfEngine(engine)));
        Ok(())
    })
}

/// Advances every replication one grid step.
///
/// # Safety
/// `engine` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cf_engine_step(engine: *mut CfEngine) -> CfStatus {
    guard(|| {
        non_null(engine, "engine")?;
        check((*engine).0.step())
    })
}

/// Runs to the final node.
///
/// # Safety
/// `engine` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cf_engine_run(engine: *mut CfEngine) -> CfStatus {
    guard(|| {
        non_null(engine, "engine")?;
        check((*engine).0.run())
    })
}

/// Current node index, 0 for a null handle.
///
/// # Safety
/// `engine` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cf_engine_node(engine: *const CfEngine) -> usize {
    engine.as_ref().map_or(0, |e| e.0.node())
}

/// Copies the particle positions of `replication` (`N x d`, row major)
/// into `buf`. `written` receives the required length even when the buffer
/// is too small.
///
/// # Safety
/// `engine` must be live, `buf` must hold `len` doubles, `written` valid.
#[no_mangle]
pub unsafe extern "C" fn cf_engine_positions(
    engine: *const CfEngine,
    replication: usize,
    buf: *mut f64,
    len: usize,
    written: *mut usize,
) -> CfStatus {
    guard(|| {
        non_null(engine, "engine")?;
        non_null(written, "written")?;
        let e = &(*engine).0;
        if replication >= e.n_replications() {
            return Err(fail(CfStatus::InvalidArgument, format!("replication {replication} out of range")));
        }
        let xs = e.particle_positions(replication);
        *written = xs.len();
        if len < xs.len() {
            return Err(fail(CfStatus::BufferTooSmall, format!("need {} doubles", xs.len())));
        }
        non_null(buf, "buf")?;
        ptr::copy_nonoverlapping(xs.as_ptr(), buf, xs.len());
        Ok(())
    })
}

/// Running statistics of one replication.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct CfSummary {
    pub n_particles: usize,
    pub pos_gap: f64,
    pub dir_gap: f64,
    pub mall_gap: f64,
    pub hhat_gap: f64,
    /// Largest `W_k^k` over the nodes seen so far.
    pub wasserstein_max: f64,
    pub identity_particle: f64,
    pub identity_limit: f64,
}

/// # Safety
/// `engine` must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn cf_engine_summary(
    engine: *const CfEngine,
    replication: usize,
    out: *mut CfSummary,
) -> CfStatus {
    guard(|| {
        non_null(engine, "engine")?;
        non_null(out, "out")?;
        let e = &(*engine).0;
        if replication >= e.n_replications() {
            return Err(fail(CfStatus::InvalidArgument, format!("replication {replication} out of range")));
        }
        let s = &e.summaries()[replication];
        *out = CfSummary {
            n_particles: s.n_particles,
            pos_gap: s.pos_gap,
            dir_gap: s.dir_gap,
            mall_gap: s.mall_gap,
            hhat_gap: s.hhat_gap,
            wasserstein_max: s.wasserstein.iter().copied().fold(0.0, f64::max),
            identity_particle: s.identity_particle.max,
            identity_limit: s.identity_limit.max,
        };
        Ok(())
    })
}

/// # Safety
/// `engine` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cf_engine_free(engine: *mut CfEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Runs the ladder experiment described by a TOML configuration and writes
/// `rates.csv`, `report.json` and `replications.jsonl` to `out_dir`.
///
/// # Safety
/// Both arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn cf_run_experiment(config_toml: *const c_char, out_dir: *const c_char) -> CfStatus {
    guard(|| {
        let text = c_str(config_toml, "config_toml")?;
        let dir = Path::new(c_str(out_dir, "out_dir")?);
        let cfg = check(ExperimentConfig::from_toml(text))?;
        let report = check(run_experiment_in(&cfg, Some(dir)))?;
        check(report.write(dir))
    })
}
