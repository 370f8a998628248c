//! Ladder experiments: run every `(N, replication)` pair, reduce the
//! tracked gaps to moments, fit rates and compare with the theory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::bismut::{convergence_rows, ConvergenceRow};
use crate::coupled::{Components, CoupledEngine, CoupledSpec, ReplicationSummary};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::fit::{fit_rate, FitPoint, RateFit};
use crate::harness::theory::{epsilon_rate, theoretical_exponent};
use crate::measures::mean_and_std_error;

/// The tracked quantities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    /// `E sup_t |X^{1,N}_t - X^1_t|^k`.
    PosGap,
    /// `sup_t E W_k(μ̂ᴺ_t, μ_t)^k`.
    WassGap,
    /// `E sup_t |v^{1,N}_t - v^1_t|^k`.
    DirGap,
    /// `E sup_t |w^{1,(1)}_t - w^1_t|^k`.
    MallGap,
    /// `E sup_t |Σ_{l≠1} w^{1,(l)}_t - w^{ĥ,1}_t|^k`.
    HhatGap,
    /// `|D^I(P^N f) - D^I(P f)|`.
    BismutGap,
    /// `E |ζ^{1,N}_{T/2}|^k`.
    ZetaDiag,
}

impl Quantity {
    pub const ALL: [Quantity; 7] = [
        Quantity::PosGap,
        Quantity::WassGap,
        Quantity::DirGap,
        Quantity::MallGap,
        Quantity::HhatGap,
        Quantity::BismutGap,
        Quantity::ZetaDiag,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Quantity::PosGap => "pos_gap",
            Quantity::WassGap => "wass_gap",
            Quantity::DirGap => "dir_gap",
            Quantity::MallGap => "mall_gap",
            Quantity::HhatGap => "hhat_gap",
            Quantity::BismutGap => "bismut_gap",
            Quantity::ZetaDiag => "zeta_diag",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// The fitted slope is not significantly slower than the theoretical one.
    ConsistentWithBound,
    /// The 95% interval lies above the theoretical slope.
    SlowerThanBound,
    /// Reported without a claim.
    Informational,
    /// Too few positive points to fit.
    NoFit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub n: usize,
    pub moment: f64,
    pub std_error: f64,
    /// Theoretical bound shape at this `N`, up to a constant.
    pub theory_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub quantity: Quantity,
    pub k: f64,
    pub points: Vec<RatePoint>,
    pub fit: Option<RateFit>,
    /// Exponent on `ε(N)` in the theoretical bound.
    pub theory_exponent: f64,
    /// Log-log slope of the theoretical bound over the ladder.
    pub theory_slope: f64,
    /// Further reference slopes shown next to the fit.
    pub reference_slopes: Vec<f64>,
    pub verdict: Verdict,
}

impl RateReport {
    fn new(
        quantity: Quantity,
        k: f64,
        points: Vec<RatePoint>,
        theory_exponent: f64,
        reference_slopes: Vec<f64>,
        informational: bool,
    ) -> Self {
        let fit_points: Vec<FitPoint> = points
            .iter()
            .map(|p| FitPoint {
                n: p.n,
                moment: p.moment,
                std_error: p.std_error,
            })
            .collect();
        let fit = fit_rate(&fit_points).ok();
        let theory_slope = loglog_slope(&points);
        let verdict = match (&fit, informational) {
            (_, true) => Verdict::Informational,
            (None, false) => Verdict::NoFit,
            (Some(f), false) if f.ci_low <= theory_slope => Verdict::ConsistentWithBound,
            (Some(_), false) => Verdict::SlowerThanBound,
        };
        Self {
            quantity,
            k,
            points,
            fit,
            theory_exponent,
            theory_slope,
            reference_slopes,
            verdict,
        }
    }

    pub fn slope(&self) -> Option<f64> {
        self.fit.as_ref().map(|f| f.slope)
    }
}

/// Unweighted least-squares slope of `log theory_rate` against `log N`.
fn loglog_slope(points: &[RatePoint]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| (p.n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.theory_rate.ln()).collect();
    let n = xs.len() as f64;
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xm).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    if sxx > 0.0 {
        sxy / sxx
    } else {
        f64::NAN
    }
}

/// Output of [`run_experiment`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    /// One report per tracked quantity, in [`Quantity::ALL`] order.
    pub reports: Vec<RateReport>,
    /// The fluctuation diagnostic at the remaining configured orders.
    pub zeta_orders: Vec<RateReport>,
    /// Estimates behind the Bismut gap.
    pub bismut: Vec<ConvergenceRow>,
}

impl ExperimentReport {
    pub fn report(&self, q: Quantity) -> &RateReport {
        self.reports.iter().find(|r| r.quantity == q).expect("all quantities are reported")
    }

    /// `rates.csv`: one row per report and ladder point.
    pub fn write_rates_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["quantity", "N", "k", "moment", "std_error", "theory_rate"])?;
        for r in self.reports.iter().chain(&self.zeta_orders) {
            for p in &r.points {
                w.write_record([
                    r.quantity.as_str().to_string(),
                    p.n.to_string(),
                    r.k.to_string(),
                    p.moment.to_string(),
                    p.std_error.to_string(),
                    p.theory_rate.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `rates.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.write_rates_csv(BufWriter::new(File::create(dir.join("rates.csv"))?))?;
        let mut json = BufWriter::new(File::create(dir.join("report.json"))?);
        serde_json::to_writer_pretty(&mut json, self)?;
        json.flush()?;
        Ok(())
    }
}

fn jobs(ladder: &[usize], replications: usize) -> Vec<(usize, usize)> {
    ladder
        .iter()
        .flat_map(|&n| (0..replications).map(move |r| (n, r)))
        .collect()
}

/// Runs `jobs` in batches, appending each finished batch to
/// `replications.jsonl` under `dir` when given, so a failure keeps the
/// completed batches.
fn run_logged(
    spec: &CoupledSpec,
    jobs: &[(usize, usize)],
    batch: usize,
    dir: Option<&Path>,
) -> Result<Vec<ReplicationSummary>> {
    let mut log = match dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            Some(BufWriter::new(File::create(d.join("replications.jsonl"))?))
        }
        None => None,
    };
    let mut out = Vec::with_capacity(jobs.len());
    for (b, chunk) in jobs.chunks(batch.max(1)).enumerate() {
        info!("batch {b}: {} replications", chunk.len());
        let mut engine = CoupledEngine::new(spec.clone(), chunk)?;
        engine.run()?;
        let summaries = engine.summaries();
        if let Some(w) = log.as_mut() {
            for s in &summaries {
                serde_json::to_writer(&mut *w, s)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        out.extend(summaries);
    }
    Ok(out)
}

fn moment_of(values: &[f64]) -> (f64, f64) {
    mean_and_std_error(values)
}

fn group(summaries: &[ReplicationSummary], n: usize) -> Vec<&ReplicationSummary> {
    summaries.iter().filter(|s| s.n_particles == n).collect()
}

/// `sup_t` of the replication mean of `W_k^k`, with the standard error at
/// the maximizing node.
fn wasserstein_moment(group: &[&ReplicationSummary]) -> (f64, f64) {
    let nodes = group.iter().map(|s| s.wasserstein.len()).min().unwrap_or(0);
    let mut best = (f64::NAN, f64::NAN);
    for node in 0..nodes {
        let values: Vec<f64> = group.iter().map(|s| s.wasserstein[node]).collect();
        let (m, se) = mean_and_std_error(&values);
        if best.0.is_nan() || m > best.0 {
            best = (m, se);
        }
    }
    best
}

fn theory_points(
    ladder: &[usize],
    moments: impl Fn(usize) -> (f64, f64),
    theory: impl Fn(usize) -> Result<f64>,
) -> Result<Vec<RatePoint>> {
    ladder
        .iter()
        .map(|&n| {
            let (moment, std_error) = moments(n);
            Ok(RatePoint {
                n,
                moment,
                std_error,
                theory_rate: theory(n)?,
            })
        })
        .collect()
}

/// Runs the configured ladder and reduces it to rate reports. When `dir`
/// is given the raw per-replication summaries are streamed to it.
pub fn run_experiment_in(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let spec = cfg.coupled_spec()?;
    let ladder = &cfg.ladder.n;
    let reps = cfg.ladder.replications;
    let k = cfg.ladder.k;
    let q = cfg.ladder.q;
    let d = spec.model.dim();
    let adm = *spec.model.admissibility();
    let summaries = run_logged(&spec, &jobs(ladder, reps), cfg.ladder.batch, dir)?;

    let eps = |n: usize| epsilon_rate(n as f64, k, d, q);
    let flow_exp = theoretical_exponent(adm.holder_alpha, q, k, adm.growth_m)?;
    let scalar = |n: usize, f: &dyn Fn(&ReplicationSummary) -> f64| {
        let values: Vec<f64> = group(&summaries, n).into_iter().map(f).collect();
        moment_of(&values)
    };
    let simple = |quantity: Quantity, exponent: f64, f: &dyn Fn(&ReplicationSummary) -> f64| -> Result<RateReport> {
        let points = theory_points(ladder, |n| scalar(n, f), |n| Ok(eps(n)?.powf(exponent)))?;
        Ok(RateReport::new(quantity, k, points, exponent, Vec::new(), false))
    };

    let mut reports = vec![simple(Quantity::PosGap, 1.0, &|s| s.pos_gap)?];
    if spec.components.wasserstein {
        let points = theory_points(ladder, |n| wasserstein_moment(&group(&summaries, n)), eps)?;
        reports.push(RateReport::new(Quantity::WassGap, k, points, 1.0, Vec::new(), false));
    } else {
        let points = theory_points(ladder, |_| (f64::NAN, f64::NAN), eps)?;
        reports.push(RateReport::new(Quantity::WassGap, k, points, 1.0, Vec::new(), true));
    }
    reports.push(simple(Quantity::DirGap, flow_exp, &|s| s.dir_gap)?);
    reports.push(simple(Quantity::MallGap, flow_exp, &|s| s.mall_gap)?);
    reports.push(simple(Quantity::HhatGap, flow_exp, &|s| s.hhat_gap)?);

    let bismut = convergence_rows(&summaries, ladder)?;
    let points = theory_points(
        ladder,
        |n| {
            let row = bismut.iter().find(|r| r.n_particles == n).expect("row per ladder point");
            (row.gap, row.gap_std_error)
        },
        |n| Ok(eps(n)?.powf(flow_exp)),
    )?;
    reports.push(RateReport::new(Quantity::BismutGap, 1.0, points, flow_exp, Vec::new(), false));

    let mut zeta_reports: Vec<RateReport> = cfg
        .ladder
        .zeta_orders
        .iter()
        .enumerate()
        .map(|(j, &order)| zeta_report(&summaries, ladder, j, order))
        .collect::<Result<_>>()?;
    if zeta_reports.is_empty() {
        return Err(Error::Config("ladder.zeta_orders is empty".into()));
    }
    reports.push(zeta_reports.remove(0));

    Ok(ExperimentReport {
        config: cfg.clone(),
        reports,
        zeta_orders: zeta_reports,
        bismut,
    })
}

fn zeta_report(summaries: &[ReplicationSummary], ladder: &[usize], index: usize, order: f64) -> Result<RateReport> {
    let points = theory_points(
        ladder,
        |n| {
            let values: Vec<f64> = group(summaries, n).iter().map(|s| s.zeta[index]).collect();
            moment_of(&values)
        },
        |n| Ok((n as f64).powf(-order)),
    )?;
    Ok(RateReport::new(Quantity::ZetaDiag, order, points, 1.0, vec![-order, -order / 2.0], true))
}

/// [`run_experiment_in`] writing everything to the configured output
/// directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let dir = cfg.output.dir.clone();
    let report = run_experiment_in(cfg, Some(&dir))?;
    report.write(&dir)?;
    Ok(report)
}

/// The fluctuation `ζ^{i,N}_{T/2}` of the empirical interaction term of the
/// limit directional flow alone, at order `k`.
pub fn zeta_diagnostic(spec: &CoupledSpec, ladder: &[usize], replications: usize, k: f64) -> Result<RateReport> {
    if replications < 2 {
        return Err(Error::param("need at least 2 replications"));
    }
    let mut s = spec.clone();
    s.components = Components {
        limit: true,
        directional: true,
        zeta_diagnostic: true,
        ..Components::positions_only()
    };
    s.zeta_orders = vec![k];
    let summaries = crate::coupled::run_replications(&s, &jobs(ladder, replications), 512)?;
    zeta_report(&summaries, ladder, 0, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke(b: f64) -> ExperimentConfig {
        ExperimentConfig::from_toml(&format!(
            r#"
[model]
id = "mf_ou"
a = -1.0
b = {b}
sigma = 0.3

[grid]
horizon = 1.0
n_steps = 20

[ladder]
n = [64, 128]
replications = 2
reference_size = 1024
aux_size = 256
seed = 3
"#
        ))
        .unwrap()
    }

    #[test]
    fn smoke_ladder_emits_seven_reports() {
        let report = run_experiment_in(&smoke(0.5), None).unwrap();
        assert_eq!(report.reports.len(), 7);
        let ids: Vec<Quantity> = report.reports.iter().map(|r| r.quantity).collect();
        assert_eq!(ids, Quantity::ALL.to_vec());
        for r in &report.reports {
            assert_eq!(r.points.len(), 2);
            assert_eq!(r.verdict == Verdict::NoFit, r.fit.is_none() && r.quantity != Quantity::ZetaDiag);
        }
        assert_eq!(report.zeta_orders.len(), 1);
        let mut csv = Vec::new();
        report.write_rates_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("quantity,N,k,moment,std_error,theory_rate\n"));
        assert_eq!(text.lines().count(), 1 + 8 * 2);
    }

    #[test]
    fn decoupled_model_has_zero_gaps() {
        let report = run_experiment_in(&smoke(0.0), None).unwrap();
        for q in [Quantity::PosGap, Quantity::DirGap, Quantity::MallGap, Quantity::HhatGap] {
            assert!(report.report(q).points.iter().all(|p| p.moment == 0.0), "{q:?}");
        }
    }

    #[test]
    fn theory_slope_of_sharp_rate() {
        let report = run_experiment_in(&smoke(0.5), None).unwrap();
        let pos = report.report(Quantity::PosGap);
        assert!((pos.theory_slope + 0.5).abs() < 1e-12);
        let z = report.report(Quantity::ZetaDiag);
        assert_eq!(z.reference_slopes, vec![-2.0, -1.0]);
        assert_eq!(z.verdict, Verdict::Informational);
    }
}
