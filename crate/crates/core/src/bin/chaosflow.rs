use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use chaosflow::bismut::{
    compare_convergence, estimate_bsmn_particle, estimate_pathwise, estimate_zeta_limit, finite_difference_intrinsic,
    ConvergenceTable, IntrinsicDerivEstimate, Target,
};
use chaosflow::coupled::CoupledEngine;
use chaosflow::harness::{
    epsilon_rate, run_experiment, theoretical_exponent, validate_model, ExperimentConfig, ExperimentReport,
};
use chaosflow::particle_sim::dump_cloud_csv;
use chaosflow::{Error, Result};

/// Propagation-of-chaos experiments for mean-field SDEs.
#[derive(Parser)]
#[command(name = "chaosflow", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// One replication; dumps particle, limit and flow paths as CSV.
    Simulate {
        /// Particle count (default: smallest ladder entry).
        #[arg(long)]
        n: Option<usize>,
        /// Replication index.
        #[arg(long, default_value_t = 0)]
        replication: usize,
    },
    /// Full ladder; writes rates.csv and report.json.
    Rates,
    /// Derivative estimators side by side, and the convergence table.
    Bismut {
        /// Skip the ladder comparison.
        #[arg(long)]
        no_ladder: bool,
    },
    /// Finite-difference and monotonicity self-checks of the model.
    Validate {
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
    /// Tables of ε(N) and the derivative-flow exponent.
    Theory {
        #[arg(long, default_value_t = 2.0)]
        k: f64,
        #[arg(long, default_value_t = 1)]
        d: usize,
        /// Moment order of the initial law; omit for bounded laws.
        #[arg(long)]
        q: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 0.0)]
        m: f64,
        /// Particle counts (default: 64 to 4096 by doubling).
        #[arg(long, value_delimiter = ',')]
        n: Vec<usize>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --config".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.ladder.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.flush()?;
    Ok(())
}

fn simulate(cfg: &ExperimentConfig, n: Option<usize>, replication: usize) -> Result<()> {
    let n = n.unwrap_or(cfg.ladder.n[0]);
    let mut spec = cfg.coupled_spec()?;
    spec.reference_size = spec.reference_size.max(n);
    let d = spec.model.dim();
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir)?;
    let mut engine = CoupledEngine::new(spec, &[(n, replication)])?;
    let open = |name: &str| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(dir.join(name))?)) };
    let mut particles = open("particles.csv")?;
    let mut limits = open("limits.csv")?;
    let mut flows = open("flows.csv")?;
    let mut limit_flows = open("limit_flows.csv")?;
    loop {
        let t = engine.grid().node(engine.node());
        let header = engine.node() == 0;
        dump_cloud_csv(&mut particles, t, engine.particle_positions(0), d, header)?;
        dump_cloud_csv(&mut flows, t, engine.particle_flows(0), d, header)?;
        if let Some(x) = engine.limit_positions(0) {
            dump_cloud_csv(&mut limits, t, x, d, header)?;
        }
        if let Some(v) = engine.limit_flows(0) {
            dump_cloud_csv(&mut limit_flows, t, v, d, header)?;
        }
        if engine.is_finished() {
            break;
        }
        engine.step()?;
    }
    for w in [&mut particles, &mut limits, &mut flows, &mut limit_flows] {
        w.flush()?;
    }
    let summary = &engine.summaries()[0];
    write_json(&dir.join("summary.json"), summary)?;
    println!("N = {n}, replication {replication}: paths written to {}", dir.display());
    println!("pos_gap {:.4e}  dir_gap {:.4e}  mall_gap {:.4e}  hhat_gap {:.4e}", summary.pos_gap, summary.dir_gap, summary.mall_gap, summary.hhat_gap);
    Ok(())
}

fn print_rates(report: &ExperimentReport) {
    println!("{:<11} {:>4} {:>9} {:>21} {:>12}  verdict", "quantity", "k", "slope", "95% CI", "theory");
    for r in report.reports.iter().chain(&report.zeta_orders) {
        let (slope, ci) = match &r.fit {
            Some(f) => (format!("{:.3}", f.slope), format!("[{:.3}, {:.3}]", f.ci_low, f.ci_high)),
            None => ("-".into(), "-".into()),
        };
        println!(
            "{:<11} {:>4} {:>9} {:>21} {:>12.3}  {:?}",
            r.quantity.as_str(),
            r.k,
            slope,
            ci,
            r.theory_slope,
            r.verdict
        );
    }
}

#[derive(Serialize)]
struct BismutOutput {
    n: usize,
    replications: usize,
    bsmn_particle: IntrinsicDerivEstimate,
    finite_difference_particle: IntrinsicDerivEstimate,
    pathwise_particle: IntrinsicDerivEstimate,
    zeta_limit: IntrinsicDerivEstimate,
    finite_difference_limit: IntrinsicDerivEstimate,
    convergence: Option<ConvergenceTable>,
}

fn bismut(cfg: &ExperimentConfig, ladder: bool) -> Result<()> {
    let spec = cfg.coupled_spec()?;
    let (n, reps, eps) = (cfg.bismut.n, cfg.bismut.replications, cfg.bismut.epsilon);
    let mut spec_n = spec.clone();
    spec_n.reference_size = spec.reference_size.max(n);
    let out = BismutOutput {
        n,
        replications: reps,
        bsmn_particle: estimate_bsmn_particle(&spec_n, n, reps)?,
        finite_difference_particle: finite_difference_intrinsic(&spec_n, Target::Particle, eps, n, reps)?,
        pathwise_particle: estimate_pathwise(&spec_n, Target::Particle, n, reps)?,
        zeta_limit: estimate_zeta_limit(&spec_n, n, reps)?,
        finite_difference_limit: finite_difference_intrinsic(&spec_n, Target::Limit, eps, n, reps)?,
        convergence: if ladder {
            Some(compare_convergence(&spec, &cfg.ladder.n, cfg.ladder.replications)?)
        } else {
            None
        },
    };
    println!("N = {n}, {reps} replications, f = {}", cfg.bismut.test_function.id());
    for (label, e) in [
        ("bsmn (particle)", &out.bsmn_particle),
        ("fd (particle)", &out.finite_difference_particle),
        ("pathwise (particle)", &out.pathwise_particle),
        ("zeta (limit)", &out.zeta_limit),
        ("fd (limit)", &out.finite_difference_limit),
    ] {
        println!("  {label:<20} {:>+.6} ± {:.6}", e.value, e.std_error);
    }
    if let Some(table) = &out.convergence {
        println!("{:>6} {:>12} {:>12} {:>12} {:>10}", "N", "bsmn", "zeta", "gap", "gap s.e.");
        for r in &table.rows {
            println!(
                "{:>6} {:>+12.5} {:>+12.5} {:>12.5} {:>10.5}",
                r.n_particles, r.bsmn.value, r.zeta.value, r.gap, r.gap_std_error
            );
        }
        if let Some(f) = &table.fit {
            println!("fitted slope {:.3} [{:.3}, {:.3}]", f.slope, f.ci_low, f.ci_high);
        }
    }
    fs::create_dir_all(&cfg.output.dir)?;
    write_json(&cfg.output.dir.join("bismut.json"), &out)
}

fn theory(k: f64, d: usize, q: Option<f64>, alpha: f64, m: f64, ns: &[usize]) -> Result<()> {
    let ns: Vec<usize> = if ns.is_empty() {
        (6..=12).map(|p| 1usize << p).collect()
    } else {
        ns.to_vec()
    };
    let exponent = theoretical_exponent(alpha, q, k, m)?;
    let q_label = q.map_or("inf".to_string(), |q| q.to_string());
    println!("k = {k}, d = {d}, q = {q_label}, alpha = {alpha}, m = {m}: exponent {exponent:.6}");
    println!("{:>8} {:>14} {:>14}", "N", "eps(N)", "eps(N)^exp");
    for n in ns {
        let e = epsilon_rate(n as f64, k, d, q)?;
        println!("{n:>8} {e:>14.6e} {:>14.6e}", e.powf(exponent));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(threads) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate { n, replication } => simulate(&load(&cli.common)?, n, replication)?,
        Command::Rates => {
            let cfg = load(&cli.common)?;
            info!("running ladder {:?}", cfg.ladder.n);
            let report = run_experiment(&cfg)?;
            print_rates(&report);
            println!("outputs in {}", cfg.output.dir.display());
        }
        Command::Bismut { no_ladder } => bismut(&load(&cli.common)?, !no_ladder)?,
        Command::Validate { samples } => {
            let cfg = load(&cli.common)?;
            let model = cfg.model.build()?;
            let seed = cfg.ladder.seed;
            let report = validate_model(&model, &cfg.ladder.initial, samples, 32, seed)?;
            println!("model {}: {samples} samples", model.id());
            println!("  drift gradient FD error   {:.3e}", report.gradient_error);
            println!("  Lions kernel FD error     {:.3e}", report.lions_error);
            println!("  one-sided bound excess    {:.3e} ({} violations)", report.one_sided_excess, report.one_sided_violations);
            if !model.admissibility().globally_lipschitz {
                println!("  note: not globally Lipschitz; rate theory does not cover this model");
            }
            println!("{}", if report.passed() { "ok" } else { "FAILED" });
            return Ok(report.passed());
        }
        Command::Theory { k, d, q, alpha, m, n } => theory(k, d, q, alpha, m, &n)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
