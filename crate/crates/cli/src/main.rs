mod config;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use cislunar_core::dynamics::SystemParams;
use cislunar_core::family::{self, ContinuationSettings, CorrectorSettings, FamilyCatalog, FamilyTag};
use cislunar_core::model::{self, FitSettings};
use cislunar_core::sim;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "cislunar", version, about = "Periodic orbit families, family surrogates and NMPC station-keeping in the Earth-Moon CR3BP")]
struct Cli {
    /// Base seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Mass parameter.
    #[arg(long, global = true)]
    mu: Option<f64>,
    /// Directory for output artifacts.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Scenario configuration (JSON) for the simulation subcommands.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log more (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Periodic orbit catalogs.
    #[command(subcommand)]
    Families(FamiliesCommand),
    /// Surrogate models.
    #[command(subcommand)]
    Model(ModelCommand),
    /// One closed-loop run: trajectory.csv, timing.csv and metrics.json.
    Simulate,
    /// Closed-loop runs over a grid of horizons: sweep.csv.
    Sweep(SweepArgs),
    /// Dispersed runs: montecarlo.csv, montecarlo_hist.csv and montecarlo.json.
    Montecarlo(MonteCarloArgs),
    /// Variable-chi, fixed-chi and fixed-orbit runs on one seed: compare.json.
    Compare,
}

#[derive(Subcommand, Debug)]
enum FamiliesCommand {
    Generate(GenerateArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Family tag such as `l1-lyapunov` or `l2-halo-south`.
    #[arg(long)]
    tag: FamilyTag,
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Pseudo-arclength step.
    #[arg(long, default_value_t = 5e-3)]
    step: f64,
    /// Output file; defaults to `<out-dir>/<tag>.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum ModelCommand {
    Fit(FitArgs),
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    catalog: PathBuf,
    /// Polynomial degree; defaults depend on the family kind.
    #[arg(long)]
    degree: Option<usize>,
    /// Number of chi slices.
    #[arg(long)]
    parts: Option<usize>,
    /// States sampled per member.
    #[arg(long)]
    samples: Option<usize>,
    /// Fraction of interior members withheld for validation.
    #[arg(long, default_value_t = 0.0)]
    holdout: f64,
    /// Output file; defaults to `<out-dir>/<tag>.model.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-sample training residuals to this CSV.
    #[arg(long)]
    residuals: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Prediction horizons, overriding the config.
    #[arg(long, value_delimiter = ',')]
    np: Vec<usize>,
    /// Control horizons, overriding the config.
    #[arg(long, value_delimiter = ',')]
    nc: Vec<usize>,
}

#[derive(Args, Debug)]
struct MonteCarloArgs {
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

/// Exit codes: 1 for usage and configuration errors, 2 for computational failures.
enum Failure {
    Usage(anyhow::Error),
    Compute(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

type Outcome = Result<bool, Failure>;

fn compute<T>(r: cislunar_core::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| Failure::Compute(e.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Compute(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Outcome {
    std::fs::create_dir_all(&cli.out_dir)
        .with_context(|| format!("creating {}", cli.out_dir.display()))?;
    match &cli.command {
        Command::Families(FamiliesCommand::Generate(a)) => generate(cli, a),
        Command::Model(ModelCommand::Fit(a)) => fit(cli, a),
        Command::Simulate => simulate(cli),
        Command::Sweep(a) => sweep(cli, a),
        Command::Montecarlo(a) => montecarlo(cli, a),
        Command::Compare => compare(cli),
    }
}

fn params(cli: &Cli) -> anyhow::Result<SystemParams> {
    Ok(match cli.mu {
        Some(mu) => SystemParams::new(mu)?,
        None => SystemParams::default(),
    })
}

fn writer(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn generate(cli: &Cli, a: &GenerateArgs) -> Outcome {
    let params = params(cli)?;
    if !(a.step > 0.0) || a.count == 0 {
        return Err(anyhow::anyhow!("--count must be positive and --step positive").into());
    }
    let settings = ContinuationSettings {
        step: a.step,
        ..ContinuationSettings::default()
    };
    let cont = compute(family::generate_family(
        &a.tag,
        a.count,
        &CorrectorSettings::default(),
        &settings,
        &params,
    ))?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| cli.out_dir.join(format!("{}.json", a.tag)));
    let cat = &cont.catalog;
    cat.save(&out).with_context(|| format!("writing {}", out.display()))?;
    let worst = cat
        .members
        .iter()
        .map(|m| m.closure_error(cat.tolerances.max_step, &params).unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    let (lo, hi) = cat.chi_range().unwrap_or((f64::NAN, f64::NAN));
    println!("{}: {} members, chi [{lo:.6}, {hi:.6}], worst closure {worst:.3e}", cat.tag, cat.len());
    println!("wrote {}", out.display());
    if let Some(reason) = &cont.aborted {
        eprintln!("warning: continuation stopped early: {reason}");
        return Ok(false);
    }
    Ok(true)
}

fn fit(cli: &Cli, a: &FitArgs) -> Outcome {
    let catalog = FamilyCatalog::load(&a.catalog)
        .with_context(|| format!("loading catalog {}", a.catalog.display()))?;
    if let Some(mu) = cli.mu {
        if mu != catalog.mu {
            return Err(anyhow::anyhow!("--mu {mu} disagrees with the catalog's mu {}", catalog.mu).into());
        }
    }
    let defaults = FitSettings::for_kind(catalog.tag.kind);
    let settings = FitSettings {
        degree: a.degree.unwrap_or(defaults.degree),
        parts: a.parts.unwrap_or(defaults.parts),
        samples: a.samples.unwrap_or(defaults.samples),
        holdout: a.holdout,
    };
    if !(0.0..1.0).contains(&settings.holdout) {
        return Err(anyhow::anyhow!("--holdout must lie in [0, 1)").into());
    }
    let m = compute(model::fit_family(&catalog, &settings))?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| cli.out_dir.join(format!("{}.model.json", catalog.tag)));
    m.save(&out).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "{}: degree {}, {} slices",
        m.tag,
        settings.degree,
        m.sub_manifolds.len()
    );
    for (k, s) in m.sub_manifolds.iter().enumerate() {
        let d = &s.diagnostics;
        println!(
            "slice {k}: chi [{:.6}, {:.6}] max residual {:e} position {:e} velocity {:e}",
            s.chi_range[0], s.chi_range[1], d.max_residual, d.max_position_residual, d.max_velocity_residual
        );
    }
    if let Some(h) = &m.diagnostics.holdout {
        println!(
            "holdout ({} members): position {:e} velocity {:e}",
            h.members.len(),
            h.max_position_error,
            h.max_velocity_error
        );
    }
    if let Some(path) = &a.residuals {
        compute(m.write_residuals(&catalog, settings.samples, writer(path)?))?;
    }
    println!("wrote {}", out.display());
    Ok(true)
}

fn load_config(cli: &Cli) -> anyhow::Result<config::Loaded> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| anyhow::anyhow!("--config is required for this subcommand"))?;
    config::load(path, cli.seed, cli.mu)
}

fn simulate(cli: &Cli) -> Outcome {
    let cfg = load_config(cli)?;
    let out = compute(sim::run_closed_loop(&cfg.scenario, &cfg.model))?;
    compute(sim::write_trajectory_csv(&out.log, writer(&cli.out_dir.join("trajectory.csv"))?))?;
    compute(sim::write_timing_csv(&out.log, writer(&cli.out_dir.join("timing.csv"))?))?;
    write_json(&cli.out_dir.join("metrics.json"), &out.metrics)?;
    let m = &out.metrics;
    println!(
        "{} steps, total dv {:.6e} ({:.3} m/s), convergence {}, mean solver {:.2} ms",
        m.steps,
        m.total_dv,
        m.total_dv_mps,
        m.convergence_revolutions
            .map_or("not reached".to_string(), |r| format!("{r:.2} rev")),
        m.mean_solver_seconds * 1e3
    );
    if let Some(reason) = &m.aborted {
        eprintln!("warning: run aborted: {reason}");
    }
    if m.failed_steps > 0 {
        eprintln!("warning: {} solver failures", m.failed_steps);
    }
    Ok(m.aborted.is_none() && m.failed_steps == 0)
}

fn sweep(cli: &Cli, a: &SweepArgs) -> Outcome {
    let cfg = load_config(cli)?;
    let from_file = cfg.file.sweep.clone();
    let np = if a.np.is_empty() {
        from_file.as_ref().map(|s| s.np.clone()).unwrap_or_default()
    } else {
        a.np.clone()
    };
    let nc = if a.nc.is_empty() {
        from_file.as_ref().map(|s| s.nc.clone()).unwrap_or_default()
    } else {
        a.nc.clone()
    };
    if np.is_empty() || nc.is_empty() {
        return Err(anyhow::anyhow!("no horizons given: use --np/--nc or a `sweep` config section").into());
    }
    let cells = compute(sim::horizon_sweep(&cfg.scenario, &cfg.model, &np, &nc))?;
    compute(sim::write_sweep_csv(&cells, writer(&cli.out_dir.join("sweep.csv"))?))?;
    let run = cells.iter().filter(|c| c.feasible).count();
    let failed = cells.iter().filter(|c| c.error.is_some()).count();
    println!("{run} cells run, {} infeasible, {failed} failed", cells.len() - run);
    Ok(failed == 0)
}

fn montecarlo(cli: &Cli, a: &MonteCarloArgs) -> Outcome {
    let cfg = load_config(cli)?;
    let section = cfg.file.montecarlo.clone();
    let runs = a
        .runs
        .or(section.as_ref().map(|s| s.runs))
        .ok_or_else(|| anyhow::anyhow!("no run count: use --runs or a `montecarlo` config section"))?;
    let dispersion = section.as_ref().map_or(1e-3, |s| s.dispersion);
    let bins = section.as_ref().map_or(20, |s| s.bins);
    let workers = a
        .workers
        .or(section.as_ref().and_then(|s| s.workers))
        .unwrap_or_else(sim::default_workers);
    let summary = compute(sim::monte_carlo(&cfg.scenario, &cfg.model, runs, dispersion, workers))?;
    compute(sim::write_montecarlo_csv(&summary, writer(&cli.out_dir.join("montecarlo.csv"))?))?;
    compute(sim::write_histogram_csv(&summary, bins, writer(&cli.out_dir.join("montecarlo_hist.csv"))?))?;
    write_json(&cli.out_dir.join("montecarlo.json"), &summary)?;
    println!(
        "{runs} runs: {:.1}% converged in bounds, {:.1}% failed, mean total dv {:.6e}",
        100.0 * summary.success_fraction,
        100.0 * summary.failure_fraction,
        summary.mean_total_dv
    );
    Ok(summary.failure_fraction == 0.0)
}

fn compare(cli: &Cli) -> Outcome {
    let cfg = load_config(cli)?;
    let outs = compute(sim::compare_modes(&cfg.scenario, &cfg.model))?;
    let mut blocks = serde_json::Map::new();
    for o in &outs {
        let m = &o.metrics;
        println!(
            "{:>12}: total dv {:.6e} ({:.3} m/s), mean solver {:.2} ms",
            m.mode,
            m.total_dv,
            m.total_dv_mps,
            m.mean_solver_seconds * 1e3
        );
        blocks.insert(m.mode.clone(), serde_json::to_value(m).context("encoding metrics")?);
    }
    write_json(&cli.out_dir.join("compare.json"), &json!(blocks))?;
    Ok(outs.iter().all(|o| o.metrics.aborted.is_none() && o.metrics.failed_steps == 0))
}
