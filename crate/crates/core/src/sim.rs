//! Closed-loop truth simulation and campaign drivers.
//!
//! Each control step solves the horizon problem on the current estimate,
//! applies the first impulse to the truth, then runs `N_T` substeps of
//! disturbed truth propagation, each followed by a filter time update and a
//! measurement update.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, StateVector, DEFAULT_STEP};
use crate::ekf::{self, EkfConfig, EstimatorState};
use crate::error::{Error, Result};
use crate::family::{FamilyCatalog, PeriodicOrbit};
use crate::model::{MprModel, ParamPair};
use crate::nmpc::{ControllerMode, HorizonSolution, Nmpc, NmpcConfig};
use crate::units;

const INITIAL_STREAM: u64 = 0;
const DISTURBANCE_STREAM: u64 = 1;
const MEASUREMENT_STREAM: u64 = 2;

/// Constant bias plus Gaussian acceleration noise, redrawn at every truth
/// substep with standard deviation `sigma_q` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disturbance {
    pub bias: [f64; 3],
    pub sigma_q: f64,
}

impl Disturbance {
    pub fn none() -> Self {
        Self {
            bias: [0.0; 3],
            sigma_q: 0.0,
        }
    }
}

impl Default for Disturbance {
    fn default() -> Self {
        Self {
            bias: [1e-4, 0.0, 0.0],
            sigma_q: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub member: PeriodicOrbit,
    pub revolutions: usize,
    pub disturbance: Disturbance,
    /// Standard deviation of the Gaussian offset of the initial truth from the member.
    pub dispersion: f64,
    /// Draw the initial estimate from the filter's initial covariance.
    pub estimate_error: bool,
    pub nmpc: NmpcConfig,
    pub ekf: EkfConfig,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.revolutions < 1 {
            return Err(Error::Config("revolutions must be at least 1".into()));
        }
        if !(self.dispersion >= 0.0 && self.dispersion.is_finite()) {
            return Err(Error::Config("dispersion must be finite and non-negative".into()));
        }
        let d = &self.disturbance;
        if !d.bias.iter().all(|b| b.is_finite()) || !(d.sigma_q >= 0.0 && d.sigma_q.is_finite()) {
            return Err(Error::Config("disturbance must be finite with sigma_q >= 0".into()));
        }
        self.nmpc.validate()?;
        self.ekf.validate()?;
        Ok(())
    }

    pub fn steps(&self) -> usize {
        ((self.revolutions as f64 * self.member.period / self.nmpc.ts) - 1e-9).ceil() as usize
    }

    pub fn steps_per_revolution(&self) -> usize {
        ((self.member.period / self.nmpc.ts) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn with_mode(&self, mode: ControllerMode) -> Self {
        let mut s = self.clone();
        s.nmpc.mode = mode;
        s
    }
}

/// Catalog index of a member in the middle of the slice holding the catalog midpoint.
pub fn nominal_member(catalog: &FamilyCatalog, model: &MprModel) -> Result<usize> {
    if catalog.is_empty() {
        return Err(Error::InvalidInput("empty catalog".into()));
    }
    let mid = catalog.members[catalog.len() / 2].chi;
    let sub = &model.sub_manifolds[model.locate(mid)?];
    let centre = 0.5 * (sub.chi_range[0] + sub.chi_range[1]);
    let (idx, _) = catalog
        .members
        .iter()
        .enumerate()
        .map(|(i, m)| (i, (m.chi - centre).abs()))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    Ok(idx)
}

/// Default scenario around catalog member `index`: the controller's `chi`
/// bounds are the surrogate slice containing the member.
pub fn default_scenario(
    catalog: &FamilyCatalog,
    model: &MprModel,
    index: usize,
    np: usize,
    nc: usize,
    mode: ControllerMode,
) -> Result<Scenario> {
    let member = *catalog
        .members
        .get(index)
        .ok_or_else(|| Error::InvalidInput(format!("member {index} not in catalog")))?;
    let sub = &model.sub_manifolds[model.locate(member.chi)?];
    let nmpc = NmpcConfig::with_defaults(member.period, np, nc, sub.chi_range, mode);
    Ok(Scenario {
        member,
        revolutions: 5,
        disturbance: Disturbance::default(),
        dispersion: 0.0,
        estimate_error: true,
        nmpc,
        ekf: EkfConfig::default(),
        seed: 0,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub truth: StateVector,
    pub estimate: StateVector,
    pub reference: StateVector,
    pub dv: Vector3<f64>,
    pub cost: f64,
    pub solver_iterations: usize,
    pub solver_converged: bool,
    pub solver_failed: bool,
    pub chi: f64,
    pub delta_chi: f64,
    pub chi_truth: f64,
    pub position_error: f64,
    pub velocity_error: f64,
    pub covariance_trace: f64,
    pub nees: f64,
    pub solver_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mode: String,
    pub seed: u64,
    pub steps: usize,
    pub total_dv: f64,
    pub total_dv_mps: f64,
    pub dv_series: Vec<f64>,
    pub delta_chi: Vec<f64>,
    pub chi_truth: Vec<f64>,
    pub position_error: Vec<f64>,
    pub velocity_error: Vec<f64>,
    /// Revolutions until `delta_chi` settles; `None` when it never does.
    pub convergence_revolutions: Option<f64>,
    pub final_chi: f64,
    pub chi_in_bounds: bool,
    pub mean_solver_seconds: f64,
    pub p95_solver_seconds: f64,
    pub failed_steps: usize,
    pub unconverged_solves: usize,
    pub aborted: Option<String>,
}

impl RunMetrics {
    pub fn converged(&self) -> bool {
        self.convergence_revolutions.is_some() && self.aborted.is_none()
    }

    pub fn mean_dv(&self) -> f64 {
        if self.dv_series.is_empty() {
            0.0
        } else {
            self.total_dv / self.dv_series.len() as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub log: Vec<LogRow>,
}

/// Settling fraction of the convergence-time test.
pub const SETTLING_FRACTION: f64 = 0.05;

/// First sample after which `series` stays within `fraction` of its initial
/// deviation from the final-revolution median for a full revolution.
pub fn convergence_step(series: &[f64], per_rev: usize, fraction: f64) -> Option<usize> {
    if series.len() < 2 * per_rev || per_rev == 0 {
        return None;
    }
    let mut last: Vec<f64> = series[series.len() - per_rev..].to_vec();
    last.sort_by(|a, b| a.total_cmp(b));
    let median = if per_rev % 2 == 1 {
        last[per_rev / 2]
    } else {
        0.5 * (last[per_rev / 2 - 1] + last[per_rev / 2])
    };
    let band = fraction * (series[0] - median).abs();
    let inside: Vec<bool> = series.iter().map(|v| (v - median).abs() <= band).collect();
    (0..=series.len() - per_rev).find(|&k| inside[k..k + per_rev].iter().all(|&b| b))
}

fn gaussian3<R: rand::Rng>(rng: &mut R) -> Vector3<f64> {
    Vector3::from_fn(|_, _| StandardNormal.sample(rng))
}

fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let idx = ((p * (v.len() - 1) as f64).round() as usize).min(v.len() - 1);
    v[idx]
}

fn propagate_disturbed(
    x: &StateVector,
    accel: &Vector3<f64>,
    h: f64,
    params: &dynamics::SystemParams,
) -> Result<StateVector> {
    let n = dynamics::substeps_for(h, DEFAULT_STEP);
    let dt = h / n as f64;
    let mut x = *x;
    for _ in 0..n {
        x = dynamics::rk4_step_forced(&x, accel, dt, params)?;
    }
    Ok(x)
}

/// Runs one closed-loop simulation.
pub fn run_closed_loop(scn: &Scenario, model: &MprModel) -> Result<RunOutput> {
    scn.validate()?;
    let params = model.params();
    let nmpc = Nmpc::new(model, &scn.nmpc)?;
    let observer = scn.ekf.observer.position(&params)?;
    let n_t = dynamics::control_ratio(scn.nmpc.ts, scn.nmpc.ts_hat)?;
    let h = scn.nmpc.ts_hat;

    let rng_for = |stream: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(scn.seed);
        r.set_stream(stream);
        r
    };
    let mut init_rng = rng_for(INITIAL_STREAM);
    let mut dist_rng = rng_for(DISTURBANCE_STREAM);
    let mut meas_rng = rng_for(MEASUREMENT_STREAM);

    let mut truth = scn.member.x0;
    if scn.dispersion > 0.0 {
        let off = StateVector::from_fn(|_, _| StandardNormal.sample(&mut init_rng));
        truth += off * scn.dispersion;
    }
    let mut est_mean = truth;
    if scn.estimate_error {
        let off = StateVector::from_fn(|_, _| StandardNormal.sample(&mut init_rng));
        est_mean += off * scn.ekf.p0.sqrt();
    }
    let mut est = EstimatorState::new(est_mean, scn.ekf.p0, 0.0);
    let bias = Vector3::from(scn.disturbance.bias);
    let sigma_q = scn.disturbance.sigma_q;
    let steps = scn.steps();
    let mut log = Vec::with_capacity(steps);
    let mut warm: Option<HorizonSolution> = None;
    let mut aborted = None;
    let mut reference = match model.project(&est.mean) {
        Ok(p) => model.eval(p).unwrap_or(est.mean),
        Err(_) => est.mean,
    };
    let mut t = 0.0;
    for _ in 0..steps {
        let (dv, sol, failed) = match nmpc.controller_step(&est.mean, warm.as_ref()) {
            Ok((dv, sol)) => (dv, Some(sol), false),
            Err(e) => {
                log::warn!("solver failed at t = {t:.4}: {e}");
                (Vector3::zeros(), None, true)
            }
        };
        let chi = sol
            .as_ref()
            .map(|s| s.chi[0])
            .or_else(|| warm.as_ref().map(|w| w.chi[0]))
            .unwrap_or(scn.member.chi);
        let chi_truth = model
            .project(&truth)
            .map(|p| p.chi)
            .unwrap_or(f64::NAN);
        let e = truth - est.mean;
        log.push(LogRow {
            t,
            truth,
            estimate: est.mean,
            reference,
            dv,
            cost: sol.as_ref().map_or(f64::NAN, |s| s.cost),
            solver_iterations: sol.as_ref().map_or(0, |s| s.total_iterations),
            solver_converged: sol.as_ref().is_some_and(|s| s.converged),
            solver_failed: failed,
            chi,
            delta_chi: chi - scn.member.chi,
            chi_truth,
            position_error: e.fixed_rows::<3>(0).norm(),
            velocity_error: e.fixed_rows::<3>(3).norm(),
            covariance_trace: est.covariance.trace(),
            nees: ekf::nees(&est, &truth).unwrap_or(f64::NAN),
            solver_seconds: sol.as_ref().map_or(0.0, |s| s.wall_time),
        });
        if let Some(s) = &sol {
            reference = nmpc.sub.eval(s.chi_at(1), s.nu[0]);
        }
        if sol.is_some() {
            warm = sol;
        }

        truth = dynamics::apply_impulse(&truth, &dv);
        let mut step_failed = None;
        for s in 0..n_t {
            let w = bias + gaussian3(&mut dist_rng) * sigma_q;
            truth = match propagate_disturbed(&truth, &w, h, &params) {
                Ok(x) => x,
                Err(e) => {
                    step_failed = Some(format!("truth propagation failed at t = {t:.4}: {e}"));
                    break;
                }
            };
            let applied = if s == 0 { dv } else { Vector3::zeros() };
            est = ekf::predict(&est, h, &applied, scn.ekf.process_sigma, scn.ekf.max_step, &params)?;
            let z = ekf::simulate_measurement(
                &truth,
                &observer,
                scn.ekf.range_sigma,
                scn.ekf.los_sigma,
                est.epoch,
                &mut meas_rng,
            )?;
            est = ekf::update(&est, &z, &observer, scn.ekf.model)?.state;
        }
        t += scn.nmpc.ts;
        if let Some(reason) = step_failed {
            aborted = Some(reason);
            break;
        }
    }

    let metrics = summarize(scn, model, &log, aborted, &truth);
    Ok(RunOutput { metrics, log })
}

fn summarize(
    scn: &Scenario,
    model: &MprModel,
    log: &[LogRow],
    aborted: Option<String>,
    final_truth: &StateVector,
) -> RunMetrics {
    let dv_series: Vec<f64> = log.iter().map(|r| r.dv.norm()).collect();
    let total_dv: f64 = dv_series.iter().sum();
    let delta_chi: Vec<f64> = log.iter().map(|r| r.delta_chi).collect();
    let times: Vec<f64> = log
        .iter()
        .filter(|r| !r.solver_failed)
        .map(|r| r.solver_seconds)
        .collect();
    let per_rev = scn.steps_per_revolution();
    let convergence_revolutions = if aborted.is_none() {
        convergence_step(&delta_chi, per_rev, SETTLING_FRACTION).map(|k| k as f64 / per_rev as f64)
    } else {
        None
    };
    let final_chi = model
        .project(final_truth)
        .map(|p: ParamPair| p.chi)
        .unwrap_or(f64::NAN);
    let [lo, hi] = scn.nmpc.chi_bounds;
    RunMetrics {
        mode: scn.nmpc.mode.name().to_string(),
        seed: scn.seed,
        steps: log.len(),
        total_dv,
        total_dv_mps: units::dv_to_mps(total_dv),
        dv_series,
        delta_chi,
        chi_truth: log.iter().map(|r| r.chi_truth).collect(),
        position_error: log.iter().map(|r| r.position_error).collect(),
        velocity_error: log.iter().map(|r| r.velocity_error).collect(),
        convergence_revolutions,
        final_chi,
        chi_in_bounds: final_chi >= lo && final_chi <= hi,
        mean_solver_seconds: if times.is_empty() {
            0.0
        } else {
            times.iter().sum::<f64>() / times.len() as f64
        },
        p95_solver_seconds: percentile(&times, 0.95),
        failed_steps: log.iter().filter(|r| r.solver_failed).count(),
        unconverged_solves: log
            .iter()
            .filter(|r| !r.solver_failed && !r.solver_converged)
            .count(),
        aborted,
    }
}

/// Runs `f` over `0..n` on a small worker pool, keeping results in index order.
pub fn parallel_map<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = workers.clamp(1, n.max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let v = f(i);
                slots.lock().expect("result slots")[i] = Some(v);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|v| v.expect("every index visited"))
        .collect()
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloRun {
    pub run: usize,
    pub seed: u64,
    pub total_dv: f64,
    pub total_dv_mps: f64,
    pub convergence_revolutions: Option<f64>,
    pub converged: bool,
    pub mean_solver_seconds: f64,
    pub final_chi: f64,
    pub chi_in_bounds: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub runs: Vec<MonteCarloRun>,
    pub failure_fraction: f64,
    /// Fraction of runs that converged and ended with `chi` inside the bounds.
    pub success_fraction: f64,
    pub mean_total_dv: f64,
    pub mean_convergence_revolutions: Option<f64>,
    pub mean_solver_seconds: f64,
}

/// Independent runs with seeds `base.seed + i`; the initial truth of each
/// run is dispersed by `dispersion` about the member.
pub fn monte_carlo(
    base: &Scenario,
    model: &MprModel,
    runs: usize,
    dispersion: f64,
    workers: usize,
) -> Result<MonteCarloSummary> {
    if runs < 1 {
        return Err(Error::Config("runs must be at least 1".into()));
    }
    base.validate()?;
    let results = parallel_map(runs, workers, |i| {
        let mut scn = base.clone();
        scn.seed = base.seed.wrapping_add(i as u64);
        scn.dispersion = dispersion;
        let out = run_closed_loop(&scn, model);
        match out {
            Ok(o) => {
                let m = o.metrics;
                MonteCarloRun {
                    run: i,
                    seed: scn.seed,
                    total_dv: m.total_dv,
                    total_dv_mps: m.total_dv_mps,
                    convergence_revolutions: m.convergence_revolutions,
                    converged: m.converged(),
                    mean_solver_seconds: m.mean_solver_seconds,
                    final_chi: m.final_chi,
                    chi_in_bounds: m.chi_in_bounds,
                    error: m.aborted,
                }
            }
            Err(e) => MonteCarloRun {
                run: i,
                seed: scn.seed,
                total_dv: f64::NAN,
                total_dv_mps: f64::NAN,
                convergence_revolutions: None,
                converged: false,
                mean_solver_seconds: f64::NAN,
                final_chi: f64::NAN,
                chi_in_bounds: false,
                error: Some(e.to_string()),
            },
        }
    });
    let n = results.len() as f64;
    let ok: Vec<&MonteCarloRun> = results.iter().filter(|r| r.error.is_none()).collect();
    let mean = |f: &dyn Fn(&MonteCarloRun) -> f64| {
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
        }
    };
    let conv: Vec<f64> = results.iter().filter_map(|r| r.convergence_revolutions).collect();
    Ok(MonteCarloSummary {
        failure_fraction: (results.len() - ok.len()) as f64 / n,
        success_fraction: results.iter().filter(|r| r.converged && r.chi_in_bounds).count() as f64 / n,
        mean_total_dv: mean(&|r| r.total_dv),
        mean_convergence_revolutions: if conv.is_empty() {
            None
        } else {
            Some(conv.iter().sum::<f64>() / conv.len() as f64)
        },
        mean_solver_seconds: mean(&|r| r.mean_solver_seconds),
        runs: results,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub np: usize,
    pub nc: usize,
    pub feasible: bool,
    pub mean_dv: f64,
    pub mean_dv_mps: f64,
    pub mean_solver_seconds: f64,
    pub total_dv: f64,
    pub error: Option<String>,
}

/// One closed-loop run per `(Np, Nc)` cell; cells with `Nc > Np` are marked infeasible.
pub fn horizon_sweep(
    base: &Scenario,
    model: &MprModel,
    np_values: &[usize],
    nc_values: &[usize],
) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    for &np in np_values {
        for &nc in nc_values {
            let mut cell = SweepCell {
                np,
                nc,
                feasible: nc >= 1 && nc <= np,
                mean_dv: f64::NAN,
                mean_dv_mps: f64::NAN,
                mean_solver_seconds: f64::NAN,
                total_dv: f64::NAN,
                error: None,
            };
            if cell.feasible {
                let mut scn = base.clone();
                scn.nmpc.np = np;
                scn.nmpc.nc = nc;
                match run_closed_loop(&scn, model) {
                    Ok(out) => {
                        let m = out.metrics;
                        cell.mean_dv = m.mean_dv();
                        cell.mean_dv_mps = units::dv_to_mps(cell.mean_dv);
                        cell.mean_solver_seconds = m.mean_solver_seconds;
                        cell.total_dv = m.total_dv;
                        cell.error = m.aborted;
                    }
                    Err(e) => cell.error = Some(e.to_string()),
                }
            }
            cells.push(cell);
        }
    }
    Ok(cells)
}

/// Variable-chi, fixed-chi and fixed-orbit runs on identical seeds; the
/// fixed orbit is the scenario's member.
pub fn compare_modes(base: &Scenario, model: &MprModel) -> Result<Vec<RunOutput>> {
    [
        ControllerMode::VariableChi,
        ControllerMode::FixedChi,
        ControllerMode::FixedOrbit {
            chi_ref: base.member.chi,
        },
    ]
    .iter()
    .map(|&mode| run_closed_loop(&base.with_mode(mode), model))
    .collect()
}

/// Spearman rank correlation; ties share their mean rank.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let rank = 0.5 * (i + j) as f64;
            for k in i..=j {
                r[idx[k]] = rank;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx).powi(2);
        syy += (ry[i] - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Equal-width histogram of the finite values: `(lower edge, upper edge, count)`.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for x in v {
        let k = (((x - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, c)| (lo + k as f64 * width, lo + (k + 1) as f64 * width, c))
        .collect()
}

pub fn write_trajectory_csv<W: Write>(log: &[LogRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = vec!["t".into()];
    for prefix in ["truth", "est", "ref"] {
        for c in ["x", "y", "z", "vx", "vy", "vz"] {
            header.push(format!("{prefix}_{c}"));
        }
    }
    for c in ["dvx", "dvy", "dvz", "dv_mps", "J", "solver_iters", "solver_ok"] {
        header.push(c.into());
    }
    for c in ["chi", "delta_chi", "chi_truth", "pos_err", "vel_err", "cov_trace", "nees"] {
        header.push(c.into());
    }
    w.write_record(&header)?;
    for r in log {
        let mut row = vec![r.t.to_string()];
        for s in [&r.truth, &r.estimate, &r.reference] {
            row.extend(s.iter().map(|v| v.to_string()));
        }
        row.extend(r.dv.iter().map(|v| v.to_string()));
        row.push(units::dv_to_mps(r.dv.norm()).to_string());
        row.push(r.cost.to_string());
        row.push(r.solver_iterations.to_string());
        row.push(u8::from(!r.solver_failed).to_string());
        for v in [
            r.chi,
            r.delta_chi,
            r.chi_truth,
            r.position_error,
            r.velocity_error,
            r.covariance_trace,
            r.nees,
        ] {
            row.push(v.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Solver wall times, kept apart from the trajectory so that it stays reproducible.
pub fn write_timing_csv<W: Write>(log: &[LogRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "solver_ms"])?;
    for r in log {
        w.write_record([r.t.to_string(), (r.solver_seconds * 1e3).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_csv<W: Write>(cells: &[SweepCell], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "np", "nc", "feasible", "mean_dv", "mean_dv_mps", "mean_solver_ms", "total_dv", "error",
    ])?;
    for c in cells {
        w.write_record([
            c.np.to_string(),
            c.nc.to_string(),
            c.feasible.to_string(),
            c.mean_dv.to_string(),
            c.mean_dv_mps.to_string(),
            (c.mean_solver_seconds * 1e3).to_string(),
            c.total_dv.to_string(),
            c.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_montecarlo_csv<W: Write>(summary: &MonteCarloSummary, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "run",
        "seed",
        "total_dv",
        "total_dv_mps",
        "convergence_revs",
        "converged",
        "mean_solver_ms",
        "final_chi",
        "chi_in_bounds",
        "error",
    ])?;
    for r in &summary.runs {
        w.write_record([
            r.run.to_string(),
            r.seed.to_string(),
            r.total_dv.to_string(),
            r.total_dv_mps.to_string(),
            r.convergence_revolutions.map_or(String::new(), |v| v.to_string()),
            r.converged.to_string(),
            (r.mean_solver_seconds * 1e3).to_string(),
            r.final_chi.to_string(),
            r.chi_in_bounds.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Histograms of total impulse, convergence time and solver time.
pub fn write_histogram_csv<W: Write>(summary: &MonteCarloSummary, bins: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["quantity", "lower", "upper", "count"])?;
    let series: [(&str, Vec<f64>); 3] = [
        ("total_dv_mps", summary.runs.iter().map(|r| r.total_dv_mps).collect()),
        (
            "convergence_revs",
            summary.runs.iter().filter_map(|r| r.convergence_revolutions).collect(),
        ),
        (
            "mean_solver_ms",
            summary.runs.iter().map(|r| r.mean_solver_seconds * 1e3).collect(),
        ),
    ];
    for (name, values) in series {
        for (lo, hi, c) in histogram(&values, bins) {
            w.write_record([name.to_string(), lo.to_string(), hi.to_string(), c.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
