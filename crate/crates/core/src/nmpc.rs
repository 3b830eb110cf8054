//! Receding-horizon station keeping against a family surrogate.
//!
//! The decision vector stacks the `Nc` impulses, the orbit parameter(s) and
//! the `Np + 1` location angles:
//!
//! ```text
//! [ dv_1 .. dv_Nc | chi (1, Np or 0 values) | nu_1 .. nu_{Np+1} ]
//! ```
//!
//! Step `i` applies `dv_min(i, Nc)`, so the last impulse is held beyond the
//! control horizon, and the terminal term is one step past the prediction
//! horizon.

use std::time::Instant;

use nalgebra::{Matrix3, Matrix6, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, StateVector, Stm, SystemParams};
use crate::error::{Error, Result};
use crate::model::{location_angle, wrap_angle, MprModel, SubManifoldModel};
use crate::optim::{self, BfgsSettings, Domain};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ControllerMode {
    /// One orbit parameter for the whole horizon.
    FixedChi,
    /// One orbit parameter per prediction step.
    VariableChi,
    /// Track the orbit `chi_ref`; only the phase is free.
    FixedOrbit { chi_ref: f64 },
}

impl ControllerMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::FixedChi => "fixed_chi",
            Self::VariableChi => "variable_chi",
            Self::FixedOrbit { .. } => "fixed_orbit",
        }
    }
}

pub type Matrix6Rows = [[f64; 6]; 6];
pub type Matrix3Rows = [[f64; 3]; 3];

fn diag6(d: [f64; 6]) -> Matrix6Rows {
    let mut m = [[0.0; 6]; 6];
    for i in 0..6 {
        m[i][i] = d[i];
    }
    m
}

fn diag3(d: [f64; 3]) -> Matrix3Rows {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        m[i][i] = d[i];
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
    /// Cold starts spread over the `chi` bounds.
    pub chi_starts: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            gradient_tolerance: 1e-8,
            max_iterations: 200,
            chi_starts: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NmpcConfig {
    pub np: usize,
    pub nc: usize,
    pub q: Matrix6Rows,
    pub qt: Matrix6Rows,
    pub r: Matrix3Rows,
    pub ts: f64,
    pub ts_hat: f64,
    /// Per-axis impulse bounds `[min, max]`.
    pub dv_bounds: [f64; 2],
    pub chi_bounds: [f64; 2],
    pub mode: ControllerMode,
    #[serde(default)]
    pub solver: SolverSettings,
}

pub const DEFAULT_IMPULSES_PER_REV: usize = 20;
pub const DEFAULT_CONTROL_RATIO: usize = 10;
pub const DEFAULT_DV_LIMIT: f64 = 0.1;

impl NmpcConfig {
    /// Position-only tracking weights, `R = 1e-2 I`, twenty impulses per
    /// revolution of `period` and ten propagation substeps per impulse.
    pub fn with_defaults(period: f64, np: usize, nc: usize, chi_bounds: [f64; 2], mode: ControllerMode) -> Self {
        let ts = period / DEFAULT_IMPULSES_PER_REV as f64;
        Self {
            np,
            nc,
            q: diag6([1.0, 1.0, 1.0, 0.0, 0.0, 0.0]),
            qt: diag6([1.0, 1.0, 1.0, 0.0, 0.0, 0.0]),
            r: diag3([1e-2; 3]),
            ts,
            ts_hat: ts / DEFAULT_CONTROL_RATIO as f64,
            dv_bounds: [-DEFAULT_DV_LIMIT, DEFAULT_DV_LIMIT],
            chi_bounds,
            mode,
            solver: SolverSettings::default(),
        }
    }

    pub fn q_matrix(&self) -> Matrix6<f64> {
        Matrix6::from_fn(|i, j| self.q[i][j])
    }

    pub fn qt_matrix(&self) -> Matrix6<f64> {
        Matrix6::from_fn(|i, j| self.qt[i][j])
    }

    pub fn r_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.r[i][j])
    }

    /// Number of orbit parameters in the decision vector.
    pub fn chi_count(&self) -> usize {
        match self.mode {
            ControllerMode::FixedChi => 1,
            ControllerMode::VariableChi => self.np,
            ControllerMode::FixedOrbit { .. } => 0,
        }
    }

    pub fn decision_len(&self) -> usize {
        3 * self.nc + self.chi_count() + self.np + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.nc < 1 || self.nc > self.np {
            return Err(Error::Config(format!(
                "need 1 <= Nc <= Np (Np = {}, Nc = {})",
                self.np, self.nc
            )));
        }
        dynamics::control_ratio(self.ts, self.ts_hat)?;
        let sym_psd = |m: Matrix6<f64>, name: &str| -> Result<()> {
            if !m.iter().all(|v| v.is_finite()) || (m - m.transpose()).amax() > 1e-12 {
                return Err(Error::Config(format!("{name} must be finite and symmetric")));
            }
            let min = m.symmetric_eigenvalues().min();
            if min < -1e-12 {
                return Err(Error::Config(format!("{name} is not positive semi-definite")));
            }
            Ok(())
        };
        sym_psd(self.q_matrix(), "Q")?;
        sym_psd(self.qt_matrix(), "Qt")?;
        let r = self.r_matrix();
        if !r.iter().all(|v| v.is_finite()) || (r - r.transpose()).amax() > 1e-12 || r.symmetric_eigenvalues().min() <= 0.0 {
            return Err(Error::Config("R must be symmetric positive definite".into()));
        }
        let [lo, hi] = self.dv_bounds;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("bad impulse bounds [{lo}, {hi}]")));
        }
        let [clo, chi] = self.chi_bounds;
        if !(clo.is_finite() && chi.is_finite() && clo <= chi) {
            return Err(Error::Config(format!("bad chi bounds [{clo}, {chi}]")));
        }
        if let ControllerMode::FixedOrbit { chi_ref } = self.mode {
            if !(chi_ref >= clo && chi_ref <= chi) {
                return Err(Error::Config(format!(
                    "chi_ref = {chi_ref} outside the chi bounds [{clo}, {chi}]"
                )));
            }
        }
        if self.solver.max_iterations == 0 || !(self.solver.gradient_tolerance > 0.0) {
            return Err(Error::Config("solver settings must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HorizonSolution {
    pub dv: Vec<Vector3<f64>>,
    /// One value (fixed chi), `Np` values (variable chi) or the fixed `chi_ref`.
    pub chi: Vec<f64>,
    pub nu: Vec<f64>,
    pub cost: f64,
    /// Iterations of the start that produced this solution.
    pub iterations: usize,
    /// Iterations summed over all starts.
    pub total_iterations: usize,
    /// Iterations of the shifted warm start, when one was usable.
    pub warm_iterations: Option<usize>,
    pub converged: bool,
    /// Seconds spent in the solver.
    pub wall_time: f64,
}

impl HorizonSolution {
    /// Orbit parameter used at prediction step `i` (1-based, up to `Np + 1`).
    pub fn chi_at(&self, i: usize) -> f64 {
        self.chi[(i.max(1) - 1).min(self.chi.len() - 1)]
    }
}

/// A horizon problem bound to one surrogate slice.
#[derive(Clone)]
pub struct Nmpc<'a> {
    pub sub: &'a SubManifoldModel,
    pub cfg: &'a NmpcConfig,
    pub params: SystemParams,
    model: &'a MprModel,
    n_t: usize,
    q: Matrix6<f64>,
    qt: Matrix6<f64>,
    r: Matrix3<f64>,
}

struct Decision<'z> {
    dv: Vec<Vector3<f64>>,
    chi: Vec<f64>,
    nu: &'z [f64],
}

impl<'a> Nmpc<'a> {
    pub fn new(model: &'a MprModel, cfg: &'a NmpcConfig) -> Result<Self> {
        cfg.validate()?;
        let sub = model.slice_for_bounds(cfg.chi_bounds[0], cfg.chi_bounds[1])?;
        Ok(Self {
            sub,
            cfg,
            params: model.params(),
            model,
            n_t: dynamics::control_ratio(cfg.ts, cfg.ts_hat)?,
            q: cfg.q_matrix(),
            qt: cfg.qt_matrix(),
            r: cfg.r_matrix(),
        })
    }

    fn fixed_chi(&self) -> Option<f64> {
        match self.cfg.mode {
            ControllerMode::FixedOrbit { chi_ref } => Some(chi_ref),
            _ => None,
        }
    }

    fn split<'z>(&self, z: &'z [f64]) -> Decision<'z> {
        let nc = self.cfg.nc;
        let m = self.cfg.chi_count();
        let dv = (0..nc)
            .map(|k| Vector3::new(z[3 * k], z[3 * k + 1], z[3 * k + 2]))
            .collect();
        let chi = match self.fixed_chi() {
            Some(c) => vec![c],
            None => z[3 * nc..3 * nc + m].to_vec(),
        };
        Decision {
            dv,
            chi,
            nu: &z[3 * nc + m..],
        }
    }

    fn chi_index(&self, i: usize, len: usize) -> usize {
        (i - 1).min(len - 1)
    }

    fn weight(&self, i: usize) -> &Matrix6<f64> {
        if i <= self.cfg.np {
            &self.q
        } else {
            &self.qt
        }
    }

    fn step(&self, x: &StateVector, dv: &Vector3<f64>) -> Result<StateVector> {
        let mut x = dynamics::apply_impulse(x, dv);
        for _ in 0..self.n_t {
            x = dynamics::rk4_step(&x, self.cfg.ts_hat, &self.params)?;
        }
        Ok(x)
    }

    fn step_stm(&self, x: &StateVector, dv: &Vector3<f64>) -> Result<(StateVector, Stm)> {
        let mut x = dynamics::apply_impulse(x, dv);
        let mut phi = Stm::identity();
        for _ in 0..self.n_t {
            (x, phi) = dynamics::rk4_step_with_stm(&x, &phi, self.cfg.ts_hat, &self.params)?;
        }
        Ok((x, phi))
    }

    fn cost_parts(&self, x0: &StateVector, d: &Decision) -> Result<f64> {
        let np = self.cfg.np;
        let nc = self.cfg.nc;
        let mut j = 0.0;
        for dv in &d.dv {
            j += dv.dot(&(self.r * dv));
        }
        let mut x = *x0;
        for i in 1..=np + 1 {
            let dv = &d.dv[i.min(nc) - 1];
            x = self.step(&x, dv)?;
            let chi = d.chi[self.chi_index(i, d.chi.len())];
            let e = x - self.sub.eval(chi, d.nu[i - 1]);
            j += e.dot(&(self.weight(i) * e));
        }
        Ok(j)
    }

    /// Cost of a packed decision vector; infinite when propagation fails.
    pub fn cost(&self, x0: &StateVector, z: &[f64]) -> f64 {
        self.cost_parts(x0, &self.split(z)).unwrap_or(f64::INFINITY)
    }

    /// Cost and gradient of a packed decision vector by reverse accumulation.
    pub fn cost_gradient(&self, x0: &StateVector, z: &[f64]) -> (f64, Vec<f64>) {
        match self.try_cost_gradient(x0, z) {
            Ok(v) => v,
            Err(_) => (f64::INFINITY, vec![f64::NAN; z.len()]),
        }
    }

    fn try_cost_gradient(&self, x0: &StateVector, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let np = self.cfg.np;
        let nc = self.cfg.nc;
        let m = self.cfg.chi_count();
        let d = self.split(z);
        let mut grad = vec![0.0; z.len()];
        let mut j = 0.0;
        for (k, dv) in d.dv.iter().enumerate() {
            let rdv = self.r * dv;
            j += dv.dot(&rdv);
            let g = (self.r + self.r.transpose()) * dv;
            for a in 0..3 {
                grad[3 * k + a] += g[a];
            }
        }
        let mut x = *x0;
        let mut phis = Vec::with_capacity(np + 1);
        let mut errs = Vec::with_capacity(np + 1);
        for i in 1..=np + 1 {
            let dv = &d.dv[i.min(nc) - 1];
            let (next, phi) = self.step_stm(&x, dv)?;
            x = next;
            let ci = self.chi_index(i, d.chi.len());
            let jet = self.sub.eval_jet(d.chi[ci], d.nu[i - 1]);
            let e = x - jet.state;
            let w = self.weight(i);
            let we = (w + w.transpose()) * e;
            j += e.dot(&(w * e));
            grad[3 * nc + m + i - 1] -= we.dot(&jet.d_nu);
            if m > 0 {
                grad[3 * nc + ci] -= we.dot(&jet.d_chi);
            }
            phis.push(phi);
            errs.push(we);
        }
        // Adjoint sweep: a_i = dJ/dX_i.
        let mut a = StateVector::zeros();
        for i in (1..=np + 1).rev() {
            a += errs[i - 1];
            let phi = &phis[i - 1];
            let lam = phi.transpose() * a;
            let k = i.min(nc) - 1;
            for c in 0..3 {
                grad[3 * k + c] += lam[3 + c];
            }
            a = lam;
        }
        Ok((j, grad))
    }

    fn domain(&self) -> Domain {
        let n = self.cfg.decision_len();
        let nc = self.cfg.nc;
        let m = self.cfg.chi_count();
        let mut d = Domain::unbounded(n);
        for k in 0..3 * nc {
            d.lower[k] = self.cfg.dv_bounds[0];
            d.upper[k] = self.cfg.dv_bounds[1];
        }
        for k in 3 * nc..3 * nc + m {
            d.lower[k] = self.cfg.chi_bounds[0];
            d.upper[k] = self.cfg.chi_bounds[1];
        }
        for k in 3 * nc + m..n {
            d.periodic[k] = true;
        }
        d
    }

    /// Phase guesses advancing the geometric angle of `x0` at the slice's mean rate.
    pub fn nu_guess(&self, x0: &StateVector) -> Vec<f64> {
        let lib = self.model.libration_point().ok();
        let nu0 = lib
            .and_then(|lib| location_angle(x0, &self.model.tag, &lib).ok())
            .unwrap_or(0.0);
        (1..=self.cfg.np + 1)
            .map(|i| wrap_angle(nu0 + self.sub.nu_rate * self.cfg.ts * i as f64))
            .collect()
    }

    fn pack(&self, dv: &[Vector3<f64>], chi: &[f64], nu: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.cfg.decision_len());
        for v in dv {
            z.extend(v.iter());
        }
        if self.cfg.chi_count() > 0 {
            z.extend_from_slice(chi);
        }
        z.extend_from_slice(nu);
        z
    }

    /// Warm start: the previous solution advanced by one step.
    fn shifted(&self, prev: &HorizonSolution) -> Option<Vec<f64>> {
        let np = self.cfg.np;
        let nc = self.cfg.nc;
        if prev.dv.len() != nc || prev.nu.len() != np + 1 {
            return None;
        }
        let m = self.cfg.chi_count();
        if m > 0 && prev.chi.len() != m {
            return None;
        }
        let mut dv: Vec<Vector3<f64>> = prev.dv[1..].to_vec();
        dv.push(prev.dv[nc - 1]);
        let mut chi = Vec::new();
        if m > 0 {
            chi = prev.chi[1.min(m - 1)..].to_vec();
            while chi.len() < m {
                chi.push(prev.chi[m - 1]);
            }
        }
        let mut nu: Vec<f64> = prev.nu[1..].to_vec();
        nu.push(wrap_angle(prev.nu[np] + self.sub.nu_rate * self.cfg.ts));
        Some(self.pack(&dv, &chi, &nu))
    }

    fn clamp_dv(&self, z: &mut [f64]) {
        for v in z.iter_mut().take(3 * self.cfg.nc) {
            *v = v.clamp(self.cfg.dv_bounds[0], self.cfg.dv_bounds[1]);
        }
    }

    fn unpack(&self, z: &[f64], cost: f64) -> HorizonSolution {
        let d = self.split(z);
        HorizonSolution {
            dv: d.dv,
            chi: d.chi,
            nu: d.nu.to_vec(),
            cost,
            iterations: 0,
            total_iterations: 0,
            warm_iterations: None,
            converged: false,
            wall_time: 0.0,
        }
    }

    /// Cold starts: zero impulses, phase from geometry, `chi` spread over its bounds.
    fn cold_starts(&self, x0: &StateVector) -> Vec<Vec<f64>> {
        let nu = self.nu_guess(x0);
        let dv = vec![Vector3::zeros(); self.cfg.nc];
        let m = self.cfg.chi_count();
        if m == 0 {
            return vec![self.pack(&dv, &[], &nu)];
        }
        let [lo, hi] = self.cfg.chi_bounds;
        let count = self.cfg.solver.chi_starts.max(1);
        (0..count)
            .map(|k| {
                let chi = lo + (hi - lo) * (k as f64 + 0.5) / count as f64;
                self.pack(&dv, &vec![chi; m], &nu)
            })
            .collect()
    }

    /// Locally optimal horizon plan from multiple starts.
    ///
    /// Variable-`chi` solves start from the fixed-`chi` optimum spread over
    /// the horizon, so they never end above it.
    pub fn solve(&self, x0: &StateVector, warm: Option<&HorizonSolution>) -> Result<HorizonSolution> {
        if !x0.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("controller state"));
        }
        let clock = Instant::now();
        let mut starts = Vec::new();
        let has_warm = if let Some(z) = warm.and_then(|w| self.shifted(w)) {
            starts.push(z);
            true
        } else {
            false
        };
        let mut nested_iterations = 0;
        if self.cfg.mode == ControllerMode::VariableChi {
            let fixed_cfg = NmpcConfig {
                mode: ControllerMode::FixedChi,
                ..self.cfg.clone()
            };
            let fixed = Nmpc { cfg: &fixed_cfg, ..self.clone() };
            let fixed_warm = warm.map(|w| HorizonSolution {
                chi: vec![w.chi[w.chi.len().min(2) - 1]],
                ..w.clone()
            });
            let sol = fixed.solve(x0, fixed_warm.as_ref())?;
            nested_iterations = sol.total_iterations;
            starts.push(self.pack(&sol.dv, &vec![sol.chi[0]; self.cfg.np], &sol.nu));
        } else {
            starts.extend(self.cold_starts(x0));
        }
        let domain = self.domain();
        let settings = BfgsSettings {
            gradient_tolerance: self.cfg.solver.gradient_tolerance,
            max_iterations: self.cfg.solver.max_iterations,
            ..Default::default()
        };
        let mut best: Option<optim::Minimum> = None;
        let mut total = nested_iterations;
        let mut warm_iterations = None;
        for (k, mut z) in starts.into_iter().enumerate() {
            self.clamp_dv(&mut z);
            let m = optim::minimize(
                |z| self.cost(x0, z),
                |z| self.cost_gradient(x0, z),
                &z,
                &domain,
                &settings,
            );
            total += m.iterations;
            if k == 0 && has_warm {
                warm_iterations = Some(m.iterations);
            }
            let better = match &best {
                None => true,
                Some(b) => m.value < b.value || (!b.value.is_finite() && m.value.is_finite()),
            };
            if better {
                best = Some(m);
            }
        }
        let best = best.expect("at least one start");
        if !best.value.is_finite() {
            return Err(Error::NoConvergence {
                what: "horizon solve",
                iterations: total,
                residual: best.value,
            });
        }
        let mut sol = self.unpack(&best.x, best.value);
        sol.iterations = best.iterations;
        sol.total_iterations = total;
        sol.warm_iterations = warm_iterations;
        sol.converged = best.converged;
        sol.wall_time = clock.elapsed().as_secs_f64();
        Ok(sol)
    }

    /// Solves and returns the first impulse with the full plan.
    pub fn controller_step(
        &self,
        x0: &StateVector,
        warm: Option<&HorizonSolution>,
    ) -> Result<(Vector3<f64>, HorizonSolution)> {
        let sol = self.solve(x0, warm)?;
        Ok((sol.dv[0], sol))
    }

    /// Cost of an explicit plan.
    pub fn cost_eval(&self, x0: &StateVector, dv: &[Vector3<f64>], chi: &[f64], nu: &[f64]) -> Result<f64> {
        let np = self.cfg.np;
        if dv.len() != self.cfg.nc || nu.len() != np + 1 {
            return Err(Error::InvalidInput(format!(
                "expected {} impulses and {} angles",
                self.cfg.nc,
                np + 1
            )));
        }
        let chi: Vec<f64> = match self.cfg.mode {
            ControllerMode::FixedOrbit { chi_ref } => vec![chi_ref],
            ControllerMode::FixedChi if chi.len() == 1 => chi.to_vec(),
            ControllerMode::VariableChi if chi.len() == np => chi.to_vec(),
            _ => {
                return Err(Error::InvalidInput(format!(
                    "{} chi value(s) do not match mode {}",
                    chi.len(),
                    self.cfg.mode.name()
                )))
            }
        };
        let [lo, hi] = self.cfg.chi_bounds;
        if let Some(&c) = chi.iter().find(|&&c| !(c >= lo && c <= hi)) {
            return Err(Error::ChiOutOfRange { chi: c, lo, hi });
        }
        let d = Decision { dv: dv.to_vec(), chi, nu };
        Ok(self.cost_parts(x0, &d).unwrap_or(f64::INFINITY))
    }

    /// Packs a solution into the decision vector layout.
    pub fn decision_vector(&self, sol: &HorizonSolution) -> Vec<f64> {
        self.pack(&sol.dv, &sol.chi, &sol.nu)
    }
}

/// Cost of an explicit plan; see [`Nmpc::cost_eval`].
pub fn cost_eval(
    x0: &StateVector,
    dv: &[Vector3<f64>],
    chi: &[f64],
    nu: &[f64],
    model: &MprModel,
    cfg: &NmpcConfig,
) -> Result<f64> {
    Nmpc::new(model, cfg)?.cost_eval(x0, dv, chi, nu)
}

pub fn solve(
    x0: &StateVector,
    model: &MprModel,
    cfg: &NmpcConfig,
    warm: Option<&HorizonSolution>,
) -> Result<HorizonSolution> {
    Nmpc::new(model, cfg)?.solve(x0, warm)
}

pub fn controller_step(
    x0: &StateVector,
    model: &MprModel,
    cfg: &NmpcConfig,
    warm: Option<&HorizonSolution>,
) -> Result<(Vector3<f64>, HorizonSolution)> {
    Nmpc::new(model, cfg)?.controller_step(x0, warm)
}
