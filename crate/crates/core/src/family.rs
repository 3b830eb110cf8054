//! Periodic orbit families near L1 and L2.
//!
//! Members are symmetric about the `xz`-plane: each one is stored by its
//! perpendicular crossing `(x, 0, z, 0, vy, 0)` on the Moon side of the
//! libration point, and the period is twice the time to the next crossing.
//! Families are built from a linear seed, refined with single shooting
//! and extended with pseudo-arclength continuation.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    self, libration_point, LibrationIndex, LibrationPoint, StateVector, Stm, SystemParams,
};
use crate::error::{Error, Result};
use crate::model::param;

/// Perilune radius below which a halo-branch member counts as an NRHO.
pub const NRHO_PERILUNE: f64 = 0.03;

/// Continuation stops before perilune drops below this radius (about
/// 2100 km above the lunar surface); closer passes need finer steps than
/// fixed-step RK4 at the default substep resolves.
pub const PERILUNE_FLOOR: f64 = 0.01;

/// Halo catalogs start at the first member whose Moon-side crossing sits at
/// least this far out of plane; closer to the bifurcation the `yz`
/// projection nearly passes through the libration point and `nu` jumps.
pub const HALO_MIN_OUT_OF_PLANE: f64 = 0.04;

/// Closure tolerance every catalog member must meet.
pub const CLOSURE_TOLERANCE: f64 = 1e-10;
/// Consecutive continuation steps allowed to miss `CLOSURE_TOLERANCE` before giving up.
pub const MAX_UNCLOSED: usize = 10;

pub const LYAPUNOV_MAX_AMPLITUDE: f64 = 0.05;
pub const HALO_MAX_AMPLITUDE: f64 = 0.02;

/// Lyapunov amplitude used to seed a Lyapunov family.
pub const LYAPUNOV_SEED_AMPLITUDE: f64 = 0.01;
/// Out-of-plane amplitude used to seed the halo branch at the bifurcation.
pub const HALO_SEED_AMPLITUDE: f64 = 2e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OrbitKind {
    Lyapunov,
    Halo,
    Nrho,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    North,
    South,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyTag {
    pub kind: OrbitKind,
    pub point: LibrationIndex,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch: Option<Branch>,
}

impl FamilyTag {
    pub fn lyapunov(point: LibrationIndex) -> Self {
        Self {
            kind: OrbitKind::Lyapunov,
            point,
            branch: None,
        }
    }

    pub fn halo(point: LibrationIndex, branch: Branch) -> Self {
        Self {
            kind: OrbitKind::Halo,
            point,
            branch: Some(branch),
        }
    }

    pub fn nrho(point: LibrationIndex, branch: Branch) -> Self {
        Self {
            kind: OrbitKind::Nrho,
            point,
            branch: Some(branch),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.branch) {
            (OrbitKind::Lyapunov, Some(_)) => {
                Err(Error::InvalidInput("Lyapunov families have no branch".into()))
            }
            (OrbitKind::Halo | OrbitKind::Nrho, None) => Err(Error::InvalidInput(
                "halo and NRHO families need a north/south branch".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn is_planar(&self) -> bool {
        self.kind == OrbitKind::Lyapunov
    }

    /// Same family on the other branch (identity for Lyapunov families).
    pub fn mirrored(&self) -> Self {
        Self {
            branch: self.branch.map(|b| match b {
                Branch::North => Branch::South,
                Branch::South => Branch::North,
            }),
            ..*self
        }
    }
}

impl fmt::Display for FamilyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let point = match self.point {
            LibrationIndex::L1 => "l1",
            LibrationIndex::L2 => "l2",
        };
        let kind = match self.kind {
            OrbitKind::Lyapunov => "lyapunov",
            OrbitKind::Halo => "halo",
            OrbitKind::Nrho => "nrho",
        };
        write!(f, "{point}-{kind}")?;
        match self.branch {
            Some(Branch::North) => write!(f, "-north"),
            Some(Branch::South) => write!(f, "-south"),
            None => Ok(()),
        }
    }
}

impl FromStr for FamilyTag {
    type Err = Error;

    /// Parses `l1-lyapunov`, `l2-halo-north`, `l1-nrho-south`, ...
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let parts: Vec<&str> = lower.split('-').collect();
        let bad = || Error::InvalidInput(format!("unrecognised family tag '{s}'"));
        let point = match parts.first() {
            Some(&"l1") => LibrationIndex::L1,
            Some(&"l2") => LibrationIndex::L2,
            _ => return Err(bad()),
        };
        let kind = match parts.get(1) {
            Some(&"lyapunov") | Some(&"lo") => OrbitKind::Lyapunov,
            Some(&"halo") | Some(&"ho") => OrbitKind::Halo,
            Some(&"nrho") => OrbitKind::Nrho,
            _ => return Err(bad()),
        };
        let branch = match parts.get(2) {
            None => None,
            Some(&"north") | Some(&"n") => Some(Branch::North),
            Some(&"south") | Some(&"s") => Some(Branch::South),
            _ => return Err(bad()),
        };
        if parts.len() > 3 {
            return Err(bad());
        }
        let tag = FamilyTag {
            kind,
            point,
            branch,
        };
        tag.validate()?;
        Ok(tag)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeriodicOrbit {
    pub tag: FamilyTag,
    pub x0: StateVector,
    pub period: f64,
    pub chi: f64,
}

impl PeriodicOrbit {
    /// `||X(T) - X(0)||_inf` with RK4 substeps no longer than `max_step`.
    pub fn closure_error(&self, max_step: f64, params: &SystemParams) -> Result<f64> {
        let n = dynamics::substeps_for(self.period, max_step);
        let end = dynamics::propagate(&self.x0, self.period, n, params)?;
        Ok((end - self.x0).amax())
    }

    /// Largest Jacobi-constant deviation from its initial value over one period.
    pub fn jacobi_drift(&self, max_step: f64, params: &SystemParams) -> Result<f64> {
        let n = dynamics::substeps_for(self.period, max_step);
        let h = self.period / n as f64;
        let c0 = dynamics::jacobi_constant(&self.x0, params)?;
        let mut x = self.x0;
        let mut worst: f64 = 0.0;
        for _ in 0..n {
            x = dynamics::rk4_step(&x, h, params)?;
            worst = worst.max((dynamics::jacobi_constant(&x, params)? - c0).abs());
        }
        Ok(worst)
    }

    /// Minimum distance to the Moon over one period.
    pub fn perilune(&self, max_step: f64, params: &SystemParams) -> Result<f64> {
        let n = dynamics::substeps_for(self.period, max_step);
        let h = self.period / n as f64;
        let moon = params.moon();
        let mut x = self.x0;
        let mut best = (dynamics::position(&x) - moon).norm();
        for _ in 0..n {
            x = dynamics::rk4_step(&x, h, params)?;
            best = best.min((dynamics::position(&x) - moon).norm());
        }
        Ok(best)
    }

    pub fn mirrored(&self) -> Self {
        let mut x0 = self.x0;
        x0[2] = -x0[2];
        x0[5] = -x0[5];
        Self {
            tag: self.tag.mirrored(),
            x0,
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectorSettings {
    /// Longest RK4 substep used while shooting.
    pub max_step: f64,
    /// Target on the crossing velocity components.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for CorrectorSettings {
    fn default() -> Self {
        Self {
            max_step: 5e-5,
            tolerance: 1e-12,
            max_iterations: 50,
        }
    }
}

/// Linearised planar frequency at a collinear point.
fn planar_frequency(lib: &LibrationPoint, params: &SystemParams) -> Result<(f64, f64)> {
    let jac = dynamics::jacobian(&lib.state(), params)?;
    let uxx = jac[(3, 0)];
    let uyy = jac[(4, 1)];
    let b = 4.0 - uxx - uyy;
    let omega2 = 0.5 * (b + (b * b - 4.0 * uxx * uyy).sqrt());
    let omega = omega2.sqrt();
    // y = -k x-amplitude sin(omega t)
    let k = (omega2 + uxx) / (2.0 * omega);
    Ok((omega, k))
}

/// Period of the linear planar oscillation about the libration point.
pub fn linear_period(point: LibrationIndex, params: &SystemParams) -> Result<f64> {
    let lib = libration_point(point, params)?;
    Ok(2.0 * PI / planar_frequency(&lib, params)?.0)
}

/// Approximate periodic initial state.
///
/// Lyapunov: the planar centre mode of the linearised flow, placed at
/// `amplitude` on the Moon side. Halo/NRHO: the bifurcating Lyapunov orbit
/// pushed out of plane by `amplitude` at its Moon-side crossing.
pub fn initial_guess(tag: &FamilyTag, amplitude: f64, params: &SystemParams) -> Result<StateVector> {
    tag.validate()?;
    let lib = libration_point(tag.point, params)?;
    match tag.kind {
        OrbitKind::Lyapunov => {
            if !(0.0..=LYAPUNOV_MAX_AMPLITUDE).contains(&amplitude) {
                return Err(Error::AmplitudeOutOfRange {
                    amplitude,
                    max: LYAPUNOV_MAX_AMPLITUDE,
                });
            }
            let (omega, k) = planar_frequency(&lib, params)?;
            let ax = lib.moonward() * amplitude;
            Ok(StateVector::new(
                lib.position[0] + ax,
                0.0,
                0.0,
                0.0,
                -k * ax * omega,
                0.0,
            ))
        }
        OrbitKind::Halo | OrbitKind::Nrho => {
            if !(0.0..=HALO_MAX_AMPLITUDE).contains(&amplitude) {
                return Err(Error::AmplitudeOutOfRange {
                    amplitude,
                    max: HALO_MAX_AMPLITUDE,
                });
            }
            let settings = CorrectorSettings {
                max_step: dynamics::DEFAULT_STEP,
                ..Default::default()
            };
            let bif = halo_bifurcation(tag.point, &settings, params)?;
            let mut x = bif.x0;
            // A northern member peaks above the plane on the far side, so its
            // Moon-side crossing lies below it.
            x[2] = match tag.branch {
                Some(Branch::South) => amplitude,
                _ => -amplitude,
            };
            Ok(x)
        }
    }
}

fn project_symmetric(guess: &StateVector, planar: bool) -> StateVector {
    let mut x = *guess;
    x[1] = 0.0;
    x[3] = 0.0;
    x[5] = 0.0;
    if planar {
        x[2] = 0.0;
    }
    x
}

/// Propagates until the next `y = 0` crossing; returns the crossing state,
/// its STM and the crossing time.
fn propagate_to_crossing(
    x0: &StateVector,
    max_time: f64,
    max_step: f64,
    params: &SystemParams,
) -> Result<(StateVector, Stm, f64)> {
    let h = max_step;
    let mut x = *x0;
    let mut phi = Stm::identity();
    let mut t = 0.0;
    let (mut x_next, mut phi_next) = dynamics::rk4_step_with_stm(&x, &phi, h, params)?;
    let sign = x_next[1].signum();
    if sign == 0.0 {
        return Err(Error::CrossingNotFound(h));
    }
    loop {
        x = x_next;
        phi = phi_next;
        t += h;
        if t > max_time {
            return Err(Error::CrossingNotFound(max_time));
        }
        (x_next, phi_next) = dynamics::rk4_step_with_stm(&x, &phi, h, params)?;
        if x_next[1] * sign <= 0.0 {
            break;
        }
    }
    // Event location: bisection on the partial step length.
    let (mut lo, mut hi) = (0.0, h);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        let y = dynamics::rk4_step(&x, mid, params)?[1];
        if y * sign > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    let (xc, phic) = dynamics::rk4_step_with_stm(&x, &phi, tau, params)?;
    Ok((xc, phic, t + tau))
}

/// Result of a symmetric single-shooting correction.
#[derive(Clone, Copy, Debug)]
pub struct Correction {
    pub orbit: PeriodicOrbit,
    /// Newton updates applied (0 when the guess already met the tolerance).
    pub iterations: usize,
    pub residual: f64,
}

/// Symmetric single shooting with crossing-time-corrected Newton updates.
///
/// Planar members vary `vy0` to null `vx` at the crossing; spatial members
/// vary `(x0, vy0)` at fixed `z0` to null `(vx, vz)`.
pub fn correct(
    guess: &StateVector,
    tag: &FamilyTag,
    settings: &CorrectorSettings,
    params: &SystemParams,
) -> Result<Correction> {
    tag.validate()?;
    let lib = libration_point(tag.point, params)?;
    let planar = tag.is_planar();
    let max_time = 2.0 * linear_period(tag.point, params)?;
    let (free, targets): (&[usize], &[usize]) = if planar {
        (&[4], &[3])
    } else {
        (&[0, 4], &[3, 5])
    };
    let mut x0 = project_symmetric(guess, planar);
    let mut residual = f64::INFINITY;
    for iteration in 0..=settings.max_iterations {
        let (xc, phi, tc) = propagate_to_crossing(&x0, max_time, settings.max_step, params)?;
        residual = targets.iter().map(|&r| xc[r].abs()).fold(0.0, f64::max);
        if residual < settings.tolerance {
            let period = 2.0 * tc;
            let anchor = param::orbit_anchor(&x0, period, tag, &lib, settings.max_step, params)?;
            return Ok(Correction {
                orbit: PeriodicOrbit {
                    tag: *tag,
                    x0,
                    period,
                    chi: anchor.chi,
                },
                iterations: iteration,
                residual,
            });
        }
        if iteration == settings.max_iterations {
            break;
        }
        let f = dynamics::eom(&xc, params)?;
        let m = targets.len();
        let mut jac = DMatrix::zeros(m, m);
        let mut rhs = DVector::zeros(m);
        for (i, &r) in targets.iter().enumerate() {
            rhs[i] = -xc[r];
            for (j, &c) in free.iter().enumerate() {
                jac[(i, j)] = phi[(r, c)] - f[r] / f[1] * phi[(1, c)];
            }
        }
        let delta = jac
            .lu()
            .solve(&rhs)
            .ok_or(Error::NoConvergence {
                what: "differential correction (singular Jacobian)",
                iterations: iteration,
                residual,
            })?;
        for (j, &c) in free.iter().enumerate() {
            x0[c] += delta[j];
        }
    }
    Err(Error::NoConvergence {
        what: "differential correction",
        iterations: settings.max_iterations,
        residual,
    })
}

pub fn differential_correction(
    guess: &StateVector,
    tag: &FamilyTag,
    settings: &CorrectorSettings,
    params: &SystemParams,
) -> Result<PeriodicOrbit> {
    correct(guess, tag, settings, params).map(|c| c.orbit)
}

/// Trace of the out-of-plane block of a planar orbit's monodromy matrix.
fn vertical_trace(orbit: &PeriodicOrbit, max_step: f64, params: &SystemParams) -> Result<f64> {
    let n = dynamics::substeps_for(orbit.period, max_step);
    let (_, m) = dynamics::propagate_with_stm(&orbit.x0, orbit.period, n, params)?;
    Ok(m[(2, 2)] + m[(5, 5)])
}

/// The Lyapunov member where the halo family branches off: the vertical
/// monodromy pair passes through +1 (trace 2).
pub fn halo_bifurcation(
    point: LibrationIndex,
    settings: &CorrectorSettings,
    params: &SystemParams,
) -> Result<PeriodicOrbit> {
    let tag = FamilyTag::lyapunov(point);
    let lib = libration_point(point, params)?;
    let s = lib.moonward();
    let lyapunov_at = |amplitude: f64, vy_guess: f64| -> Result<PeriodicOrbit> {
        let mut guess = StateVector::zeros();
        guess[0] = lib.position[0] + s * amplitude;
        guess[4] = vy_guess;
        differential_correction(&guess, &tag, settings, params)
    };
    let mut amplitude = 0.005;
    let mut orbit = differential_correction(&initial_guess(&tag, amplitude, params)?, &tag, settings, params)?;
    let mut g = vertical_trace(&orbit, settings.max_step, params)? - 2.0;
    let da = 0.005;
    let (mut lo, mut hi) = loop {
        let next_amp = amplitude + da;
        if next_amp > 0.3 {
            return Err(Error::NoConvergence {
                what: "halo bifurcation search",
                iterations: (0.3 / da) as usize,
                residual: g,
            });
        }
        let next = lyapunov_at(next_amp, orbit.x0[4] * next_amp / amplitude)?;
        let g_next = vertical_trace(&next, settings.max_step, params)? - 2.0;
        if g.signum() != g_next.signum() {
            break ((amplitude, orbit, g), (next_amp, next));
        }
        amplitude = next_amp;
        orbit = next;
        g = g_next;
    };
    for _ in 0..40 {
        if hi.0 - lo.0 < 1e-9 {
            break;
        }
        let mid = 0.5 * (lo.0 + hi.0);
        let mid_orbit = lyapunov_at(mid, 0.5 * (lo.1.x0[4] + hi.1.x0[4]))?;
        let g_mid = vertical_trace(&mid_orbit, settings.max_step, params)? - 2.0;
        if g_mid.signum() == lo.2.signum() {
            lo = (mid, mid_orbit, g_mid);
        } else {
            hi = (mid, mid_orbit);
        }
    }
    Ok(lo.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuationSettings {
    /// Nominal pseudo-arclength step.
    pub step: f64,
    /// Give up once the step has been halved below `step * min_step_ratio`.
    pub min_step_ratio: f64,
    /// Doubling never takes the step above `step * max_step_ratio`.
    pub max_step_ratio: f64,
    /// A corrector run with at most this many Newton iterations is "easy".
    pub easy_iterations: usize,
    /// Consecutive easy steps before the step is doubled.
    pub easy_streak: usize,
    pub max_newton: usize,
}

impl Default for ContinuationSettings {
    fn default() -> Self {
        Self {
            step: 5e-3,
            min_step_ratio: 1.0 / 64.0,
            max_step_ratio: 1.0,
            easy_iterations: 3,
            easy_streak: 3,
            max_newton: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogTolerances {
    pub closure: f64,
    pub correction: f64,
    pub max_step: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FamilyCatalog {
    pub tag: FamilyTag,
    pub mu: f64,
    pub tolerances: CatalogTolerances,
    /// Seconds since the Unix epoch at generation time.
    pub generated_at: u64,
    pub members: Vec<PeriodicOrbit>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MemberRecord {
    x0: [f64; 6],
    period: f64,
    chi: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogFile {
    mu: f64,
    tag: FamilyTag,
    tolerances: CatalogTolerances,
    #[serde(default)]
    generated_at: u64,
    members: Vec<MemberRecord>,
}

impl FamilyCatalog {
    pub fn new(tag: FamilyTag, params: &SystemParams, settings: &CorrectorSettings) -> Self {
        let generated_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            tag,
            mu: params.mu,
            tolerances: CatalogTolerances {
                closure: CLOSURE_TOLERANCE,
                correction: settings.tolerance,
                max_step: settings.max_step,
            },
            generated_at,
            members: Vec::new(),
        }
    }

    pub fn params(&self) -> SystemParams {
        SystemParams { mu: self.mu }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn chi_range(&self) -> Option<(f64, f64)> {
        Some((self.members.first()?.chi, self.members.last()?.chi))
    }

    /// Tag agreement and strictly increasing chi.
    pub fn validate(&self) -> Result<()> {
        self.tag.validate()?;
        for m in &self.members {
            if m.tag != self.tag {
                return Err(Error::InvalidInput(format!(
                    "member tagged {} in a {} catalog",
                    m.tag, self.tag
                )));
            }
        }
        for w in self.members.windows(2) {
            if !(w[1].chi > w[0].chi) {
                return Err(Error::InvalidInput(format!(
                    "chi not strictly increasing ({} then {})",
                    w[0].chi, w[1].chi
                )));
            }
        }
        Ok(())
    }

    pub fn mirrored(&self) -> Self {
        Self {
            tag: self.tag.mirrored(),
            members: self.members.iter().map(PeriodicOrbit::mirrored).collect(),
            ..self.clone()
        }
    }

    fn to_file(&self) -> CatalogFile {
        CatalogFile {
            mu: self.mu,
            tag: self.tag,
            tolerances: self.tolerances.clone(),
            generated_at: self.generated_at,
            members: self
                .members
                .iter()
                .map(|m| MemberRecord {
                    x0: m.x0.into(),
                    period: m.period,
                    chi: m.chi,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CatalogFile = serde_json::from_str(text)?;
        let catalog = Self {
            tag: file.tag,
            mu: file.mu,
            tolerances: file.tolerances,
            generated_at: file.generated_at,
            members: file
                .members
                .into_iter()
                .map(|m| PeriodicOrbit {
                    tag: file.tag,
                    x0: StateVector::from(m.x0),
                    period: m.period,
                    chi: m.chi,
                })
                .collect(),
        };
        catalog.params().validate()?;
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Catalog plus the reason continuation stopped early, if it did.
#[derive(Clone, Debug)]
pub struct Continuation {
    pub catalog: FamilyCatalog,
    pub aborted: Option<String>,
}

impl Continuation {
    pub fn is_complete(&self) -> bool {
        self.aborted.is_none()
    }
}

/// Free components of the initial state in the continuation unknown vector;
/// the half period is appended last.
fn free_components(planar: bool) -> &'static [usize] {
    if planar {
        &[0, 4]
    } else {
        &[0, 2, 4]
    }
}

fn residual_rows(planar: bool) -> &'static [usize] {
    if planar {
        &[1, 3]
    } else {
        &[1, 3, 5]
    }
}

fn unknowns_of(orbit: &PeriodicOrbit) -> DVector<f64> {
    let cols = free_components(orbit.tag.is_planar());
    let mut u = DVector::zeros(cols.len() + 1);
    for (i, &c) in cols.iter().enumerate() {
        u[i] = orbit.x0[c];
    }
    u[cols.len()] = 0.5 * orbit.period;
    u
}

fn state_of(u: &DVector<f64>, planar: bool) -> StateVector {
    let mut x = StateVector::zeros();
    for (i, &c) in free_components(planar).iter().enumerate() {
        x[c] = u[i];
    }
    x
}

/// Fixed-time symmetric shooting residual `(y, vx[, vz])` at the half period
/// and its Jacobian with respect to the unknowns.
fn shooting_residual(
    u: &DVector<f64>,
    planar: bool,
    max_step: f64,
    params: &SystemParams,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let cols = free_components(planar);
    let rows = residual_rows(planar);
    let half = u[cols.len()];
    if !(half > 0.0) {
        return Err(Error::InvalidInput(format!("non-positive half period {half}")));
    }
    let x0 = state_of(u, planar);
    let (xt, phi) = dynamics::propagate_with_stm(&x0, half, dynamics::substeps_for(half, max_step), params)?;
    let f = dynamics::eom(&xt, params)?;
    let mut res = DVector::zeros(rows.len());
    let mut jac = DMatrix::zeros(rows.len(), cols.len() + 1);
    for (i, &r) in rows.iter().enumerate() {
        res[i] = xt[r];
        for (j, &c) in cols.iter().enumerate() {
            jac[(i, j)] = phi[(r, c)];
        }
        jac[(i, cols.len())] = f[r];
    }
    Ok((res, jac))
}

/// Unit null vector of an `m x (m+1)` matrix by signed cofactors.
fn null_vector(jac: &DMatrix<f64>) -> DVector<f64> {
    let n = jac.ncols();
    let mut t = DVector::zeros(n);
    for i in 0..n {
        let minor = jac.clone().remove_column(i);
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        t[i] = sign * minor.determinant();
    }
    let norm = t.norm();
    t / norm
}

fn orbit_from_unknowns(
    u: &DVector<f64>,
    tag: &FamilyTag,
    lib: &LibrationPoint,
    max_step: f64,
    params: &SystemParams,
) -> Result<PeriodicOrbit> {
    let planar = tag.is_planar();
    let x0 = state_of(u, planar);
    let period = 2.0 * u[free_components(planar).len()];
    let anchor = param::orbit_anchor(&x0, period, tag, lib, max_step, params)?;
    Ok(PeriodicOrbit {
        tag: *tag,
        x0,
        period,
        chi: anchor.chi,
    })
}

/// One predictor-corrector step. Returns the new unknowns and the number of
/// Newton iterations, or `None` when the corrector fails.
fn pac_step(
    u_prev: &DVector<f64>,
    tangent: &DVector<f64>,
    ds: f64,
    planar: bool,
    corrector: &CorrectorSettings,
    settings: &ContinuationSettings,
    params: &SystemParams,
) -> Option<(DVector<f64>, usize)> {
    let n = u_prev.len();
    let mut u = u_prev + tangent * ds;
    let mut polished = false;
    for iteration in 0..=settings.max_newton + 1 {
        let (res, jac) = shooting_residual(&u, planar, corrector.max_step, params).ok()?;
        let arc = tangent.dot(&(&u - u_prev)) - ds;
        if res.amax() < corrector.tolerance && arc.abs() < corrector.tolerance {
            if polished {
                return Some((u, iteration));
            }
            // one extra update pushes the residual to the roundoff floor
            polished = true;
        }
        if iteration == settings.max_newton && !polished {
            return None;
        }
        let mut a = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        a.rows_mut(0, n - 1).copy_from(&jac);
        a.row_mut(n - 1).copy_from(&tangent.transpose());
        rhs.rows_mut(0, n - 1).copy_from(&(-&res));
        rhs[n - 1] = -arc;
        let delta = a.lu().solve(&rhs)?;
        u += delta;
        if !u.iter().all(|v| v.is_finite()) {
            return None;
        }
    }
    None
}

/// Pseudo-arclength continuation from a corrected seed.
///
/// `accept` sees each new member and may stop continuation (returning
/// `Some(reason)`); members it rejects are not added. Members that miss
/// [`CLOSURE_TOLERANCE`] are stepped over without reaching `accept`.
pub fn pac_continue_with<F>(
    seed: &PeriodicOrbit,
    count: usize,
    corrector: &CorrectorSettings,
    settings: &ContinuationSettings,
    params: &SystemParams,
    mut accept: F,
) -> Result<Continuation>
where
    F: FnMut(&PeriodicOrbit) -> Result<Acceptance>,
{
    seed.tag.validate()?;
    if count == 0 {
        return Err(Error::InvalidInput("continuation count must be at least 1".into()));
    }
    if !(settings.step > 0.0) {
        return Err(Error::Config("continuation step must be positive".into()));
    }
    let closure = seed.closure_error(corrector.max_step, params)?;
    if closure > CLOSURE_TOLERANCE {
        return Err(Error::InvalidInput(format!(
            "seed is not closed (residual {closure:e})"
        )));
    }
    let lib = libration_point(seed.tag.point, params)?;
    let planar = seed.tag.is_planar();
    let mut catalog = FamilyCatalog::new(seed.tag, params, corrector);
    catalog.members.push(*seed);

    let mut u = unknowns_of(seed);
    let (_, jac) = shooting_residual(&u, planar, corrector.max_step, params)?;
    let mut tangent = null_vector(&jac);
    let mut oriented = false;
    let mut ds = settings.step;
    let ds_min = settings.step * settings.min_step_ratio;
    let ds_max = settings.step * settings.max_step_ratio;
    let mut streak = 0;
    let mut unclosed = 0;
    let mut aborted = None;

    while catalog.members.len() < count {
        let Some((u_new, iterations)) =
            pac_step(&u, &tangent, ds, planar, corrector, settings, params)
        else {
            ds *= 0.5;
            streak = 0;
            if ds < ds_min {
                aborted = Some(format!(
                    "corrector failed with step below {ds_min:e} after {} members",
                    catalog.members.len()
                ));
                break;
            }
            continue;
        };
        let member = orbit_from_unknowns(&u_new, &seed.tag, &lib, corrector.max_step, params)?;
        let prev_chi = catalog.members.last().map(|m| m.chi).unwrap_or(seed.chi);
        if !oriented {
            oriented = true;
            if member.chi < prev_chi {
                tangent = -tangent;
                continue;
            }
        }
        if !(member.chi > prev_chi) {
            aborted = Some(format!(
                "chi stopped increasing at {} after {} members",
                member.chi,
                catalog.members.len()
            ));
            break;
        }
        let closed = member.closure_error(corrector.max_step, params)? <= CLOSURE_TOLERANCE;
        unclosed = if closed { 0 } else { unclosed + 1 };
        if unclosed > MAX_UNCLOSED {
            aborted = Some(format!(
                "{unclosed} consecutive members missed the closure tolerance after {} members",
                catalog.members.len()
            ));
            break;
        }
        let verdict = if closed { accept(&member)? } else { Acceptance::Skip };
        match verdict {
            Acceptance::Keep => catalog.members.push(member),
            Acceptance::Skip => {}
            Acceptance::Stop(reason) => {
                aborted = Some(reason);
                break;
            }
            Acceptance::Done => break,
        }
        let (_, jac) = shooting_residual(&u_new, planar, corrector.max_step, params)?;
        let mut t_new = null_vector(&jac);
        if t_new.dot(&tangent) < 0.0 {
            t_new = -t_new;
        }
        tangent = t_new;
        u = u_new;
        if iterations <= settings.easy_iterations {
            streak += 1;
            if streak >= settings.easy_streak {
                ds = (ds * 2.0).min(ds_max);
                streak = 0;
            }
        } else {
            streak = 0;
        }
    }
    Ok(Continuation { catalog, aborted })
}

/// Verdict of a continuation filter on a freshly computed member.
#[derive(Clone, Debug, PartialEq)]
pub enum Acceptance {
    Keep,
    /// Continue past this member without storing it.
    Skip,
    /// Stop, flagging the catalog as partial.
    Stop(String),
    /// Stop; the catalog is complete.
    Done,
}

/// Pseudo-arclength continuation producing `count` members (the seed first).
pub fn pac_continue(
    seed: &PeriodicOrbit,
    count: usize,
    corrector: &CorrectorSettings,
    settings: &ContinuationSettings,
    params: &SystemParams,
) -> Result<Continuation> {
    pac_continue_with(seed, count, corrector, settings, params, |_| Ok(Acceptance::Keep))
}

/// Corrected seed of a family: the linear Lyapunov guess, or the halo branch
/// just off its bifurcation.
pub fn family_seed(
    tag: &FamilyTag,
    corrector: &CorrectorSettings,
    params: &SystemParams,
) -> Result<PeriodicOrbit> {
    tag.validate()?;
    match tag.kind {
        OrbitKind::Lyapunov => {
            let guess = initial_guess(tag, LYAPUNOV_SEED_AMPLITUDE, params)?;
            differential_correction(&guess, tag, corrector, params)
        }
        OrbitKind::Halo | OrbitKind::Nrho => {
            let north = FamilyTag::halo(tag.point, Branch::North);
            let guess = initial_guess(&north, HALO_SEED_AMPLITUDE, params)?;
            differential_correction(&guess, &north, corrector, params)
        }
    }
}

/// Both catalogs cut from one continuation of the northern halo branch.
#[derive(Clone, Debug)]
pub struct HaloBranch {
    pub halo: Continuation,
    pub nrho: Continuation,
}

/// Continues the northern halo branch from its bifurcation, splitting
/// members at [`NRHO_PERILUNE`] and stopping at [`PERILUNE_FLOOR`] or once
/// both requested counts are filled.
pub fn generate_halo_branch(
    point: LibrationIndex,
    halo_count: usize,
    nrho_count: usize,
    corrector: &CorrectorSettings,
    settings: &ContinuationSettings,
    params: &SystemParams,
) -> Result<HaloBranch> {
    let north = FamilyTag::halo(point, Branch::North);
    let seed = family_seed(&north, corrector, params)?;
    let max_step = corrector.max_step;
    let mut halo = Vec::new();
    let mut nrho = Vec::new();
    let cont = pac_continue_with(&seed, usize::MAX, corrector, settings, params, |m| {
        let perilune = m.perilune(max_step, params)?;
        if perilune < PERILUNE_FLOOR {
            return Ok(Acceptance::Done);
        }
        if perilune >= NRHO_PERILUNE {
            if m.x0[2].abs() < HALO_MIN_OUT_OF_PLANE {
                return Ok(Acceptance::Skip);
            }
            if halo.len() < halo_count {
                halo.push(*m);
            } else if nrho_count == 0 {
                return Ok(Acceptance::Done);
            }
        } else {
            if nrho.len() >= nrho_count {
                return Ok(Acceptance::Done);
            }
            nrho.push(PeriodicOrbit {
                tag: FamilyTag::nrho(point, Branch::North),
                ..*m
            });
        }
        Ok(Acceptance::Skip)
    })?;
    let split = |tag: FamilyTag, members: Vec<PeriodicOrbit>| {
        let mut catalog = FamilyCatalog::new(tag, params, corrector);
        catalog.members = members;
        Continuation {
            catalog,
            aborted: cont.aborted.clone(),
        }
    };
    Ok(HaloBranch {
        halo: split(north, halo),
        nrho: split(FamilyTag::nrho(point, Branch::North), nrho),
    })
}

/// Generates up to `count` members of a family.
///
/// Halo and NRHO catalogs are cut from the northern halo branch; southern
/// catalogs are mirror images. Every family ends at [`PERILUNE_FLOOR`].
pub fn generate_family(
    tag: &FamilyTag,
    count: usize,
    corrector: &CorrectorSettings,
    settings: &ContinuationSettings,
    params: &SystemParams,
) -> Result<Continuation> {
    tag.validate()?;
    let mut result = match tag.kind {
        OrbitKind::Lyapunov => {
            let seed = family_seed(tag, corrector, params)?;
            let max_step = corrector.max_step;
            return pac_continue_with(&seed, count, corrector, settings, params, |m| {
                Ok(if m.perilune(max_step, params)? < PERILUNE_FLOOR {
                    Acceptance::Done
                } else {
                    Acceptance::Keep
                })
            });
        }
        OrbitKind::Halo => generate_halo_branch(tag.point, count, 0, corrector, settings, params)?.halo,
        OrbitKind::Nrho => generate_halo_branch(tag.point, 0, count, corrector, settings, params)?.nrho,
    };
    if tag.branch == Some(Branch::South) {
        result.catalog = result.catalog.mirrored();
    }
    Ok(result)
}

/// `n` states at uniformly spaced times in `[0, period)`.
///
/// Propagation halves its substep (down to 1/64 of the start value) when it
/// runs into the singularity guard.
pub fn sample_orbit(
    orbit: &PeriodicOrbit,
    n: usize,
    max_step: f64,
    params: &SystemParams,
) -> Result<Vec<(f64, StateVector)>> {
    if n < 2 {
        return Err(Error::InvalidInput("sample_orbit needs n >= 2".into()));
    }
    let dt = orbit.period / n as f64;
    let mut step = max_step;
    'refine: for _ in 0..7 {
        let substeps = dynamics::substeps_for(dt, step);
        let mut out = Vec::with_capacity(n);
        let mut x = orbit.x0;
        out.push((0.0, x));
        for k in 1..n {
            match dynamics::propagate(&x, dt, substeps, params) {
                Ok(next) => x = next,
                Err(Error::Singularity { .. }) => {
                    step *= 0.5;
                    continue 'refine;
                }
                Err(e) => return Err(e),
            }
            out.push((k as f64 * dt, x));
        }
        return Ok(out);
    }
    Err(Error::Singularity {
        r1: f64::NAN,
        r2: f64::NAN,
        radius: dynamics::SINGULARITY_RADIUS,
    })
}
