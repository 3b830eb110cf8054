//! Dimensionless Earth-Moon CR3BP in the rotating barycentric frame.
//!
//! Earth sits at `(-mu, 0, 0)`, the Moon at `(1 - mu, 0, 0)`, the
//! Earth-Moon distance and the Moon's orbital rate are both 1. All
//! propagation is classical fixed-step RK4 so that every result is a
//! deterministic function of its inputs.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(x, y, z, vx, vy, vz)`.
pub type StateVector = Vector6<f64>;

/// State transition matrix `dX(t)/dX(0)`.
pub type Stm = Matrix6<f64>;

/// Mass ratio used throughout the Earth-Moon examples.
pub const EARTH_MOON_MU: f64 = 0.01215;

/// States closer than this to either primary are rejected.
pub const SINGULARITY_RADIUS: f64 = 1e-9;

/// Default RK4 substep in nondimensional time.
pub const DEFAULT_STEP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemParams {
    pub mu: f64,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self { mu: EARTH_MOON_MU }
    }
}

impl SystemParams {
    pub fn new(mu: f64) -> Result<Self> {
        let params = Self { mu };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu < 0.5) {
            return Err(Error::Config(format!("mu must lie in (0, 0.5), got {}", self.mu)));
        }
        Ok(())
    }

    pub fn earth(&self) -> Vector3<f64> {
        Vector3::new(-self.mu, 0.0, 0.0)
    }

    pub fn moon(&self) -> Vector3<f64> {
        Vector3::new(1.0 - self.mu, 0.0, 0.0)
    }
}

fn primary_distances(state: &StateVector, mu: f64) -> Result<(f64, f64)> {
    if !state.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("state"));
    }
    let (x, y, z) = (state[0], state[1], state[2]);
    let yz2 = y * y + z * z;
    let r1 = ((x + mu).powi(2) + yz2).sqrt();
    let r2 = ((x - 1.0 + mu).powi(2) + yz2).sqrt();
    // A massless Moon (mu = 0, the two-body limit) exerts no force, so
    // proximity to it is harmless.
    if r1 < SINGULARITY_RADIUS || (mu > 0.0 && r2 < SINGULARITY_RADIUS) {
        return Err(Error::Singularity {
            r1,
            r2,
            radius: SINGULARITY_RADIUS,
        });
    }
    Ok((r1, r2))
}

/// Time derivative of the state under CR3BP gravity only.
pub fn eom(state: &StateVector, params: &SystemParams) -> Result<StateVector> {
    eom_forced(state, &Vector3::zeros(), params)
}

/// Equations of motion with an additional constant acceleration.
pub fn eom_forced(
    state: &StateVector,
    accel: &Vector3<f64>,
    params: &SystemParams,
) -> Result<StateVector> {
    let mu = params.mu;
    let (r1, r2) = primary_distances(state, mu)?;
    let (x, y, z) = (state[0], state[1], state[2]);
    let (vx, vy, vz) = (state[3], state[4], state[5]);
    let k1 = (1.0 - mu) / (r1 * r1 * r1);
    let k2 = if mu > 0.0 { mu / (r2 * r2 * r2) } else { 0.0 };
    let ax = 2.0 * vy + x - k1 * (x + mu) - k2 * (x - 1.0 + mu);
    let ay = -2.0 * vx + y - k1 * y - k2 * y;
    let az = -k1 * z - k2 * z;
    Ok(StateVector::new(
        vx,
        vy,
        vz,
        ax + accel[0],
        ay + accel[1],
        az + accel[2],
    ))
}

/// Jacobian of [`eom`] with respect to the state.
pub fn jacobian(state: &StateVector, params: &SystemParams) -> Result<Matrix6<f64>> {
    let mu = params.mu;
    let (r1, r2) = primary_distances(state, mu)?;
    let (y, z) = (state[1], state[2]);
    let d1 = state[0] + mu;
    let d2 = state[0] - 1.0 + mu;
    let a = (1.0 - mu) / r1.powi(3);
    let a5 = 3.0 * (1.0 - mu) / r1.powi(5);
    let (b, b5) = if mu > 0.0 {
        (mu / r2.powi(3), 3.0 * mu / r2.powi(5))
    } else {
        (0.0, 0.0)
    };

    let uxx = 1.0 - a - b + a5 * d1 * d1 + b5 * d2 * d2;
    let uyy = 1.0 - a - b + (a5 + b5) * y * y;
    let uzz = -a - b + (a5 + b5) * z * z;
    let uxy = a5 * d1 * y + b5 * d2 * y;
    let uxz = a5 * d1 * z + b5 * d2 * z;
    let uyz = (a5 + b5) * y * z;

    let mut jac = Matrix6::zeros();
    jac.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    jac.fixed_view_mut::<3, 3>(3, 0).copy_from(&Matrix3::new(
        uxx, uxy, uxz, //
        uxy, uyy, uyz, //
        uxz, uyz, uzz,
    ));
    jac[(3, 4)] = 2.0;
    jac[(4, 3)] = -2.0;
    Ok(jac)
}

/// `C = x^2 + y^2 + 2(1-mu)/r1 + 2mu/r2 - |v|^2`.
pub fn jacobi_constant(state: &StateVector, params: &SystemParams) -> Result<f64> {
    let mu = params.mu;
    let (r1, r2) = primary_distances(state, mu)?;
    let v2 = state.fixed_rows::<3>(3).norm_squared();
    let moon_term = if mu > 0.0 { 2.0 * mu / r2 } else { 0.0 };
    Ok(state[0] * state[0] + state[1] * state[1] + 2.0 * (1.0 - mu) / r1 + moon_term - v2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LibrationIndex {
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LibrationPoint {
    pub index: LibrationIndex,
    pub position: Vector3<f64>,
}

impl LibrationPoint {
    /// Sign of the x-direction pointing from this point toward the Moon.
    pub fn moonward(&self) -> f64 {
        match self.index {
            LibrationIndex::L1 => 1.0,
            LibrationIndex::L2 => -1.0,
        }
    }

    pub fn state(&self) -> StateVector {
        StateVector::new(self.position[0], 0.0, 0.0, 0.0, 0.0, 0.0)
    }
}

/// x-acceleration on the x-axis at rest; its roots are the collinear points.
pub(crate) fn collinear_residual(x: f64, mu: f64) -> f64 {
    let d1 = x + mu;
    let d2 = x - 1.0 + mu;
    x - (1.0 - mu) * d1 / d1.abs().powi(3) - mu * d2 / d2.abs().powi(3)
}

/// Bisection on the collinear equilibrium condition.
///
/// Brackets: L1 in `(0, 1 - mu)`, L2 in `(1 - mu, 2)`.
pub fn libration_point(index: LibrationIndex, params: &SystemParams) -> Result<LibrationPoint> {
    params.validate()?;
    let mu = params.mu;
    let moon = 1.0 - mu;
    let (mut lo, mut hi) = match index {
        LibrationIndex::L1 => (0.0, moon - 1e-15),
        LibrationIndex::L2 => (moon + 1e-15, 2.0),
    };
    let mut f_lo = collinear_residual(lo, mu);
    let f_hi = collinear_residual(hi, mu);
    if f_lo.signum() == f_hi.signum() {
        return Err(Error::NoConvergence {
            what: "libration point bisection",
            iterations: 0,
            residual: f_lo.abs().min(f_hi.abs()),
        });
    }
    let mut iterations = 0;
    while hi - lo > 1e-14 && iterations < 200 {
        let mid = 0.5 * (lo + hi);
        let f_mid = collinear_residual(mid, mu);
        if f_mid == 0.0 {
            lo = mid;
            hi = mid;
            break;
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }
    let x = 0.5 * (lo + hi);
    Ok(LibrationPoint {
        index,
        position: Vector3::new(x, 0.0, 0.0),
    })
}

/// Number of equal substeps no longer than `max_step` covering `dt`.
pub fn substeps_for(dt: f64, max_step: f64) -> usize {
    ((dt.abs() / max_step).ceil() as usize).max(1)
}

/// One classical RK4 step with a constant external acceleration.
pub fn rk4_step_forced(
    state: &StateVector,
    accel: &Vector3<f64>,
    h: f64,
    params: &SystemParams,
) -> Result<StateVector> {
    let k1 = eom_forced(state, accel, params)?;
    let k2 = eom_forced(&(state + k1 * (0.5 * h)), accel, params)?;
    let k3 = eom_forced(&(state + k2 * (0.5 * h)), accel, params)?;
    let k4 = eom_forced(&(state + k3 * h), accel, params)?;
    Ok(state + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0))
}

pub fn rk4_step(state: &StateVector, h: f64, params: &SystemParams) -> Result<StateVector> {
    rk4_step_forced(state, &Vector3::zeros(), h, params)
}

/// RK4 applied to the state and its variational equations together; the
/// returned matrix is the exact Jacobian of the discrete step.
pub fn rk4_step_with_stm(
    state: &StateVector,
    stm: &Stm,
    h: f64,
    params: &SystemParams,
) -> Result<(StateVector, Stm)> {
    let k1 = eom(state, params)?;
    let m1 = jacobian(state, params)? * stm;
    let s2 = state + k1 * (0.5 * h);
    let k2 = eom(&s2, params)?;
    let m2 = jacobian(&s2, params)? * (stm + m1 * (0.5 * h));
    let s3 = state + k2 * (0.5 * h);
    let k3 = eom(&s3, params)?;
    let m3 = jacobian(&s3, params)? * (stm + m2 * (0.5 * h));
    let s4 = state + k3 * h;
    let k4 = eom(&s4, params)?;
    let m4 = jacobian(&s4, params)? * (stm + m3 * h);
    let w = h / 6.0;
    Ok((
        state + (k1 + (k2 + k3) * 2.0 + k4) * w,
        stm + (m1 + (m2 + m3) * 2.0 + m4) * w,
    ))
}

fn check_propagation_args(dt: f64, substeps: usize) -> Result<()> {
    if substeps == 0 {
        return Err(Error::Config("substeps must be at least 1".into()));
    }
    if !dt.is_finite() {
        return Err(Error::NonFinite("propagation interval"));
    }
    Ok(())
}

/// `substeps` RK4 steps of size `dt / substeps`.
pub fn propagate(
    state: &StateVector,
    dt: f64,
    substeps: usize,
    params: &SystemParams,
) -> Result<StateVector> {
    check_propagation_args(dt, substeps)?;
    if dt == 0.0 {
        return Ok(*state);
    }
    let h = dt / substeps as f64;
    let mut acc = CompensatedState::new(state);
    for _ in 0..substeps {
        let next = rk4_step(&acc.value, h, params)?;
        acc.add(&(next - acc.value));
    }
    Ok(acc.value)
}

pub fn propagate_with_stm(
    state: &StateVector,
    dt: f64,
    substeps: usize,
    params: &SystemParams,
) -> Result<(StateVector, Stm)> {
    check_propagation_args(dt, substeps)?;
    if dt == 0.0 {
        return Ok((*state, Stm::identity()));
    }
    let h = dt / substeps as f64;
    let mut acc = CompensatedState::new(state);
    let mut phi = Stm::identity();
    for _ in 0..substeps {
        let (next, next_phi) = rk4_step_with_stm(&acc.value, &phi, h, params)?;
        acc.add(&(next - acc.value));
        phi = next_phi;
    }
    Ok((acc.value, phi))
}

/// Kahan-compensated running state; long fixed-step arcs otherwise lose
/// several digits to accumulated rounding.
struct CompensatedState {
    value: StateVector,
    carry: StateVector,
}

impl CompensatedState {
    fn new(state: &StateVector) -> Self {
        Self {
            value: *state,
            carry: StateVector::zeros(),
        }
    }

    fn add(&mut self, increment: &StateVector) {
        let y = increment - self.carry;
        let t = self.value + y;
        self.carry = (t - self.value) - y;
        self.value = t;
    }
}

/// `N_T = Ts / Ts_hat`, which must be a positive integer.
pub fn control_ratio(ts: f64, ts_hat: f64) -> Result<usize> {
    if !(ts.is_finite() && ts_hat.is_finite() && ts > 0.0 && ts_hat > 0.0) {
        return Err(Error::Config(format!(
            "sampling times must be positive and finite (Ts = {ts}, Ts_hat = {ts_hat})"
        )));
    }
    if ts_hat > ts {
        return Err(Error::Config(format!("Ts_hat = {ts_hat} exceeds Ts = {ts}")));
    }
    let ratio = ts / ts_hat;
    let n = ratio.round();
    if (ratio - n).abs() > 1e-9 * ratio.max(1.0) || n < 1.0 {
        return Err(Error::Config(format!(
            "Ts / Ts_hat = {ratio} is not a positive integer"
        )));
    }
    Ok(n as usize)
}

/// Dual-rate transition: add the impulse to the velocity, take one RK4 step
/// of `ts_hat`, then coast `N_T - 1` more steps of `ts_hat`.
pub fn step_with_impulse(
    state: &StateVector,
    dv: &Vector3<f64>,
    ts: f64,
    ts_hat: f64,
    params: &SystemParams,
) -> Result<StateVector> {
    let n = control_ratio(ts, ts_hat)?;
    if !dv.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("impulse"));
    }
    let mut x = apply_impulse(state, dv);
    for _ in 0..n {
        x = rk4_step(&x, ts_hat, params)?;
    }
    Ok(x)
}

/// [`step_with_impulse`] plus the Jacobian of the result with respect to
/// the post-impulse state. Because the impulse is additive, the Jacobian
/// with respect to the impulse is the velocity block (last three columns).
pub fn step_with_impulse_stm(
    state: &StateVector,
    dv: &Vector3<f64>,
    ts: f64,
    ts_hat: f64,
    params: &SystemParams,
) -> Result<(StateVector, Stm)> {
    let n = control_ratio(ts, ts_hat)?;
    if !dv.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("impulse"));
    }
    let mut x = apply_impulse(state, dv);
    let mut phi = Stm::identity();
    for _ in 0..n {
        (x, phi) = rk4_step_with_stm(&x, &phi, ts_hat, params)?;
    }
    Ok((x, phi))
}

pub fn apply_impulse(state: &StateVector, dv: &Vector3<f64>) -> StateVector {
    let mut x = *state;
    x[3] += dv[0];
    x[4] += dv[1];
    x[5] += dv[2];
    x
}

pub fn position(state: &StateVector) -> Vector3<f64> {
    Vector3::new(state[0], state[1], state[2])
}

pub fn velocity(state: &StateVector) -> Vector3<f64> {
    Vector3::new(state[3], state[4], state[5])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> SystemParams {
        SystemParams::default()
    }

    #[test]
    fn two_body_limit() {
        let params = SystemParams { mu: 0.0 };
        let s = StateVector::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let d = eom(&s, &params).unwrap();
        assert_eq!(d, StateVector::zeros());
        assert_eq!(jacobi_constant(&s, &params).unwrap(), 3.0);
    }

    #[test]
    fn z_mirror_symmetry() {
        let s = StateVector::new(0.82, 0.03, 0.05, 0.01, -0.02, 0.04);
        let mut m = s;
        m[2] = -m[2];
        m[5] = -m[5];
        let d = eom(&s, &p()).unwrap();
        let dm = eom(&m, &p()).unwrap();
        assert_eq!(d[3], dm[3]);
        assert_eq!(d[4], dm[4]);
        assert_eq!(d[5], -dm[5]);
        assert_eq!(
            jacobi_constant(&s, &p()).unwrap(),
            jacobi_constant(&m, &p()).unwrap()
        );
    }

    #[test]
    fn singular_and_nonfinite_states_rejected() {
        let moon = SystemParams::default().moon();
        let s = StateVector::new(moon[0], 0.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(eom(&s, &p()), Err(Error::Singularity { .. })));
        let s = StateVector::new(f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(eom(&s, &p()), Err(Error::NonFinite(_))));
    }

    #[test]
    fn equilibrium_at_libration_points() {
        for idx in [LibrationIndex::L1, LibrationIndex::L2] {
            let l = libration_point(idx, &p()).unwrap();
            let d = eom(&l.state(), &p()).unwrap();
            assert!(d.amax() < 1e-12, "{idx:?}: {d}");
        }
    }

    #[test]
    fn vanishing_moon_limit() {
        let params = SystemParams { mu: 1e-9 };
        for idx in [LibrationIndex::L1, LibrationIndex::L2] {
            let l = libration_point(idx, &params).unwrap();
            assert!((l.position[0] - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn invalid_mu_rejected() {
        assert!(SystemParams::new(0.0).is_err());
        assert!(SystemParams::new(0.6).is_err());
        assert!(libration_point(LibrationIndex::L1, &SystemParams { mu: -1.0 }).is_err());
    }

    #[test]
    fn zero_interval_is_identity() {
        let s = StateVector::new(0.9, 0.01, 0.02, 0.0, 0.1, 0.0);
        assert_eq!(propagate(&s, 0.0, 7, &p()).unwrap(), s);
        let (x, phi) = propagate_with_stm(&s, 0.0, 3, &p()).unwrap();
        assert_eq!(x, s);
        assert_eq!(phi, Stm::identity());
        assert!(propagate(&s, 1.0, 0, &p()).is_err());
        assert!(propagate(&s, f64::INFINITY, 1, &p()).is_err());
    }

    #[test]
    fn control_ratio_requires_integer() {
        assert_eq!(control_ratio(0.1, 0.01).unwrap(), 10);
        assert_eq!(control_ratio(0.3, 0.1).unwrap(), 3);
        assert!(control_ratio(0.1, 0.03).is_err());
        assert!(control_ratio(0.1, 0.2).is_err());
        let s = StateVector::new(0.9, 0.0, 0.0, 0.0, 0.1, 0.0);
        assert!(step_with_impulse(&s, &Vector3::zeros(), 0.1, 0.03, &p()).is_err());
    }

    #[test]
    fn impulse_step_degenerate_cases() {
        let s = StateVector::new(0.85, 0.01, 0.02, 0.001, 0.1, -0.01);
        let zero = Vector3::zeros();
        let coast = step_with_impulse(&s, &zero, 0.2, 0.02, &p()).unwrap();
        assert_eq!(coast, propagate(&s, 0.2, 10, &p()).unwrap());

        let dv = Vector3::new(1e-3, -2e-3, 5e-4);
        let one = step_with_impulse(&s, &dv, 0.05, 0.05, &p()).unwrap();
        assert_eq!(one, rk4_step(&apply_impulse(&s, &dv), 0.05, &p()).unwrap());
    }

    #[test]
    fn impulse_changes_velocity_only() {
        let s = StateVector::new(0.85, 0.01, 0.02, 0.001, 0.1, -0.01);
        let dv = Vector3::new(1e-2, -2e-2, 5e-3);
        let tiny = 1e-9;
        let kicked = step_with_impulse(&s, &dv, tiny, tiny, &p()).unwrap();
        let coast = step_with_impulse(&s, &Vector3::zeros(), tiny, tiny, &p()).unwrap();
        let dpos = (position(&kicked) - position(&coast)).amax();
        let dvel = velocity(&kicked) - velocity(&coast) - dv;
        assert!(dpos < 1e-10, "{dpos}");
        assert!(dvel.amax() < 1e-8);
    }
}
