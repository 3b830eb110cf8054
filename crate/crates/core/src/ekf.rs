//! Extended Kalman filter on range and line-of-sight to a reference body.

use nalgebra::{DMatrix, DVector, Matrix6, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, LibrationIndex, StateVector, SystemParams, DEFAULT_STEP};
use crate::error::{Error, Result};

/// Initial covariance scale, `P0 = 1e-6 I`.
pub const DEFAULT_P0: f64 = 1e-6;
pub const DEFAULT_PROCESS_SIGMA: f64 = 1e-3;
pub const DEFAULT_RANGE_SIGMA: f64 = 1e-6;
pub const DEFAULT_LOS_SIGMA: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observer {
    Moon,
    Earth,
    L1,
    L2,
}

impl Observer {
    pub fn position(&self, params: &SystemParams) -> Result<Vector3<f64>> {
        Ok(match self {
            Self::Moon => params.moon(),
            Self::Earth => params.earth(),
            Self::L1 => dynamics::libration_point(LibrationIndex::L1, params)?.position,
            Self::L2 => dynamics::libration_point(LibrationIndex::L2, params)?.position,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementModel {
    RangeLos,
    RangeOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EkfConfig {
    pub p0: f64,
    /// Filter process noise, entering as acceleration.
    pub process_sigma: f64,
    pub range_sigma: f64,
    pub los_sigma: f64,
    pub observer: Observer,
    pub model: MeasurementModel,
    /// Longest RK4 substep used by the time update.
    pub max_step: f64,
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self {
            p0: DEFAULT_P0,
            process_sigma: DEFAULT_PROCESS_SIGMA,
            range_sigma: DEFAULT_RANGE_SIGMA,
            los_sigma: DEFAULT_LOS_SIGMA,
            observer: Observer::Moon,
            model: MeasurementModel::RangeLos,
            max_step: DEFAULT_STEP,
        }
    }
}

impl EkfConfig {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.p0, self.process_sigma, self.range_sigma, self.los_sigma];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) || !(self.p0 > 0.0) {
            return Err(Error::Config("filter standard deviations must be finite and non-negative, p0 positive".into()));
        }
        if !(self.max_step > 0.0) {
            return Err(Error::Config("filter max_step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorState {
    pub mean: StateVector,
    pub covariance: Matrix6<f64>,
    pub epoch: f64,
}

impl EstimatorState {
    pub fn new(mean: StateVector, p0: f64, epoch: f64) -> Self {
        Self {
            mean,
            covariance: Matrix6::identity() * p0,
            epoch,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub range: f64,
    pub los: Vector3<f64>,
    pub range_sigma: f64,
    pub los_sigma: f64,
    pub epoch: f64,
}

fn symmetrize(p: &Matrix6<f64>) -> Matrix6<f64> {
    (p + p.transpose()) * 0.5
}

/// Time update over `dt` after applying the known impulse `dv`.
///
/// `Q = sigma^2 diag(0, 0, 0, 1, 1, 1) dt`.
pub fn predict(
    est: &EstimatorState,
    dt: f64,
    dv: &Vector3<f64>,
    process_sigma: f64,
    max_step: f64,
    params: &SystemParams,
) -> Result<EstimatorState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("prediction interval {dt} must be positive")));
    }
    let start = dynamics::apply_impulse(&est.mean, dv);
    let (mean, phi) =
        dynamics::propagate_with_stm(&start, dt, dynamics::substeps_for(dt, max_step), params)?;
    let mut q = Matrix6::zeros();
    for i in 3..6 {
        q[(i, i)] = process_sigma * process_sigma * dt;
    }
    Ok(EstimatorState {
        mean,
        covariance: symmetrize(&(phi * est.covariance * phi.transpose() + q)),
        epoch: est.epoch + dt,
    })
}

/// Noise-free measurement `(range, los)` of a state.
pub fn measure(state: &StateVector, observer: &Vector3<f64>) -> Result<(f64, Vector3<f64>)> {
    let rel = dynamics::position(state) - observer;
    let range = rel.norm();
    if !(range > 0.0) || !range.is_finite() {
        return Err(Error::InvalidInput("spacecraft coincides with the observer".into()));
    }
    Ok((range, rel / range))
}

/// Jacobian of `(range, los)` with respect to the state: 4 x 6.
pub fn measurement_jacobian(state: &StateVector, observer: &Vector3<f64>) -> Result<DMatrix<f64>> {
    let (range, los) = measure(state, observer)?;
    let mut h = DMatrix::zeros(4, 6);
    for j in 0..3 {
        h[(0, j)] = los[j];
    }
    // d(r/|r|)/dr = (I - u u') / |r|
    for i in 0..3 {
        for j in 0..3 {
            let kron = if i == j { 1.0 } else { 0.0 };
            h[(1 + i, j)] = (kron - los[i] * los[j]) / range;
        }
    }
    Ok(h)
}

/// Noisy measurement of `truth`: Gaussian range error and a Gaussian tilt
/// of the line of sight, renormalized to unit length.
pub fn simulate_measurement<R: Rng + ?Sized>(
    truth: &StateVector,
    observer: &Vector3<f64>,
    range_sigma: f64,
    los_sigma: f64,
    epoch: f64,
    rng: &mut R,
) -> Result<Measurement> {
    if !truth.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("truth state"));
    }
    let (range, los) = measure(truth, observer)?;
    let dr: f64 = rng.sample(StandardNormal);
    let tilt = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    let noisy = if los_sigma > 0.0 {
        (los + tilt * los_sigma).normalize()
    } else {
        los
    };
    Ok(Measurement {
        range: range + range_sigma * dr,
        los: noisy,
        range_sigma,
        los_sigma,
        epoch,
    })
}

/// Outcome of a measurement update.
#[derive(Clone, Debug, PartialEq)]
pub struct Update {
    pub state: EstimatorState,
    /// `false` when the innovation covariance was singular and the update skipped.
    pub applied: bool,
}

/// Measurement update with the Joseph-form covariance.
pub fn update(
    est: &EstimatorState,
    z: &Measurement,
    observer: &Vector3<f64>,
    model: MeasurementModel,
) -> Result<Update> {
    if (z.epoch - est.epoch).abs() > 1e-9 * est.epoch.abs().max(1.0) {
        return Err(Error::InvalidInput(format!(
            "measurement epoch {} does not match estimate epoch {}",
            z.epoch, est.epoch
        )));
    }
    let (range, los) = measure(&est.mean, observer)?;
    let full = measurement_jacobian(&est.mean, observer)?;
    let rows = match model {
        MeasurementModel::RangeLos => 4,
        MeasurementModel::RangeOnly => 1,
    };
    let h = full.rows(0, rows).into_owned();
    let mut innovation = DVector::zeros(rows);
    innovation[0] = z.range - range;
    let mut r = DMatrix::zeros(rows, rows);
    r[(0, 0)] = z.range_sigma * z.range_sigma;
    if rows == 4 {
        for i in 0..3 {
            innovation[1 + i] = z.los[i] - los[i];
            r[(1 + i, 1 + i)] = z.los_sigma * z.los_sigma;
        }
    }
    let p = DMatrix::from_fn(6, 6, |i, j| est.covariance[(i, j)]);
    let s = &h * &p * h.transpose() + &r;
    let scale = s.diagonal().amax();
    let Some(s_inv) = s.clone().try_inverse().filter(|_| {
        let rc = s.clone().svd(false, false).singular_values;
        scale > 0.0 && rc.min() > 1e-14 * rc.max()
    }) else {
        return Ok(Update {
            state: est.clone(),
            applied: false,
        });
    };
    let k = &p * h.transpose() * s_inv;
    let dx = &k * innovation;
    let ikh = DMatrix::identity(6, 6) - &k * &h;
    let joseph = &ikh * &p * ikh.transpose() + &k * &r * k.transpose();
    let covariance = symmetrize(&Matrix6::from_fn(|i, j| joseph[(i, j)]));
    Ok(Update {
        state: EstimatorState {
            mean: est.mean + StateVector::from_fn(|i, _| dx[i]),
            covariance,
            epoch: est.epoch,
        },
        applied: true,
    })
}

/// Normalized estimation error squared.
pub fn nees(est: &EstimatorState, truth: &StateVector) -> Option<f64> {
    let e = truth - est.mean;
    est.covariance
        .cholesky()
        .map(|c| e.dot(&c.solve(&e)))
}
