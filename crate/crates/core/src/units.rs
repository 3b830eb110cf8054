//! Canonical Earth-Moon units.

/// Length unit: mean Earth-Moon distance, km.
pub const LU_KM: f64 = 384_400.0;

/// Time unit: inverse of the Moon's mean motion, s.
pub const TU_S: f64 = 375_190.0;

/// Velocity unit in m/s.
pub const VU_MPS: f64 = LU_KM * 1000.0 / TU_S;

pub fn dv_to_mps(dv: f64) -> f64 {
    dv * VU_MPS
}

pub fn time_to_days(t: f64) -> f64 {
    t * TU_S / 86_400.0
}
