//! The `(chi, nu)` description of a family manifold.
//!
//! Lyapunov families: `nu` is the in-plane angle of the offset from the
//! libration point, measured from the x-direction that points toward the
//! Moon, and `chi` is the distance from the libration point to the orbit
//! point where `nu = 0`.
//!
//! Halo and NRHO families: `nu` is the angle of the offset projected on the
//! `yz`-plane, measured from the `+z` axis (`-z` for southern members, so
//! mirrored orbits share coordinates), and `chi` is the distance from the
//! libration point to the highest point of the orbit.

use std::f64::consts::PI;

use crate::dynamics::{self, LibrationPoint, StateVector, SystemParams};
use crate::error::{Error, Result};
use crate::family::{Branch, FamilyTag, OrbitKind};

/// Samples used to locate the highest point of a halo orbit before refinement.
pub const APEX_SAMPLES: usize = 1000;

const DEGENERATE_OFFSET: f64 = 1e-14;

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(angle: f64) -> f64 {
    let wrapped = (angle + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2*pi
    if wrapped >= PI {
        wrapped - 2.0 * PI
    } else {
        wrapped
    }
}

fn vertical_sign(tag: &FamilyTag) -> f64 {
    match tag.branch {
        Some(Branch::South) => -1.0,
        _ => 1.0,
    }
}

/// Location angle `nu` of a state relative to the family geometry.
pub fn location_angle(state: &StateVector, tag: &FamilyTag, lib: &LibrationPoint) -> Result<f64> {
    let dx = state[0] - lib.position[0];
    let dy = state[1];
    let dz = state[2];
    let (num, den) = match tag.kind {
        OrbitKind::Lyapunov => {
            let s = lib.moonward();
            (s * dy, s * dx)
        }
        OrbitKind::Halo | OrbitKind::Nrho => (dy, vertical_sign(tag) * dz),
    };
    if num.hypot(den) < DEGENERATE_OFFSET {
        return Err(Error::UndefinedAngle);
    }
    Ok(wrap_angle(num.atan2(den)))
}

/// Point of an orbit that defines its `chi`.
#[derive(Clone, Copy, Debug)]
pub struct OrbitAnchor {
    pub chi: f64,
    pub time: f64,
    pub state: StateVector,
}

/// `chi` of a periodic orbit given its perpendicular-crossing state and period.
pub fn orbit_anchor(
    x0: &StateVector,
    period: f64,
    tag: &FamilyTag,
    lib: &LibrationPoint,
    max_step: f64,
    params: &SystemParams,
) -> Result<OrbitAnchor> {
    let offset = |s: &StateVector| (dynamics::position(s) - lib.position).norm();
    match tag.kind {
        OrbitKind::Lyapunov => {
            // The nu = 0 point is the x-axis crossing on the Moon side.
            let s = lib.moonward();
            if s * (x0[0] - lib.position[0]) > 0.0 {
                return Ok(OrbitAnchor {
                    chi: offset(x0),
                    time: 0.0,
                    state: *x0,
                });
            }
            let half = 0.5 * period;
            let other = dynamics::propagate(x0, half, dynamics::substeps_for(half, max_step), params)?;
            Ok(OrbitAnchor {
                chi: offset(&other),
                time: half,
                state: other,
            })
        }
        OrbitKind::Halo | OrbitKind::Nrho => {
            let sz = vertical_sign(tag);
            let dt = period / APEX_SAMPLES as f64;
            let n = dynamics::substeps_for(dt, max_step);
            let mut best = (0usize, *x0, sz * x0[2]);
            let mut states = Vec::with_capacity(APEX_SAMPLES + 1);
            let mut x = *x0;
            states.push(x);
            for k in 1..=APEX_SAMPLES {
                x = dynamics::propagate(&x, dt, n, params)?;
                states.push(x);
                if sz * x[2] > best.2 {
                    best = (k, x, sz * x[2]);
                }
            }
            // Refine: vz changes sign across the apex; bisect between neighbours.
            let k = best.0;
            let (lo_k, hi_k) = if k == 0 {
                (None, 1)
            } else if k == APEX_SAMPLES {
                (Some(k - 1), k)
            } else {
                let before = states[k - 1][5] * sz;
                if before > 0.0 {
                    (Some(k - 1), k)
                } else {
                    (Some(k), k + 1)
                }
            };
            let (anchor_time, anchor_state) = match lo_k {
                None => (0.0, *x0),
                Some(lo_k) => {
                    let start = states[lo_k];
                    let end = states[hi_k];
                    if (start[5] * sz) * (end[5] * sz) > 0.0 {
                        (k as f64 * dt, best.1)
                    } else {
                        let (mut a, mut b) = (0.0, dt);
                        let mut mid_state = start;
                        for _ in 0..60 {
                            let m = 0.5 * (a + b);
                            mid_state = dynamics::propagate(&start, m, dynamics::substeps_for(m, max_step), params)?;
                            if mid_state[5] * sz > 0.0 {
                                a = m;
                            } else {
                                b = m;
                            }
                            if b - a < 1e-13 {
                                break;
                            }
                        }
                        (lo_k as f64 * dt + 0.5 * (a + b), mid_state)
                    }
                }
            };
            Ok(OrbitAnchor {
                chi: offset(&anchor_state),
                time: anchor_time,
                state: anchor_state,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{libration_point, LibrationIndex};

    #[test]
    fn wrap_is_half_open() {
        assert_eq!(wrap_angle(PI), -PI);
        assert_eq!(wrap_angle(-PI), -PI);
        assert!((wrap_angle(3.0 * PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
        assert!((wrap_angle(0.3 - 4.0 * PI) - 0.3).abs() < 1e-12);
        for k in -50..50 {
            let w = wrap_angle(k as f64 * 0.37);
            assert!((-PI..PI).contains(&w));
        }
    }

    #[test]
    fn lyapunov_angle_zero_on_moon_side() {
        let params = SystemParams::default();
        for idx in [LibrationIndex::L1, LibrationIndex::L2] {
            let lib = libration_point(idx, &params).unwrap();
            let tag = FamilyTag::lyapunov(idx);
            let d = 0.02 * lib.moonward();
            let s = StateVector::new(lib.position[0] + d, 0.0, 0.0, 0.0, 0.1, 0.0);
            assert_eq!(location_angle(&s, &tag, &lib).unwrap(), 0.0);
            let far = StateVector::new(lib.position[0] - d, 0.0, 0.0, 0.0, 0.1, 0.0);
            assert_eq!(location_angle(&far, &tag, &lib).unwrap(), -PI);
        }
    }

    #[test]
    fn halo_angle_zero_at_top() {
        let params = SystemParams::default();
        let lib = libration_point(LibrationIndex::L1, &params).unwrap();
        let north = FamilyTag::halo(LibrationIndex::L1, Branch::North);
        let south = FamilyTag::halo(LibrationIndex::L1, Branch::South);
        let s = StateVector::new(lib.position[0] + 0.01, 0.0, 0.03, 0.0, 0.1, 0.0);
        assert_eq!(location_angle(&s, &north, &lib).unwrap(), 0.0);
        let mut m = s;
        m[2] = -m[2];
        assert_eq!(location_angle(&m, &south, &lib).unwrap(), 0.0);
        let side = StateVector::new(lib.position[0], 0.02, 0.0, 0.0, 0.0, 0.0);
        assert!((location_angle(&side, &north, &lib).unwrap() - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_projection_is_an_error() {
        let params = SystemParams::default();
        let lib = libration_point(LibrationIndex::L2, &params).unwrap();
        let tag = FamilyTag::halo(LibrationIndex::L2, Branch::North);
        let s = StateVector::new(lib.position[0] + 0.05, 0.0, 0.0, 0.0, 0.1, 0.0);
        assert!(matches!(location_angle(&s, &tag, &lib), Err(Error::UndefinedAngle)));
    }
}
