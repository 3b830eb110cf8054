mod common;

use cislunar_core::dynamics::{self, StateVector};
use cislunar_core::family::{
    self, Branch, ContinuationSettings, CorrectorSettings, FamilyCatalog, FamilyTag, PeriodicOrbit,
};
use cislunar_core::{Error, LibrationIndex, SystemParams};

const STEP: f64 = 5e-5;

fn mirror(s: &StateVector) -> StateVector {
    StateVector::new(s[0], -s[1], s[2], -s[3], s[4], -s[5])
}

/// One period by plain RK4, independent of the catalog's own checks.
fn closure_and_drift(m: &PeriodicOrbit, params: &SystemParams) -> (f64, f64) {
    let n = (m.period / STEP).ceil() as usize;
    let h = m.period / n as f64;
    let c0 = dynamics::jacobi_constant(&m.x0, params).unwrap();
    let mut x = m.x0;
    let mut drift: f64 = 0.0;
    for _ in 0..n {
        x = dynamics::rk4_step(&x, h, params).unwrap();
        drift = drift.max((dynamics::jacobi_constant(&x, params).unwrap() - c0).abs());
    }
    ((x - m.x0).amax(), drift)
}

#[test]
fn every_member_closes_and_conserves_jacobi() {
    let cat = common::lyapunov();
    let params = cat.params();
    assert_eq!(cat.len(), common::LYAPUNOV_MEMBERS);
    for (i, m) in cat.members.iter().enumerate() {
        let (closure, drift) = closure_and_drift(m, &params);
        assert!(closure < 1e-10, "member {i}: closure {closure:e}");
        assert!(drift < 1e-9, "member {i}: Jacobi drift {drift:e}");
    }
}

#[test]
fn members_start_at_a_perpendicular_crossing() {
    for m in &common::lyapunov().members {
        assert_eq!(m.x0[1], 0.0);
        assert_eq!(m.x0[2], 0.0);
        assert_eq!(m.x0[3], 0.0);
        assert_eq!(m.x0[5], 0.0);
        assert!(m.period > 0.0);
    }
}

#[test]
fn chi_is_strictly_increasing_with_bounded_steps() {
    let cat = common::lyapunov();
    let steps: Vec<f64> = cat.members.windows(2).map(|w| w[1].chi - w[0].chi).collect();
    assert!(steps.iter().all(|&d| d > 0.0), "{steps:?}");
    let largest = steps.iter().cloned().fold(0.0, f64::max);
    assert!(largest < 0.05, "largest chi step {largest}");
    cat.validate().unwrap();
}

#[test]
fn members_are_fixed_points_of_the_corrector() {
    let cat = common::lyapunov();
    let params = cat.params();
    let settings = CorrectorSettings::default();
    for m in cat.members.iter().step_by(7) {
        let c = family::correct(&m.x0, &m.tag, &settings, &params).unwrap();
        assert_eq!(c.iterations, 0);
        assert_eq!(c.orbit.x0, m.x0);
        assert!((c.orbit.period - m.period).abs() < 1e-11);
    }
}

#[test]
fn count_one_returns_the_seed() {
    let params = SystemParams::default();
    let tag = FamilyTag::lyapunov(LibrationIndex::L2);
    let corrector = CorrectorSettings::default();
    let seed = family::family_seed(&tag, &corrector, &params).unwrap();
    let cont = family::pac_continue(&seed, 1, &corrector, &ContinuationSettings::default(), &params).unwrap();
    assert!(cont.is_complete());
    assert_eq!(cont.catalog.members, vec![seed]);
}

#[test]
fn catalog_json_round_trip_keeps_closure() {
    let cat = common::lyapunov();
    let back = FamilyCatalog::from_json(&cat.to_json().unwrap()).unwrap();
    assert_eq!(back.tag, cat.tag);
    assert_eq!(back.mu, cat.mu);
    assert_eq!(back.len(), cat.len());
    let params = back.params();
    for m in back.members.iter().step_by(9) {
        assert!(closure_and_drift(m, &params).0 < 1e-10);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("catalog.json");
    cat.save(&path).unwrap();
    assert_eq!(FamilyCatalog::load(&path).unwrap().members, cat.members);
}

#[test]
fn catalog_with_unknown_fields_is_rejected() {
    let mut value: serde_json::Value = serde_json::from_str(&common::lyapunov().to_json().unwrap()).unwrap();
    value["extra"] = serde_json::json!(1);
    assert!(FamilyCatalog::from_json(&value.to_string()).is_err());
}

#[test]
fn sampling_two_points_gives_start_and_half_period() {
    let m = &common::lyapunov().members[10];
    let params = SystemParams::default();
    let s = family::sample_orbit(m, 2, STEP, &params).unwrap();
    assert_eq!(s.len(), 2);
    assert_eq!(s[0], (0.0, m.x0));
    assert!((s[1].0 - 0.5 * m.period).abs() < 1e-15);
    // The half-period state is the opposite perpendicular crossing.
    assert!(s[1].1[1].abs() < 1e-9 && s[1].1[3].abs() < 1e-9);
    assert!(family::sample_orbit(m, 1, STEP, &params).is_err());
}

#[test]
fn planar_samples_stay_planar_and_share_jacobi() {
    let params = SystemParams::default();
    for m in common::lyapunov().members.iter().step_by(13) {
        let c0 = dynamics::jacobi_constant(&m.x0, &params).unwrap();
        for (_, s) in family::sample_orbit(m, 50, STEP, &params).unwrap() {
            assert_eq!(s[2], 0.0);
            assert_eq!(s[5], 0.0);
            assert!((dynamics::jacobi_constant(&s, &params).unwrap() - c0).abs() < 1e-9);
        }
    }
}

#[test]
fn zero_amplitude_guess_is_the_libration_point() {
    let params = SystemParams::default();
    for point in [LibrationIndex::L1, LibrationIndex::L2] {
        let l = dynamics::libration_point(point, &params).unwrap();
        let g = family::initial_guess(&FamilyTag::lyapunov(point), 0.0, &params).unwrap();
        assert_eq!(g, l.state());
    }
}

#[test]
fn lyapunov_guess_sits_on_the_x_axis() {
    let params = SystemParams::default();
    let l1 = dynamics::libration_point(LibrationIndex::L1, &params).unwrap();
    let tag = FamilyTag::lyapunov(LibrationIndex::L1);
    let g = family::initial_guess(&tag, 0.01, &params).unwrap();
    assert!((g[0] - (l1.position[0] + 0.01)).abs() < 1e-15);
    assert_eq!([g[1], g[2], g[3], g[5]], [0.0; 4]);
    assert!(g[4] != 0.0);
    assert!(matches!(
        family::initial_guess(&tag, 1.0, &params),
        Err(Error::AmplitudeOutOfRange { .. })
    ));
}

#[test]
fn small_lyapunov_guess_corrects_quickly() {
    let params = SystemParams::default();
    let tag = FamilyTag::lyapunov(LibrationIndex::L1);
    let g = family::initial_guess(&tag, 0.01, &params).unwrap();
    let c = family::correct(&g, &tag, &CorrectorSettings::default(), &params).unwrap();
    assert!(c.iterations <= 10, "{} iterations", c.iterations);
    assert!(c.orbit.closure_error(STEP, &params).unwrap() < 1e-10);
}

#[test]
fn hopeless_guess_fails_cleanly() {
    let params = SystemParams::default();
    let tag = FamilyTag::lyapunov(LibrationIndex::L1);
    // falls straight into the Moon
    let guess = StateVector::new(1.0 - params.mu + 1e-3, 0.0, 0.0, 0.0, 0.0, 0.0);
    let r = family::differential_correction(&guess, &tag, &CorrectorSettings::default(), &params);
    assert!(r.is_err(), "{r:?}");
}

#[test]
fn halo_members_are_mirror_symmetric_in_time() {
    let params = SystemParams::default();
    let corrector = CorrectorSettings::default();
    let tag = FamilyTag::halo(LibrationIndex::L1, Branch::North);
    let seed = family::family_seed(&tag, &corrector, &params).unwrap();
    let cont = family::pac_continue(&seed, 4, &corrector, &ContinuationSettings::default(), &params).unwrap();
    for m in &cont.catalog.members {
        assert!(m.x0[2] != 0.0);
        let (closure, drift) = closure_and_drift(m, &params);
        assert!(closure < 1e-10 && drift < 1e-9);
        let n = 40;
        let samples = family::sample_orbit(m, n, STEP, &params).unwrap();
        for k in 1..n {
            let d = (samples[n - k].1 - mirror(&samples[k].1)).amax();
            assert!(d < 1e-8, "t = {}: mirror mismatch {d:e}", samples[k].0);
        }
    }
}

#[test]
fn southern_catalog_mirrors_the_northern_one() {
    let params = SystemParams::default();
    let corrector = CorrectorSettings::default();
    let tag = FamilyTag::halo(LibrationIndex::L1, Branch::North);
    let seed = family::family_seed(&tag, &corrector, &params).unwrap();
    let north = family::pac_continue(&seed, 3, &corrector, &ContinuationSettings::default(), &params)
        .unwrap()
        .catalog;
    let south = north.mirrored();
    assert_eq!(south.tag.branch, Some(Branch::South));
    for (n, s) in north.members.iter().zip(&south.members) {
        assert_eq!(s.x0[2], -n.x0[2]);
        assert_eq!(s.chi, n.chi);
        assert!(s.closure_error(STEP, &params).unwrap() < 1e-10);
    }
}
