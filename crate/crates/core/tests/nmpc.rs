mod common;

use cislunar_core::dynamics::{self, StateVector};
use cislunar_core::model::{self, MprModel, SubManifoldModel};
use cislunar_core::nmpc::{self, ControllerMode, HorizonSolution, Nmpc, NmpcConfig};
use cislunar_core::{Error, LibrationIndex, SystemParams};
use nalgebra::{Matrix3, Matrix6, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

const MEMBER: usize = 10;

fn model() -> &'static MprModel {
    common::lyapunov_model()
}

fn config(np: usize, nc: usize, mode: ControllerMode) -> NmpcConfig {
    let m = &common::lyapunov().members[MEMBER];
    let r = model().sub_manifolds[0].chi_range;
    NmpcConfig::with_defaults(m.period, np, nc, r, mode)
}

fn member_state() -> StateVector {
    common::lyapunov().members[MEMBER].x0
}

fn rows6(m: &Matrix6<f64>) -> [[f64; 6]; 6] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

fn random_psd(rng: &mut ChaCha8Rng) -> Matrix6<f64> {
    let a = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
    a * a.transpose()
}

/// Term-by-term evaluation of the horizon cost written out longhand.
fn brute_force_cost(
    x0: &StateVector,
    dv: &[Vector3<f64>],
    chi: &[f64],
    nu: &[f64],
    sub: &SubManifoldModel,
    cfg: &NmpcConfig,
) -> f64 {
    let params = SystemParams::default();
    let n_t = (cfg.ts / cfg.ts_hat).round() as usize;
    let q = cfg.q_matrix();
    let qt = cfg.qt_matrix();
    let r = cfg.r_matrix();
    let mut states = Vec::new();
    let mut x = *x0;
    for i in 1..=cfg.np + 1 {
        let u = if i <= cfg.nc { dv[i - 1] } else { dv[cfg.nc - 1] };
        x[3] += u[0];
        x[4] += u[1];
        x[5] += u[2];
        for _ in 0..n_t {
            x = dynamics::rk4_step(&x, cfg.ts_hat, &params).unwrap();
        }
        states.push(x);
    }
    let mut terms = Vec::new();
    for (k, s) in states.iter().enumerate() {
        let c = match chi.len() {
            1 => chi[0],
            _ => chi[k.min(chi.len() - 1)],
        };
        let e = s - sub.eval(c, nu[k]);
        let w = if k < cfg.np { &q } else { &qt };
        terms.push((e.transpose() * w * e)[(0, 0)]);
    }
    for u in dv {
        terms.push((u.transpose() * r * u)[(0, 0)]);
    }
    terms.iter().sum()
}

fn random_plan(rng: &mut ChaCha8Rng, cfg: &NmpcConfig) -> (Vec<Vector3<f64>>, Vec<f64>, Vec<f64>) {
    let dv = (0..cfg.nc)
        .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1e-3..1e-3)))
        .collect();
    let [lo, hi] = cfg.chi_bounds;
    let chi = (0..cfg.chi_count().max(1)).map(|_| rng.random_range(lo..=hi)).collect();
    let nu = (0..=cfg.np).map(|_| rng.random_range(-PI..PI)).collect();
    (dv, chi, nu)
}

#[test]
fn cost_matches_brute_force_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sub = &model().sub_manifolds[0];
    for trial in 0..100 {
        let np = rng.random_range(1..=4);
        let nc = rng.random_range(1..=np);
        let mode = if trial % 2 == 0 { ControllerMode::VariableChi } else { ControllerMode::FixedChi };
        let mut cfg = config(np, nc, mode);
        cfg.q = rows6(&random_psd(&mut rng));
        cfg.qt = rows6(&random_psd(&mut rng));
        let r = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let r = r * r.transpose() + Matrix3::identity() * 0.1;
        cfg.r = std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)]));
        let mut x0 = member_state();
        for i in 0..6 {
            x0[i] += rng.random_range(-1e-3..1e-3);
        }
        let (dv, chi, nu) = random_plan(&mut rng, &cfg);
        let got = nmpc::cost_eval(&x0, &dv, &chi, &nu, model(), &cfg).unwrap();
        let want = brute_force_cost(&x0, &dv, &chi, &nu, sub, &cfg);
        assert!((got - want).abs() <= 1e-12 * want.max(1.0), "trial {trial}: {got} vs {want}");
    }
}

#[test]
fn three_step_horizon_by_hand() {
    let cfg = config(3, 2, ControllerMode::VariableChi);
    let sub = &model().sub_manifolds[0];
    let x0 = member_state();
    let dv = [Vector3::new(1e-4, -2e-4, 0.0), Vector3::new(0.0, 3e-4, 1e-4)];
    let [lo, hi] = cfg.chi_bounds;
    let chi = [lo, 0.5 * (lo + hi), hi];
    let nu = [0.1, 0.5, 1.0, 1.5];
    let params = SystemParams::default();
    let step = |x: &StateVector, u: &Vector3<f64>| dynamics::step_with_impulse(x, u, cfg.ts, cfg.ts_hat, &params).unwrap();
    let x1 = step(&x0, &dv[0]);
    let x2 = step(&x1, &dv[1]);
    let x3 = step(&x2, &dv[1]);
    let x4 = step(&x3, &dv[1]);
    let pos = |x: &StateVector, c: f64, n: f64| (x - sub.eval(c, n)).fixed_rows::<3>(0).norm_squared();
    let want = pos(&x1, chi[0], nu[0])
        + pos(&x2, chi[1], nu[1])
        + pos(&x3, chi[2], nu[2])
        + pos(&x4, chi[2], nu[3])
        + 1e-2 * (dv[0].norm_squared() + dv[1].norm_squared());
    let got = nmpc::cost_eval(&x0, &dv, &chi, &nu, model(), &cfg).unwrap();
    assert!((got - want).abs() < 1e-12 * want.max(1.0), "{got} vs {want}");
}

#[test]
fn zero_tracking_weights_leave_the_impulse_norm() {
    let mut cfg = config(4, 3, ControllerMode::FixedChi);
    cfg.q = [[0.0; 6]; 6];
    cfg.qt = [[0.0; 6]; 6];
    cfg.r = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (dv, chi, nu) = random_plan(&mut rng, &cfg);
    let j = nmpc::cost_eval(&member_state(), &dv, &chi, &nu, model(), &cfg).unwrap();
    let want: f64 = dv.iter().map(|v| v.norm_squared()).sum();
    assert!((j - want).abs() < 1e-15);
    // zero cost certifies zero impulses
    let zero = vec![Vector3::zeros(); 3];
    assert_eq!(nmpc::cost_eval(&member_state(), &zero, &chi, &nu, model(), &cfg).unwrap(), 0.0);
}

#[test]
fn zero_cost_only_with_zero_residuals() {
    let cfg = config(2, 1, ControllerMode::FixedChi);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (dv, chi, nu) = random_plan(&mut rng, &cfg);
        let j = nmpc::cost_eval(&member_state(), &dv, &chi, &nu, model(), &cfg).unwrap();
        assert!(j > 0.0);
    }
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (k, mode) in [ControllerMode::FixedChi, ControllerMode::VariableChi].into_iter().cycle().take(20).enumerate() {
        let cfg = config(3, 2, mode);
        let nm = Nmpc::new(model(), &cfg).unwrap();
        let mut x0 = member_state();
        x0[0] += rng.random_range(-1e-3..1e-3);
        x0[4] += rng.random_range(-1e-3..1e-3);
        let (dv, chi, nu) = random_plan(&mut rng, &cfg);
        let mut z = Vec::new();
        for v in &dv {
            z.extend(v.iter());
        }
        z.extend(&chi);
        z.extend(&nu);
        assert_eq!(z.len(), cfg.decision_len());
        let (j, g) = nm.cost_gradient(&x0, &z);
        assert!((j - nm.cost(&x0, &z)).abs() < 1e-14 * j.max(1.0));
        let mut fd = vec![0.0; z.len()];
        for i in 0..z.len() {
            let h = 1e-6 * z[i].abs().max(1e-3);
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += h;
            zm[i] -= h;
            fd[i] = (nm.cost(&x0, &zp) - nm.cost(&x0, &zm)) / (2.0 * h);
        }
        let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff < 1e-4 * norm, "point {k}: relative gradient error {:e}", diff / norm);
    }
}

fn assert_feasible(sol: &HorizonSolution, cfg: &NmpcConfig, x0: &StateVector) {
    let [dlo, dhi] = cfg.dv_bounds;
    let [clo, chi] = cfg.chi_bounds;
    assert_eq!(sol.dv.len(), cfg.nc);
    assert_eq!(sol.nu.len(), cfg.np + 1);
    for v in &sol.dv {
        assert!(v.iter().all(|&c| c >= dlo - 1e-8 && c <= dhi + 1e-8), "{v}");
    }
    for &c in &sol.chi {
        assert!(c >= clo - 1e-8 && c <= chi + 1e-8);
    }
    for &n in &sol.nu {
        assert!((-PI..PI).contains(&n));
    }
    let again = nmpc::cost_eval(x0, &sol.dv, &sol.chi, &sol.nu, model(), cfg).unwrap();
    assert!((again - sol.cost).abs() < 1e-10);
}

fn disturbed_state() -> StateVector {
    let mut x0 = member_state();
    x0[0] += 2e-4;
    x0[4] -= 3e-4;
    x0
}

#[test]
fn solutions_satisfy_the_constraints() {
    for mode in [
        ControllerMode::FixedChi,
        ControllerMode::VariableChi,
        ControllerMode::FixedOrbit { chi_ref: common::lyapunov().members[MEMBER].chi },
    ] {
        let mut cfg = config(3, 2, mode);
        cfg.dv_bounds = [-1e-4, 1e-4];
        let x0 = disturbed_state();
        let sol = nmpc::solve(&x0, model(), &cfg, None).unwrap();
        assert_feasible(&sol, &cfg, &x0);
        let (dv, step) = nmpc::controller_step(&x0, model(), &cfg, None).unwrap();
        assert_eq!(dv, step.dv[0]);
    }
}

#[test]
fn zero_impulse_bounds_give_zero_impulses() {
    let mut cfg = config(3, 2, ControllerMode::FixedChi);
    cfg.dv_bounds = [0.0, 0.0];
    let x0 = disturbed_state();
    let sol = nmpc::solve(&x0, model(), &cfg, None).unwrap();
    assert!(sol.dv.iter().all(|v| *v == Vector3::zeros()));
    assert_feasible(&sol, &cfg, &x0);
}

#[test]
fn richer_modes_never_cost_more() {
    let x0 = disturbed_state();
    let fixed_cfg = config(4, 2, ControllerMode::FixedChi);
    let fixed = nmpc::solve(&x0, model(), &fixed_cfg, None).unwrap();
    let var = nmpc::solve(&x0, model(), &config(4, 2, ControllerMode::VariableChi), None).unwrap();
    let orbit_cfg = config(4, 2, ControllerMode::FixedOrbit { chi_ref: fixed.chi[0] });
    let orbit = nmpc::solve(&x0, model(), &orbit_cfg, None).unwrap();
    let tol = 1e-8;
    assert!(var.cost <= fixed.cost + tol, "{} > {}", var.cost, fixed.cost);
    assert!(fixed.cost <= orbit.cost + tol, "{} > {}", fixed.cost, orbit.cost);
}

#[test]
fn on_member_start_needs_almost_no_control() {
    let x0 = member_state();
    let chi = common::lyapunov().members[MEMBER].chi;
    let fixed = nmpc::solve(&x0, model(), &config(4, 2, ControllerMode::FixedChi), None).unwrap();
    let orbit = nmpc::solve(&x0, model(), &config(4, 2, ControllerMode::FixedOrbit { chi_ref: chi }), None).unwrap();
    let mut off = x0;
    off[0] += 1e-3;
    let kicked = nmpc::solve(&off, model(), &config(4, 2, ControllerMode::FixedChi), None).unwrap();
    let a = fixed.dv[0].norm();
    let b = orbit.dv[0].norm();
    let c = kicked.dv[0].norm();
    assert!(a < 0.2 * c, "on-member impulse {a:e} vs {c:e} after a 1e-3 offset");
    assert!(b < 10.0 * a.max(1e-5), "fixed orbit impulse {b:e}");
}

#[test]
fn on_manifold_rollout_costs_little() {
    let cfg = config(4, 2, ControllerMode::FixedChi);
    let m = &common::lyapunov().members[MEMBER];
    let params = SystemParams::default();
    let l1 = dynamics::libration_point(LibrationIndex::L1, &params).unwrap();
    let x0 = m.x0;
    let mut nu = Vec::new();
    let mut x = x0;
    for _ in 0..=cfg.np {
        x = dynamics::step_with_impulse(&x, &Vector3::zeros(), cfg.ts, cfg.ts_hat, &params).unwrap();
        nu.push(model::location_angle(&x, &m.tag, &l1).unwrap());
    }
    let j = nmpc::cost_eval(&x0, &[Vector3::zeros(); 2], &[m.chi], &nu, model(), &cfg).unwrap();
    let scale = model().diagnostics.max_residual.powi(2);
    assert!(j < 10.0 * scale, "J {j:e} vs residual scale {scale:e}");
}

#[test]
fn warm_start_needs_fewer_iterations() {
    let cfg = config(4, 2, ControllerMode::FixedChi);
    let params = SystemParams::default();
    let x0 = disturbed_state();
    let nm = Nmpc::new(model(), &cfg).unwrap();
    let (dv, first) = nm.controller_step(&x0, None).unwrap();
    let x1 = dynamics::step_with_impulse(&x0, &dv, cfg.ts, cfg.ts_hat, &params).unwrap();
    let warm = nm.solve(&x1, Some(&first)).unwrap();
    let cold = nm.solve(&x1, None).unwrap();
    let w = warm.warm_iterations.unwrap();
    assert!(w < cold.iterations, "warm {w} vs cold {}", cold.iterations);
    assert_eq!(cold.warm_iterations, None);
    assert!(warm.cost <= cold.cost + 1e-10);
}

#[test]
fn bad_configurations_are_rejected() {
    let base = config(4, 2, ControllerMode::FixedChi);
    let mut c = base.clone();
    c.nc = 5;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = base.clone();
    c.ts_hat = c.ts / 3.5;
    assert!(c.validate().is_err());
    let mut c = base.clone();
    c.r[1][1] = 0.0;
    assert!(c.validate().is_err());
    let mut c = base.clone();
    c.q[0][0] = -1.0;
    assert!(c.validate().is_err());
    let mut c = base.clone();
    c.mode = ControllerMode::FixedOrbit { chi_ref: c.chi_bounds[1] + 1.0 };
    assert!(c.validate().is_err());
    let (lo, hi) = model().chi_range();
    let mut c = base.clone();
    c.chi_bounds = [lo, hi];
    assert!(Nmpc::new(model(), &c).is_err(), "bounds spanning two slices");
}

#[test]
fn cost_eval_checks_its_inputs() {
    let cfg = config(3, 2, ControllerMode::VariableChi);
    let x0 = member_state();
    let dv = [Vector3::zeros(); 2];
    let c = cfg.chi_bounds[0];
    assert!(nmpc::cost_eval(&x0, &dv[..1], &[c; 3], &[0.0; 4], model(), &cfg).is_err());
    assert!(nmpc::cost_eval(&x0, &dv, &[c; 1], &[0.0; 4], model(), &cfg).is_err());
    assert!(nmpc::cost_eval(&x0, &dv, &[c; 3], &[0.0; 3], model(), &cfg).is_err());
    assert!(matches!(
        nmpc::cost_eval(&x0, &dv, &[c - 1.0; 3], &[0.0; 4], model(), &cfg),
        Err(Error::ChiOutOfRange { .. })
    ));
    let moon = StateVector::new(1.0 - SystemParams::default().mu, 0.0, 0.0, 0.0, 0.0, 0.0);
    assert_eq!(nmpc::cost_eval(&moon, &dv, &[c; 3], &[0.0; 4], model(), &cfg).unwrap(), f64::INFINITY);
}

#[test]
fn config_json_round_trip() {
    let cfg = config(4, 4, ControllerMode::FixedOrbit { chi_ref: 0.02 });
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<NmpcConfig>(&text).unwrap(), cfg);
}
