//! Projected BFGS for box-constrained smooth minimization.
//!
//! Variables at a bound whose gradient points outward are held fixed for
//! the step; the rest follow the quasi-Newton direction, and the trial
//! point is projected back onto the box during a backtracking line search.
//! Periodic coordinates are wrapped into `[-pi, pi)` after every accepted
//! step.

use nalgebra::{DMatrix, DVector};

use crate::model::wrap_angle;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BfgsSettings {
    /// Stop once the projected gradient's infinity norm falls below this.
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
    /// Sufficient-decrease constant of the Armijo test.
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for BfgsSettings {
    fn default() -> Self {
        Self {
            gradient_tolerance: 1e-8,
            max_iterations: 200,
            armijo: 1e-4,
            max_backtracks: 40,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub projected_gradient: f64,
}

/// Box constraints plus the set of periodic coordinates.
#[derive(Clone, Debug)]
pub struct Domain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub periodic: Vec<bool>,
}

impl Domain {
    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            periodic: vec![false; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn project(&self, x: &mut [f64]) {
        for i in 0..x.len() {
            if self.periodic[i] {
                x[i] = wrap_angle(x[i]);
            } else {
                x[i] = x[i].clamp(self.lower[i], self.upper[i]);
            }
        }
    }

    fn clamp(&self, x: &mut [f64]) {
        for i in 0..x.len() {
            if !self.periodic[i] {
                x[i] = x[i].clamp(self.lower[i], self.upper[i]);
            }
        }
    }

    fn projected_gradient(&self, x: &[f64], g: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let step = if self.periodic[i] {
                g[i]
            } else {
                x[i] - (x[i] - g[i]).clamp(self.lower[i], self.upper[i])
            };
            worst = worst.max(step.abs());
        }
        worst
    }

    fn is_blocked(&self, x: &[f64], g: &[f64], i: usize) -> bool {
        if self.periodic[i] {
            return false;
        }
        let span = (self.upper[i] - self.lower[i]).abs();
        let eps = 1e-14 * (1.0 + span.min(1e6));
        (x[i] <= self.lower[i] + eps && g[i] > 0.0) || (x[i] >= self.upper[i] - eps && g[i] < 0.0)
            || self.lower[i] == self.upper[i]
    }
}

/// Minimizes `f` over the domain starting from `x0`.
///
/// `value` returns the objective alone and `value_grad` the objective with
/// its gradient; either may return a non-finite value to reject a point.
pub fn minimize<V, G>(
    mut value: V,
    mut value_grad: G,
    x0: &[f64],
    domain: &Domain,
    settings: &BfgsSettings,
) -> Minimum
where
    V: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    domain.project(&mut x);
    let (mut f, mut g) = value_grad(&x);
    let mut evaluations = 1;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut scaled = false;
    let result = |x: &[f64], f: f64, it: usize, ev: usize, conv: bool, pg: f64| Minimum {
        x: x.to_vec(),
        value: f,
        iterations: it,
        evaluations: ev,
        converged: conv,
        projected_gradient: pg,
    };
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return result(&x, f, 0, evaluations, false, f64::INFINITY);
    }
    for it in 0..settings.max_iterations {
        let pg = domain.projected_gradient(&x, &g);
        if pg < settings.gradient_tolerance {
            return result(&x, f, it, evaluations, true, pg);
        }
        let free: Vec<bool> = (0..n).map(|i| !domain.is_blocked(&x, &g, i)).collect();
        let mut d = DVector::<f64>::zeros(n);
        for i in 0..n {
            if free[i] {
                let mut acc = 0.0;
                for j in 0..n {
                    if free[j] {
                        acc -= h[(i, j)] * g[j];
                    }
                }
                d[i] = acc;
            }
        }
        let mut slope: f64 = (0..n).map(|i| d[i] * g[i]).sum();
        if !(slope < 0.0) {
            h = DMatrix::identity(n, n);
            scaled = false;
            for i in 0..n {
                d[i] = if free[i] { -g[i] } else { 0.0 };
            }
            slope = (0..n).map(|i| d[i] * g[i]).sum();
            if !(slope < 0.0) {
                return result(&x, f, it, evaluations, false, pg);
            }
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..settings.max_backtracks {
            let mut trial: Vec<f64> = (0..n).map(|i| x[i] + alpha * d[i]).collect();
            domain.clamp(&mut trial);
            let decrease: f64 = (0..n).map(|i| g[i] * (trial[i] - x[i])).sum();
            let ft = value(&trial);
            evaluations += 1;
            if ft.is_finite() && ft <= f + settings.armijo * decrease.min(0.0) && decrease < 0.0 {
                accepted = Some(trial);
                break;
            }
            alpha *= 0.5;
        }
        let Some(trial) = accepted else {
            if scaled {
                // Retry once from steepest descent before giving up.
                h = DMatrix::identity(n, n);
                scaled = false;
                continue;
            }
            return result(&x, f, it, evaluations, false, pg);
        };

        let (ft, gt) = value_grad(&trial);
        evaluations += 1;
        if !ft.is_finite() || gt.iter().any(|v| !v.is_finite()) {
            return result(&x, f, it, evaluations, false, pg);
        }
        let s = DVector::from_iterator(n, (0..n).map(|i| trial[i] - x[i]));
        let y = DVector::from_iterator(n, (0..n).map(|i| gt[i] - g[i]));
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if !scaled {
                h = DMatrix::identity(n, n) * (sy / y.dot(&y));
                scaled = true;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s hy' + hy s') + (rho^2 y'Hy + rho) s s'
            h -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        x = trial;
        domain.project(&mut x);
        f = ft;
        g = gt;
    }
    let pg = domain.projected_gradient(&x, &g);
    let converged = pg < settings.gradient_tolerance;
    result(&x, f, settings.max_iterations, evaluations, converged, pg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        (f, g)
    }

    #[test]
    fn unconstrained_rosenbrock() {
        let m = minimize(
            |x| rosenbrock(x).0,
            rosenbrock,
            &[-1.2, 1.0],
            &Domain::unbounded(2),
            &BfgsSettings::default(),
        );
        assert!(m.converged, "{m:?}");
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn active_bound_is_respected() {
        // Minimum of (x-2)^2 + (y+1)^2 on [0,1] x [0,1] is (1, 0).
        let f = |x: &[f64]| (x[0] - 2.0).powi(2) + (x[1] + 1.0).powi(2);
        let fg = |x: &[f64]| (f(x), vec![2.0 * (x[0] - 2.0), 2.0 * (x[1] + 1.0)]);
        let domain = Domain {
            lower: vec![0.0, 0.0],
            upper: vec![1.0, 1.0],
            periodic: vec![false, false],
        };
        let m = minimize(f, fg, &[0.5, 0.5], &domain, &BfgsSettings::default());
        assert!(m.converged);
        assert_eq!(m.x, vec![1.0, 0.0]);
    }

    #[test]
    fn periodic_coordinate_wraps() {
        // cos has its minimum at -pi, which sits inside [-pi, pi).
        let f = |x: &[f64]| x[0].cos();
        let fg = |x: &[f64]| (x[0].cos(), vec![-x[0].sin()]);
        let domain = Domain {
            lower: vec![f64::NEG_INFINITY],
            upper: vec![f64::INFINITY],
            periodic: vec![true],
        };
        let m = minimize(f, fg, &[2.5], &domain, &BfgsSettings::default());
        assert!(m.converged);
        assert!(m.x[0] >= -std::f64::consts::PI && m.x[0] < std::f64::consts::PI);
        assert!((m.value + 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_pins_variable() {
        let f = |x: &[f64]| (x[0] - 3.0).powi(2) + x[1] * x[1];
        let fg = |x: &[f64]| (f(x), vec![2.0 * (x[0] - 3.0), 2.0 * x[1]]);
        let domain = Domain {
            lower: vec![0.0, -1.0],
            upper: vec![0.0, 1.0],
            periodic: vec![false, false],
        };
        let m = minimize(f, fg, &[0.0, 0.7], &domain, &BfgsSettings::default());
        assert_eq!(m.x[0], 0.0);
        assert!(m.x[1].abs() < 1e-8);
    }
}
