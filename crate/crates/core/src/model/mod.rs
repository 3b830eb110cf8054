//! Polynomial surrogates of family manifolds.
//!
//! A family is cut into contiguous `chi` slices and each slice is fitted by
//! least squares in the basis `chi^a cos(nu)^b sin(nu)^c`, `a + b + c <= N`.

pub mod param;

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{libration_point, LibrationPoint, StateVector, SystemParams};
use crate::error::{Error, Result};
use crate::family::{sample_orbit, FamilyCatalog, FamilyTag, OrbitKind, PeriodicOrbit};

pub use param::{location_angle, orbit_anchor, wrap_angle, OrbitAnchor};

pub const DEFAULT_DEGREE: usize = 8;
pub const DEFAULT_PARTS: usize = 4;
/// Planar families need a higher degree: their elongated shape makes the
/// Fourier content in `nu` decay slowly.
pub const LYAPUNOV_DEGREE: usize = 14;
pub const LYAPUNOV_PARTS: usize = 8;
/// NRHO members bend sharply at perilune.
pub const NRHO_DEGREE: usize = 10;
pub const DEFAULT_SAMPLES: usize = 100;

/// Singular values below this fraction of the largest count as rank loss.
const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamPair {
    pub chi: f64,
    pub nu: f64,
}

impl ParamPair {
    pub fn new(chi: f64, nu: f64) -> Self {
        Self {
            chi,
            nu: wrap_angle(nu),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingSample {
    pub member: usize,
    pub params: ParamPair,
    pub state: StateVector,
}

/// Exponent triples `(a, b, c)` with `a + b + c <= degree`, in a fixed order.
pub fn basis_exponents(degree: usize) -> Vec<[u8; 3]> {
    let mut out = Vec::new();
    for total in 0..=degree {
        for a in (0..=total).rev() {
            for b in (0..=total - a).rev() {
                out.push([a as u8, b as u8, (total - a - b) as u8]);
            }
        }
    }
    out
}

/// Dimension of the span of the basis; `cos^2 + sin^2 = 1` makes the rest redundant.
pub fn basis_rank(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Affine map `chi -> (chi - center) / half_width` onto `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub center: f64,
    pub half_width: f64,
}

impl Normalization {
    fn from_range(lo: f64, hi: f64) -> Self {
        Self {
            center: 0.5 * (lo + hi),
            half_width: 0.5 * (hi - lo),
        }
    }

    fn apply(&self, chi: f64) -> f64 {
        (chi - self.center) / self.half_width
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitDiagnostics {
    /// Largest absolute residual over all components and samples.
    pub max_residual: f64,
    pub rms_residual: f64,
    pub max_position_residual: f64,
    pub max_velocity_residual: f64,
    pub samples: usize,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubManifoldModel {
    pub chi_range: [f64; 2],
    pub degree: usize,
    pub normalization: Normalization,
    pub exponents: Vec<[u8; 3]>,
    /// One row per exponent triple, one column per state component.
    pub alpha: Vec<[f64; 6]>,
    /// Mean `dnu/dt` of the training orbits.
    pub nu_rate: f64,
    pub diagnostics: FitDiagnostics,
}

/// A surrogate state with its partial derivatives.
#[derive(Clone, Copy, Debug)]
pub struct SurrogateJet {
    pub state: StateVector,
    pub d_chi: StateVector,
    pub d_nu: StateVector,
}

struct Powers {
    x: [f64; 21],
    c: [f64; 21],
    s: [f64; 21],
}

impl Powers {
    fn new(x: f64, c: f64, s: f64, degree: usize) -> Self {
        let mut p = Powers {
            x: [1.0; 21],
            c: [1.0; 21],
            s: [1.0; 21],
        };
        for k in 1..=degree {
            p.x[k] = p.x[k - 1] * x;
            p.c[k] = p.c[k - 1] * c;
            p.s[k] = p.s[k - 1] * s;
        }
        p
    }

    fn term(&self, e: &[u8; 3]) -> f64 {
        self.x[e[0] as usize] * self.c[e[1] as usize] * self.s[e[2] as usize]
    }
}

impl SubManifoldModel {
    pub fn contains(&self, chi: f64) -> bool {
        chi >= self.chi_range[0] && chi <= self.chi_range[1]
    }

    /// Evaluates the polynomial; `chi` is not range-checked.
    pub fn eval(&self, chi: f64, nu: f64) -> StateVector {
        let nu = wrap_angle(nu);
        let p = Powers::new(self.normalization.apply(chi), nu.cos(), nu.sin(), self.degree);
        let mut out = StateVector::zeros();
        for (e, a) in self.exponents.iter().zip(&self.alpha) {
            let t = p.term(e);
            for i in 0..6 {
                out[i] += a[i] * t;
            }
        }
        out
    }

    /// Evaluates the polynomial and its partials in `chi` and `nu`.
    pub fn eval_jet(&self, chi: f64, nu: f64) -> SurrogateJet {
        let nu = wrap_angle(nu);
        let (s, c) = nu.sin_cos();
        let x = self.normalization.apply(chi);
        let p = Powers::new(x, c, s, self.degree);
        let dx = 1.0 / self.normalization.half_width;
        let mut jet = SurrogateJet {
            state: StateVector::zeros(),
            d_chi: StateVector::zeros(),
            d_nu: StateVector::zeros(),
        };
        for (e, a) in self.exponents.iter().zip(&self.alpha) {
            let (ea, eb, ec) = (e[0] as usize, e[1] as usize, e[2] as usize);
            let trig = p.c[eb] * p.s[ec];
            let t = p.x[ea] * trig;
            let t_chi = if ea > 0 {
                ea as f64 * p.x[ea - 1] * trig * dx
            } else {
                0.0
            };
            let mut d_trig = 0.0;
            if eb > 0 {
                d_trig -= eb as f64 * p.c[eb - 1] * s * p.s[ec];
            }
            if ec > 0 {
                d_trig += ec as f64 * p.s[ec - 1] * c * p.c[eb];
            }
            let t_nu = p.x[ea] * d_trig;
            for i in 0..6 {
                jet.state[i] += a[i] * t;
                jet.d_chi[i] += a[i] * t_chi;
                jet.d_nu[i] += a[i] * t_nu;
            }
        }
        jet
    }

    /// Coefficient of one exponent triple for one component, in normalized `chi`.
    pub fn coefficient(&self, exponents: [u8; 3], component: usize) -> Option<f64> {
        self.exponents
            .iter()
            .position(|e| *e == exponents)
            .map(|k| self.alpha[k][component])
    }
}

/// Least-squares fit of one sub-manifold.
///
/// The `chi` normalization spans the training data. Monomials with `sin^2`
/// or higher are linear combinations of the others and keep a zero
/// coefficient; the remaining `(N + 1)^2` columns are solved by QR.
pub fn fit_mpr(training: &[TrainingSample], degree: usize) -> Result<SubManifoldModel> {
    if degree > 20 {
        return Err(Error::Config(format!("degree {degree} exceeds 20")));
    }
    let exponents = basis_exponents(degree);
    let cols = exponents.len();
    let expected = basis_rank(degree);
    if training.len() < expected {
        return Err(Error::IllConditionedFit {
            rank: training.len(),
            expected,
        });
    }
    let (lo, hi) = training.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
        (lo.min(t.params.chi), hi.max(t.params.chi))
    });
    if !(hi > lo) {
        return Err(Error::IllConditionedFit { rank: 0, expected });
    }
    let normalization = Normalization::from_range(lo, hi);
    let rows = training.len();
    let mut a = DMatrix::<f64>::zeros(rows, cols);
    let mut y = DMatrix::<f64>::zeros(rows, 6);
    for (r, t) in training.iter().enumerate() {
        let nu = wrap_angle(t.params.nu);
        let p = Powers::new(normalization.apply(t.params.chi), nu.cos(), nu.sin(), degree);
        for (k, e) in exponents.iter().enumerate() {
            a[(r, k)] = p.term(e);
        }
        for i in 0..6 {
            y[(r, i)] = t.state[i];
        }
    }
    // Columns with sin^2 or higher are combinations of the rest; drop them.
    let keep: Vec<usize> = (0..cols).filter(|&k| exponents[k][2] < 2).collect();
    let reduced = a.select_columns(keep.iter());
    let svd = reduced.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > RANK_TOLERANCE * smax)
        .count();
    if rank < expected {
        return Err(Error::IllConditionedFit { rank, expected });
    }
    let qr = reduced.qr();
    let mut qty = y.clone();
    qr.q_tr_mul(&mut qty);
    let rhs = qty.rows(0, keep.len()).into_owned();
    let solved = qr
        .r()
        .solve_upper_triangular(&rhs)
        .ok_or(Error::IllConditionedFit { rank, expected })?;
    let mut coef = DMatrix::<f64>::zeros(cols, 6);
    for (j, &k) in keep.iter().enumerate() {
        coef.set_row(k, &solved.row(j));
    }
    let alpha: Vec<[f64; 6]> = (0..cols)
        .map(|k| std::array::from_fn(|i| coef[(k, i)]))
        .collect();

    let resid = &a * &coef - &y;
    let mut diagnostics = FitDiagnostics {
        samples: rows,
        rank,
        ..Default::default()
    };
    let mut sum_sq = 0.0;
    for r in 0..rows {
        for i in 0..6 {
            let e = resid[(r, i)].abs();
            sum_sq += e * e;
            diagnostics.max_residual = diagnostics.max_residual.max(e);
            if i < 3 {
                diagnostics.max_position_residual = diagnostics.max_position_residual.max(e);
            } else {
                diagnostics.max_velocity_residual = diagnostics.max_velocity_residual.max(e);
            }
        }
    }
    diagnostics.rms_residual = (sum_sq / (rows * 6) as f64).sqrt();

    Ok(SubManifoldModel {
        chi_range: [lo, hi],
        degree,
        normalization,
        exponents,
        alpha,
        nu_rate: 0.0,
        diagnostics,
    })
}

/// Contiguous slices of a catalog; neighbouring slices share their boundary member.
pub fn split_submanifolds(catalog: &FamilyCatalog, parts: usize) -> Result<Vec<FamilyCatalog>> {
    let n = catalog.len();
    if parts == 0 {
        return Err(Error::Config("parts must be at least 1".into()));
    }
    if parts == 1 {
        return Ok(vec![catalog.clone()]);
    }
    if parts > n || n < parts + 1 {
        return Err(Error::Config(format!(
            "cannot split {n} members into {parts} parts"
        )));
    }
    let bounds: Vec<usize> = (0..=parts).map(|k| k * (n - 1) / parts).collect();
    Ok(bounds
        .windows(2)
        .map(|w| FamilyCatalog {
            members: catalog.members[w[0]..=w[1]].to_vec(),
            ..catalog.clone()
        })
        .collect())
}

/// Time samples per training sample scanned when spacing samples in `nu`.
pub const DENSE_FACTOR: usize = 16;

/// Samples each member at `samples` points spaced evenly in `nu` and
/// attaches their `(chi, nu)` coordinates.
///
/// Each member is scanned at `DENSE_FACTOR * samples` uniform times; for every
/// target angle the nearest scanned point is kept, in time order. Uniform
/// time sampling leaves wide `nu` gaps where the orbit sweeps quickly past
/// the Moon.
///
/// `index_offset` is added to the member index stored in each sample.
pub fn training_samples(
    members: &[PeriodicOrbit],
    index_offset: usize,
    samples: usize,
    max_step: f64,
    params: &SystemParams,
) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::with_capacity(members.len() * samples);
    for (k, m) in members.iter().enumerate() {
        let lib = libration_point(m.tag.point, params)?;
        let mut scan = Vec::new();
        for (_, state) in sample_orbit(m, DENSE_FACTOR * samples.max(1), max_step, params)? {
            match location_angle(&state, &m.tag, &lib) {
                Ok(nu) => scan.push((nu, state)),
                Err(Error::UndefinedAngle) => {}
                Err(e) => return Err(e),
            }
        }
        if scan.is_empty() {
            continue;
        }
        let mut picked: Vec<usize> = (0..samples)
            .map(|j| {
                let target = -PI + 2.0 * PI * j as f64 / samples as f64;
                let mut best = (0, f64::INFINITY);
                for (i, (nu, _)) in scan.iter().enumerate() {
                    let d = wrap_angle(nu - target).abs();
                    if d < best.1 {
                        best = (i, d);
                    }
                }
                best.0
            })
            .collect();
        picked.sort_unstable();
        picked.dedup();
        for i in picked {
            let (nu, state) = scan[i];
            out.push(TrainingSample {
                member: index_offset + k,
                params: ParamPair { chi: m.chi, nu },
                state,
            });
        }
    }
    Ok(out)
}

/// Signed mean angular rate of `nu` along the sampled members.
fn mean_nu_rate(members: &[PeriodicOrbit], training: &[TrainingSample], offset: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (k, m) in members.iter().enumerate() {
        let nus: Vec<f64> = training
            .iter()
            .filter(|t| t.member == offset + k)
            .map(|t| t.params.nu)
            .collect();
        if nus.len() < 2 {
            continue;
        }
        let mut turn = 0.0;
        for w in nus.windows(2) {
            turn += wrap_angle(w[1] - w[0]);
        }
        turn += wrap_angle(nus[0] - nus[nus.len() - 1]);
        total += turn / m.period;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSettings {
    pub degree: usize,
    pub parts: usize,
    /// States sampled per member.
    pub samples: usize,
    /// Fraction of interior members withheld from training for validation.
    pub holdout: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            degree: DEFAULT_DEGREE,
            parts: DEFAULT_PARTS,
            samples: DEFAULT_SAMPLES,
            holdout: 0.0,
        }
    }
}

impl FitSettings {
    pub fn for_kind(kind: OrbitKind) -> Self {
        match kind {
            OrbitKind::Lyapunov => Self {
                degree: LYAPUNOV_DEGREE,
                parts: LYAPUNOV_PARTS,
                ..Self::default()
            },
            OrbitKind::Nrho => Self {
                degree: NRHO_DEGREE,
                ..Self::default()
            },
            OrbitKind::Halo => Self::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoldoutReport {
    /// Catalog indices of the withheld members.
    pub members: Vec<usize>,
    pub max_position_error: f64,
    pub max_velocity_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDiagnostics {
    pub max_residual: f64,
    pub max_position_residual: f64,
    pub max_velocity_residual: f64,
    pub holdout: Option<HoldoutReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MprModel {
    pub tag: FamilyTag,
    pub mu: f64,
    pub sub_manifolds: Vec<SubManifoldModel>,
    pub diagnostics: ModelDiagnostics,
}

/// Catalog indices withheld for a holdout fraction, never a slice boundary.
fn holdout_members(n: usize, parts: usize, fraction: f64) -> Vec<usize> {
    if fraction <= 0.0 {
        return Vec::new();
    }
    let stride = (1.0 / fraction).round().max(2.0) as usize;
    let bounds: Vec<usize> = (0..=parts.max(1)).map(|k| k * (n - 1) / parts.max(1)).collect();
    (1..n.saturating_sub(1))
        .filter(|i| i % stride == stride / 2 && !bounds.contains(i))
        .collect()
}

/// Largest position and velocity error of the model over sampled members.
pub fn reconstruction_error(
    model: &MprModel,
    members: &[PeriodicOrbit],
    samples: usize,
    max_step: f64,
) -> Result<(f64, f64)> {
    let params = model.params();
    let mut worst = (0.0f64, 0.0f64);
    for t in training_samples(members, 0, samples, max_step, &params)? {
        let d = model.eval(t.params)? - t.state;
        worst.0 = worst.0.max(d.fixed_rows::<3>(0).amax());
        worst.1 = worst.1.max(d.fixed_rows::<3>(3).amax());
    }
    Ok(worst)
}

/// Fits every slice of a catalog.
pub fn fit_family(catalog: &FamilyCatalog, settings: &FitSettings) -> Result<MprModel> {
    catalog.validate()?;
    if !(0.0..0.5).contains(&settings.holdout) {
        return Err(Error::Config("holdout must lie in [0, 0.5)".into()));
    }
    let params = catalog.params();
    let max_step = catalog.tolerances.max_step;
    let parts = split_submanifolds(catalog, settings.parts)?;
    let held = holdout_members(catalog.len(), settings.parts, settings.holdout);
    let mut sub_manifolds = Vec::with_capacity(parts.len());
    let mut offset = 0;
    for part in &parts {
        let kept: Vec<PeriodicOrbit> = part
            .members
            .iter()
            .enumerate()
            .filter(|(k, _)| !held.contains(&(offset + k)))
            .map(|(_, m)| *m)
            .collect();
        let training = training_samples(&kept, 0, settings.samples, max_step, &params)?;
        let mut sub = fit_mpr(&training, settings.degree)?;
        sub.nu_rate = mean_nu_rate(&kept, &training, 0);
        sub.chi_range = [part.members[0].chi, part.members[part.len() - 1].chi];
        sub_manifolds.push(sub);
        offset += part.len() - 1;
    }
    let mut model = MprModel {
        tag: catalog.tag,
        mu: catalog.mu,
        sub_manifolds,
        diagnostics: ModelDiagnostics::default(),
    };
    model.refresh_diagnostics();
    if !held.is_empty() {
        let members: Vec<PeriodicOrbit> = held.iter().map(|&i| catalog.members[i]).collect();
        let (p, v) = reconstruction_error(&model, &members, settings.samples, max_step)?;
        model.diagnostics.holdout = Some(HoldoutReport {
            members: held,
            max_position_error: p,
            max_velocity_error: v,
        });
    }
    Ok(model)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoefficientRecord {
    exponents: [u8; 3],
    alpha: f64,
    component: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubManifoldRecord {
    chi_range: [f64; 2],
    degree: usize,
    normalization: Normalization,
    nu_rate: f64,
    coefficients: Vec<CoefficientRecord>,
    diagnostics: FitDiagnostics,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    tag: FamilyTag,
    mu: f64,
    sub_manifolds: Vec<SubManifoldRecord>,
    diagnostics: ModelDiagnostics,
}

impl MprModel {
    pub fn params(&self) -> SystemParams {
        SystemParams { mu: self.mu }
    }

    pub fn libration_point(&self) -> Result<LibrationPoint> {
        libration_point(self.tag.point, &self.params())
    }

    pub fn chi_range(&self) -> (f64, f64) {
        (
            self.sub_manifolds[0].chi_range[0],
            self.sub_manifolds[self.sub_manifolds.len() - 1].chi_range[1],
        )
    }

    fn refresh_diagnostics(&mut self) {
        let mut d = ModelDiagnostics {
            holdout: self.diagnostics.holdout.take(),
            ..Default::default()
        };
        for s in &self.sub_manifolds {
            d.max_residual = d.max_residual.max(s.diagnostics.max_residual);
            d.max_position_residual = d.max_position_residual.max(s.diagnostics.max_position_residual);
            d.max_velocity_residual = d.max_velocity_residual.max(s.diagnostics.max_velocity_residual);
        }
        self.diagnostics = d;
    }

    /// Index of the slice owning `chi`; a shared boundary belongs to the lower slice.
    pub fn locate(&self, chi: f64) -> Result<usize> {
        let (lo, hi) = self.chi_range();
        if !(chi >= lo && chi <= hi) {
            return Err(Error::ChiOutOfRange { chi, lo, hi });
        }
        Ok(self
            .sub_manifolds
            .iter()
            .position(|s| chi <= s.chi_range[1])
            .unwrap_or(self.sub_manifolds.len() - 1))
    }

    pub fn eval(&self, p: ParamPair) -> Result<StateVector> {
        Ok(self.sub_manifolds[self.locate(p.chi)?].eval(p.chi, p.nu))
    }

    pub fn eval_jet(&self, p: ParamPair) -> Result<SurrogateJet> {
        Ok(self.sub_manifolds[self.locate(p.chi)?].eval_jet(p.chi, p.nu))
    }

    /// Slice whose range contains `[lo, hi]`.
    pub fn slice_for_bounds(&self, lo: f64, hi: f64) -> Result<&SubManifoldModel> {
        self.sub_manifolds
            .iter()
            .find(|s| lo >= s.chi_range[0] && hi <= s.chi_range[1] && lo <= hi)
            .ok_or_else(|| {
                Error::Config(format!(
                    "chi bounds [{lo}, {hi}] are not inside a single sub-manifold"
                ))
            })
    }

    /// `(chi, nu)` of the surrogate point closest in position to `state`.
    ///
    /// `nu` starts from the geometric angle and `chi` from a coarse scan;
    /// both are then refined by Gauss-Newton with `chi` clamped to the
    /// family range.
    pub fn project(&self, state: &StateVector) -> Result<ParamPair> {
        let lib = self.libration_point()?;
        let mut nu = location_angle(state, &self.tag, &lib)?;
        let (lo, hi) = self.chi_range();
        let target: Vector3<f64> = state.fixed_rows::<3>(0).into_owned();
        let miss = |p: ParamPair| -> Result<f64> {
            Ok((self.eval(p)?.fixed_rows::<3>(0) - target).norm())
        };
        let mut chi = lo;
        let mut best = f64::INFINITY;
        for k in 0..=32 {
            let c = lo + (hi - lo) * k as f64 / 32.0;
            let m = miss(ParamPair::new(c, nu))?;
            if m < best {
                best = m;
                chi = c;
            }
        }
        for _ in 0..30 {
            let jet = self.eval_jet(ParamPair::new(chi, nu))?;
            let r: Vector3<f64> = jet.state.fixed_rows::<3>(0) - target;
            let jc: Vector3<f64> = jet.d_chi.fixed_rows::<3>(0).into_owned();
            let jn: Vector3<f64> = jet.d_nu.fixed_rows::<3>(0).into_owned();
            let (a, b, c) = (jc.dot(&jc), jc.dot(&jn), jn.dot(&jn));
            let det = a * c - b * b;
            if det.abs() < 1e-300 {
                break;
            }
            let (g1, g2) = (jc.dot(&r), jn.dot(&r));
            let dchi = -(c * g1 - b * g2) / det;
            let dnu = -(a * g2 - b * g1) / det;
            let next_chi = (chi + dchi).clamp(lo, hi);
            let next_nu = wrap_angle(nu + dnu.clamp(-0.5, 0.5));
            let step = (next_chi - chi).abs() + (wrap_angle(next_nu - nu)).abs();
            chi = next_chi;
            nu = next_nu;
            if step < 1e-13 {
                break;
            }
        }
        Ok(ParamPair::new(chi, nu))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            tag: self.tag,
            mu: self.mu,
            sub_manifolds: self
                .sub_manifolds
                .iter()
                .map(|s| SubManifoldRecord {
                    chi_range: s.chi_range,
                    degree: s.degree,
                    normalization: s.normalization,
                    nu_rate: s.nu_rate,
                    coefficients: s
                        .exponents
                        .iter()
                        .zip(&s.alpha)
                        .flat_map(|(e, a)| {
                            (0..6).map(move |component| CoefficientRecord {
                                exponents: *e,
                                alpha: a[component],
                                component,
                            })
                        })
                        .collect(),
                    diagnostics: s.diagnostics,
                })
                .collect(),
            diagnostics: self.diagnostics.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        file.tag.validate()?;
        SystemParams::new(file.mu)?;
        if file.sub_manifolds.is_empty() {
            return Err(Error::InvalidInput("model has no sub-manifolds".into()));
        }
        let mut subs = Vec::with_capacity(file.sub_manifolds.len());
        for rec in file.sub_manifolds {
            if rec.degree > 20 || !(rec.chi_range[0] < rec.chi_range[1]) || !(rec.normalization.half_width > 0.0) {
                return Err(Error::InvalidInput("malformed sub-manifold header".into()));
            }
            let mut exponents: Vec<[u8; 3]> = Vec::new();
            let mut alpha: Vec<[f64; 6]> = Vec::new();
            for c in rec.coefficients {
                if c.component >= 6 || c.exponents.iter().map(|&e| e as usize).sum::<usize>() > rec.degree {
                    return Err(Error::InvalidInput(format!(
                        "coefficient {:?} (component {}) violates degree {}",
                        c.exponents, c.component, rec.degree
                    )));
                }
                let k = match exponents.iter().position(|e| *e == c.exponents) {
                    Some(k) => k,
                    None => {
                        exponents.push(c.exponents);
                        alpha.push([0.0; 6]);
                        exponents.len() - 1
                    }
                };
                alpha[k][c.component] = c.alpha;
            }
            subs.push(SubManifoldModel {
                chi_range: rec.chi_range,
                degree: rec.degree,
                normalization: rec.normalization,
                exponents,
                alpha,
                nu_rate: rec.nu_rate,
                diagnostics: rec.diagnostics,
            });
        }
        for w in subs.windows(2) {
            if w[0].chi_range[1] != w[1].chi_range[0] {
                return Err(Error::InvalidInput(
                    "sub-manifold ranges must be contiguous".into(),
                ));
            }
        }
        Ok(Self {
            tag: file.tag,
            mu: file.mu,
            sub_manifolds: subs,
            diagnostics: file.diagnostics,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Writes per-sample residuals of the catalog members as CSV.
    pub fn write_residuals<W: Write>(
        &self,
        catalog: &FamilyCatalog,
        samples: usize,
        out: W,
    ) -> Result<()> {
        let params = self.params();
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "member", "chi", "nu", "dx", "dy", "dz", "dvx", "dvy", "dvz",
        ])?;
        let data = training_samples(
            &catalog.members,
            0,
            samples,
            catalog.tolerances.max_step,
            &params,
        )?;
        for t in data {
            let d = self.eval(t.params)? - t.state;
            let mut row = vec![
                t.member.to_string(),
                t.params.chi.to_string(),
                t.params.nu.to_string(),
            ];
            row.extend(d.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}
