//! The BATS tip-growth model in the radial variable `r`.
//!
//! State `(eta, h, Psi, z)`: `eta = z' varsigma / r` (the tip curvature
//! variable), wall thickness `h`, wall age `Psi` and axial position `z`.
//! With `S = sqrt(1 - eta^2 r^2)`, `Q = r^2 + z^2`,
//! `Xi = Q - z sqrt(Q)` and `xi = (r^2 eta - z S) / Q^(3/2)`:
//!
//! ```text
//! r eta' = (eta/2) (1 - 3 mu(Psi) eta S / Xi)
//! r h'   = (xi Xi / S - Xi / (2 mu(Psi) eta S) - 1/2) h
//! r Psi' = Xi (h - xi Psi) / S
//! r z'   = r^2 eta / S
//! ```
//!
//! The tip limit is `p0 = (2 z0^2 / (3 mu(h0 z0^2)), h0, h0 z0^2, z0)`.
//! Deviations from `p0` form a singular problem with `sigma = 2`.

use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::dynsys::{seed_and_integrate, AutonomousSystem, DynError, IntegratorConfig, Profile};
use crate::fmt_f64;
use crate::frobenius::{
    default_degree, expand_solution_with, AnalyticSolution, FrobeniusError, SingularProblem, Verdict,
};
use crate::linalg::{DenseMatrix, LinalgError};
use crate::tseries::{SeriesError, SeriesVector, TruncatedSeries};

pub const DEFAULT_SCAN_ORDER: usize = 4;
/// Relative tolerance when matching a Taylor center to `Psi0`.
const CENTER_TOL: f64 = 1e-12;
const LOCUS_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum BatsError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("invalid viscosity: {0}")]
    Viscosity(String),
    #[error("outside the model domain: {0}")]
    Domain(String),
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error(transparent)]
    Frobenius(#[from] FrobeniusError),
    #[error(transparent)]
    Dyn(#[from] DynError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Viscosity as a function of wall age.
#[derive(Clone, Debug, PartialEq)]
pub enum ViscositySpec {
    /// `mu(Psi) = 1 + Psi^m`.
    Power { m: u32 },
    /// `mu(Psi) = sum_j coeffs[j] (Psi - center)^j`.
    Taylor { center: f64, coeffs: Vec<f64> },
}

impl ViscositySpec {
    pub fn mu(&self, psi: f64) -> f64 {
        match self {
            ViscositySpec::Power { m } => 1.0 + psi.powi(*m as i32),
            ViscositySpec::Taylor { center, coeffs } => {
                let u = psi - center;
                coeffs.iter().rev().fold(0.0, |acc, c| acc * u + c)
            }
        }
    }

    pub fn dmu(&self, psi: f64) -> f64 {
        match self {
            ViscositySpec::Power { m: 0 } => 0.0,
            ViscositySpec::Power { m } => *m as f64 * psi.powi(*m as i32 - 1),
            ViscositySpec::Taylor { center, coeffs } => {
                let u = psi - center;
                coeffs
                    .iter()
                    .enumerate()
                    .skip(1)
                    .rev()
                    .fold(0.0, |acc, (j, c)| acc * u + j as f64 * c)
            }
        }
    }

    /// Taylor coefficients `mu^(j)(center) / j!` for `j < len`.
    pub fn taylor(&self, center: f64, len: usize) -> Result<Vec<f64>, BatsError> {
        match self {
            ViscositySpec::Power { m } => {
                let m = *m as usize;
                let mut out = vec![0.0; len];
                let mut binom = 1.0;
                for (j, o) in out.iter_mut().enumerate().take(m + 1) {
                    *o = binom * center.powi((m - j) as i32);
                    binom *= (m - j) as f64 / (j + 1) as f64;
                }
                if let Some(o) = out.first_mut() {
                    *o += 1.0;
                }
                Ok(out)
            }
            ViscositySpec::Taylor { center: c, coeffs } => {
                if (c - center).abs() > CENTER_TOL * center.abs().max(1.0) {
                    return Err(SeriesError::CenterMismatch {
                        expected: center,
                        found: *c,
                    }
                    .into());
                }
                if coeffs.len() < len {
                    return Err(SeriesError::TaylorTooShort {
                        needed: len,
                        given: coeffs.len(),
                    }
                    .into());
                }
                Ok(coeffs[..len].to_vec())
            }
        }
    }
}

impl fmt::Display for ViscositySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViscositySpec::Power { m } => write!(f, "1+Psi^{m}"),
            ViscositySpec::Taylor { center, coeffs } => write!(f, "taylor@{center}[{}]", coeffs.len()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatsParams {
    pub h0: f64,
    pub z0: f64,
    pub viscosity: ViscositySpec,
}

impl BatsParams {
    pub fn new(h0: f64, z0: f64, viscosity: ViscositySpec) -> Result<Self, BatsError> {
        if !(h0 > 0.0) || !h0.is_finite() {
            return Err(BatsError::Params(format!("h0 must be positive, got {h0}")));
        }
        if !(z0 < 0.0) || !z0.is_finite() {
            return Err(BatsError::Params(format!("z0 must be negative, got {z0}")));
        }
        let p = BatsParams { h0, z0, viscosity };
        let psi0 = p.q();
        if let ViscositySpec::Taylor { center, coeffs } = &p.viscosity {
            if coeffs.is_empty() {
                return Err(BatsError::Viscosity("no Taylor coefficients".into()));
            }
            if (center - psi0).abs() > CENTER_TOL * psi0.max(1.0) {
                return Err(BatsError::Viscosity(format!(
                    "Taylor center {center} differs from the tip age h0 z0^2 = {psi0}"
                )));
            }
        }
        let (mu, dmu) = (p.viscosity.mu(psi0), p.viscosity.dmu(psi0));
        if !(mu > 0.0) {
            return Err(BatsError::Viscosity(format!("mu(Psi0) = {mu} is not positive")));
        }
        if !(dmu >= 0.0) {
            return Err(BatsError::Viscosity(format!("mu'(Psi0) = {dmu} is negative")));
        }
        Ok(p)
    }

    pub fn power(h0: f64, z0: f64, m: u32) -> Result<Self, BatsError> {
        Self::new(h0, z0, ViscositySpec::Power { m })
    }

    /// `q = h0 z0^2`, the tip age `Psi0`.
    pub fn q(&self) -> f64 {
        self.h0 * self.z0 * self.z0
    }

    pub fn mu0(&self) -> f64 {
        self.viscosity.mu(self.q())
    }

    pub fn dmu0(&self) -> f64 {
        self.viscosity.dmu(self.q())
    }

    pub fn describe(&self) -> String {
        format!("h0={} z0={} mu={}", self.h0, self.z0, self.viscosity)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TipPoint {
    pub eta0: f64,
    pub h0: f64,
    pub psi0: f64,
    pub z0: f64,
}

impl TipPoint {
    pub fn as_array(&self) -> [f64; 4] {
        [self.eta0, self.h0, self.psi0, self.z0]
    }
}

/// The nonzero tip limit. `eta(0) = 0` also balances the `eta` equation but
/// forces `r h' -> -infinity`, so it is not a tip of an analytic shape.
pub fn tip_point(p: &BatsParams) -> Result<TipPoint, BatsError> {
    let mu = p.mu0();
    if !(mu > 0.0) {
        return Err(BatsError::Viscosity(format!("mu(Psi0) = {mu} is not positive")));
    }
    Ok(TipPoint {
        eta0: 2.0 * p.z0 * p.z0 / (3.0 * mu),
        h0: p.h0,
        psi0: p.q(),
        z0: p.z0,
    })
}

/// Right-hand side `V` of `d(eta, h, Psi, z)/dr = V / r` at `rho = r^2`.
pub fn bats_field(p: &BatsParams, state: &[f64], rho: f64) -> Result<[f64; 4], BatsError> {
    let [eta, h, psi, z] = <[f64; 4]>::try_from(state)
        .map_err(|_| BatsError::Domain(format!("state has {} components, expected 4", state.len())))?;
    let s2 = 1.0 - eta * eta * rho;
    if !(s2 > 0.0) {
        return Err(BatsError::Domain(format!("surface closes: eta^2 r^2 = {} >= 1", 1.0 - s2)));
    }
    let q = rho + z * z;
    if !(q > 0.0) {
        return Err(BatsError::Domain("r^2 + z^2 vanishes".into()));
    }
    if rho == 0.0 && !(z < 0.0) {
        return Err(BatsError::Domain(format!("z = {z} at the tip is not negative")));
    }
    if !(eta > 0.0) {
        return Err(BatsError::Domain(format!("eta = {eta} is not positive")));
    }
    let mu = p.viscosity.mu(psi);
    if !(mu > 0.0) {
        return Err(BatsError::Domain(format!("mu({psi}) = {mu} is not positive")));
    }
    let s = s2.sqrt();
    let sq = q.sqrt();
    let big_xi = q - z * sq;
    let xi = (rho * eta - z * s) / (q * sq);
    Ok([
        0.5 * eta * (1.0 - 3.0 * mu * eta * s / big_xi),
        (xi * big_xi / s - big_xi / (2.0 * mu * eta * s) - 0.5) * h,
        big_xi * (h - xi * psi) / s,
        rho * eta / s,
    ])
}

/// Closed-form field in deviations from the tip point.
pub fn shifted_field(p: &BatsParams, tip: &TipPoint, x: &[f64], rho: f64) -> Result<[f64; 4], BatsError> {
    if x.len() != 4 {
        return Err(BatsError::Domain(format!("state has {} components, expected 4", x.len())));
    }
    let state: Vec<f64> = tip.as_array().iter().zip(x).map(|(a, b)| a + b).collect();
    bats_field(p, &state, rho)
}

/// The regularized system in deviation variables, closed-form backend.
pub fn shifted_system(p: &BatsParams) -> Result<AutonomousSystem, BatsError> {
    let tip = tip_point(p)?;
    let params = p.clone();
    Ok(AutonomousSystem::new(4, 2.0, format!("bats {}", p.describe()), move |x, rho| {
        shifted_field(&params, &tip, x, rho)
            .map(|v| v.to_vec())
            .map_err(|e| e.to_string())
    }))
}

/// Taylor expansion to degree `d` of the shifted field over
/// `(d_eta, d_h, d_Psi, d_z, rho)`.
pub fn bats_series(p: &BatsParams, d: u32) -> Result<SingularProblem, BatsError> {
    if d < 1 {
        return Err(BatsError::Params("series degree must be at least 1".into()));
    }
    let tip = tip_point(p)?;
    let var = |i| TruncatedSeries::variable(5, d, i);
    let one = TruncatedSeries::constant(5, d, 1.0);
    let eta = var(0).add_constant(tip.eta0);
    let h = var(1).add_constant(tip.h0);
    let psi = var(2).add_constant(tip.psi0);
    let z = var(3).add_constant(tip.z0);
    let rho = var(4);

    let s = one.sub(&eta.mul(&eta)?.mul(&rho)?)?.sqrt()?;
    let inv_s = s.reciprocal()?;
    let q = rho.add(&z.mul(&z)?)?;
    // constant term z0^2, so this is the branch sqrt(z0^2) = -z0
    let sq = q.sqrt()?;
    let big_xi = q.sub(&z.mul(&sq)?)?;
    let xi = rho.mul(&eta)?.sub(&z.mul(&s)?)?.mul(&q.mul(&sq)?.reciprocal()?)?;
    let phi = p.viscosity.taylor(tip.psi0, d as usize + 1)?;
    let mu = psi.compose_univariate(&phi, tip.psi0)?;
    let mu_eta = mu.mul(&eta)?;

    let v_eta = eta
        .scale(0.5)
        .mul(&one.sub(&mu_eta.mul(&s)?.mul(&big_xi.reciprocal()?)?.scale(3.0))?)?;
    let v_h = xi
        .mul(&big_xi)?
        .mul(&inv_s)?
        .sub(&big_xi.mul(&mu_eta.scale(2.0).reciprocal()?)?.mul(&inv_s)?)?
        .add_constant(-0.5)
        .mul(&h)?;
    let v_psi = big_xi.mul(&h.sub(&xi.mul(&psi)?)?)?.mul(&inv_s)?;
    let v_z = rho.mul(&eta)?.mul(&inv_s)?;

    let field = SeriesVector::new(vec![v_eta, v_h, v_psi, v_z])?;
    Ok(SingularProblem::new(2.0, field, format!("bats {}", p.describe()))?)
}

/// `A = grad_x V(0)` in closed form.
pub fn analytic_jacobian(p: &BatsParams) -> Result<DenseMatrix, BatsError> {
    let (h0, z0) = (p.h0, p.z0);
    let (mu, dmu) = (p.mu0(), p.dmu0());
    if !(mu > 0.0) {
        return Err(BatsError::Viscosity(format!("mu(Psi0) = {mu} is not positive")));
    }
    let z2 = z0 * z0;
    Ok(DenseMatrix::from_rows(&[
        [-0.5, 0.0, -z2 * dmu / (3.0 * mu * mu), 2.0 * z0 / (3.0 * mu)],
        [9.0 * h0 * mu / (4.0 * z2), 0.0, 3.0 * h0 * dmu / (2.0 * mu), -3.0 * h0 / z0],
        [0.0, 2.0 * z2, -2.0, 4.0 * h0 * z0],
        [0.0, 0.0, 0.0, 0.0],
    ]))
}

fn lambda_pair(q_dmu_over_mu: f64) -> (f64, f64) {
    let root = (48.0 * q_dmu_over_mu + 9.0).sqrt();
    (0.25 * (-5.0 - root), 0.25 * (-5.0 + root))
}

/// `[0, 0, lambda3, lambda4]`.
pub fn eigenvalue_formulas(p: &BatsParams) -> Result<[f64; 4], BatsError> {
    let (mu, dmu) = (p.mu0(), p.dmu0());
    if !(mu > 0.0) {
        return Err(BatsError::Viscosity(format!("mu(Psi0) = {mu} is not positive")));
    }
    let (l3, l4) = lambda_pair(p.q() * dmu / mu);
    Ok([0.0, 0.0, l3, l4])
}

/// `lambda4` for `mu = 1 + Psi^m` as a function of `q = h0 z0^2` alone.
pub fn lambda4_power(m: u32, q: f64) -> f64 {
    let qm = q.powi(m as i32);
    lambda_pair(m as f64 * qm / (1.0 + qm)).1
}

/// `1/4 (-5 + sqrt(48 m + 9))`, the supremum of `lambda4` over `q` for
/// `mu = 1 + Psi^m`.
pub fn lambda4_bound(m: u32) -> f64 {
    0.25 * (-5.0 + (48.0 * m as f64 + 9.0).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatsResonance {
    pub lambda4: f64,
    pub half_lambda4: f64,
    /// Distance from `lambda4 / 2` to the nearest positive integer.
    pub distance: f64,
    pub nearest: u64,
    pub verdict: Verdict,
}

/// `lambda4 / 2` must avoid the positive integers; `lambda3 < 0` and the
/// zero pair never resonate.
pub fn resonance_condition(p: &BatsParams, tol_res: f64) -> Result<BatsResonance, BatsError> {
    let l4 = eigenvalue_formulas(p)?[3];
    let half = 0.5 * l4;
    let nearest = half.round().max(1.0);
    let distance = (half - nearest).abs();
    let resonant = l4 > 0.0 && (l4 - 2.0 * nearest).abs() <= tol_res * l4.abs().max(1.0);
    Ok(BatsResonance {
        lambda4: l4,
        half_lambda4: half,
        distance,
        nearest: nearest as u64,
        verdict: if resonant { Verdict::Resonant } else { Verdict::Nonresonant },
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Locus {
    Root { q: f64, lambda4: f64 },
    /// `lambda4 - 2` keeps one sign on the bracket.
    None { lambda4_lo: f64, lambda4_hi: f64 },
}

pub const DEFAULT_LOCUS_BRACKET: (f64, f64) = (1e-6, 1e3);

/// Root of `lambda4(q) = 2` for `mu = 1 + Psi^m` by bisection; `lambda4` is
/// increasing in `q`.
pub fn resonance_locus(m: u32, bracket: (f64, f64)) -> Result<Locus, BatsError> {
    let (mut lo, mut hi) = bracket;
    if !(lo > 0.0) || !(hi > lo) {
        return Err(BatsError::Params(format!("bad bracket ({lo}, {hi})")));
    }
    let f = |q: f64| lambda4_power(m, q) - 2.0;
    let (flo, fhi) = (f(lo), f(hi));
    if flo > 0.0 || fhi < 0.0 {
        return Ok(Locus::None {
            lambda4_lo: flo + 2.0,
            lambda4_hi: fhi + 2.0,
        });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm.abs() <= LOCUS_TOL || mid == lo || mid == hi {
            return Ok(Locus::Root {
                q: mid,
                lambda4: fm + 2.0,
            });
        }
        if fm < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let q = 0.5 * (lo + hi);
    Ok(Locus::Root {
        q,
        lambda4: f(q) + 2.0,
    })
}

#[derive(Clone, Debug)]
pub struct ScanRow {
    pub m: u32,
    pub q: f64,
    pub lambda4: f64,
    pub dist_to_resonance: f64,
    /// `||c_K||_inf`, absent when the recursion failed.
    pub norm_ck: Option<f64>,
    /// Smallest LU pivot of `(2k I - A)` over `k = 1..K`.
    pub min_pivot: Option<f64>,
    pub error: Option<String>,
}

/// Expands the series at `h0 = q`, `z0 = -1` for every grid point, in
/// parallel. Failures are recorded per row.
pub fn coefficient_blowup_scan(m: u32, q_grid: &[f64], order: usize, tol_res: f64) -> Vec<ScanRow> {
    q_grid
        .par_iter()
        .map(|&q| {
            let lambda4 = lambda4_power(m, q);
            let half = 0.5 * lambda4;
            let mut row = ScanRow {
                m,
                q,
                lambda4,
                dist_to_resonance: (half - half.round().max(1.0)).abs(),
                norm_ck: None,
                min_pivot: None,
                error: None,
            };
            let run = || -> Result<AnalyticSolution, BatsError> {
                let p = BatsParams::power(q, -1.0, m)?;
                let series = bats_series(&p, default_degree(order))?;
                Ok(expand_solution_with(&series, order, tol_res)?)
            };
            match run() {
                Ok(s) => {
                    row.norm_ck = s
                        .coefficients
                        .last()
                        .map(|c| c.iter().fold(0.0f64, |acc, v| acc.max(v.abs())));
                    row.min_pivot = s.per_order.iter().map(|d| d.pivot_margin).reduce(f64::min);
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect()
}

pub fn scan_to_csv(rows: &[ScanRow], config_comment: &str) -> String {
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let mut s = format!("# {config_comment}\nm,q,lambda4,dist_to_resonance,norm_cK,min_pivot\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.m,
            fmt_f64(r.q),
            fmt_f64(r.lambda4),
            fmt_f64(r.dist_to_resonance),
            opt(r.norm_ck),
            opt(r.min_pivot)
        ));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TipSample {
    pub s: f64,
    pub r: f64,
    pub z: f64,
    pub h: f64,
    pub psi: f64,
    pub varsigma: f64,
    pub eta: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TipProfile {
    pub samples: Vec<TipSample>,
}

impl TipProfile {
    pub fn to_csv(&self, config_comment: &str) -> String {
        let mut out = format!("# {config_comment}\ns,r,z,h,Psi,varsigma,eta\n");
        for p in &self.samples {
            let row = [p.s, p.r, p.z, p.h, p.psi, p.varsigma, p.eta].map(fmt_f64);
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Termination {
    Completed,
    /// `eta^2 r^2` reached 1: `varsigma = 0`, the surface turns over.
    SurfaceCloses { r: f64 },
    DomainViolation { r: f64, reason: String },
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Termination::Completed => f.write_str("completed"),
            Termination::SurfaceCloses { r } => write!(f, "surface closes at r={r}"),
            Termination::DomainViolation { r, reason } => write!(f, "stopped at r={r}: {reason}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TipShape {
    pub tip: TipPoint,
    pub solution: AnalyticSolution,
    /// Raw deviation profile in `t = ln r`.
    pub profile: Profile,
    pub shape: TipProfile,
    pub termination: Termination,
}

/// Subintervals per accepted step for the arclength quadrature.
const QUAD_REFINE: usize = 16;
/// `eta^2 r^2` above which a stalled integration counts as the surface
/// closing.
const CLOSING_LEVEL: f64 = 0.99;

/// Series at the tip, integration in `t = ln r` with the closed-form field,
/// and arclength `s(r) = int_0^r 1/varsigma`.
pub fn tip_shape(
    p: &BatsParams,
    order: usize,
    r0: f64,
    r1: f64,
    cfg: &IntegratorConfig,
    tol_res: f64,
) -> Result<TipShape, BatsError> {
    let tip = tip_point(p)?;
    let series = bats_series(p, default_degree(order))?;
    let solution = expand_solution_with(&series, order, tol_res)?;
    let sys = shifted_system(p)?;
    let (profile, termination) = match seed_and_integrate(&sys, &solution, r0, r1, cfg) {
        Ok(profile) => (profile, Termination::Completed),
        Err(e) => {
            let Some(t) = e.failure_time() else {
                return Err(e.into());
            };
            let r = t.exp();
            let reason = match &e {
                DynError::Field { message, .. } => message.clone(),
                other => other.to_string(),
            };
            let trajectory = match e {
                DynError::StepUnderflow { partial, .. }
                | DynError::MaxSteps { partial, .. }
                | DynError::Field { partial, .. } => *partial,
                _ => unreachable!("failure_time is only set for integration errors"),
            };
            let closing = trajectory
                .last_state()
                .map(|y| (tip.eta0 + y[0]).powi(2) * y[4] >= CLOSING_LEVEL)
                .unwrap_or(false);
            let term = if reason.starts_with("surface closes") || closing {
                Termination::SurfaceCloses { r }
            } else {
                Termination::DomainViolation { r, reason }
            };
            (
                Profile {
                    sigma: 2.0,
                    trajectory,
                },
                term,
            )
        }
    };
    let shape = arclength_profile(&tip, &profile);
    Ok(TipShape {
        tip,
        solution,
        profile,
        shape,
        termination,
    })
}

fn inv_varsigma(tip: &TipPoint, y: &[f64], r: f64) -> f64 {
    let eta = tip.eta0 + y[0];
    1.0 / (1.0 - eta * eta * r * r).sqrt()
}

fn arclength_profile(tip: &TipPoint, profile: &Profile) -> TipProfile {
    let traj = &profile.trajectory;
    let mut samples = Vec::with_capacity(traj.len());
    let mut s = 0.0;
    for (i, (t, y)) in traj.times.iter().zip(&traj.states).enumerate() {
        let r = t.exp();
        if i == 0 {
            // 1/varsigma = 1 + eta0^2 r^2 / 2 + O(r^4) on [0, r0]
            s = r + tip.eta0 * tip.eta0 * r * r * r / 6.0;
        } else {
            let t_prev = traj.times[i - 1];
            let dt = (t - t_prev) / QUAD_REFINE as f64;
            let mut prev_r = t_prev.exp();
            let mut prev_f = inv_varsigma(tip, &traj.states[i - 1], prev_r);
            for j in 1..=QUAD_REFINE {
                let tj = if j == QUAD_REFINE { *t } else { t_prev + dt * j as f64 };
                let yj = if j == QUAD_REFINE {
                    y.clone()
                } else {
                    traj.sample(tj).expect("inside the accepted range")
                };
                let rj = tj.exp();
                let fj = inv_varsigma(tip, &yj, rj);
                s += 0.5 * (fj + prev_f) * (rj - prev_r);
                prev_r = rj;
                prev_f = fj;
            }
        }
        let eta = tip.eta0 + y[0];
        samples.push(TipSample {
            s,
            r,
            z: tip.z0 + y[3],
            h: tip.h0 + y[1],
            psi: tip.psi0 + y[2],
            varsigma: (1.0 - eta * eta * r * r).sqrt(),
            eta,
        });
    }
    TipProfile { samples }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynsys::numeric_jacobian;
    use crate::frobenius::{check_nonresonance, expand_solution, TOL_RES};
    use crate::linalg::eigenvalues;
    use proptest::prelude::*;

    fn base() -> BatsParams {
        BatsParams::power(1.0, -1.0, 2).unwrap()
    }

    #[test]
    fn parameter_validation() {
        assert!(BatsParams::power(0.0, -1.0, 2).is_err());
        assert!(BatsParams::power(1.0, 0.5, 2).is_err());
        let bad = ViscositySpec::Taylor {
            center: 1.0,
            coeffs: vec![-1.0, 0.0],
        };
        assert!(BatsParams::new(1.0, -1.0, bad).is_err());
        let decreasing = ViscositySpec::Taylor {
            center: 1.0,
            coeffs: vec![1.0, -1.0],
        };
        assert!(BatsParams::new(1.0, -1.0, decreasing).is_err());
        let off_center = ViscositySpec::Taylor {
            center: 2.0,
            coeffs: vec![1.0, 0.0],
        };
        assert!(BatsParams::new(1.0, -1.0, off_center).is_err());
    }

    #[test]
    fn viscosity_taylor_data() {
        let v = ViscositySpec::Power { m: 3 };
        let c = v.taylor(2.0, 6).unwrap();
        // 1 + (2 + u)^3 = 9 + 12 u + 6 u^2 + u^3
        assert_eq!(c, vec![9.0, 12.0, 6.0, 1.0, 0.0, 0.0]);
        assert_eq!(v.dmu(2.0), 12.0);
        let t = ViscositySpec::Taylor {
            center: 1.0,
            coeffs: vec![2.0, 2.0, 1.0],
        };
        assert_eq!(t.mu(1.5), 2.0 + 1.0 + 0.25);
        assert_eq!(t.dmu(1.5), 2.0 + 1.0);
        assert!(matches!(
            t.taylor(1.0, 4),
            Err(BatsError::Series(SeriesError::TaylorTooShort { needed: 4, given: 3 }))
        ));
    }

    #[test]
    fn tip_point_examples() {
        let tp = tip_point(&base()).unwrap();
        assert!((tp.eta0 - 1.0 / 3.0).abs() < 1e-16);
        assert_eq!(tp.psi0, 1.0);
        let c = ViscositySpec::Taylor {
            center: 1.0,
            coeffs: vec![1.5, 0.0],
        };
        let tp = tip_point(&BatsParams::new(1.0, -1.0, c).unwrap()).unwrap();
        assert!((tp.eta0 - 2.0 / 4.5).abs() < 1e-16);
        // eta0 only sees z0^2 and mu(h0 z0^2)
        let a = tip_point(&BatsParams::power(4.0, -0.5, 3).unwrap()).unwrap();
        let b = tip_point(&BatsParams::power(1.0, -1.0, 3).unwrap()).unwrap();
        assert!((a.eta0 - b.eta0 * 0.25).abs() < 1e-15);
    }

    #[test]
    fn field_helpers_at_tip() {
        let p = base();
        let tp = tip_point(&p).unwrap();
        let v = bats_field(&p, &tp.as_array(), 0.0).unwrap();
        assert!(v.iter().all(|c| c.abs() < 1e-15), "{v:?}");
        // V_z ~ rho eta0 for small rho
        let rho = 1e-6;
        let v = bats_field(&p, &tp.as_array(), rho).unwrap();
        assert!((v[3] - rho * tp.eta0).abs() < rho * rho);
        assert!(bats_field(&p, &[2.0, 1.0, 1.0, -1.0], 0.5).is_err());
        assert!(bats_field(&p, &[0.3, 1.0, 1.0, 0.5], 0.0).is_err());
    }

    #[test]
    fn jacobian_at_reference_parameters() {
        let a = analytic_jacobian(&base()).unwrap();
        let expected = [
            [-0.5, 0.0, -1.0 / 6.0, -1.0 / 3.0],
            [4.5, 0.0, 1.5, 3.0],
            [0.0, 2.0, -2.0, -4.0],
            [0.0, 0.0, 0.0, 0.0],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert!((a[(i, j)] - expected[i][j]).abs() < 1e-15);
            }
        }
        let series = bats_series(&base(), 8).unwrap();
        let (sa, b) = series.linearization();
        for i in 0..4 {
            for j in 0..4 {
                assert!((sa[(i, j)] - expected[i][j]).abs() <= 1e-10 * expected[i][j].abs().max(1.0));
            }
        }
        let expected_b = [29.0 / 216.0, -49.0 / 24.0, 22.0 / 9.0, 1.0 / 3.0];
        for (u, v) in b.iter().zip(expected_b) {
            assert!((u - v).abs() < 1e-12, "{b:?}");
        }
    }

    #[test]
    fn series_constant_and_backends_agree() {
        let p = BatsParams::power(0.7, -1.3, 3).unwrap();
        let series = bats_series(&p, 6).unwrap();
        let tip = tip_point(&p).unwrap();
        for c in series.field().components() {
            assert_eq!(c.constant_term(), 0.0);
        }
        let x = [1e-3, -7e-4, 4e-4, -2e-4];
        let rho = 1e-6;
        let closed = shifted_field(&p, &tip, &x, rho).unwrap();
        let approx = series.eval(&x, rho).unwrap();
        for (u, v) in closed.iter().zip(&approx) {
            assert!((u - v).abs() < 1e-8, "{closed:?} vs {approx:?}");
        }
        let custom = ViscositySpec::Taylor {
            center: 1.0,
            coeffs: vec![2.0, 2.0, 1.0],
        };
        let pc = BatsParams::new(1.0, -1.0, custom).unwrap();
        assert!(bats_series(&pc, 4).is_err());
        let a = bats_series(&pc, 2).unwrap();
        let b = bats_series(&base(), 2).unwrap();
        for (u, v) in a.field().components().iter().zip(b.field().components()) {
            for (idx, c) in u.terms() {
                assert!((c - v.coefficient(idx)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn numeric_jacobian_matches() {
        let p = BatsParams::power(2.0, -0.5, 4).unwrap();
        let tip = tip_point(&p).unwrap();
        let num = numeric_jacobian(|x: &[f64]| shifted_field(&p, &tip, x, 0.0).map(|v| v.to_vec()), &[0.0; 4], 1e-6)
            .unwrap();
        let a = analytic_jacobian(&p).unwrap();
        for i in 0..4 {
            let scale = a.row(i).iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for j in 0..4 {
                assert!((num[(i, j)] - a[(i, j)]).abs() <= 1e-6 * scale);
            }
        }
    }

    #[test]
    fn spectrum_and_condition() {
        let p = base();
        let ev = eigenvalue_formulas(&p).unwrap();
        let r57 = 57f64.sqrt();
        assert!((ev[2] - (-5.0 - r57) / 4.0).abs() < 1e-15);
        assert!((ev[3] - (-5.0 + r57) / 4.0).abs() < 1e-15);
        let mut got: Vec<f64> = eigenvalues(&analytic_jacobian(&p).unwrap()).unwrap().sorted().iter().map(|e| e.re).collect();
        got.sort_by(f64::total_cmp);
        let mut want = ev.to_vec();
        want.sort_by(f64::total_cmp);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9);
        }
        let flat = BatsParams::new(
            1.0,
            -1.0,
            ViscositySpec::Taylor {
                center: 1.0,
                coeffs: vec![3.0, 0.0],
            },
        )
        .unwrap();
        assert_eq!(eigenvalue_formulas(&flat).unwrap(), [0.0, 0.0, -2.0, -0.5]);
        assert_eq!(resonance_condition(&p, TOL_RES).unwrap().verdict, Verdict::Nonresonant);
        for (m, q) in [(4u32, 5f64.powf(0.25)), (5, 2f64.powf(0.2))] {
            let pr = BatsParams::power(q, -1.0, m).unwrap();
            let rc = resonance_condition(&pr, TOL_RES).unwrap();
            assert_eq!(rc.verdict, Verdict::Resonant);
            assert!((rc.lambda4 - 2.0).abs() < 1e-12);
            let (a, _) = bats_series(&pr, 4).unwrap().linearization();
            let report = check_nonresonance(&a, 2.0, TOL_RES).unwrap();
            assert_eq!(report.verdict, Verdict::Resonant);
            assert_eq!(report.resonant_orders[0].order, 1);
        }
    }

    #[test]
    fn loci() {
        for (m, want) in [(4u32, 5f64.powf(0.25)), (5, 2f64.powf(0.2))] {
            let Locus::Root { q, lambda4 } = resonance_locus(m, DEFAULT_LOCUS_BRACKET).unwrap() else {
                panic!("no root for m={m}")
            };
            assert!((lambda4 - 2.0).abs() <= 1e-12);
            assert!((q - want).abs() < 1e-11, "{q} vs {want}");
        }
        for m in [2, 3] {
            assert!(matches!(resonance_locus(m, (1e-9, 1e3)).unwrap(), Locus::None { .. }));
        }
        assert!(resonance_locus(4, (2.0, 1.0)).is_err());
    }

    #[test]
    fn lambda4_increasing_and_bounded() {
        for m in 1..=6 {
            let mut prev = f64::NEG_INFINITY;
            for i in 1..400 {
                let q = 0.01 * i as f64;
                let l = lambda4_power(m, q);
                assert!(l > prev);
                assert!(l < lambda4_bound(m));
                prev = l;
            }
        }
    }

    #[test]
    fn blowup_scan_rows() {
        let grid = [1.3, 1.40, 1.47, 1.49, 1.494];
        let rows = coefficient_blowup_scan(4, &grid, 2, TOL_RES);
        let norms: Vec<f64> = rows.iter().map(|r| r.norm_ck.unwrap()).collect();
        assert!(norms.windows(2).all(|w| w[1] > w[0]), "{norms:?}");
        assert_eq!(rows.iter().map(|r| r.q).collect::<Vec<_>>(), grid);
        let on_locus = coefficient_blowup_scan(4, &[5f64.powf(0.25)], 2, TOL_RES);
        assert!(on_locus[0].norm_ck.is_none());
        assert!(on_locus[0].error.as_deref().unwrap().contains("k=1"));
        let csv = scan_to_csv(&rows, "m=4 K=2");
        assert_eq!(csv.lines().nth(1), Some("m,q,lambda4,dist_to_resonance,norm_cK,min_pivot"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn tip_shape_near_tip() {
        let p = base();
        let cfg = IntegratorConfig::with_tolerances(1e-10, 1e-10);
        let shape = tip_shape(&p, 6, 1e-3, 0.5, &cfg, TOL_RES).unwrap();
        assert_eq!(shape.termination, Termination::Completed);
        let first = shape.shape.samples[0];
        let r0 = first.r;
        assert!((first.varsigma - 1.0).abs() < 1e-6);
        let c1 = &shape.solution.coefficients[0];
        let c2 = shape.solution.coefficients[1].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tip = shape.tip;
        for (got, (base, c)) in [first.h, first.psi, first.z].iter().zip([(tip.h0, c1[1]), (tip.psi0, c1[2]), (tip.z0, c1[3])]) {
            assert!((got - base - c * r0 * r0).abs() <= 10.0 * r0.powi(4) * c2);
        }
        // z - z0 = eta0 r^2 / 2 + O(r^4)
        for smp in shape.shape.samples.iter().take_while(|s| s.r < 1e-2) {
            assert!((smp.z - tip.z0 - 0.5 * tip.eta0 * smp.r * smp.r).abs() < 2.0 * smp.r.powi(4));
        }
        let last = shape.shape.samples.last().unwrap();
        assert!((last.r - 0.5).abs() < 1e-12);
        assert!(shape.shape.samples.windows(2).all(|w| w[1].s > w[0].s && w[1].r > w[0].r));
        // ds/dr = 1/varsigma >= 1, so s >= r
        assert!(shape.shape.samples.iter().all(|x| x.s >= x.r));
        let csv = shape.shape.to_csv("h0=1");
        assert_eq!(csv.lines().nth(1), Some("s,r,z,h,Psi,varsigma,eta"));
    }

    #[test]
    fn tip_profile_geometry() {
        let p = base();
        let cfg = IntegratorConfig::with_tolerances(1e-11, 1e-12);
        let shape = tip_shape(&p, 6, 1e-3, 0.5, &cfg, TOL_RES).unwrap();
        let traj = &shape.profile.trajectory;
        for smp in shape.shape.samples.iter().filter(|s| s.r > 0.05) {
            let t = smp.r.ln();
            let dt = 1e-5;
            let (a, b) = (traj.sample(t - dt), traj.sample(t + dt));
            let (Some(a), Some(b)) = (a, b) else { continue };
            let dz_dr = (b[3] - a[3]) / (smp.r * 2.0 * dt);
            let expected = smp.r * smp.eta / smp.varsigma;
            assert!((dz_dr - expected).abs() < 1e-6 * expected.abs().max(1.0), "r={}: {dz_dr} vs {expected}", smp.r);
            // varsigma^2 + (dz/ds)^2 = 1 with dz/ds = dz/dr * varsigma
            let dz_ds = dz_dr * smp.varsigma;
            assert!((smp.varsigma.powi(2) + dz_ds * dz_ds - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn tip_shape_stops_when_surface_closes() {
        let p = base();
        let shape = tip_shape(&p, 6, 1e-3, 10.0, &IntegratorConfig::default(), TOL_RES).unwrap();
        match shape.termination {
            Termination::SurfaceCloses { r } | Termination::DomainViolation { r, .. } => {
                assert!(r > 0.5 && r < 10.0, "{}", shape.termination)
            }
            Termination::Completed => panic!("expected the run to stop"),
        }
        assert!(!shape.shape.samples.is_empty());
    }

    #[test]
    fn resonant_parameters_are_rejected() {
        let p = BatsParams::power(5f64.powf(0.25), -1.0, 4).unwrap();
        let err = tip_shape(&p, 4, 1e-3, 0.5, &IntegratorConfig::default(), TOL_RES).unwrap_err();
        assert!(matches!(
            err,
            BatsError::Frobenius(FrobeniusError::Obstructed { order: 1, .. })
        ));
        let err = expand_solution(&bats_series(&p, 6).unwrap(), 4).unwrap_err();
        assert_eq!(err.partial().unwrap().order(), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn equilibrium_identity(h0 in 0.1f64..5.0, z0 in -3.0f64..-0.1, m in 1u32..7) {
            let p = BatsParams::power(h0, z0, m).unwrap();
            let tp = tip_point(&p).unwrap();
            let v = bats_field(&p, &tp.as_array(), 0.0).unwrap();
            let scale = tp.as_array().iter().fold(1.0f64, |a, b| a.max(b.abs()));
            prop_assert!(v.iter().all(|c| c.abs() <= 1e-12 * scale));
            let ev = eigenvalue_formulas(&p).unwrap();
            prop_assert!(ev[2] < 0.0);
            prop_assert!(ev[3] < lambda4_bound(m));
            prop_assert!((ev[3] - lambda4_power(m, p.q())).abs() < 1e-12);
        }
    }
}
