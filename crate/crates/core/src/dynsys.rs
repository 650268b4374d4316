//! The regularized autonomous system `x' = V(x, rho)`, `rho' = sigma rho`
//! in `t = ln r`, an adaptive Dormand-Prince 5(4) integrator for it, and
//! series-seeded continuation of the analytic branch away from `r = 0`.
//!
//! States are stored as `[x_1, .., x_n, rho]`.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::fmt_f64;
use crate::frobenius::{AnalyticSolution, SingularProblem};
use crate::linalg::DenseMatrix;

type FieldFn = dyn Fn(&[f64], f64) -> Result<Vec<f64>, String> + Send + Sync;

/// `(x, rho) -> V(x, rho)` plus the `rho` rate `sigma`.
#[derive(Clone)]
pub struct AutonomousSystem {
    n: usize,
    sigma: f64,
    field: Arc<FieldFn>,
    label: String,
}

impl fmt::Debug for AutonomousSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AutonomousSystem")
            .field("n", &self.n)
            .field("sigma", &self.sigma)
            .field("label", &self.label)
            .finish()
    }
}

impl AutonomousSystem {
    pub fn new<F>(n: usize, sigma: f64, label: impl Into<String>, field: F) -> Self
    where
        F: Fn(&[f64], f64) -> Result<Vec<f64>, String> + Send + Sync + 'static,
    {
        AutonomousSystem {
            n,
            sigma,
            field: Arc::new(field),
            label: label.into(),
        }
    }

    /// Series-backed system: `V` is the truncated Taylor polynomial.
    pub fn from_problem(p: &SingularProblem) -> Self {
        let q = p.clone();
        AutonomousSystem::new(p.dim(), p.sigma(), p.label(), move |x, rho| {
            q.eval(x, rho).map_err(|e| e.to_string())
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn eval_field(&self, x: &[f64], rho: f64) -> Result<Vec<f64>, String> {
        let v = (self.field)(x, rho)?;
        if v.len() != self.n {
            return Err(format!("field returned {} components, expected {}", v.len(), self.n));
        }
        if let Some(i) = v.iter().position(|c| !c.is_finite()) {
            return Err(format!("field component {i} is not finite"));
        }
        Ok(v)
    }

    /// Full right-hand side `(V(x, rho), sigma rho)` of a state.
    pub fn rhs(&self, y: &[f64]) -> Result<Vec<f64>, String> {
        let rho = y[self.n];
        let mut v = self.eval_field(&y[..self.n], rho)?;
        v.push(self.sigma * rho);
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub initial_step: f64,
    pub max_steps: usize,
    pub min_step: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            rel_tol: 1e-10,
            abs_tol: 1e-12,
            initial_step: 1e-3,
            max_steps: 200_000,
            min_step: 1e-13,
        }
    }
}

impl IntegratorConfig {
    pub fn with_tolerances(rel_tol: f64, abs_tol: f64) -> Self {
        IntegratorConfig {
            rel_tol,
            abs_tol,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), DynError> {
        let bad = |msg: &str| Err(DynError::Config(msg.to_string()));
        if !(self.rel_tol > 0.0) || !(self.abs_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.min_step > 0.0) || !(self.min_step < self.initial_step) {
            return bad("need 0 < min_step < initial_step");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive");
        }
        Ok(())
    }
}

/// Accepted steps of one integration. `times` is monotone in the direction
/// of integration (decreasing for backward runs).
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub derivatives: Vec<Vec<f64>>,
    pub accepted: usize,
    pub rejected: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_state(&self) -> Option<&[f64]> {
        self.states.last().map(Vec::as_slice)
    }

    pub fn last_time(&self) -> Option<f64> {
        self.times.last().copied()
    }

    /// Cubic Hermite interpolation between accepted steps.
    pub fn sample(&self, t: f64) -> Option<Vec<f64>> {
        let n = self.times.len();
        if n == 0 {
            return None;
        }
        let forward = n < 2 || self.times[n - 1] >= self.times[0];
        let key = |s: f64| if forward { s } else { -s };
        let (lo, hi) = (key(self.times[0]), key(self.times[n - 1]));
        let kt = key(t);
        if kt < lo || kt > hi {
            return None;
        }
        if n == 1 {
            return Some(self.states[0].clone());
        }
        let i = self.times.partition_point(|&s| key(s) <= kt).clamp(1, n - 1) - 1;
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let h = t1 - t0;
        let th = (t - t0) / h;
        let h00 = (1.0 + 2.0 * th) * (1.0 - th) * (1.0 - th);
        let h10 = th * (1.0 - th) * (1.0 - th);
        let h01 = th * th * (3.0 - 2.0 * th);
        let h11 = th * th * (th - 1.0);
        let (y0, y1) = (&self.states[i], &self.states[i + 1]);
        let (f0, f1) = (&self.derivatives[i], &self.derivatives[i + 1]);
        Some(
            (0..y0.len())
                .map(|j| h00 * y0[j] + h10 * h * f0[j] + h01 * y1[j] + h11 * h * f1[j])
                .collect(),
        )
    }
}

#[derive(Debug, Error)]
pub enum DynError {
    #[error("invalid integrator configuration: {0}")]
    Config(String),
    #[error("state has length {found}, expected {expected}")]
    StateLength { expected: usize, found: usize },
    #[error("step size underflow at t={t}")]
    StepUnderflow { t: f64, partial: Box<Trajectory> },
    #[error("maximum number of steps exceeded at t={t}")]
    MaxSteps { t: f64, partial: Box<Trajectory> },
    #[error("field evaluation failed at t={t}: {message}")]
    Field {
        t: f64,
        message: String,
        partial: Box<Trajectory>,
    },
    #[error("seed radius {r0} lies outside the trusted region of the series")]
    SeedUntrusted { r0: f64 },
    #[error("invalid span: need 0 < r0 < r1, got r0={r0}, r1={r1}")]
    Span { r0: f64, r1: f64 },
}

impl DynError {
    pub fn partial(&self) -> Option<&Trajectory> {
        match self {
            DynError::StepUnderflow { partial, .. }
            | DynError::MaxSteps { partial, .. }
            | DynError::Field { partial, .. } => Some(partial),
            _ => None,
        }
    }

    /// Time of failure for integration errors.
    pub fn failure_time(&self) -> Option<f64> {
        match self {
            DynError::StepUnderflow { t, .. } | DynError::MaxSteps { t, .. } | DynError::Field { t, .. } => Some(*t),
            _ => None,
        }
    }
}

// Dormand-Prince 5(4) tableau. The field is autonomous, so the nodes are not needed.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const BETA: f64 = 0.04;
const ALPHA: f64 = 0.2 - 0.75 * BETA;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;

/// Integrates `y' = (V(x, rho), sigma rho)` from `t_span.0` to `t_span.1`
/// (either direction). The local error estimate of every component is
/// held below `rel_tol * ||y||_inf + abs_tol`.
pub fn integrate(
    sys: &AutonomousSystem,
    y0: &[f64],
    t_span: (f64, f64),
    cfg: &IntegratorConfig,
) -> Result<Trajectory, DynError> {
    cfg.validate()?;
    let dim = sys.dim() + 1;
    if y0.len() != dim {
        return Err(DynError::StateLength {
            expected: dim,
            found: y0.len(),
        });
    }
    let (t0, t1) = t_span;
    let mut traj = Trajectory::default();
    let f0 = sys.rhs(y0).map_err(|message| DynError::Field {
        t: t0,
        message,
        partial: Box::default(),
    })?;
    traj.times.push(t0);
    traj.states.push(y0.to_vec());
    traj.derivatives.push(f0.clone());

    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut f = f0;
    let mut h = cfg.initial_step.min((t1 - t0).abs());
    let mut err_prev: f64 = 1e-4;
    let mut attempts = 0usize;
    let mut last_failure: Option<String> = None;
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; dim]; 7];
    let mut tmp = vec![0.0; dim];

    loop {
        let remaining = (t1 - t).abs();
        if remaining <= 1e-14 * t.abs().max(1.0) {
            return Ok(traj);
        }
        if attempts >= cfg.max_steps {
            return Err(DynError::MaxSteps {
                t,
                partial: Box::new(traj),
            });
        }
        attempts += 1;
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        let hs = dir * h;

        k[0].copy_from_slice(&f);
        let mut failure = None;
        for s in 1..7 {
            for j in 0..dim {
                let mut acc = 0.0;
                for (m, a) in A[s][..s].iter().enumerate() {
                    acc += a * k[m][j];
                }
                tmp[j] = y[j] + hs * acc;
            }
            match sys.rhs(&tmp) {
                Ok(v) => k[s] = v,
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        let err = if failure.is_some() {
            f64::INFINITY
        } else {
            // stage 7 is evaluated at the 5th-order solution (FSAL)
            let size = y.iter().chain(&tmp).fold(0.0f64, |m, v| m.max(v.abs()));
            let scale = cfg.abs_tol + cfg.rel_tol * size;
            let mut worst: f64 = 0.0;
            for j in 0..dim {
                let mut e = 0.0;
                for (m, ec) in E.iter().enumerate() {
                    e += ec * k[m][j];
                }
                worst = worst.max((hs * e).abs() / scale);
            }
            worst
        };

        if err <= 1.0 {
            t = if last { t1 } else { t + hs };
            y.copy_from_slice(&tmp);
            f.clone_from(&k[6]);
            traj.times.push(t);
            traj.states.push(y.clone());
            traj.derivatives.push(f.clone());
            traj.accepted += 1;
            last_failure = None;
            let factor = if err == 0.0 {
                MAX_FACTOR
            } else {
                (SAFETY * err.powf(-ALPHA) * err_prev.powf(BETA)).clamp(MIN_FACTOR, MAX_FACTOR)
            };
            err_prev = err.max(1e-4);
            h *= factor;
        } else {
            traj.rejected += 1;
            if failure.is_some() {
                last_failure = failure;
                h *= 0.25;
            } else {
                h *= (SAFETY * err.powf(-0.2)).max(MIN_FACTOR);
            }
            if h < cfg.min_step {
                return Err(match last_failure {
                    Some(message) => DynError::Field {
                        t,
                        message,
                        partial: Box::new(traj),
                    },
                    None => DynError::StepUnderflow {
                        t,
                        partial: Box::new(traj),
                    },
                });
            }
        }
    }
}

/// Samples of the analytic branch indexed by `r = e^t`.
#[derive(Clone, Debug)]
pub struct Profile {
    pub sigma: f64,
    pub trajectory: Trajectory,
}

impl Profile {
    pub fn dim(&self) -> usize {
        self.trajectory.states.first().map_or(0, |s| s.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory.is_empty()
    }

    pub fn radii(&self) -> Vec<f64> {
        self.trajectory.times.iter().map(|t| t.exp()).collect()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        let s = &self.trajectory.states[i];
        &s[..s.len() - 1]
    }

    pub fn rho(&self, i: usize) -> f64 {
        *self.trajectory.states[i].last().expect("nonempty state")
    }

    /// Dense-output state at radius `r`.
    pub fn at_r(&self, r: f64) -> Option<Vec<f64>> {
        self.trajectory.sample(r.ln())
    }

    pub fn to_csv(&self, config_comment: &str) -> String {
        let n = self.dim();
        let mut s = format!("# {config_comment}\nt,r");
        for i in 1..=n {
            s.push_str(&format!(",x_{i}"));
        }
        s.push_str(",rho\n");
        for (t, y) in self.trajectory.times.iter().zip(&self.trajectory.states) {
            s.push_str(&fmt_f64(*t));
            s.push(',');
            s.push_str(&fmt_f64(t.exp()));
            for v in y {
                s.push(',');
                s.push_str(&fmt_f64(*v));
            }
            s.push('\n');
        }
        s
    }
}

/// States on the analytic branch are `O(rho)`, far below a typical
/// absolute tolerance near the tip. The absolute floor is lowered to the
/// size of `y` times the relative tolerance so that the early part of the
/// run is resolved.
fn branch_config(cfg: &IntegratorConfig, y: &[f64]) -> IntegratorConfig {
    let size = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = cfg.rel_tol * size;
    IntegratorConfig {
        abs_tol: if floor > 0.0 { cfg.abs_tol.min(floor) } else { cfg.abs_tol },
        ..*cfg
    }
}

/// Seeds `x(r0) = sum_k c_k r0^(sigma k)`, `rho(r0) = r0^sigma` and
/// integrates in `t = ln r` from `ln r0` to `ln r1`.
pub fn seed_and_integrate(
    sys: &AutonomousSystem,
    s: &AnalyticSolution,
    r0: f64,
    r1: f64,
    cfg: &IntegratorConfig,
) -> Result<Profile, DynError> {
    if !(r0 > 0.0) || !(r1 > r0) {
        return Err(DynError::Span { r0, r1 });
    }
    if !s.trusts(r0) {
        return Err(DynError::SeedUntrusted { r0 });
    }
    let mut y0 = s.eval_r(r0);
    if y0.is_empty() {
        y0 = vec![0.0; sys.dim()];
    }
    y0.push(r0.powf(sys.sigma()));
    let cfg = branch_config(cfg, &y0);
    let trajectory = integrate(sys, &y0, (r0.ln(), r1.ln()), &cfg)?;
    Ok(Profile {
        sigma: sys.sigma(),
        trajectory,
    })
}

#[derive(Clone, Debug)]
pub struct ProbeReport {
    /// `(t, ||x(t)||_inf / rho(t))` on accepted steps, from `t = 0` backward.
    pub samples: Vec<(f64, f64)>,
    pub sup_ratio: f64,
    pub initial_ratio: f64,
    pub final_ratio: f64,
    /// The ratio grew instead of settling: the start point is off the
    /// analytic branch (or the backward run blew up).
    pub departed: bool,
    /// Backward integration stopped early (blow-up or failure).
    pub stopped_at: Option<f64>,
}

const DEPARTURE_FACTOR: f64 = 10.0;
const BLOWUP_RATIO: f64 = 1e12;

/// Integrates backward from `t = 0` to `t = -span` and tracks
/// `||x(t)||_inf / rho(t)`, which stays bounded (tending to `||c_1||`) on
/// the analytic branch.
pub fn backward_convergence_probe(
    sys: &AutonomousSystem,
    y0: &[f64],
    span: f64,
    cfg: &IntegratorConfig,
) -> Result<ProbeReport, DynError> {
    let n = sys.dim();
    if y0.len() != n + 1 {
        return Err(DynError::StateLength {
            expected: n + 1,
            found: y0.len(),
        });
    }
    let ratio = |y: &[f64]| {
        let x = y[..n].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if x == 0.0 {
            0.0
        } else {
            x / y[n].abs()
        }
    };
    let mut end_state = y0.to_vec();
    end_state[n] *= (-sys.sigma() * span).exp();
    let cfg = branch_config(cfg, &end_state);
    let (traj, stopped_at) = match integrate(sys, y0, (0.0, -span), &cfg) {
        Ok(t) => (t, None),
        Err(e) => match e {
            DynError::StepUnderflow { t, partial } | DynError::MaxSteps { t, partial } | DynError::Field { t, partial, .. } => {
                (*partial, Some(t))
            }
            other => return Err(other),
        },
    };
    let samples: Vec<(f64, f64)> = traj.times.iter().zip(&traj.states).map(|(t, y)| (*t, ratio(y))).collect();
    let initial_ratio = ratio(y0);
    let final_ratio = samples.last().map_or(initial_ratio, |s| s.1);
    let sup_ratio = samples.iter().fold(0.0f64, |m, s| m.max(s.1));
    let departed = stopped_at.is_some()
        || !final_ratio.is_finite()
        || final_ratio > BLOWUP_RATIO
        || final_ratio > DEPARTURE_FACTOR * initial_ratio.max(f64::MIN_POSITIVE);
    Ok(ProbeReport {
        samples,
        sup_ratio,
        initial_ratio,
        final_ratio,
        departed,
        stopped_at,
    })
}

/// Central-difference Jacobian of `f` at `point`, step `h * max(1, |p_j|)`,
/// with one Richardson step against half that step. Fields that vary on a
/// scale not much larger than `h` (BATS near a tip with small `eta0`) keep
/// most of their accuracy this way.
pub fn numeric_jacobian<F, E>(f: F, point: &[f64], h: f64) -> Result<DenseMatrix, E>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, E>,
{
    let m = point.len();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut p = point.to_vec();
    let mut central = |j: usize, step: f64| -> Result<Vec<f64>, E> {
        p[j] = point[j] + step;
        let fp = f(&p)?;
        p[j] = point[j] - step;
        let fm = f(&p)?;
        p[j] = point[j];
        Ok(fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * step)).collect())
    };
    for j in 0..m {
        let step = h * point[j].abs().max(1.0);
        let coarse = central(j, step)?;
        let fine = central(j, 0.5 * step)?;
        cols.push(fine.iter().zip(&coarse).map(|(a, b)| (4.0 * a - b) / 3.0).collect());
    }
    let rows = cols.first().map_or(0, Vec::len);
    let mut jac = DenseMatrix::zeros(rows, m);
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            jac[(i, j)] = *v;
        }
    }
    Ok(jac)
}
