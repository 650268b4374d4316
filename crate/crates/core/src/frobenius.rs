//! Non-resonance certification and the order-by-order coefficient
//! recursion for `dx/dr = V(x, r^2)/r`.
//!
//! Writing `V(x, rho) = A x + b rho + f(x, rho)` with `f = O(|(x, rho)|^2)`
//! and `x = sum_k c_k rho^k`, matching powers of `rho` in the regularized
//! system `x' = V(x, rho)`, `rho' = sigma rho` gives
//!
//! ```text
//! (k sigma I - A) c_k = [rho^k] V(c_1 rho + ... + c_{k-1} rho^{k-1}, rho)
//! ```
//!
//! The right-hand side only involves earlier coefficients, so every order
//! is one dense solve. When `k sigma` is an eigenvalue of `A` the solve is
//! singular and the order is classified as obstructed (no analytic
//! solution, a `log` term is needed) or degenerate (a free direction).

use std::fmt;

use thiserror::Error;

use crate::fmt_f64;
use crate::linalg::{
    eigenvalues, rank_revealing_solve, residual_inf, DenseMatrix, Eigenvalue, LinalgError,
    LuDecomposition, Spectrum,
};
use crate::tseries::{MultiIndex, SeriesError, SeriesVector, TruncatedSeries};

/// Relative tolerance for `Re(lambda) = k sigma`.
pub const TOL_RES: f64 = 1e-8;
/// Obstruction threshold factor: residual `> TOL_OBSTRUCT * (1 + |rhs|)`.
pub const TOL_OBSTRUCT: f64 = 1e-8;
/// Constant terms of `V` up to `TOL_ORIGIN * max(1, |linear part|)` are
/// accepted as rounding and dropped.
pub const TOL_ORIGIN: f64 = 1e-10;
pub const DEFAULT_ORDER: usize = 8;

pub fn default_degree(order: usize) -> u32 {
    order as u32 + 2
}

#[derive(Debug, Error)]
pub enum FrobeniusError {
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("field has {found} components over {vars} variables; expected n components over n+1")]
    FieldShape { found: usize, vars: usize },
    #[error("field not anchored at origin: V(0) != 0 (component {component} has constant {constant:e})")]
    NotAnchored { component: usize, constant: f64 },
    #[error("field degree {have} is below the requested order {needed}")]
    DegreeTooLow { needed: usize, have: u32 },
    #[error("resonant at k={order}: {sigma_k} is an eigenvalue of A")]
    Resonant { order: usize, sigma_k: f64 },
    #[error("obstructed at k={order}: residual {residual:e}; no analytic solution (a log term is required)")]
    Obstructed {
        order: usize,
        residual: f64,
        partial: Box<AnalyticSolution>,
    },
    #[error("degenerate at k={order}: {} free direction(s), analytic solutions are not unique", kernel.len())]
    Degenerate {
        order: usize,
        residual: f64,
        kernel: Vec<Vec<f64>>,
        partial: Box<AnalyticSolution>,
    },
    #[error("radius {radius} lies outside the trusted region of the series")]
    Untrusted { radius: f64 },
    #[error("residual at order {order} is {value:e}; coefficients do not solve the recursion")]
    Inconsistent { order: usize, value: f64 },
    #[error("eigenvalue with real part {re:e} is too large to resolve against sigma N+ at tolerance {tol_res:e}")]
    Unresolvable { re: f64, tol_res: f64 },
    #[error("internal consistency error: {0}")]
    Internal(String),
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

impl FrobeniusError {
    /// Coefficients computed before the recursion stopped, if any.
    pub fn partial(&self) -> Option<&AnalyticSolution> {
        match self {
            FrobeniusError::Obstructed { partial, .. } | FrobeniusError::Degenerate { partial, .. } => {
                Some(partial)
            }
            _ => None,
        }
    }
}

/// `x' = V(x, rho)`, `rho' = sigma rho` with `V` given by its Taylor
/// series over `(x_1..x_n, rho)`; `rho` is the last variable.
#[derive(Clone, Debug)]
pub struct SingularProblem {
    n: usize,
    sigma: f64,
    field: SeriesVector,
    label: String,
}

impl SingularProblem {
    /// Validates `sigma > 0` and `V(0) = 0`. Constant terms within
    /// rounding of zero are removed so that `V(0) = 0` holds exactly.
    pub fn new(sigma: f64, field: SeriesVector, label: impl Into<String>) -> Result<Self, FrobeniusError> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(FrobeniusError::NonPositiveSigma(sigma));
        }
        let n = field.len();
        let vars = field.num_vars().unwrap_or(1);
        if vars != n + 1 {
            return Err(FrobeniusError::FieldShape { found: n, vars });
        }
        let origin = MultiIndex::zero(vars);
        let mut comps = Vec::with_capacity(n);
        for (i, c) in field.components().iter().enumerate() {
            let scale = c
                .terms()
                .filter(|(k, _)| k.degree() == 1)
                .fold(1.0f64, |m, (_, v)| m.max(v.abs()));
            let c0 = c.constant_term();
            if !(c0.abs() <= TOL_ORIGIN * scale) {
                return Err(FrobeniusError::NotAnchored {
                    component: i,
                    constant: c0,
                });
            }
            let stripped = TruncatedSeries::from_terms(
                vars,
                c.max_degree(),
                c.terms().filter(|(k, _)| **k != origin).map(|(k, v)| (k.clone(), v)),
            )?;
            comps.push(stripped);
        }
        Ok(SingularProblem {
            n,
            sigma,
            field: SeriesVector::new(comps)?,
            label: label.into(),
        })
    }

    /// The one-dimensional `dz/dr = lambda z/r + b r` family (`sigma = 2`).
    pub fn linear_scalar(lambda: f64, b: f64, max_degree: u32) -> Result<Self, FrobeniusError> {
        let field = TruncatedSeries::from_terms(
            2,
            max_degree,
            [(MultiIndex::new([1, 0]), lambda), (MultiIndex::new([0, 1]), b)],
        )?;
        Self::new(2.0, SeriesVector::new(vec![field])?, format!("linear lambda={lambda} b={b}"))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn field(&self) -> &SeriesVector {
        &self.field
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn max_degree(&self) -> u32 {
        self.field.max_degree().unwrap_or(0)
    }

    /// `(A, b)`: the coefficients of `x_j` and of `rho` in `V`.
    pub fn linearization(&self) -> (DenseMatrix, Vec<f64>) {
        let n = self.n;
        let mut a = DenseMatrix::zeros(n, n);
        let mut b = vec![0.0; n];
        for (i, comp) in self.field.components().iter().enumerate() {
            for j in 0..n {
                a[(i, j)] = comp.coefficient(&MultiIndex::unit(n + 1, j));
            }
            b[i] = comp.coefficient(&MultiIndex::unit(n + 1, n));
        }
        (a, b)
    }

    /// Evaluates the series field at `(x, rho)`.
    pub fn eval(&self, x: &[f64], rho: f64) -> Result<Vec<f64>, FrobeniusError> {
        let mut p = x.to_vec();
        p.push(rho);
        Ok(self.field.evaluate(&p)?)
    }

    /// Coefficients of `V(x(rho), rho)` in `rho` up to `rho^order` when
    /// `x(rho) = sum_k coeffs[k-1] rho^k`.
    fn compose_along(&self, coeffs: &[Vec<f64>], order: usize) -> Result<Vec<Vec<f64>>, FrobeniusError> {
        let mut curves: Vec<Vec<f64>> = (0..self.n)
            .map(|i| std::iter::once(0.0).chain(coeffs.iter().map(|c| c[i])).collect())
            .collect();
        curves.push(vec![0.0, 1.0]);
        self.field
            .components()
            .iter()
            .map(|c| c.compose_curve(&curves, order).map_err(FrobeniusError::from))
            .collect()
    }
}

/// `k sigma I - A`.
pub fn order_matrix(a: &DenseMatrix, sigma: f64, k: usize) -> DenseMatrix {
    a.scaled(-1.0).shift_diagonal(k as f64 * sigma)
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Nonresonant,
    Resonant,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Nonresonant => "nonresonant",
            Verdict::Resonant => "resonant",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResonantOrder {
    pub order: usize,
    pub eigenvalue: Eigenvalue,
    /// `|Re(lambda) - k sigma|`
    pub distance: f64,
}

#[derive(Clone, Debug)]
pub struct ResonanceReport {
    pub spectrum: Spectrum,
    pub sigma: f64,
    /// `floor(max Re(lambda) / sigma)`; negative when all real parts are.
    pub max_relevant_order: i64,
    pub resonant_orders: Vec<ResonantOrder>,
    pub verdict: Verdict,
}

impl ResonanceReport {
    /// Distance from `Re(lambda)/sigma` to the nearest positive integer,
    /// one entry per eigenvalue.
    pub fn distances(&self) -> Vec<(Eigenvalue, f64)> {
        self.spectrum
            .eigenvalues
            .iter()
            .map(|e| {
                let ratio = e.re / self.sigma;
                let k = ratio.round().max(1.0);
                (*e, (ratio - k).abs())
            })
            .collect()
    }
}

/// Tests `Re(lambda_i) not in sigma N+` for every eigenvalue of `a`.
pub fn check_nonresonance(a: &DenseMatrix, sigma: f64, tol_res: f64) -> Result<ResonanceReport, FrobeniusError> {
    if !(sigma > 0.0) {
        return Err(FrobeniusError::NonPositiveSigma(sigma));
    }
    let spectrum = eigenvalues(a)?;
    let max_re = spectrum.max_real();
    let max_relevant_order = if spectrum.is_empty() {
        i64::MIN
    } else {
        (max_re / sigma).floor() as i64
    };
    let mut resonant_orders = Vec::new();
    for e in &spectrum.eigenvalues {
        if e.re < sigma * (1.0 - tol_res) {
            continue;
        }
        if e.re / sigma > 1.0 / tol_res {
            return Err(FrobeniusError::Unresolvable { re: e.re, tol_res });
        }
        let k = (e.re / sigma).round().max(1.0);
        let distance = (e.re - k * sigma).abs();
        if distance <= tol_res * e.re.abs().max(1.0) {
            resonant_orders.push(ResonantOrder {
                order: k as usize,
                eigenvalue: *e,
                distance,
            });
        }
    }
    resonant_orders.sort_by_key(|r| r.order);
    let verdict = if resonant_orders.is_empty() {
        Verdict::Nonresonant
    } else {
        Verdict::Resonant
    };
    Ok(ResonanceReport {
        spectrum,
        sigma,
        max_relevant_order,
        resonant_orders,
        verdict,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrderDiagnostics {
    pub order: usize,
    /// `||(k sigma I - A) c_k - rhs_k||_inf`
    pub solve_residual: f64,
    /// Smallest LU pivot magnitude of `k sigma I - A`.
    pub pivot_margin: f64,
}

/// Coefficients `c_1..c_K` of `x = sum_k c_k rho^k`, `rho = r^sigma`.
#[derive(Clone, Debug)]
pub struct AnalyticSolution {
    pub sigma: f64,
    pub coefficients: Vec<Vec<f64>>,
    pub per_order: Vec<OrderDiagnostics>,
    /// `||c_{k+1}||_inf / ||c_k||_inf` for `k = 1..K-1`; `0/0` is reported
    /// as 0 and `x/0` as infinity.
    pub growth_ratios: Vec<f64>,
}

impl AnalyticSolution {
    fn new(sigma: f64) -> Self {
        AnalyticSolution {
            sigma,
            coefficients: Vec::new(),
            per_order: Vec::new(),
            growth_ratios: Vec::new(),
        }
    }

    fn finish(mut self) -> Self {
        self.growth_ratios = self
            .coefficients
            .windows(2)
            .map(|w| {
                let (a, b) = (norm_inf(&w[0]), norm_inf(&w[1]));
                if b == 0.0 {
                    0.0
                } else if a == 0.0 {
                    f64::INFINITY
                } else {
                    b / a
                }
            })
            .collect();
        self
    }

    pub fn order(&self) -> usize {
        self.coefficients.len()
    }

    pub fn dim(&self) -> usize {
        self.coefficients.first().map_or(0, Vec::len)
    }

    /// `x` at a given `rho`.
    pub fn eval_rho(&self, rho: f64) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        for c in self.coefficients.iter().rev() {
            for (xi, ci) in x.iter_mut().zip(c) {
                *xi = (*xi + ci) * rho;
            }
        }
        x
    }

    /// `x(r) = sum_k c_k r^(sigma k)`.
    pub fn eval_r(&self, r: f64) -> Vec<f64> {
        self.eval_rho(r.powf(self.sigma))
    }

    /// `r dx/dr = sum_k sigma k c_k rho^k`.
    pub fn r_derivative(&self, r: f64) -> Vec<f64> {
        let rho = r.powf(self.sigma);
        let mut out = vec![0.0; self.dim()];
        let mut p = 1.0;
        for (k, c) in self.coefficients.iter().enumerate() {
            p *= rho;
            let f = self.sigma * (k + 1) as f64 * p;
            for (o, ci) in out.iter_mut().zip(c) {
                *o += f * ci;
            }
        }
        out
    }

    /// Trust-region heuristic: `||c_k|| rho^k <= 1` for all `k` and
    /// `ratio * rho <= 1/2` for every finite growth ratio.
    pub fn trusts(&self, r: f64) -> bool {
        let rho = r.abs().powf(self.sigma);
        let terms_ok = self
            .coefficients
            .iter()
            .enumerate()
            .all(|(k, c)| norm_inf(c) * rho.powi(k as i32 + 1) <= 1.0);
        let ratios_ok = self
            .growth_ratios
            .iter()
            .filter(|g| g.is_finite())
            .all(|g| g * rho <= 0.5);
        terms_ok && ratios_ok
    }

    /// Largest `r` (to 0.1% precision, within `[0, r_max]`) that passes
    /// [`Self::trusts`].
    pub fn trust_radius(&self, r_max: f64) -> f64 {
        if self.trusts(r_max) {
            return r_max;
        }
        let (mut lo, mut hi) = (0.0, r_max);
        while hi - lo > 1e-3 * hi {
            let mid = 0.5 * (lo + hi);
            if self.trusts(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    pub fn to_csv(&self, config_comment: &str) -> String {
        let n = self.dim();
        let mut s = String::new();
        s.push_str("# ");
        s.push_str(config_comment);
        s.push('\n');
        s.push('k');
        for i in 0..n {
            s.push_str(&format!(",c{i}"));
        }
        s.push_str(",solve_residual,growth_ratio\n");
        for (k, c) in self.coefficients.iter().enumerate() {
            s.push_str(&(k + 1).to_string());
            for v in c {
                s.push(',');
                s.push_str(&fmt_f64(*v));
            }
            s.push(',');
            s.push_str(&fmt_f64(self.per_order[k].solve_residual));
            s.push(',');
            if let Some(g) = self.growth_ratios.get(k) {
                s.push_str(&fmt_f64(*g));
            }
            s.push('\n');
        }
        s
    }
}

/// Runs the coefficient recursion to order `order` with the default
/// resonance tolerance.
pub fn expand_solution(p: &SingularProblem, order: usize) -> Result<AnalyticSolution, FrobeniusError> {
    expand_solution_with(p, order, TOL_RES)
}

pub fn expand_solution_with(
    p: &SingularProblem,
    order: usize,
    tol_res: f64,
) -> Result<AnalyticSolution, FrobeniusError> {
    if (p.max_degree() as usize) < order {
        return Err(FrobeniusError::DegreeTooLow {
            needed: order,
            have: p.max_degree(),
        });
    }
    let (a, _) = p.linearization();
    let spectrum = eigenvalues(&a)?;
    let mut sol = AnalyticSolution::new(p.sigma);
    for k in 1..=order {
        let target = k as f64 * p.sigma;
        let rhs: Vec<f64> = p
            .compose_along(&sol.coefficients, k)?
            .into_iter()
            .map(|c| c[k])
            .collect();
        let m = order_matrix(&a, p.sigma, k);
        let singular = spectrum
            .eigenvalues
            .iter()
            .any(|e| (e.re - target).hypot(e.im) <= tol_res * e.re.hypot(e.im).max(1.0));
        let lu = if singular { None } else { LuDecomposition::new(&m).ok() };
        match lu {
            Some(lu) => {
                let c = lu.solve(&rhs)?;
                sol.per_order.push(OrderDiagnostics {
                    order: k,
                    solve_residual: residual_inf(&m, &c, &rhs),
                    pivot_margin: lu.min_pivot(),
                });
                sol.coefficients.push(c);
            }
            None => {
                let rr = rank_revealing_solve(&m, &rhs)?;
                let partial = Box::new(sol.finish());
                if rr.residual > TOL_OBSTRUCT * (1.0 + norm_inf(&rhs)) {
                    return Err(FrobeniusError::Obstructed {
                        order: k,
                        residual: rr.residual,
                        partial,
                    });
                }
                return Err(FrobeniusError::Degenerate {
                    order: k,
                    residual: rr.residual,
                    kernel: rr.kernel,
                    partial,
                });
            }
        }
    }
    Ok(sol.finish())
}

/// One step of the recursive shift `x = rho (x~ + c~)` with
/// `c~ = -(A - sigma I)^{-1} b`. The returned problem has linear block
/// `A - sigma I` and degree budget `D - 1`, the highest degree at which
/// the substitution is exact.
pub fn transform_step(p: &SingularProblem, tol_res: f64) -> Result<(SingularProblem, Vec<f64>), FrobeniusError> {
    let d = p.max_degree();
    if d < 2 {
        return Err(FrobeniusError::DegreeTooLow { needed: 2, have: d });
    }
    let n = p.n;
    let vars = n + 1;
    let (a, b) = p.linearization();
    let spectrum = eigenvalues(&a)?;
    if spectrum
        .eigenvalues
        .iter()
        .any(|e| (e.re - p.sigma).hypot(e.im) <= tol_res * e.re.hypot(e.im).max(1.0))
    {
        return Err(FrobeniusError::Resonant {
            order: 1,
            sigma_k: p.sigma,
        });
    }
    let m = order_matrix(&a, p.sigma, 1);
    let c_tilde = match LuDecomposition::new(&m) {
        Ok(lu) => lu.solve(&b)?,
        Err(LinalgError::Singular { .. }) => {
            return Err(FrobeniusError::Resonant {
                order: 1,
                sigma_k: p.sigma,
            })
        }
        Err(e) => return Err(e.into()),
    };

    // shifted[j] = x~_j + c~_j; powers[j][e] = shifted[j]^e, truncated at D.
    let shifted: Vec<TruncatedSeries> = (0..n)
        .map(|j| TruncatedSeries::variable(vars, d, j).add_constant(c_tilde[j]))
        .collect();
    let mut powers: Vec<Vec<TruncatedSeries>> = Vec::with_capacity(n);
    for s in &shifted {
        let mut pw = vec![TruncatedSeries::constant(vars, d, 1.0)];
        for e in 1..=d as usize {
            let next = pw[e - 1].mul(s)?;
            pw.push(next);
        }
        powers.push(pw);
    }

    let out_degree = d - 1;
    let mut comps = Vec::with_capacity(n);
    for (i, comp) in p.field.components().iter().enumerate() {
        let mut terms: Vec<(MultiIndex, f64)> = Vec::new();
        for (idx, coef) in comp.terms() {
            let exps = idx.exponents();
            let x_deg: u32 = exps[..n].iter().sum();
            // rho^(|alpha| + beta) / rho
            let shift = x_deg + exps[n] - 1;
            if shift > out_degree {
                continue;
            }
            let mut prod = TruncatedSeries::constant(vars, d, coef);
            for (j, &e) in exps[..n].iter().enumerate() {
                if e > 0 {
                    prod = prod.mul(&powers[j][e as usize])?;
                }
            }
            for (pidx, pv) in prod.terms() {
                if pidx.degree() + shift <= out_degree {
                    let mut e: Vec<u32> = pidx.exponents().to_vec();
                    e[n] += shift;
                    terms.push((MultiIndex::new(e), pv));
                }
            }
        }
        let mut t = TruncatedSeries::from_terms(vars, out_degree, terms)?;
        // - sigma (x~_i + c~_i)
        let lin = TruncatedSeries::variable(vars, out_degree, i).add_constant(c_tilde[i]);
        t = t.sub(&lin.scale(p.sigma))?;
        let c0 = t.constant_term();
        let scale = 1.0 + norm_inf(&b) + a.norm_inf() * norm_inf(&c_tilde);
        if c0.abs() > 1e-9 * scale {
            return Err(FrobeniusError::Internal(format!(
                "shifted field component {i} has constant {c0:e} (a rho^-1 term)"
            )));
        }
        comps.push(t.add_constant(-c0));
    }
    let label = format!("{} [shifted]", p.label);
    let q = SingularProblem::new(p.sigma, SeriesVector::new(comps)?, label)?;
    Ok((q, c_tilde))
}

#[derive(Clone, Debug, PartialEq)]
pub enum SlopeEstimate {
    /// The residual series vanishes identically: the truncated series is
    /// an exact solution.
    Exact,
    Slope(f64),
}

#[derive(Clone, Debug)]
pub struct ResidualOrder {
    pub slope: SlopeEstimate,
    /// `(r, R(r))` samples.
    pub samples: Vec<(f64, f64)>,
    /// Largest in-order residual coefficient, `max_{k <= K} |[rho^k] R|`.
    pub in_order_residual: f64,
}

/// Measures the order of `R(r) = ||r x'(r) - V(x(r), r^sigma)||_inf` for
/// the truncated series.
///
/// The residual is formed as a power series in `rho`. Its coefficients up
/// to `rho^K` are the recursion equations themselves; they must vanish to
/// solver accuracy and are checked, not evaluated. The truncation tail
/// `rho^(K+1) ...` is evaluated at each radius. Evaluating `R` directly in
/// binary64 is useless here: for `K = 6`, `r = 1e-3` the true residual is
/// near `1e-42` while rounding in `V(x, rho)` is near `1e-22`.
pub fn residual_order(
    p: &SingularProblem,
    s: &AnalyticSolution,
    radii: &[f64],
) -> Result<ResidualOrder, FrobeniusError> {
    for &r in radii {
        if !(r > 0.0) || !s.trusts(r) {
            return Err(FrobeniusError::Untrusted { radius: r });
        }
    }
    let k_max = s.order();
    let top = k_max + p.max_degree() as usize;
    let composed = p.compose_along(&s.coefficients, top)?;
    let mut in_order = 0.0f64;
    for (i, comp) in composed.iter().enumerate() {
        let scale = 1.0 + comp.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (k, c) in s.coefficients.iter().enumerate() {
            let res = comp[k + 1] - p.sigma * (k + 1) as f64 * c[i];
            in_order = in_order.max(res.abs());
            if res.abs() > 1e-8 * scale {
                return Err(FrobeniusError::Inconsistent {
                    order: k + 1,
                    value: res,
                });
            }
        }
    }
    let tails: Vec<&[f64]> = composed.iter().map(|c| &c[k_max + 1..]).collect();
    let samples: Vec<(f64, f64)> = radii
        .iter()
        .map(|&r| {
            let rho = r.powf(p.sigma);
            let lead = rho.powi(k_max as i32 + 1);
            let worst = tails
                .iter()
                .map(|t| t.iter().rev().fold(0.0, |acc, c| acc * rho + c).abs() * lead)
                .fold(0.0, f64::max);
            (r, worst)
        })
        .collect();
    let pts: Vec<(f64, f64)> = samples
        .iter()
        .filter(|(_, v)| *v > 0.0)
        .map(|(r, v)| (r.ln(), v.ln()))
        .collect();
    let slope = if tails.iter().all(|t| t.iter().all(|c| *c == 0.0)) || pts.len() < 2 {
        SlopeEstimate::Exact
    } else {
        SlopeEstimate::Slope(least_squares_slope(&pts))
    };
    Ok(ResidualOrder {
        slope,
        samples,
        in_order_residual: in_order,
    })
}

fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// `count` radii spaced geometrically over `[lo, hi]`.
pub fn geometric_radii(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let step = (hi / lo).ln() / (count - 1) as f64;
    (0..count).map(|i| lo * (step * i as f64).exp()).collect()
}
