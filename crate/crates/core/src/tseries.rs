//! Truncated multivariate power series over `(x_1, ..., x_n, rho)`.
//!
//! A [`TruncatedSeries`] stores the Taylor coefficients of an analytic
//! function up to a total-degree budget `D`. Terms are kept sparse and in
//! graded-lexicographic order, so iteration and text output are
//! deterministic. Exact zeros are pruned; nothing else is.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use smallvec::SmallVec;
use thiserror::Error;

use crate::fmt_f64;

/// Relative tolerance used when checking that an outer Taylor expansion is
/// centred at the constant term of the inner series.
pub const COMPOSE_CENTER_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeriesError {
    #[error("shape mismatch: ({0} vars, degree {1}) vs ({2} vars, degree {3})")]
    ShapeMismatch(usize, u32, usize, u32),
    #[error("non-invertible at origin: constant term is zero")]
    NonInvertible,
    #[error("branch point at origin: constant term {0} is not positive")]
    BranchPoint(f64),
    #[error("expansion point {expected} does not match constant term {found}")]
    CenterMismatch { expected: f64, found: f64 },
    #[error("need {needed} Taylor coefficients, got {given}")]
    TaylorTooShort { needed: usize, given: usize },
    #[error("variable index {index} out of range for {num_vars} variables")]
    VarOutOfRange { index: usize, num_vars: usize },
    #[error("point has {found} coordinates, series has {expected} variables")]
    PointLength { expected: usize, found: usize },
    #[error("multi-index {0:?} has wrong length or exceeds the degree budget")]
    BadIndex(Vec<u32>),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Exponent tuple of a monomial. The last slot is the `rho` exponent by
/// convention, but the algebra itself treats all variables alike.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct MultiIndex(SmallVec<[u32; 6]>);

impl MultiIndex {
    pub fn new(exponents: impl IntoIterator<Item = u32>) -> Self {
        MultiIndex(exponents.into_iter().collect())
    }

    pub fn zero(num_vars: usize) -> Self {
        MultiIndex(SmallVec::from_elem(0, num_vars))
    }

    pub fn unit(num_vars: usize, var: usize) -> Self {
        let mut m = Self::zero(num_vars);
        m.0[var] = 1;
        m
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Exponents of the product monomial.
    pub fn product(&self, other: &MultiIndex) -> MultiIndex {
        MultiIndex(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }
}

/// Graded lexicographic: lower total degree first; within a degree, the
/// larger exponent in the earliest variable comes first (`x` before `rho`).
impl Ord for MultiIndex {
    fn cmp(&self, other: &Self) -> Ordering {
        self.degree()
            .cmp(&other.degree())
            .then_with(|| other.0.cmp(&self.0))
    }
}

impl PartialOrd for MultiIndex {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedSeries {
    num_vars: usize,
    max_degree: u32,
    terms: BTreeMap<MultiIndex, f64>,
}

impl TruncatedSeries {
    pub fn zero(num_vars: usize, max_degree: u32) -> Self {
        assert!(num_vars > 0, "a series needs at least one variable");
        TruncatedSeries {
            num_vars,
            max_degree,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(num_vars: usize, max_degree: u32, c: f64) -> Self {
        let mut s = Self::zero(num_vars, max_degree);
        s.insert(MultiIndex::zero(num_vars), c);
        s
    }

    /// The coordinate function `x_var`.
    pub fn variable(num_vars: usize, max_degree: u32, var: usize) -> Self {
        assert!(var < num_vars);
        let mut s = Self::zero(num_vars, max_degree);
        if max_degree >= 1 {
            s.insert(MultiIndex::unit(num_vars, var), 1.0);
        }
        s
    }

    /// Builds a series from `(exponents, coefficient)` pairs; repeated
    /// indices accumulate.
    pub fn from_terms<I>(num_vars: usize, max_degree: u32, terms: I) -> Result<Self, SeriesError>
    where
        I: IntoIterator<Item = (MultiIndex, f64)>,
    {
        let mut s = Self::zero(num_vars, max_degree);
        for (idx, c) in terms {
            if idx.len() != num_vars || idx.degree() > max_degree {
                return Err(SeriesError::BadIndex(idx.exponents().to_vec()));
            }
            s.accumulate(idx, c);
        }
        Ok(s)
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn max_degree(&self) -> u32 {
        self.max_degree
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Terms in graded-lexicographic order.
    pub fn terms(&self) -> impl Iterator<Item = (&MultiIndex, f64)> {
        self.terms.iter().map(|(k, v)| (k, *v))
    }

    pub fn coefficient(&self, idx: &MultiIndex) -> f64 {
        self.terms.get(idx).copied().unwrap_or(0.0)
    }

    /// Coefficient of the monomial given by a plain exponent slice.
    pub fn coeff(&self, exponents: &[u32]) -> f64 {
        self.coefficient(&MultiIndex::new(exponents.iter().copied()))
    }

    pub fn constant_term(&self) -> f64 {
        self.coefficient(&MultiIndex::zero(self.num_vars))
    }

    /// Largest total degree among stored terms (0 for the zero series).
    pub fn degree(&self) -> u32 {
        self.terms.keys().next_back().map_or(0, MultiIndex::degree)
    }

    fn insert(&mut self, idx: MultiIndex, c: f64) {
        if c != 0.0 {
            self.terms.insert(idx, c);
        } else {
            self.terms.remove(&idx);
        }
    }

    fn accumulate(&mut self, idx: MultiIndex, c: f64) {
        let slot = self.terms.entry(idx.clone()).or_insert(0.0);
        *slot += c;
        if *slot == 0.0 {
            self.terms.remove(&idx);
        }
    }

    fn prune(&mut self) {
        self.terms.retain(|_, c| *c != 0.0);
    }

    fn same_shape(&self, other: &Self) -> Result<(), SeriesError> {
        if self.num_vars != other.num_vars || self.max_degree != other.max_degree {
            return Err(SeriesError::ShapeMismatch(
                self.num_vars,
                self.max_degree,
                other.num_vars,
                other.max_degree,
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self, SeriesError> {
        self.same_shape(other)?;
        let mut out = self.clone();
        for (k, v) in &other.terms {
            *out.terms.entry(k.clone()).or_insert(0.0) += v;
        }
        out.prune();
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, SeriesError> {
        self.same_shape(other)?;
        let mut out = self.clone();
        for (k, v) in &other.terms {
            *out.terms.entry(k.clone()).or_insert(0.0) -= v;
        }
        out.prune();
        Ok(out)
    }

    pub fn scale(&self, factor: f64) -> Self {
        let mut out = Self::zero(self.num_vars, self.max_degree);
        for (k, v) in &self.terms {
            out.insert(k.clone(), v * factor);
        }
        out
    }

    pub fn add_constant(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.accumulate(MultiIndex::zero(self.num_vars), c);
        out
    }

    /// Cauchy product, discarding every term of total degree above `D`.
    pub fn mul(&self, other: &Self) -> Result<Self, SeriesError> {
        self.same_shape(other)?;
        Ok(self.mul_unchecked(other))
    }

    fn mul_unchecked(&self, other: &Self) -> Self {
        let d = self.max_degree;
        let mut acc: BTreeMap<MultiIndex, f64> = BTreeMap::new();
        for (ka, va) in &self.terms {
            let budget = d - ka.degree();
            // `other.terms` is sorted by degree, so stop at the first term
            // that would overflow the budget.
            for (kb, vb) in other.terms.iter().take_while(|(kb, _)| kb.degree() <= budget) {
                *acc.entry(ka.product(kb)).or_insert(0.0) += va * vb;
            }
        }
        acc.retain(|_, c| *c != 0.0);
        TruncatedSeries {
            num_vars: self.num_vars,
            max_degree: d,
            terms: acc,
        }
    }

    /// Homogeneous components indexed by degree `0..=D`.
    pub fn homogeneous_parts(&self) -> Vec<TruncatedSeries> {
        let mut parts = vec![Self::zero(self.num_vars, self.max_degree); self.max_degree as usize + 1];
        for (k, v) in &self.terms {
            parts[k.degree() as usize].terms.insert(k.clone(), *v);
        }
        parts
    }

    fn sum_parts(parts: &[TruncatedSeries], num_vars: usize, max_degree: u32) -> Self {
        let mut out = Self::zero(num_vars, max_degree);
        for p in parts {
            for (k, v) in &p.terms {
                out.terms.insert(k.clone(), *v);
            }
        }
        out.prune();
        out
    }

    /// Multiplicative inverse by the degree-by-degree recurrence
    /// `b_d = -(1/a_0) * sum_{j=1..d} a_j b_{d-j}`.
    pub fn reciprocal(&self) -> Result<Self, SeriesError> {
        let a0 = self.constant_term();
        if a0 == 0.0 {
            return Err(SeriesError::NonInvertible);
        }
        let a = self.homogeneous_parts();
        let d = self.max_degree as usize;
        let mut b: Vec<TruncatedSeries> = Vec::with_capacity(d + 1);
        b.push(Self::constant(self.num_vars, self.max_degree, 1.0 / a0));
        for deg in 1..=d {
            let mut acc = Self::zero(self.num_vars, self.max_degree);
            for j in 1..=deg {
                if a[j].is_zero() || b[deg - j].is_zero() {
                    continue;
                }
                acc = &acc + &a[j].mul_unchecked(&b[deg - j]);
            }
            b.push(acc.scale(-1.0 / a0));
        }
        Ok(Self::sum_parts(&b, self.num_vars, self.max_degree))
    }

    /// Positive square root by the recurrence
    /// `s_d = (a_d - sum_{j=1..d-1} s_j s_{d-j}) / (2 s_0)`.
    pub fn sqrt(&self) -> Result<Self, SeriesError> {
        let a0 = self.constant_term();
        if a0 <= 0.0 || a0.is_nan() {
            return Err(SeriesError::BranchPoint(a0));
        }
        let a = self.homogeneous_parts();
        let d = self.max_degree as usize;
        let s0 = a0.sqrt();
        let mut s: Vec<TruncatedSeries> = Vec::with_capacity(d + 1);
        s.push(Self::constant(self.num_vars, self.max_degree, s0));
        for deg in 1..=d {
            let mut acc = a[deg].clone();
            for j in 1..deg {
                if s[j].is_zero() || s[deg - j].is_zero() {
                    continue;
                }
                acc = &acc - &s[j].mul_unchecked(&s[deg - j]);
            }
            s.push(acc.scale(0.5 / s0));
        }
        Ok(Self::sum_parts(&s, self.num_vars, self.max_degree))
    }

    /// `phi(self)` where `phi` is given by its Taylor coefficients
    /// `phi[j] = phi^(j)(center) / j!`. Horner evaluation in `self - center`.
    pub fn compose_univariate(&self, phi: &[f64], center: f64) -> Result<Self, SeriesError> {
        let a0 = self.constant_term();
        if (a0 - center).abs() > COMPOSE_CENTER_TOL * center.abs().max(1.0) {
            return Err(SeriesError::CenterMismatch {
                expected: center,
                found: a0,
            });
        }
        let needed = self.max_degree as usize + 1;
        if phi.len() < needed {
            return Err(SeriesError::TaylorTooShort {
                needed,
                given: phi.len(),
            });
        }
        let mut u = self.clone();
        u.terms.remove(&MultiIndex::zero(self.num_vars));
        let mut out = Self::constant(self.num_vars, self.max_degree, phi[needed - 1]);
        for &c in phi[..needed - 1].iter().rev() {
            out = out.mul_unchecked(&u).add_constant(c);
        }
        Ok(out)
    }

    /// Formal partial derivative in variable `var`. The degree budget is
    /// kept, although no stored term reaches it afterwards.
    pub fn partial_derivative(&self, var: usize) -> Result<Self, SeriesError> {
        if var >= self.num_vars {
            return Err(SeriesError::VarOutOfRange {
                index: var,
                num_vars: self.num_vars,
            });
        }
        let mut out = Self::zero(self.num_vars, self.max_degree);
        for (k, v) in &self.terms {
            let e = k.0[var];
            if e > 0 {
                let mut nk = k.clone();
                nk.0[var] -= 1;
                out.insert(nk, v * e as f64);
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self, point: &[f64]) -> Result<f64, SeriesError> {
        if point.len() != self.num_vars {
            return Err(SeriesError::PointLength {
                expected: self.num_vars,
                found: point.len(),
            });
        }
        Ok(self
            .terms
            .iter()
            .map(|(k, v)| {
                k.0.iter()
                    .zip(point)
                    .fold(*v, |acc, (&e, &x)| acc * x.powi(e as i32))
            })
            .sum())
    }

    /// Substitutes a univariate truncated power series `curves[i](s)` for
    /// every variable and returns the coefficients of the result in `s`
    /// up to `s^order`.
    pub fn compose_curve(&self, curves: &[Vec<f64>], order: usize) -> Result<Vec<f64>, SeriesError> {
        if curves.len() != self.num_vars {
            return Err(SeriesError::PointLength {
                expected: self.num_vars,
                found: curves.len(),
            });
        }
        let max_exp = self.max_degree as usize;
        // powers[i][e] = curves[i]^e truncated at `order`
        let powers: Vec<Vec<Vec<f64>>> = curves
            .iter()
            .map(|c| {
                let mut p = Vec::with_capacity(max_exp + 1);
                let mut one = vec![0.0; order + 1];
                one[0] = 1.0;
                p.push(one);
                for e in 1..=max_exp {
                    let next = poly_mul_trunc(&p[e - 1], c, order);
                    p.push(next);
                }
                p
            })
            .collect();
        let mut out = vec![0.0; order + 1];
        for (k, v) in &self.terms {
            let mut acc = vec![0.0; order + 1];
            acc[0] = *v;
            for (i, &e) in k.0.iter().enumerate() {
                if e > 0 {
                    acc = poly_mul_trunc(&acc, &powers[i][e as usize], order);
                }
            }
            for (o, a) in out.iter_mut().zip(&acc) {
                *o += a;
            }
        }
        Ok(out)
    }

    /// Plain-text form: one line per term, `e_1 ... e_m coefficient`,
    /// graded-lexicographic order, 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.terms {
            for e in k.exponents() {
                s.push_str(&e.to_string());
                s.push(' ');
            }
            s.push_str(&fmt_f64(*v));
            s.push('\n');
        }
        s
    }

    pub fn from_text(num_vars: usize, max_degree: u32, text: &str) -> Result<Self, SeriesError> {
        let mut terms = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parse_err = |msg: String| SeriesError::Parse {
                line: lineno + 1,
                msg,
            };
            if fields.len() != num_vars + 1 {
                return Err(parse_err(format!(
                    "expected {} fields, found {}",
                    num_vars + 1,
                    fields.len()
                )));
            }
            let exps = fields[..num_vars]
                .iter()
                .map(|f| f.parse::<u32>().map_err(|e| parse_err(e.to_string())))
                .collect::<Result<Vec<_>, _>>()?;
            let c: f64 = fields[num_vars]
                .parse()
                .map_err(|e: std::num::ParseFloatError| parse_err(e.to_string()))?;
            terms.push((MultiIndex::new(exps), c));
        }
        Self::from_terms(num_vars, max_degree, terms)
    }
}

/// Product of two univariate coefficient lists, truncated at `order`.
pub fn poly_mul_trunc(a: &[f64], b: &[f64], order: usize) -> Vec<f64> {
    let mut out = vec![0.0; order + 1];
    for (i, &ai) in a.iter().enumerate().take(order + 1) {
        if ai == 0.0 {
            continue;
        }
        for (j, &bj) in b.iter().enumerate().take(order + 1 - i) {
            out[i + j] += ai * bj;
        }
    }
    out
}

impl fmt::Display for TruncatedSeries {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

// Operator forms panic on shape mismatch; use the named methods to get a
// `Result` instead.

impl Add for &TruncatedSeries {
    type Output = TruncatedSeries;
    fn add(self, rhs: &TruncatedSeries) -> TruncatedSeries {
        TruncatedSeries::add(self, rhs).expect("series shapes differ")
    }
}

impl Sub for &TruncatedSeries {
    type Output = TruncatedSeries;
    fn sub(self, rhs: &TruncatedSeries) -> TruncatedSeries {
        TruncatedSeries::sub(self, rhs).expect("series shapes differ")
    }
}

impl Mul for &TruncatedSeries {
    type Output = TruncatedSeries;
    fn mul(self, rhs: &TruncatedSeries) -> TruncatedSeries {
        TruncatedSeries::mul(self, rhs).expect("series shapes differ")
    }
}

impl Neg for &TruncatedSeries {
    type Output = TruncatedSeries;
    fn neg(self) -> TruncatedSeries {
        self.scale(-1.0)
    }
}

/// A vector of series sharing `(num_vars, D)`: the field `V(x, rho)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesVector {
    components: Vec<TruncatedSeries>,
}

impl SeriesVector {
    pub fn new(components: Vec<TruncatedSeries>) -> Result<Self, SeriesError> {
        if let Some(first) = components.first() {
            for c in &components[1..] {
                first.same_shape(c)?;
            }
        }
        Ok(SeriesVector { components })
    }

    pub fn zeros(len: usize, num_vars: usize, max_degree: u32) -> Self {
        SeriesVector {
            components: vec![TruncatedSeries::zero(num_vars, max_degree); len],
        }
    }

    pub fn components(&self) -> &[TruncatedSeries] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn num_vars(&self) -> Option<usize> {
        self.components.first().map(TruncatedSeries::num_vars)
    }

    pub fn max_degree(&self) -> Option<u32> {
        self.components.first().map(TruncatedSeries::max_degree)
    }

    pub fn evaluate(&self, point: &[f64]) -> Result<Vec<f64>, SeriesError> {
        self.components.iter().map(|c| c.evaluate(point)).collect()
    }
}
