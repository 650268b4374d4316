//! Command-line front end.
//!
//! Exit codes: 0 success, 1 resonance (obstructed or degenerate order),
//! 2 linear-algebra failure, 3 integration failure, 64 usage or input error.
//!
//! CSV goes to stdout and the report to stderr, unless `--out <dir>` is
//! given; then CSV files are written there and the report goes to stdout.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::Value;

use crate::bats::{
    self, coefficient_blowup_scan, eigenvalue_formulas, resonance_condition, resonance_locus, scan_to_csv,
    tip_shape, BatsError, BatsParams, Locus, Termination, ViscositySpec, DEFAULT_LOCUS_BRACKET,
    DEFAULT_SCAN_ORDER,
};
use crate::dynsys::{seed_and_integrate, AutonomousSystem, DynError, IntegratorConfig};
use crate::frobenius::{
    check_nonresonance, default_degree, expand_solution_with, geometric_radii, residual_order,
    FrobeniusError, SingularProblem, SlopeEstimate, Verdict, DEFAULT_ORDER, TOL_RES,
};
use crate::linalg::DenseMatrix;
use crate::tseries::{MultiIndex, SeriesError, SeriesVector, TruncatedSeries};

pub const EXIT_OK: u8 = 0;
pub const EXIT_RESONANCE: u8 = 1;
pub const EXIT_LINALG: u8 = 2;
pub const EXIT_INTEGRATION: u8 = 3;
pub const EXIT_USAGE: u8 = 64;

pub const DEFAULT_R0: f64 = 1e-3;
pub const DEFAULT_R1: f64 = 1.0;

#[derive(Debug, Parser)]
#[command(name = "singode", version, about = "Analytic solutions of singular ODEs dx/dr = V(x, r^2)/r")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Linearization, spectrum and resonance verdict.
    Analyze(RunArgs),
    /// Series coefficients c_1..c_K.
    Expand(RunArgs),
    /// Seed at r0 from the series and integrate to r1.
    Integrate(RunArgs),
    /// The BATS tip-growth model.
    Bats {
        #[command(subcommand)]
        command: BatsCommand,
    },
}

#[derive(Debug, Args, Clone)]
struct RunArgs {
    /// JSON problem file.
    #[arg(long)]
    problem: PathBuf,
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Re-run with K+2 and report the profile difference at r1.
    #[arg(long)]
    check_order: bool,
}

#[derive(Debug, Args, Clone, Default)]
struct RunFlags {
    /// Series order.
    #[arg(long = "K")]
    k: Option<usize>,
    /// Taylor degree of V.
    #[arg(long = "D")]
    d: Option<u32>,
    #[arg(long, allow_hyphen_values = true)]
    r0: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    r1: Option<f64>,
    #[arg(long)]
    rel_tol: Option<f64>,
    #[arg(long)]
    abs_tol: Option<f64>,
    #[arg(long)]
    tol_res: Option<f64>,
}

#[derive(Debug, Args, Clone)]
struct BatsFlags {
    /// Problem file with a builtin bats field; flags override it.
    #[arg(long)]
    problem: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    h0: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    z0: Option<f64>,
    /// Exponent of mu(Psi) = 1 + Psi^m.
    #[arg(long)]
    m: Option<u32>,
}

#[derive(Debug, Subcommand)]
enum BatsCommand {
    /// Tip point, Jacobian, eigenvalues and the lambda4/2 condition.
    Analyze {
        #[command(flatten)]
        params: BatsFlags,
        #[arg(long)]
        tol_res: Option<f64>,
    },
    /// q* = h0 z0^2 with lambda4 = 2 for mu = 1 + Psi^m.
    Locus {
        #[arg(long)]
        m: u32,
        #[arg(long)]
        q_lo: Option<f64>,
        #[arg(long)]
        q_hi: Option<f64>,
    },
    /// Tip profile (s, r, z, h, Psi, varsigma, eta).
    Shape {
        #[command(flatten)]
        params: BatsFlags,
        #[command(flatten)]
        run: RunFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// ||c_K|| and pivot margins over q (h0 = q, z0 = -1).
    Scan {
        #[arg(long)]
        m: u32,
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        q_grid: Vec<f64>,
        #[arg(long = "K", default_value_t = DEFAULT_SCAN_ORDER)]
        k: usize,
        #[arg(long)]
        tol_res: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Problem file schema. Unknown keys are rejected.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    n: Option<usize>,
    sigma: Option<f64>,
    field: Value,
    #[serde(rename = "K")]
    k: Option<usize>,
    #[serde(rename = "D")]
    d: Option<u32>,
    r0: Option<f64>,
    r1: Option<f64>,
    rel_tol: Option<f64>,
    abs_tol: Option<f64>,
    tol_res: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMonomials {
    monomials: Vec<RawMonomial>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMonomial {
    component: usize,
    exponents: Vec<u32>,
    coefficient: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBats {
    builtin: String,
    h0: f64,
    z0: f64,
    viscosity: Option<Value>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPower {
    m: u32,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTaylor {
    coefficients: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FieldSpec {
    Monomials(Vec<(usize, Vec<u32>, f64)>),
    Bats(BatsParams),
}

/// A validated problem file with defaults applied.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemFile {
    pub n: usize,
    pub sigma: f64,
    pub field: FieldSpec,
    pub k: usize,
    pub d: u32,
    pub r0: f64,
    pub r1: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub tol_res: f64,
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<FrobeniusError> for CliError {
    fn from(e: FrobeniusError) -> Self {
        let code = match &e {
            FrobeniusError::Resonant { .. } | FrobeniusError::Obstructed { .. } | FrobeniusError::Degenerate { .. } => {
                EXIT_RESONANCE
            }
            FrobeniusError::Linalg(_) | FrobeniusError::Unresolvable { .. } | FrobeniusError::Internal(_) => EXIT_LINALG,
            _ => EXIT_USAGE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<DynError> for CliError {
    fn from(e: DynError) -> Self {
        let code = match &e {
            DynError::Config(_) | DynError::Span { .. } | DynError::StateLength { .. } => EXIT_USAGE,
            _ => EXIT_INTEGRATION,
        };
        let message = match e.failure_time() {
            Some(t) => format!("{e} (r={})", t.exp()),
            None => e.to_string(),
        };
        CliError { code, message }
    }
}

impl From<BatsError> for CliError {
    fn from(e: BatsError) -> Self {
        match e {
            BatsError::Frobenius(f) => f.into(),
            BatsError::Dyn(d) => d.into(),
            BatsError::Linalg(l) => CliError {
                code: EXIT_LINALG,
                message: l.to_string(),
            },
            other => CliError::usage(other.to_string()),
        }
    }
}

impl From<SeriesError> for CliError {
    fn from(e: SeriesError) -> Self {
        CliError::usage(e.to_string())
    }
}

fn json_error(path: &Path, e: serde_json::Error) -> CliError {
    CliError::usage(format!("{}:{}:{}: {}", path.display(), e.line(), e.column(), e))
}

fn key_error(key: &str, e: impl std::fmt::Display) -> CliError {
    CliError::usage(format!("invalid `{key}`: {e}"))
}

fn parse_viscosity(v: Option<Value>) -> Result<ViscositySpec, CliError> {
    let Some(v) = v else {
        return Ok(ViscositySpec::Power { m: 2 });
    };
    if v.get("m").is_some() {
        let p: RawPower = serde_json::from_value(v).map_err(|e| key_error("field.viscosity", e))?;
        Ok(ViscositySpec::Power { m: p.m })
    } else if v.get("coefficients").is_some() {
        let t: RawTaylor = serde_json::from_value(v).map_err(|e| key_error("field.viscosity", e))?;
        // centered at the tip age, fixed once h0, z0 are known
        Ok(ViscositySpec::Taylor {
            center: f64::NAN,
            coeffs: t.coefficients,
        })
    } else {
        Err(key_error("field.viscosity", "expected {\"m\": ..} or {\"coefficients\": [..]}"))
    }
}

fn bats_params(h0: f64, z0: f64, viscosity: ViscositySpec) -> Result<BatsParams, CliError> {
    let viscosity = match viscosity {
        ViscositySpec::Taylor { coeffs, .. } => ViscositySpec::Taylor {
            center: h0 * z0 * z0,
            coeffs,
        },
        v => v,
    };
    Ok(BatsParams::new(h0, z0, viscosity)?)
}

/// Reads and validates a problem file.
pub fn parse_problem(path: &Path) -> Result<ProblemFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    parse_problem_str(&text, path)
}

pub fn parse_problem_str(text: &str, path: &Path) -> Result<ProblemFile, CliError> {
    let raw: RawProblem = serde_json::from_str(text).map_err(|e| json_error(path, e))?;
    let k = raw.k.unwrap_or(DEFAULT_ORDER);
    let sigma = raw.sigma.unwrap_or(2.0);
    if !(sigma > 0.0) {
        return Err(key_error("sigma", format!("must be positive, got {sigma}")));
    }
    let (n, field, min_degree) = if raw.field.get("builtin").is_some() {
        let b: RawBats = serde_json::from_value(raw.field).map_err(|e| key_error("field", e))?;
        if b.builtin != "bats" {
            return Err(key_error("field.builtin", format!("unknown builtin `{}`", b.builtin)));
        }
        if raw.n.is_some_and(|n| n != 4) {
            return Err(key_error("n", "the bats field has n = 4"));
        }
        if sigma != 2.0 {
            return Err(key_error("sigma", "the bats field has sigma = 2"));
        }
        let params = bats_params(b.h0, b.z0, parse_viscosity(b.viscosity)?)?;
        (4, FieldSpec::Bats(params), 1)
    } else if raw.field.get("monomials").is_some() {
        let m: RawMonomials = serde_json::from_value(raw.field).map_err(|e| key_error("field", e))?;
        let n = raw.n.ok_or_else(|| key_error("n", "required for a monomial field"))?;
        let mut terms = Vec::with_capacity(m.monomials.len());
        let mut degree = 1;
        for (i, mono) in m.monomials.into_iter().enumerate() {
            let key = format!("field.monomials[{i}]");
            if mono.component >= n {
                return Err(key_error(&format!("{key}.component"), format!("{} >= n = {n}", mono.component)));
            }
            if mono.exponents.len() != n + 1 {
                return Err(key_error(
                    &format!("{key}.exponents"),
                    format!("expected {} entries (x_1..x_n, rho), got {}", n + 1, mono.exponents.len()),
                ));
            }
            let deg: u32 = mono.exponents.iter().sum();
            if deg == 0 && mono.coefficient != 0.0 {
                return Err(key_error(&key, "V(0) ≠ 0: constant terms are not allowed"));
            }
            degree = degree.max(deg);
            terms.push((mono.component, mono.exponents, mono.coefficient));
        }
        (n, FieldSpec::Monomials(terms), degree)
    } else {
        return Err(key_error("field", "expected `monomials` or `builtin`"));
    };
    let d = raw.d.unwrap_or_else(|| default_degree(k).max(min_degree));
    Ok(ProblemFile {
        n,
        sigma,
        field,
        k,
        d,
        r0: raw.r0.unwrap_or(DEFAULT_R0),
        r1: raw.r1.unwrap_or(DEFAULT_R1),
        rel_tol: raw.rel_tol.unwrap_or(IntegratorConfig::default().rel_tol),
        abs_tol: raw.abs_tol.unwrap_or(IntegratorConfig::default().abs_tol),
        tol_res: raw.tol_res.unwrap_or(TOL_RES),
    })
}

impl ProblemFile {
    fn bats_default() -> Self {
        ProblemFile {
            n: 4,
            sigma: 2.0,
            field: FieldSpec::Bats(BatsParams::power(1.0, -1.0, 2).expect("valid defaults")),
            k: DEFAULT_ORDER,
            d: default_degree(DEFAULT_ORDER),
            r0: DEFAULT_R0,
            r1: DEFAULT_R1,
            rel_tol: IntegratorConfig::default().rel_tol,
            abs_tol: IntegratorConfig::default().abs_tol,
            tol_res: TOL_RES,
        }
    }

    fn apply(&mut self, f: &RunFlags) {
        if let Some(k) = f.k {
            self.k = k;
            if f.d.is_none() {
                self.d = self.d.max(default_degree(k));
            }
        }
        if let Some(d) = f.d {
            self.d = d;
        }
        self.r0 = f.r0.unwrap_or(self.r0);
        self.r1 = f.r1.unwrap_or(self.r1);
        self.rel_tol = f.rel_tol.unwrap_or(self.rel_tol);
        self.abs_tol = f.abs_tol.unwrap_or(self.abs_tol);
        self.tol_res = f.tol_res.unwrap_or(self.tol_res);
    }

    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig::with_tolerances(self.rel_tol, self.abs_tol)
    }

    /// Effective configuration, echoed into reports and CSV headers.
    pub fn config_line(&self) -> String {
        let field = match &self.field {
            FieldSpec::Monomials(t) => format!("monomials={}", t.len()),
            FieldSpec::Bats(p) => format!("bats h0={} z0={} mu={}", p.h0, p.z0, p.viscosity),
        };
        format!(
            "n={} sigma={} field=[{}] K={} D={} r0={:e} r1={:e} rel_tol={:e} abs_tol={:e} tol_res={:e}",
            self.n, self.sigma, field, self.k, self.d, self.r0, self.r1, self.rel_tol, self.abs_tol, self.tol_res
        )
    }

    /// The problem with series degree `d`.
    pub fn singular_problem(&self, d: u32) -> Result<SingularProblem, CliError> {
        match &self.field {
            FieldSpec::Bats(p) => Ok(bats::bats_series(p, d)?),
            FieldSpec::Monomials(terms) => {
                let vars = self.n + 1;
                let mut comps: Vec<Vec<(MultiIndex, f64)>> = vec![Vec::new(); self.n];
                for (c, e, v) in terms {
                    comps[*c].push((MultiIndex::new(e.iter().copied()), *v));
                }
                let comps = comps
                    .into_iter()
                    .map(|t| TruncatedSeries::from_terms(vars, d, t))
                    .collect::<Result<Vec<_>, _>>()?;
                let field = if comps.is_empty() {
                    SeriesVector::zeros(0, vars, d)
                } else {
                    SeriesVector::new(comps)?
                };
                Ok(SingularProblem::new(self.sigma, field, "monomials")?)
            }
        }
    }

    fn system(&self, p: &SingularProblem) -> Result<AutonomousSystem, CliError> {
        match &self.field {
            FieldSpec::Bats(b) => Ok(bats::shifted_system(b)?),
            FieldSpec::Monomials(_) => Ok(AutonomousSystem::from_problem(p)),
        }
    }
}

/// Collected output of one command.
#[derive(Debug, Default)]
pub struct RunReport {
    pub text: String,
    pub csv: Vec<(String, String)>,
    pub status: u8,
}

impl RunReport {
    fn line(&mut self, s: impl AsRef<str>) {
        self.text.push_str(s.as_ref());
        self.text.push('\n');
    }
}

fn fmt_matrix(a: &DenseMatrix) -> String {
    let mut s = String::new();
    for i in 0..a.rows() {
        let row: Vec<String> = a.row(i).iter().map(|v| format!("{v:>14.6e}")).collect();
        let _ = writeln!(s, "  [{}]", row.join(" "));
    }
    s
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6e}")).collect();
    format!("[{}]", parts.join(", "))
}

pub fn cmd_analyze(pf: &ProblemFile, rep: &mut RunReport) -> Result<(), CliError> {
    rep.line(format!("config: {}", pf.config_line()));
    let p = pf.singular_problem(pf.d.max(1))?;
    let (a, b) = p.linearization();
    rep.line("A =");
    rep.text.push_str(&fmt_matrix(&a));
    rep.line(format!("b = {}", fmt_vec(&b)));
    let report = check_nonresonance(&a, pf.sigma, pf.tol_res)?;
    rep.line(format!("sigma = {}", pf.sigma));
    rep.line("eigenvalues (distance of Re/sigma to the nearest positive integer):");
    for (e, d) in report.distances() {
        rep.line(format!("  {e}  {d:.6e}"));
    }
    if let FieldSpec::Bats(bp) = &pf.field {
        let ev = eigenvalue_formulas(bp)?;
        let rc = resonance_condition(bp, pf.tol_res)?;
        rep.line(format!("closed form: lambda3 = {}, lambda4 = {}", ev[2], ev[3]));
        rep.line(format!("lambda4/2 = {} (distance {:.6e})", rc.half_lambda4, rc.distance));
    }
    match report.verdict {
        Verdict::Nonresonant => rep.line("verdict: nonresonant"),
        Verdict::Resonant => {
            let orders: Vec<String> = report.resonant_orders.iter().map(|r| format!("k={}", r.order)).collect();
            rep.line(format!("verdict: resonant {}", orders.join(" ")));
            rep.status = EXIT_RESONANCE;
        }
    }
    Ok(())
}

pub fn cmd_expand(pf: &ProblemFile, rep: &mut RunReport) -> Result<(), CliError> {
    rep.line(format!("config: {}", pf.config_line()));
    let p = pf.singular_problem(pf.d)?;
    let s = expand_solution_with(&p, pf.k, pf.tol_res)?;
    rep.line(format!("order reached: K={}", s.order()));
    rep.line(format!("growth ratios: {}", fmt_vec(&s.growth_ratios)));
    let radii = geometric_radii(1e-3, 1e-2, 6);
    match residual_order(&p, &s, &radii) {
        Ok(ro) => match ro.slope {
            SlopeEstimate::Exact => rep.line("residual slope: exact"),
            SlopeEstimate::Slope(m) => rep.line(format!(
                "residual slope over r in [1e-3, 1e-2]: {m:.4} (expected {})",
                pf.sigma * (pf.k as f64 + 1.0)
            )),
        },
        Err(e) => rep.line(format!("residual slope: unavailable ({e})")),
    }
    rep.line(format!("trust radius (r <= {}): {}", pf.r1, s.trust_radius(pf.r1)));
    rep.csv.push(("coefficients.csv".into(), s.to_csv(&pf.config_line())));
    Ok(())
}

pub fn cmd_integrate(pf: &ProblemFile, check_order: bool, rep: &mut RunReport) -> Result<(), CliError> {
    if let FieldSpec::Bats(bp) = &pf.field {
        return run_shape(bp, pf, rep);
    }
    rep.line(format!("config: {}", pf.config_line()));
    let p = pf.singular_problem(pf.d)?;
    let s = expand_solution_with(&p, pf.k, pf.tol_res)?;
    let sys = pf.system(&p)?;
    let cfg = pf.integrator();
    let result = seed_and_integrate(&sys, &s, pf.r0, pf.r1, &cfg);
    let profile = match result {
        Ok(profile) => profile,
        Err(e) => {
            if let Some(t) = e.partial() {
                let partial = crate::dynsys::Profile {
                    sigma: pf.sigma,
                    trajectory: t.clone(),
                };
                rep.csv.push(("profile.csv".into(), partial.to_csv(&pf.config_line())));
            }
            return Err(e.into());
        }
    };
    let traj = &profile.trajectory;
    rep.line(format!(
        "integrated r = {} .. {} ({} accepted, {} rejected steps)",
        pf.r0, pf.r1, traj.accepted, traj.rejected
    ));
    if check_order {
        let k2 = pf.k + 2;
        let p2 = pf.singular_problem(pf.d.max(default_degree(k2)))?;
        let s2 = expand_solution_with(&p2, k2, pf.tol_res)?;
        let other = seed_and_integrate(&pf.system(&p2)?, &s2, pf.r0, pf.r1, &cfg)?;
        let (a, b) = (traj.last_state().unwrap_or(&[]), other.trajectory.last_state().unwrap_or(&[]));
        let delta = a.iter().zip(b).fold(0.0f64, |m, (u, v)| m.max((u - v).abs()));
        rep.line(format!("order check: max |x_K - x_(K+2)| at r1 = {delta:.6e}"));
    }
    rep.csv.push(("profile.csv".into(), profile.to_csv(&pf.config_line())));
    Ok(())
}

fn run_shape(bp: &BatsParams, pf: &ProblemFile, rep: &mut RunReport) -> Result<(), CliError> {
    rep.line(format!("config: {}", pf.config_line()));
    let shape = tip_shape(bp, pf.k, pf.r0, pf.r1, &pf.integrator(), pf.tol_res)?;
    let tip = shape.tip;
    rep.line(format!(
        "tip point: eta0={} h0={} Psi0={} z0={}",
        tip.eta0, tip.h0, tip.psi0, tip.z0
    ));
    rep.line(format!("c1 = {}", fmt_vec(&shape.solution.coefficients[0])));
    rep.line(format!("termination: {}", shape.termination));
    let cfg = pf.config_line();
    rep.csv.push(("shape.csv".into(), shape.shape.to_csv(&cfg)));
    rep.csv.push(("profile.csv".into(), shape.profile.to_csv(&cfg)));
    match shape.termination {
        Termination::Completed => Ok(()),
        Termination::SurfaceCloses { r } | Termination::DomainViolation { r, .. } => Err(CliError {
            code: EXIT_INTEGRATION,
            message: format!("integration stopped at r={r} before r1={}: {}", pf.r1, shape.termination),
        }),
    }
}

fn bats_problem(flags: &BatsFlags) -> Result<ProblemFile, CliError> {
    let mut pf = match &flags.problem {
        Some(path) => {
            let pf = parse_problem(path)?;
            if !matches!(pf.field, FieldSpec::Bats(_)) {
                return Err(CliError::usage("bats commands need a problem file with a builtin bats field"));
            }
            pf
        }
        None => ProblemFile::bats_default(),
    };
    let FieldSpec::Bats(current) = &pf.field else { unreachable!() };
    let h0 = flags.h0.unwrap_or(current.h0);
    let z0 = flags.z0.unwrap_or(current.z0);
    let viscosity = match flags.m {
        Some(m) => ViscositySpec::Power { m },
        None => current.viscosity.clone(),
    };
    pf.field = FieldSpec::Bats(bats_params(h0, z0, viscosity)?);
    Ok(pf)
}

fn run_bats(cmd: &BatsCommand, rep: &mut RunReport) -> Result<(), CliError> {
    match cmd {
        BatsCommand::Analyze { params, tol_res } => {
            let mut pf = bats_problem(params)?;
            pf.tol_res = tol_res.unwrap_or(pf.tol_res);
            let FieldSpec::Bats(bp) = &pf.field else { unreachable!() };
            let tip = bats::tip_point(bp)?;
            rep.line(format!("config: {}", pf.config_line()));
            rep.line(format!(
                "tip point: eta0={} h0={} Psi0={} z0={}",
                tip.eta0, tip.h0, tip.psi0, tip.z0
            ));
            rep.line("A =");
            rep.text.push_str(&fmt_matrix(&bats::analytic_jacobian(bp)?));
            let ev = eigenvalue_formulas(bp)?;
            rep.line(format!("lambda = 0, 0, {}, {}", ev[2], ev[3]));
            let rc = resonance_condition(bp, pf.tol_res)?;
            rep.line(format!(
                "lambda4/2 = {} (distance to {} is {:.6e})",
                rc.half_lambda4, rc.nearest, rc.distance
            ));
            rep.line(format!("verdict: {}", rc.verdict));
            if rc.verdict == Verdict::Resonant {
                rep.status = EXIT_RESONANCE;
            }
            Ok(())
        }
        BatsCommand::Locus { m, q_lo, q_hi } => {
            let bracket = (
                q_lo.unwrap_or(DEFAULT_LOCUS_BRACKET.0),
                q_hi.unwrap_or(DEFAULT_LOCUS_BRACKET.1),
            );
            match resonance_locus(*m, bracket)? {
                Locus::Root { q, lambda4 } => {
                    rep.line(format!("m={m} q*={q:.16e} lambda4={lambda4:.16e}"));
                }
                Locus::None { lambda4_lo, lambda4_hi } => {
                    rep.line(format!(
                        "m={m} none (lambda4 from {lambda4_lo} to {lambda4_hi} on q in [{}, {}])",
                        bracket.0, bracket.1
                    ));
                }
            }
            Ok(())
        }
        BatsCommand::Shape { params, run, .. } => {
            let mut pf = bats_problem(params)?;
            pf.apply(run);
            let FieldSpec::Bats(bp) = pf.field.clone() else { unreachable!() };
            run_shape(&bp, &pf, rep)
        }
        BatsCommand::Scan { m, q_grid, k, tol_res, .. } => {
            let tol = tol_res.unwrap_or(TOL_RES);
            let rows = coefficient_blowup_scan(*m, q_grid, *k, tol);
            let cfg = format!("m={m} K={k} D={} h0=q z0=-1 tol_res={tol:e}", default_degree(*k));
            for r in rows.iter().filter(|r| r.error.is_some()) {
                rep.line(format!("q={}: {}", r.q, r.error.as_deref().unwrap_or_default()));
            }
            rep.line(format!("scanned {} points", rows.len()));
            rep.csv.push(("scan.csv".into(), scan_to_csv(&rows, &cfg)));
            Ok(())
        }
    }
}

fn write_outputs(
    rep: &RunReport,
    out_dir: Option<&Path>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
    csv_to_stdout: bool,
) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::usage(format!("write failed: {e}"));
    match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io)?;
            let mut text = rep.text.clone();
            for (name, body) in &rep.csv {
                let path = dir.join(name);
                std::fs::write(&path, body).map_err(io)?;
                let _ = writeln!(text, "wrote {}", path.display());
            }
            stdout.write_all(text.as_bytes()).map_err(io)?;
        }
        None if csv_to_stdout => {
            stderr.write_all(rep.text.as_bytes()).map_err(io)?;
            if let Some((_, body)) = rep.csv.first() {
                stdout.write_all(body.as_bytes()).map_err(io)?;
            }
        }
        None => stdout.write_all(rep.text.as_bytes()).map_err(io)?,
    }
    Ok(())
}

/// Runs the CLI on `args` (including the program name); returns the exit
/// code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                stderr.write_all(text.as_bytes())
            } else {
                stdout.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let mut rep = RunReport::default();
    let (result, out, csv_to_stdout) = match &cli.command {
        Command::Analyze(a) => (
            parse_problem(&a.problem).and_then(|mut pf| {
                pf.apply(&a.run);
                cmd_analyze(&pf, &mut rep)
            }),
            a.out.clone(),
            false,
        ),
        Command::Expand(a) => (
            parse_problem(&a.problem).and_then(|mut pf| {
                pf.apply(&a.run);
                cmd_expand(&pf, &mut rep)
            }),
            a.out.clone(),
            true,
        ),
        Command::Integrate(a) => (
            parse_problem(&a.problem).and_then(|mut pf| {
                pf.apply(&a.run);
                cmd_integrate(&pf, a.check_order, &mut rep)
            }),
            a.out.clone(),
            true,
        ),
        Command::Bats { command } => {
            let out = match command {
                BatsCommand::Shape { out, .. } | BatsCommand::Scan { out, .. } => out.clone(),
                _ => None,
            };
            let csv = matches!(command, BatsCommand::Shape { .. } | BatsCommand::Scan { .. });
            (run_bats(command, &mut rep), out, csv)
        }
    };
    let mut code = rep.status;
    if let Err(e) = result {
        rep.line(format!("error: {}", e.message));
        code = e.code;
    }
    if let Err(e) = write_outputs(&rep, out.as_deref(), stdout, stderr, csv_to_stdout) {
        let _ = writeln!(stderr, "error: {}", e.message);
        return EXIT_USAGE;
    }
    code
}
