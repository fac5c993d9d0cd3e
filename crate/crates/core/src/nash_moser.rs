//! Generic Nash-Moser-Hormander engine: index/constant bookkeeping, the radius
//! formulas, a smoothed Newton iteration over an abstract pair of Banach scales, and
//! the Cauchy problem Phi(u) = (d_t u + P(u), u(0)) plugged into it.

use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::{
    phi_discrete, phi_second_discrete, solve_linearized, LinearOptions, LinearReport, Stagger, TimeGrid,
    Trajectory,
};
use crate::spectral::{Ctx, SpectralField};
use crate::system::SystemSpec;

/// Increasing constant function a -> value, piecewise linear between knots and
/// clamped outside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantTable {
    pub knots: Vec<[f64; 2]>,
}

impl ConstantTable {
    pub fn constant(v: f64) -> Self {
        Self { knots: vec![[0.0, v]] }
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn at(&self, a: f64) -> f64 {
        let k = &self.knots;
        if k.is_empty() {
            return 0.0;
        }
        if a <= k[0][0] {
            return k[0][1];
        }
        for w in k.windows(2) {
            if a <= w[1][0] {
                let t = (a - w[0][0]) / (w[1][0] - w[0][0]);
                return w[0][1] + t * (w[1][1] - w[0][1]);
            }
        }
        k[k.len() - 1][1]
    }

    fn check(&self, name: &str) -> Result<()> {
        for w in self.knots.windows(2) {
            if w[1][0] <= w[0][0] || w[1][1] < w[0][1] {
                return Err(Error::Config(format!("{name} must be increasing in a")));
            }
        }
        if self.knots.iter().any(|k| !(k[1].is_finite() && k[1] >= 0.0)) {
            return Err(Error::Config(format!("{name} must be nonnegative and finite")));
        }
        Ok(())
    }
}

/// Iteration variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// u_{n+1} = u_n + Psi(S_n u_n) S_n (Phi(0) + g - Phi(u_n)).
    #[default]
    SmoothedNewton,
    /// Same, with the target g replaced by its partial dyadic sum up to block n.
    Hormander,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NmhConfig {
    pub a0: f64,
    pub mu: f64,
    pub a1: f64,
    pub a2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub delta1: f64,
    pub m: [ConstantTable; 3],
    pub l: [ConstantTable; 3],
    #[serde(default = "one")]
    pub c_prime: f64,
    /// Constant C of the solution bound, recorded against the measured one.
    #[serde(default = "one")]
    pub c_bound: f64,
    #[serde(default = "default_cap")]
    pub max_iter: usize,
    /// Relative residual tolerance in F_{a1}.
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// theta_j = base^j; only 2 is supported by the dyadic smoothing operators.
    #[serde(default = "two")]
    pub schedule_base: f64,
    /// Radius of the domain ball U in E_mu.
    #[serde(default = "one")]
    pub ball_radius: f64,
    #[serde(default)]
    pub scheme: Scheme,
}

fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn default_cap() -> usize {
    40
}
fn default_tol() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<(String, bool)>,
}

impl ValidationReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.1)
    }
}

/// Checks 0 <= a0 <= mu <= a1, a1 + beta/2 < alpha < a1 + beta, 2 alpha < a1 + a2.
pub fn validate_config(cfg: &NmhConfig) -> Result<ValidationReport> {
    let c = cfg;
    let checks = vec![
        ("0 <= a0".to_string(), 0.0 <= c.a0),
        ("a0 <= mu".to_string(), c.a0 <= c.mu),
        ("mu <= a1".to_string(), c.mu <= c.a1),
        ("a1 + beta/2 < alpha".to_string(), c.a1 + c.beta / 2.0 < c.alpha),
        ("alpha < a1 + beta".to_string(), c.alpha < c.a1 + c.beta),
        ("2 alpha < a1 + a2".to_string(), 2.0 * c.alpha < c.a1 + c.a2),
    ];
    let report = ValidationReport { checks };
    if let Some((name, _)) = report.checks.iter().find(|c| !c.1) {
        return Err(Error::Config(format!(
            "index inequality violated: {name} (a0={}, mu={}, a1={}, a2={}, alpha={}, beta={})",
            c.a0, c.mu, c.a1, c.a2, c.alpha, c.beta
        )));
    }
    for (i, t) in c.m.iter().enumerate() {
        t.check(&format!("M{}", i + 1))?;
    }
    for (i, t) in c.l.iter().enumerate() {
        t.check(&format!("L{}", i + 1))?;
    }
    if !(c.delta1 > 0.0) || !(c.c_prime > 0.0) || !(c.tol > 0.0) {
        return Err(Error::Config("delta1, C' and tol must be positive".into()));
    }
    if c.schedule_base != 2.0 {
        return Err(Error::Config("only the dyadic schedule theta_j = 2^j is supported".into()));
    }
    Ok(report)
}

impl NmhConfig {
    /// Indices and constant tables of the no-loss Cauchy problem: a0 = 0, mu = a1 = 2,
    /// beta = alpha = 4 + gamma/2, a2 = 2 beta - 1.5, delta1 = 1, M1 = M2 = C eps^q,
    /// L1 = L2 = C eps^-q, M3 = L3 = 0, with q = 1/p + d/2.
    pub fn no_loss(d: usize, p: u32, eps: f64, s1: f64, c: f64) -> Result<(Self, NoLossIndices)> {
        let idx = NoLossIndices::new(d, p, s1)?;
        let q = idx.q;
        let m = ConstantTable::constant(c * eps.powf(q));
        let l = ConstantTable::constant(c * eps.powf(-q));
        let cfg = Self {
            a0: 0.0,
            mu: 2.0,
            a1: 2.0,
            a2: 2.0 * idx.beta - 1.5,
            alpha: idx.beta,
            beta: idx.beta,
            delta1: 1.0,
            m: [m.clone(), m, ConstantTable::zero()],
            l: [l.clone(), l, ConstantTable::zero()],
            c_prime: 1.0,
            c_bound: 1.0,
            max_iter: default_cap(),
            tol: default_tol(),
            schedule_base: 2.0,
            ball_radius: 1.0,
            scheme: Scheme::SmoothedNewton,
        };
        validate_config(&cfg)?;
        Ok((cfg, idx))
    }

    /// Tables of the decomposed problem with loss: beta = alpha = s0 + 3, delta1 = rho2.
    /// For p > 1, M1 = M2 = C eps^{-sigma + kappa}, L1 = L2 = C eps^{sigma - kappa} with
    /// kappa = (1 + d/2 - sigma_a)/p; for p = 1 (Z-norms), M = C eps^{1 - sigma} and
    /// L = C eps^{sigma + sigma_a - 1 - d/2}.
    #[allow(clippy::too_many_arguments)]
    pub fn with_loss(d: usize, p: u32, eps: f64, sigma: f64, sigma_a: f64, s0: f64, rho2: f64, c: f64) -> Result<Self> {
        let dd = d as f64;
        let (mexp, lexp) = if p > 1 {
            let kappa = (1.0 + dd / 2.0 - sigma_a) / p as f64;
            (-sigma + kappa, sigma - kappa)
        } else {
            (1.0 - sigma, sigma + sigma_a - 1.0 - dd / 2.0)
        };
        let beta = s0 + 3.0;
        let m = ConstantTable::constant(c * eps.powf(mexp));
        let l = ConstantTable::constant(c * eps.powf(lexp));
        let cfg = Self {
            a0: 0.0,
            mu: 2.0,
            a1: 2.0,
            a2: 2.0 * beta - 1.5,
            alpha: beta,
            beta,
            delta1: rho2,
            m: [m.clone(), m, ConstantTable::zero()],
            l: [l.clone(), l, ConstantTable::zero()],
            c_prime: 1.0,
            c_bound: 1.0,
            max_iter: default_cap(),
            tol: default_tol(),
            schedule_base: 2.0,
            ball_radius: rho2,
            scheme: Scheme::SmoothedNewton,
        };
        validate_config(&cfg)?;
        Ok(cfg)
    }

    pub fn l123(&self, a: f64) -> f64 {
        self.l.iter().map(|t| t.at(a)).sum()
    }

    pub fn m123(&self, a: f64) -> f64 {
        self.m.iter().map(|t| t.at(a)).sum()
    }
}

/// Sobolev indices of the no-loss problem: gamma = s1 - (d/2 + 4), s0 = d/2 + gamma/2,
/// beta = 4 + gamma/2, so that s1 = s0 + beta.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NoLossIndices {
    pub s1: f64,
    pub gamma: f64,
    pub s0: f64,
    pub beta: f64,
    pub q: f64,
}

impl NoLossIndices {
    pub fn new(d: usize, p: u32, s1: f64) -> Result<Self> {
        let dd = d as f64;
        let gamma = s1 - (dd / 2.0 + 4.0);
        if !(gamma > 0.0) || p == 0 {
            return Err(Error::Config(format!("need s1 > d/2 + 4 and p >= 1 (s1 = {s1}, d = {d})")));
        }
        Ok(Self { s1, gamma, s0: dd / 2.0 + gamma / 2.0, beta: 4.0 + gamma / 2.0, q: 1.0 / p as f64 + dd / 2.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// 1/delta1: the ball where the right inverse exists.
    Ball,
    /// 1 + A: size of the datum.
    Data,
    /// (1 + A) L M: the quadratic condition from Phi''.
    Quadratic,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeltaReport {
    pub delta: f64,
    pub b: f64,
    /// The three arguments of the max, in the order ball, data, quadratic.
    pub branches: [f64; 3],
    /// Radius each branch alone would impose: 1/(C' L123 branch).
    pub branch_radii: [f64; 3],
    pub dominant: Branch,
}

/// delta = 1/B, B = C' L123(a2) max{1/delta1, 1 + A, (1 + A) L123(a2) M123(a2 - mu)}.
pub fn compute_delta(cfg: &NmhConfig, a: f64) -> Result<DeltaReport> {
    let l = cfg.l123(cfg.a2);
    let m = cfg.m123(cfg.a2 - cfg.mu);
    if !(l > 0.0 && m >= 0.0 && cfg.delta1 > 0.0 && cfg.c_prime > 0.0 && a >= 0.0) {
        return Err(Error::Config(format!(
            "compute_delta needs positive constants (L123 = {l}, M123 = {m}, delta1 = {}, C' = {}, A = {a})",
            cfg.delta1, cfg.c_prime
        )));
    }
    let branches = [1.0 / cfg.delta1, 1.0 + a, (1.0 + a) * l * m];
    let (imax, bmax) = branches
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v >= acc.1 { (i, v) } else { acc });
    let b = cfg.c_prime * l * bmax;
    let dominant = [Branch::Ball, Branch::Data, Branch::Quadratic][imax];
    let branch_radii = branches.map(|v| 1.0 / (cfg.c_prime * l * v));
    Ok(DeltaReport { delta: 1.0 / b, b, branches, branch_radii, dominant })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RadiusReport {
    /// Unconstrained minimizer of phi (None for p = 1).
    pub r0: Option<f64>,
    pub r_star: f64,
    pub delta_star: f64,
    pub lambda_star: f64,
}

/// Radius maximizing delta(r) = 1/phi(r), phi(r) = A/r + (B + C) r^{p-1}, over (0, R].
pub fn optimize_radius(a: f64, b: f64, c: f64, r: f64, p: f64) -> Result<RadiusReport> {
    if !(p >= 1.0) {
        return Err(Error::InvalidArgument(format!("optimize_radius needs p >= 1, got {p}")));
    }
    if !(a > 0.0 && b > 0.0 && c > 0.0 && r > 0.0) || ![a, b, c, r].iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("optimize_radius needs A, B, C, R > 0".into()));
    }
    let phi = |x: f64| a / x + (b + c) * x.powf(p - 1.0);
    let r0 = (p > 1.0).then(|| (a / ((p - 1.0) * (b + c))).powf(1.0 / p));
    let r_star = match r0 {
        Some(r0) if r0 < r => r0,
        _ => r,
    };
    Ok(RadiusReport { r0, r_star, delta_star: 1.0 / phi(r_star), lambda_star: 1.0 / r_star })
}

/// A map Phi between two scales with smoothing operators, a right inverse of its
/// linearization and an evaluator of the second derivative.
pub trait NmhProblem {
    type E: Clone;
    type F: Clone;

    fn zero_e(&self) -> Self::E;
    fn phi(&self, u: &Self::E) -> Result<Self::F>;
    fn phi_second(&self, u: &Self::E, h1: &Self::E, h2: &Self::E) -> Result<Self::F>;
    /// Right inverse of Phi'(v) applied to f.
    fn psi(&self, v: &Self::E, f: &Self::F) -> Result<(Self::E, PsiInfo)>;

    fn e_norm(&self, u: &Self::E, a: f64) -> Result<f64>;
    fn f_norm(&self, f: &Self::F, a: f64) -> f64;

    fn smooth_e(&self, u: &Self::E, j: u32) -> Self::E;
    fn smooth_f(&self, f: &Self::F, j: u32) -> Self::F;
    fn block_f(&self, f: &Self::F, j: u32) -> Self::F;
    /// Smallest J with S_J f = f.
    fn level_f(&self, f: &Self::F) -> u32;
    /// Largest semiclassical frequency present in u.
    fn max_frequency_e(&self, u: &Self::E) -> f64;

    fn add_e(&self, a: &Self::E, b: &Self::E) -> Self::E;
    fn add_f(&self, a: &Self::F, b: &Self::F) -> Self::F;
    fn sub_f(&self, a: &Self::F, b: &Self::F) -> Self::F;
}

/// Diagnostics of one right-inverse query.
#[derive(Debug, Clone, Default, Serialize)]
pub struct PsiInfo {
    pub residual_rel: f64,
    pub rounds: usize,
    pub fixed_point_iters: usize,
    pub neumann_factor: f64,
}

impl From<&LinearReport> for PsiInfo {
    fn from(r: &LinearReport) -> Self {
        Self {
            residual_rel: r.residual_rel,
            rounds: r.rounds,
            fixed_point_iters: r.max_fixed_point_iters,
            neumann_factor: r.max_neumann_factor,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceStep {
    pub j: usize,
    pub e_alpha: f64,
    pub e_mu: f64,
    pub residual_a1: f64,
    pub residual_beta: f64,
    pub in_ball: bool,
    /// Max eps|xi| of the smoothed point where Psi was queried, and the cap 2^j.
    pub query_frequency: Option<f64>,
    pub query_cap: Option<f64>,
    pub psi: Option<PsiInfo>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct IterationTrace {
    pub steps: Vec<TraceStep>,
}

impl IterationTrace {
    fn push(&mut self, step: TraceStep, sink: &mut Option<std::io::BufWriter<std::fs::File>>) -> Result<()> {
        if let Some(f) = sink {
            serde_json::to_writer(&mut *f, &step)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        self.steps.push(step);
        Ok(())
    }

    pub fn residuals(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.residual_a1).collect()
    }

    /// Every Psi query happened at a point with frequencies <= 2^j.
    pub fn queries_smoothed(&self) -> bool {
        self.steps.iter().all(|s| match (s.query_frequency, s.query_cap) {
            (Some(f), Some(c)) => f <= c * (1.0 + 1e-12),
            _ => true,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct SolveOptions {
    /// Run even when |g|_{F_beta} exceeds delta.
    pub force: bool,
    /// JSON-lines trace destination.
    pub trace_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct NmhSummary {
    pub converged: bool,
    pub iterations: usize,
    pub g_beta: f64,
    /// Measured A with sum_j |R_j g|^2_{F_beta} = A^2 |g|^2_{F_beta}.
    pub a_constant: f64,
    pub delta: DeltaReport,
    pub u_alpha: f64,
    /// |u|_{E_alpha} / (L123(a2) (1 + A) |g|_{F_beta}).
    pub bound_constant: f64,
    pub bound_ok: bool,
}

pub struct NmhOutcome<E> {
    pub u: E,
    pub trace: IterationTrace,
    pub summary: NmhSummary,
}

/// Failure of a solve, carrying the trace up to the failing step.
#[derive(Debug)]
pub struct NmhFailure {
    pub error: Error,
    pub trace: IterationTrace,
}

impl From<Box<NmhFailure>> for Error {
    fn from(f: Box<NmhFailure>) -> Self {
        f.error
    }
}

/// A^2 = sum_j |R_j g|^2_{F_b} / |g|^2_{F_b}.
pub fn dyadic_constant<P: NmhProblem>(problem: &P, g: &P::F, b: f64) -> f64 {
    let total = problem.f_norm(g, b);
    if total == 0.0 {
        return 1.0;
    }
    let top = problem.level_f(g);
    let sum: f64 = (0..=top).map(|j| problem.f_norm(&problem.block_f(g, j), b).powi(2)).sum();
    sum.sqrt() / total
}

/// Solves Phi(u) = Phi(0) + g by smoothed Newton steps with theta_n = 2^n.
pub fn nmh_solve<P: NmhProblem>(
    problem: &P,
    cfg: &NmhConfig,
    g: &P::F,
    opts: &SolveOptions,
) -> std::result::Result<NmhOutcome<P::E>, Box<NmhFailure>> {
    let mut trace = IterationTrace::default();
    let fail = |error: Error, trace: &IterationTrace| Box::new(NmhFailure { error, trace: trace.clone() });
    validate_config(cfg).map_err(|e| fail(e, &trace))?;
    let mut sink = match &opts.trace_path {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p).map_err(|e| fail(e.into(), &trace))?)),
        None => None,
    };

    let g_beta = problem.f_norm(g, cfg.beta);
    let a_constant = dyadic_constant(problem, g, cfg.beta);
    let delta = compute_delta(cfg, a_constant).map_err(|e| fail(e, &trace))?;
    if g_beta > delta.delta && !opts.force {
        return Err(fail(
            Error::OutsideBall(format!("|g|_F_beta = {g_beta:.3e} exceeds delta = {:.3e}", delta.delta)),
            &trace,
        ));
    }

    let phi0 = problem.phi(&problem.zero_e()).map_err(|e| fail(e, &trace))?;
    let target_full = problem.add_f(&phi0, g);
    let g_a1 = problem.f_norm(g, cfg.a1);
    let top = problem.level_f(g);
    let target_at = |n: usize| -> P::F {
        match cfg.scheme {
            Scheme::SmoothedNewton => target_full.clone(),
            Scheme::Hormander => problem.add_f(&phi0, &problem.smooth_f(g, (n as u32 + 1).min(top.max(1)))),
        }
    };

    let mut u = problem.zero_e();
    let mut residual = problem.sub_f(&target_full, &phi0);
    let mut stalled = 0usize;
    let mut best = f64::INFINITY;
    let mut n = 0usize;
    loop {
        let r_a1 = problem.f_norm(&residual, cfg.a1);
        let r_beta = problem.f_norm(&residual, cfg.beta);
        let e_mu = problem.e_norm(&u, cfg.mu).map_err(|e| fail(e, &trace))?;
        let e_alpha = problem.e_norm(&u, cfg.alpha).map_err(|e| fail(e, &trace))?;
        let in_ball = e_mu <= cfg.ball_radius;
        let converged = g_a1 == 0.0 || r_a1 <= cfg.tol * g_a1;
        let mut step = TraceStep {
            j: n,
            e_alpha,
            e_mu,
            residual_a1: r_a1,
            residual_beta: r_beta,
            in_ball,
            query_frequency: None,
            query_cap: None,
            psi: None,
        };
        if !in_ball {
            trace.push(step, &mut sink).map_err(|e| fail(e, &trace))?;
            return Err(fail(Error::BallEscape { step: n, norm: e_mu, radius: cfg.ball_radius }, &trace));
        }
        if !r_a1.is_finite() {
            trace.push(step, &mut sink).map_err(|e| fail(e, &trace))?;
            return Err(fail(Error::NonFinite("NMH residual"), &trace));
        }
        if converged {
            trace.push(step, &mut sink).map_err(|e| fail(e, &trace))?;
            let bound_constant = if g_beta == 0.0 {
                0.0
            } else {
                e_alpha / (cfg.l123(cfg.a2) * (1.0 + a_constant) * g_beta)
            };
            let summary = NmhSummary {
                converged: true,
                iterations: n,
                g_beta,
                a_constant,
                delta,
                u_alpha: e_alpha,
                bound_constant,
                bound_ok: bound_constant <= cfg.c_bound,
            };
            return Ok(NmhOutcome { u, trace, summary });
        }
        if r_a1 < best * 0.999 {
            best = r_a1;
            stalled = 0;
        } else if n > 0 {
            stalled += 1;
        }
        if n >= cfg.max_iter || stalled >= 3 {
            trace.push(step, &mut sink).map_err(|e| fail(e, &trace))?;
            return Err(fail(Error::NoConvergence { iterations: n, residual: r_a1 / g_a1 }, &trace));
        }

        let j = n as u32;
        let v = problem.smooth_e(&u, j);
        let rhs = match cfg.scheme {
            Scheme::SmoothedNewton => problem.smooth_f(&residual, j),
            Scheme::Hormander => problem.smooth_f(&problem.sub_f(&target_at(n), &problem.phi(&u).map_err(|e| fail(e, &trace))?), j),
        };
        step.query_frequency = Some(problem.max_frequency_e(&v));
        step.query_cap = Some(2f64.powi(j as i32));
        let psi = problem.psi(&v, &rhs);
        let (du, info) = match psi {
            Ok(x) => x,
            Err(e) => {
                trace.push(step, &mut sink).map_err(|e| fail(e, &trace))?;
                return Err(fail(e, &trace));
            }
        };
        step.psi = Some(info);
        trace.push(step, &mut sink).map_err(|e| fail(e, &trace))?;
        u = problem.add_e(&u, &du);
        let phi_u = match problem.phi(&u) {
            Ok(x) => x,
            Err(e) => return Err(fail(e, &trace)),
        };
        residual = problem.sub_f(&target_full, &phi_u);
        n += 1;
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RegularityReport {
    pub c: f64,
    pub u_alpha_c: f64,
    pub g_beta_c: f64,
    /// |u|_{E_{alpha+c}} / |g|_{F_{beta+c}}.
    pub ratio: f64,
    pub a_c: f64,
    pub summary: NmhSummary,
}

/// Solves and measures the solution in E_{alpha+c} against g in F_{beta+c}.
pub fn higher_regularity_audit<P: NmhProblem>(
    problem: &P,
    cfg: &NmhConfig,
    g: &P::F,
    c: f64,
    opts: &SolveOptions,
) -> std::result::Result<(NmhOutcome<P::E>, RegularityReport), Box<NmhFailure>> {
    if !(c > 0.0) {
        return Err(Box::new(NmhFailure {
            error: Error::InvalidArgument(format!("regularity gain c must be positive, got {c}")),
            trace: IterationTrace::default(),
        }));
    }
    let out = nmh_solve(problem, cfg, g, opts)?;
    let g_beta_c = problem.f_norm(g, cfg.beta + c);
    let u_alpha_c = problem
        .e_norm(&out.u, cfg.alpha + c)
        .map_err(|e| Box::new(NmhFailure { error: e, trace: out.trace.clone() }))?;
    let report = RegularityReport {
        c,
        u_alpha_c,
        g_beta_c,
        ratio: if g_beta_c == 0.0 { 0.0 } else { u_alpha_c / g_beta_c },
        a_c: dyadic_constant(problem, g, cfg.beta + c),
        summary: out.summary.clone(),
    };
    Ok((out, report))
}

/// Codomain element of the Cauchy map: forcing at the midpoints and an initial datum.
#[derive(Debug, Clone)]
pub struct Pair {
    pub f1: Trajectory,
    pub f2: SpectralField,
}

/// Phi(u) = (d_t u + P(u), u(0)) discretized on a time grid, with
/// |u|_{E_a} = eps^{-q} |u|_{C^1_eps H^{s0+a}_eps} and
/// |f|_{F_a} = |f1|_{C^0 H^{s0+a}_eps} + |f2|_{H^{s0+a}_eps}.
pub struct CauchyProblem<'a> {
    pub sys: &'a SystemSpec,
    pub ctx: Ctx,
    pub grid: TimeGrid,
    pub s0: f64,
    /// Exponent of the rescaling eps^{-q} on the domain scale.
    pub q: f64,
    pub linear: LinearOptions,
}

impl<'a> CauchyProblem<'a> {
    pub fn new(sys: &'a SystemSpec, ctx: &Ctx, grid: TimeGrid, s0: f64, q: f64) -> Self {
        Self { sys, ctx: ctx.clone(), grid, s0, q, linear: LinearOptions::default() }
    }

    /// g = (0, u0).
    pub fn datum(&self, u0: &SpectralField) -> Pair {
        Pair { f1: Trajectory::zeros(self.grid, Stagger::Midpoints, &self.ctx, self.sys.m()), f2: u0.clone() }
    }
}

impl NmhProblem for CauchyProblem<'_> {
    type E = Trajectory;
    type F = Pair;

    fn zero_e(&self) -> Trajectory {
        Trajectory::zeros(self.grid, Stagger::Nodes, &self.ctx, self.sys.m())
    }

    fn phi(&self, u: &Trajectory) -> Result<Pair> {
        let (f1, f2) = phi_discrete(self.sys, u)?;
        Ok(Pair { f1, f2 })
    }

    fn phi_second(&self, u: &Trajectory, h1: &Trajectory, h2: &Trajectory) -> Result<Pair> {
        let f1 = phi_second_discrete(self.sys, u, h1, h2)?;
        Ok(Pair { f1, f2: SpectralField::zeros(&self.ctx, self.sys.m()) })
    }

    fn psi(&self, v: &Trajectory, f: &Pair) -> Result<(Trajectory, PsiInfo)> {
        let (h, rep) = solve_linearized(self.sys, v, &f.f1, &f.f2, &self.linear)?;
        Ok((h, PsiInfo::from(&rep)))
    }

    fn e_norm(&self, u: &Trajectory, a: f64) -> Result<f64> {
        Ok(self.ctx.eps().powf(-self.q) * u.c1_hs(self.sys, self.s0 + a)?)
    }

    fn f_norm(&self, f: &Pair, a: f64) -> f64 {
        f.f1.c0_hs(self.s0 + a) + f.f2.hs_eps(self.s0 + a)
    }

    fn smooth_e(&self, u: &Trajectory, j: u32) -> Trajectory {
        u.smooth(j)
    }

    fn smooth_f(&self, f: &Pair, j: u32) -> Pair {
        Pair { f1: f.f1.smooth(j), f2: f.f2.smooth(j) }
    }

    fn block_f(&self, f: &Pair, j: u32) -> Pair {
        Pair { f1: f.f1.dyadic_block(j), f2: f.f2.dyadic_block(j) }
    }

    fn level_f(&self, f: &Pair) -> u32 {
        f.f1.spectral_level().max(f.f2.spectral_level())
    }

    fn max_frequency_e(&self, u: &Trajectory) -> f64 {
        max_frequency(u)
    }

    fn add_e(&self, a: &Trajectory, b: &Trajectory) -> Trajectory {
        a.add(b)
    }

    fn add_f(&self, a: &Pair, b: &Pair) -> Pair {
        Pair { f1: a.f1.add(&b.f1), f2: a.f2.add(&b.f2) }
    }

    fn sub_f(&self, a: &Pair, b: &Pair) -> Pair {
        Pair { f1: a.f1.sub(&b.f1), f2: a.f2.sub(&b.f2) }
    }
}

/// Largest eps|xi| carried by any slice.
pub fn max_frequency(u: &Trajectory) -> f64 {
    u.max_over(field_max_frequency)
}

pub(crate) fn field_max_frequency(f: &SpectralField) -> f64 {
    let ctx = f.ctx();
    let mut r: f64 = 0.0;
    for c in f.comps() {
        for (k, z) in c.iter().enumerate() {
            if z.norm_sqr() > 0.0 {
                r = r.max(ctx.eps_xi_abs(k));
            }
        }
    }
    r
}

/// Least-squares slope of log y against log x.
pub fn log_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Fitted eps-exponents of the three branch radii over an eps grid.
pub fn branch_slopes(eps: &[f64], tables: impl Fn(f64) -> Result<NmhConfig>, a: f64) -> Result<[f64; 3]> {
    let mut radii = [Vec::new(), Vec::new(), Vec::new()];
    for &e in eps {
        let rep = compute_delta(&tables(e)?, a)?;
        for i in 0..3 {
            radii[i].push(rep.branch_radii[i]);
        }
    }
    Ok([log_slope(eps, &radii[0]), log_slope(eps, &radii[1]), log_slope(eps, &radii[2])])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> NmhConfig {
        let (mut c, _) = NmhConfig::no_loss(1, 2, 1.0, 5.0, 1.0).unwrap();
        c.a0 = 0.0;
        c.mu = 2.0;
        c.a1 = 2.0;
        c.alpha = 4.5;
        c.beta = 4.5;
        c.a2 = 8.0;
        c
    }

    #[test]
    fn index_chains() {
        assert!(validate_config(&base()).unwrap().pass());
        let mut c = base();
        c.alpha = c.a1 + c.beta;
        let err = validate_config(&c).unwrap_err().to_string();
        assert!(err.contains("alpha < a1 + beta"), "{err}");
        let mut c = base();
        c.a2 = 7.0;
        assert!(validate_config(&c).unwrap_err().to_string().contains("2 alpha < a1 + a2"));
    }

    #[test]
    fn delta_example() {
        let mut c = base();
        c.l = [ConstantTable::constant(2.0), ConstantTable::zero(), ConstantTable::zero()];
        c.m = [ConstantTable::constant(1.0), ConstantTable::zero(), ConstantTable::zero()];
        let r = compute_delta(&c, 0.0).unwrap();
        assert_eq!(r.b, 4.0);
        assert_eq!(r.delta, 0.25);
        assert_eq!(r.dominant, Branch::Quadratic);
        c.delta1 = 1e12;
        assert_ne!(compute_delta(&c, 0.0).unwrap().dominant, Branch::Ball);
        c.l = [ConstantTable::zero(), ConstantTable::zero(), ConstantTable::zero()];
        assert!(compute_delta(&c, 0.0).is_err());
    }

    #[test]
    fn radius_branches() {
        let r = optimize_radius(1.0, 1.0, 1.0, 10.0, 2.0).unwrap();
        assert!((r.r_star - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((r.delta_star - 1.0 / (2.0 * 2f64.sqrt())).abs() < 1e-12);
        let r1 = optimize_radius(3.0, 1.0, 2.0, 7.0, 1.0).unwrap();
        assert_eq!(r1.r_star, 7.0);
        let r0 = r.r0.unwrap();
        let rc = optimize_radius(1.0, 1.0, 1.0, r0 / 2.0, 2.0).unwrap();
        assert_eq!(rc.r_star, r0 / 2.0);
        assert!(optimize_radius(1.0, 1.0, 1.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn constant_table_interpolates() {
        let t = ConstantTable { knots: vec![[0.0, 1.0], [2.0, 3.0]] };
        assert_eq!(t.at(-1.0), 1.0);
        assert_eq!(t.at(1.0), 2.0);
        assert_eq!(t.at(5.0), 3.0);
    }

    #[test]
    fn preset_indices() {
        let (c, idx) = NmhConfig::no_loss(1, 2, 0.25, 5.0, 1.0).unwrap();
        assert_eq!(idx.s0 + idx.beta, 5.0);
        assert_eq!(c.mu, 2.0);
        assert!(c.beta > 4.0 && c.a2 > 2.0 * c.beta - 2.0);
    }
}
