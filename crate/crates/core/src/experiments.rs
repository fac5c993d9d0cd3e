//! Run configuration, threshold tables, the no-loss and with-loss sweeps, and the
//! run-directory layout (config copy, manifest, CSV tables, JSONL traces).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decomposition::{with_loss_experiment, with_loss_threshold, WithLossOptions, WithLossReport};
use crate::error::{invalid, Error, Result};
use crate::estimates::{default_cases, run_lab, write_lab_report, LabConfig};
use crate::evolution::{free_flow, reference_nonlinear_solve, LinearMethod, ReferenceOptions, TimeGrid, Trajectory};
use crate::nash_moser::{
    compute_delta, higher_regularity_audit, nmh_solve, optimize_radius, CauchyProblem, IterationTrace, NmhConfig,
    NmhSummary, RadiusReport, SolveOptions,
};
use crate::par;
use crate::spectral::{dyadic_exponent, SemiclassicalContext};
use crate::system::{make_initial_datum, BaseProfile, DataProfile, ProfileKind, SystemSpec};

pub const MANIFEST_SCHEMA: &str = "run-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub d: usize,
    pub p: u32,
    pub sigma_a: f64,
    pub sigma_mr: f64,
    /// No-loss threshold 1/p + d/2 - sigma_a.
    pub sigma0: f64,
    /// With-loss threshold sigma_mr / p.
    pub sigma1: f64,
    pub sigma_es: Option<f64>,
    /// Lower bound (2 + (d/2) p/(p-1) - sigma_a)/(p+1) for the competing threshold.
    pub c: Option<f64>,
    pub sigma1_below_c: Option<bool>,
    pub sigma0_below_es: Option<bool>,
}

pub fn thresholds(d: usize, p: u32, sigma_a: f64) -> Result<ThresholdRow> {
    if p < 1 || d < 1 || !sigma_a.is_finite() {
        return invalid(format!("thresholds need d, p >= 1 (d = {d}, p = {p})"));
    }
    let (dd, pp) = (d as f64, p as f64);
    let sigma_mr = 1.0 + dd / 2.0 - sigma_a;
    let sigma0 = 1.0 / pp + dd / 2.0 - sigma_a;
    let sigma1 = sigma_mr / pp;
    let (sigma_es, c) = if p >= 2 {
        let r = dd / 2.0 * pp / (pp - 1.0);
        (Some(r - sigma_a), Some((2.0 + r - sigma_a) / (pp + 1.0)))
    } else {
        (None, None)
    };
    Ok(ThresholdRow {
        d,
        p,
        sigma_a,
        sigma_mr,
        sigma0,
        sigma1,
        sigma_es,
        c,
        sigma1_below_c: c.map(|c| sigma1 < c),
        sigma0_below_es: sigma_es.map(|e| sigma0 < e),
    })
}

/// Rows for every (d, p) pair, with sigma_a = 0 (oscillating) and d/2 (concentrating).
pub fn thresholds_table(ds: &[usize], ps: &[u32]) -> Result<Vec<ThresholdRow>> {
    let mut out = Vec::new();
    for &d in ds {
        for &p in ps {
            for sa in [0.0, d as f64 / 2.0] {
                out.push(thresholds(d, p, sa)?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Solve,
    NoLossSweep,
    WithLossSweep,
    VerifyEstimates,
    NmhDemo,
    Radius,
    Thresholds,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Solve => "solve",
            Self::NoLossSweep => "no-loss-sweep",
            Self::WithLossSweep => "with-loss-sweep",
            Self::VerifyEstimates => "verify-estimates",
            Self::NmhDemo => "nmh-demo",
            Self::Radius => "radius",
            Self::Thresholds => "thresholds",
        }
    }

    fn needs_eps(self) -> bool {
        matches!(self, Self::Solve | Self::NoLossSweep | Self::WithLossSweep | Self::NmhDemo)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub n: usize,
    /// Box side in units of eps (concentrating data) or absolute (oscillating data).
    pub box_unit: f64,
    /// Time steps = max(min_steps, steps_per_eps2 * T / eps^2).
    pub steps_per_eps2: f64,
    pub min_steps: usize,
    pub horizon: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { n: 64, box_unit: 16.0, steps_per_eps2: 8.0, min_steps: 16, horizon: 1.0 }
    }
}

impl GridConfig {
    pub fn time_grid(&self, eps: f64) -> Result<TimeGrid> {
        let steps = ((self.steps_per_eps2 * self.horizon / (eps * eps)).ceil() as usize).max(self.min_steps);
        TimeGrid::new(self.horizon, steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Relative NMH residual.
    pub nmh: f64,
    /// Relative residual of each right-inverse application.
    pub linear: f64,
    /// Relative C^0 H^{s1}_eps distance to the reference solution.
    pub oracle: f64,
    /// Allowed max/min spread of the bound ratio across eps.
    pub spread: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { nmh: 1e-8, linear: 1e-8, oracle: 1e-4, spread: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoLossParams {
    /// |u0|_{H^{s1}_eps} = c eps^q.
    pub c: f64,
    pub s1: f64,
    /// The probe run uses c * probe_factor at the largest eps, forced past the ball check.
    pub probe_factor: f64,
    /// While the probe still converges, double the factor up to this cap.
    pub probe_max_factor: f64,
    pub probe: bool,
    /// Cross-check each converged run against the explicit reference integrator.
    pub oracle: bool,
}

impl Default for NoLossParams {
    fn default() -> Self {
        Self { c: 0.05, s1: 5.0, probe_factor: 32.0, probe_max_factor: 4096.0, probe: true, oracle: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WithLossParams {
    pub s1: f64,
    pub rho2: f64,
    pub table_constant: f64,
    pub oracle: bool,
}

impl Default for WithLossParams {
    fn default() -> Self {
        Self { s1: 6.5, rho2: 1.0, table_constant: 1.0, oracle: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadiusParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub r: f64,
    pub p: f64,
}

impl Default for RadiusParams {
    fn default() -> Self {
        Self { a: 1.0, b: 1.0, c: 1.0, r: 10.0, p: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub kind: ExperimentKind,
    /// System file (TOML or JSON); the built-in benchmark when absent.
    #[serde(default)]
    pub system: Option<PathBuf>,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_p")]
    pub p: u32,
    #[serde(default)]
    pub eps: Vec<f64>,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub profile: Option<DataProfile>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub no_loss: NoLossParams,
    #[serde(default)]
    pub with_loss: WithLossParams,
    #[serde(default)]
    pub radius: RadiusParams,
    #[serde(default)]
    pub lab: Option<LabConfig>,
    #[serde(default)]
    pub force: bool,
    #[serde(default)]
    pub probe_below: bool,
    #[serde(default)]
    pub allow_nontransparent: bool,
}

fn default_d() -> usize {
    1
}
fn default_p() -> u32 {
    2
}
fn default_out() -> PathBuf {
    PathBuf::from("runs/latest")
}
fn default_seed() -> u64 {
    20240601
}

impl RunConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            system: None,
            d: default_d(),
            p: default_p(),
            eps: match kind {
                ExperimentKind::WithLossSweep => vec![0.5, 0.25, 0.125, 0.0625],
                ExperimentKind::Solve | ExperimentKind::NmhDemo => vec![0.25],
                _ => vec![0.5, 0.25, 0.125, 0.0625, 0.03125],
            },
            sigma: None,
            profile: None,
            grid: GridConfig::default(),
            tolerances: Tolerances::default(),
            out: default_out(),
            seed: default_seed(),
            no_loss: NoLossParams::default(),
            with_loss: WithLossParams::default(),
            radius: RadiusParams::default(),
            lab: None,
            force: false,
            probe_below: false,
            allow_nontransparent: false,
        }
    }

    /// Reads a TOML or JSON config; a run manifest is accepted too (its embedded config).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let is_toml = path.extension().is_some_and(|e| e == "toml");
        let cfg: RunConfig = if is_toml {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let v = if v.get("schema").is_some() { v.get("config").cloned().unwrap_or_default() } else { v };
            serde_json::from_value(v).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        // relative system paths are taken from the config's directory
        let mut cfg = cfg;
        if let (Some(sys), Some(dir)) = (&cfg.system, path.parent()) {
            if sys.is_relative() && !sys.exists() && dir.join(sys).exists() {
                cfg.system = Some(dir.join(sys));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.system {
            if !p.exists() {
                return Err(Error::Config(format!("system file {} does not exist", p.display())));
            }
        }
        if self.kind.needs_eps() && self.eps.is_empty() {
            return Err(Error::Config("eps list is empty".into()));
        }
        for &e in &self.eps {
            if dyadic_exponent(e).is_none() {
                return Err(Error::NotDyadic(e));
            }
        }
        let g = &self.grid;
        if g.n < 4 || !g.n.is_power_of_two() || !(g.box_unit > 0.0) || !(g.steps_per_eps2 > 0.0) || !(g.horizon > 0.0) {
            return Err(Error::Config(format!("invalid grid {g:?}")));
        }
        let t = &self.tolerances;
        if ![t.nmh, t.linear, t.oracle, t.spread].iter().all(|v| *v > 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("tolerances must be positive: {t:?}")));
        }
        if !(self.no_loss.c > 0.0 && self.no_loss.probe_factor > 0.0 && self.no_loss.probe_max_factor >= self.no_loss.probe_factor) {
            return Err(Error::Config("no_loss.c and no_loss.probe_factor must be positive, probe_max_factor >= probe_factor".into()));
        }
        Ok(())
    }

    pub fn system(&self) -> Result<SystemSpec> {
        match &self.system {
            Some(p) => SystemSpec::load(p, self.allow_nontransparent),
            None => Ok(SystemSpec::benchmark(self.d, self.p)),
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Unit concentrating Gaussian; the no-loss sweep rescales it to the requested size.
pub fn default_no_loss_profile() -> DataProfile {
    DataProfile {
        kind: ProfileKind::Concentrating,
        sigma: 0.0,
        base: BaseProfile::Gaussian { amplitude: 1.0, width: 1.0, center: [0.0, 0.0] },
        weights: vec![],
    }
}

/// Concentrating Gaussian sized so that |a0|_{H^{s1}} sits inside delta for the
/// default with-loss tables.
pub fn default_with_loss_profile(sigma: f64) -> DataProfile {
    DataProfile {
        kind: ProfileKind::Concentrating,
        sigma,
        base: BaseProfile::Gaussian { amplitude: 0.0012, width: 1.0, center: [0.0, 0.0] },
        weights: vec![],
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NoLossRecord {
    pub eps: f64,
    pub steps: usize,
    pub c: f64,
    pub forced: bool,
    /// |u0|_{H^{s1}_eps}
    pub datum_norm: f64,
    pub delta: f64,
    pub converged: bool,
    pub error: Option<String>,
    pub iterations: usize,
    pub oracle_error: Option<f64>,
    /// |u|_{C^1_eps H^{s1}_eps} / |u0|_{H^{s1}_eps}
    pub bound_ratio: Option<f64>,
    /// |u|_{E_alpha} / (L123 (1 + A) |g|_{F_beta})
    pub bound_constant: Option<f64>,
    /// Largest eps|xi| queried by the right inverse, against 2^iterations.
    pub query_ok: bool,
    /// Relative size of the nonlinear part of the solution.
    pub nonlinear_effect: Option<f64>,
    pub summary: Option<NmhSummary>,
    pub wall_seconds: f64,
    #[serde(skip)]
    pub trace: IterationTrace,
}

#[derive(Debug, Clone, Serialize)]
pub struct NoLossReport {
    pub records: Vec<NoLossRecord>,
    /// Probe attempts in order of increasing factor; the last one diverged unless the cap was hit.
    pub probe: Vec<NoLossRecord>,
    pub all_converged: bool,
    pub max_oracle_error: Option<f64>,
    /// max / min of the bound ratio over converged runs.
    pub bound_ratio_spread: Option<f64>,
    pub pass: bool,
}

/// Grid, datum and NMH configuration of one no-loss run.
pub struct NoLossSetup {
    pub ctx: crate::spectral::Ctx,
    pub grid: TimeGrid,
    pub u0: crate::spectral::SpectralField,
    pub nmh: NmhConfig,
    pub s0: f64,
    pub q: f64,
}

/// Builds u0 with |u0|_{H^{s1}_eps} = c eps^q.
pub fn no_loss_setup(sys: &SystemSpec, profile: &DataProfile, eps: f64, c: f64, cfg: &RunConfig) -> Result<NoLossSetup> {
    let (d, p) = (sys.d(), sys.p());
    let s1 = cfg.no_loss.s1;
    let l = match profile.kind {
        ProfileKind::Concentrating => cfg.grid.box_unit * eps,
        ProfileKind::Oscillating { .. } => cfg.grid.box_unit,
    };
    let ctx = SemiclassicalContext::new(d, cfg.grid.n, l, eps)?;
    let grid = cfg.grid.time_grid(eps)?;
    let raw = make_initial_datum(sys, profile, &ctx)?.u0;
    let (mut nmh, idx) = NmhConfig::no_loss(d, p, eps, s1, 1.0)?;
    nmh.tol = cfg.tolerances.nmh;
    let rn = raw.hs_eps(s1);
    if rn == 0.0 {
        return invalid("profile has zero H^{s1} norm");
    }
    let u0 = raw.scale_re(c * eps.powf(idx.q) / rn);
    Ok(NoLossSetup { ctx, grid, u0, nmh, s0: idx.s0, q: idx.q })
}

impl NoLossSetup {
    pub fn problem<'a>(&self, sys: &'a SystemSpec, cfg: &RunConfig) -> CauchyProblem<'a> {
        let mut problem = CauchyProblem::new(sys, &self.ctx, self.grid, self.s0, self.q);
        problem.linear.method = LinearMethod::Direct;
        problem.linear.tol = cfg.tolerances.linear;
        problem
    }
}

/// Solves the no-loss Cauchy problem by NMH and cross-checks it.
pub fn no_loss_run(
    sys: &SystemSpec,
    profile: &DataProfile,
    eps: f64,
    c: f64,
    cfg: &RunConfig,
    force: bool,
    trace_path: Option<PathBuf>,
) -> Result<NoLossRecord> {
    Ok(no_loss_run_full(sys, profile, eps, c, cfg, force, trace_path)?.0)
}

/// As [`no_loss_run`], also returning the solution.
pub fn no_loss_run_full(
    sys: &SystemSpec,
    profile: &DataProfile,
    eps: f64,
    c: f64,
    cfg: &RunConfig,
    force: bool,
    trace_path: Option<PathBuf>,
) -> Result<(NoLossRecord, Option<Trajectory>)> {
    let start = Instant::now();
    let s1 = cfg.no_loss.s1;
    let setup = no_loss_setup(sys, profile, eps, c, cfg)?;
    let (grid, u0) = (setup.grid, &setup.u0);
    let problem = setup.problem(sys, cfg);
    let g = problem.datum(u0);
    let delta = compute_delta(&setup.nmh, 1.0)?.delta;
    let mut rec = NoLossRecord {
        eps,
        steps: grid.steps,
        c,
        forced: force,
        datum_norm: u0.hs_eps(s1),
        delta,
        converged: false,
        error: None,
        iterations: 0,
        oracle_error: None,
        bound_ratio: None,
        bound_constant: None,
        query_ok: false,
        nonlinear_effect: None,
        summary: None,
        wall_seconds: 0.0,
        trace: IterationTrace::default(),
    };
    let mut sol = None;
    match nmh_solve(&problem, &setup.nmh, &g, &SolveOptions { force, trace_path }) {
        Ok(out) => {
            rec.converged = true;
            rec.iterations = out.summary.iterations;
            rec.bound_ratio = Some(out.u.c1_hs(sys, s1)? / rec.datum_norm);
            rec.bound_constant = Some(out.summary.bound_constant);
            rec.query_ok = out.trace.queries_smoothed();
            if cfg.no_loss.oracle {
                let ropts = ReferenceOptions { richardson: false, ..Default::default() };
                match reference_nonlinear_solve(sys, u0, grid, ropts) {
                    Ok((r, _)) => {
                        let rn = r.c0_hs(s1);
                        rec.oracle_error = Some(out.u.sub(&r).c0_hs(s1) / rn);
                        let free = free_flow(sys, u0, grid)?;
                        rec.nonlinear_effect = Some(r.sub(&free).c0_hs(s1) / rn);
                    }
                    Err(e) => rec.error = Some(format!("oracle: {e}")),
                }
            }
            rec.summary = Some(out.summary);
            rec.trace = out.trace;
            sol = Some(out.u);
        }
        Err(f) => {
            rec.error = Some(f.error.to_string());
            rec.iterations = f.trace.steps.len();
            rec.trace = f.trace;
        }
    }
    rec.wall_seconds = start.elapsed().as_secs_f64();
    Ok((rec, sol))
}

fn trace_file(dir: Option<&Path>, tag: &str, eps: f64) -> Option<PathBuf> {
    dir.map(|d| d.join(format!("{tag}_eps_{}.jsonl", dyadic_exponent(eps).map_or(eps.to_string(), |k| format!("2^-{k}")))))
}

pub fn no_loss_sweep(cfg: &RunConfig, trace_dir: Option<&Path>) -> Result<NoLossReport> {
    let sys = cfg.system()?;
    let profile = cfg.profile.clone().unwrap_or_else(default_no_loss_profile);
    let c = cfg.no_loss.c;
    let records = par::map(&cfg.eps, |&eps| {
        no_loss_run(&sys, &profile, eps, c, cfg, cfg.force, trace_file(trace_dir, "no_loss", eps))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut probe = Vec::new();
    if cfg.no_loss.probe {
        let eps = cfg.eps.iter().cloned().fold(0.0, f64::max);
        let mut factor = cfg.no_loss.probe_factor;
        loop {
            let tag = format!("probe_x{factor}");
            let rec = no_loss_run(&sys, &profile, eps, c * factor, cfg, true, trace_file(trace_dir, &tag, eps))?;
            let done = !rec.converged || factor * 2.0 > cfg.no_loss.probe_max_factor;
            probe.push(rec);
            if done {
                break;
            }
            factor *= 2.0;
        }
    }
    let all_converged = records.iter().all(|r| r.converged);
    let max_oracle_error = records.iter().filter_map(|r| r.oracle_error).reduce(f64::max);
    let ratios: Vec<f64> = records.iter().filter_map(|r| r.bound_ratio).collect();
    let bound_ratio_spread = (!ratios.is_empty()).then(|| {
        ratios.iter().cloned().fold(0.0, f64::max) / ratios.iter().cloned().fold(f64::INFINITY, f64::min)
    });
    let pass = all_converged
        && bound_ratio_spread.is_some_and(|s| s <= cfg.tolerances.spread)
        && (!cfg.no_loss.oracle || max_oracle_error.is_some_and(|e| e <= cfg.tolerances.oracle));
    Ok(NoLossReport { records, probe, all_converged, max_oracle_error, bound_ratio_spread, pass })
}

#[derive(Debug, Clone, Serialize)]
pub struct BallCheck {
    pub eps: f64,
    pub datum_norm: f64,
    pub delta: f64,
    pub inside: bool,
}

/// Size of eps^sigma T a0 in H^{s1}_eps against the no-loss radius delta(eps).
pub fn sigma_form_ball(sys: &SystemSpec, profile: &DataProfile, eps_list: &[f64], cfg: &RunConfig) -> Result<Vec<BallCheck>> {
    eps_list
        .iter()
        .map(|&eps| {
            let l = match profile.kind {
                ProfileKind::Concentrating => cfg.grid.box_unit * eps,
                ProfileKind::Oscillating { .. } => cfg.grid.box_unit,
            };
            let ctx = SemiclassicalContext::new(sys.d(), cfg.grid.n, l, eps)?;
            let u0 = make_initial_datum(sys, profile, &ctx)?.u0;
            let (ncfg, _) = NmhConfig::no_loss(sys.d(), sys.p(), eps, cfg.no_loss.s1, 1.0)?;
            let delta = compute_delta(&ncfg, 1.0)?.delta;
            let datum_norm = u0.hs_eps(cfg.no_loss.s1);
            Ok(BallCheck { eps, datum_norm, delta, inside: datum_norm <= delta })
        })
        .collect()
}

pub fn with_loss_options(cfg: &RunConfig) -> WithLossOptions {
    WithLossOptions {
        n: cfg.grid.n,
        box_unit: cfg.grid.box_unit,
        steps_per_eps2: cfg.grid.steps_per_eps2,
        min_steps: cfg.grid.min_steps,
        horizon: cfg.grid.horizon,
        s1: cfg.with_loss.s1,
        rho2: cfg.with_loss.rho2,
        table_constant: cfg.with_loss.table_constant,
        force: cfg.force,
        probe_below: cfg.probe_below,
        oracle: cfg.with_loss.oracle,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WithLossSweep {
    pub sigma: f64,
    pub threshold: f64,
    /// Sobolev index of the data norm (s0 + beta + 1) and of the output norm (s0 + beta).
    pub data_index: f64,
    pub output_index: f64,
    pub report: WithLossReport,
    pub pass: bool,
}

/// Delegates to the decomposition experiment; sigma defaults to threshold + 0.2.
pub fn with_loss_sweep(cfg: &RunConfig) -> Result<WithLossSweep> {
    let sys = cfg.system()?;
    let d = sys.d();
    let base = cfg.profile.clone().unwrap_or_else(|| default_with_loss_profile(0.0));
    let threshold = with_loss_threshold(d, sys.p(), base.sigma_a(d));
    let sigma = cfg.sigma.unwrap_or(threshold + 0.2);
    let profile = DataProfile { sigma, ..base };
    let opts = with_loss_options(cfg);
    let report = with_loss_experiment(&sys, &profile, &cfg.eps, sigma, &opts)?;
    let s0 = (opts.s1 - 4.0) / 2.0;
    let beta = s0 + 3.0;
    let pass = report.records.iter().all(|r| r.converged)
        && report.fitted_exponent.is_some_and(|f| f >= report.target_exponent - 0.1)
        && (!opts.oracle || report.records.iter().all(|r| r.oracle_error.is_some_and(|e| e <= cfg.tolerances.oracle)));
    Ok(WithLossSweep { sigma, threshold, data_index: s0 + beta + 1.0, output_index: s0 + beta, report, pass })
}

/// Files written into a run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub crate_version: String,
    pub parallel: bool,
    pub pass: bool,
    pub files: Vec<String>,
    pub fitted_exponents: BTreeMap<String, f64>,
    pub checks: BTreeMap<String, bool>,
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub pass: bool,
    pub dir: PathBuf,
    /// Human-readable summary lines.
    pub lines: Vec<String>,
}

struct RunDir {
    dir: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        let p = self.path(name);
        std::fs::write(p, serde_json::to_string_pretty(v)?)?;
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let p = self.path(name);
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }

    fn trace(&mut self, name: &str, t: &IterationTrace) -> Result<()> {
        let p = self.path(name);
        let mut s = String::new();
        for step in &t.steps {
            s.push_str(&serde_json::to_string(step)?);
            s.push('\n');
        }
        std::fs::write(p, s)?;
        Ok(())
    }
}

fn f(v: f64) -> String {
    format!("{v:.10e}")
}

fn fo(v: Option<f64>) -> String {
    v.map_or(String::new(), f)
}

fn eps_tag(eps: f64) -> String {
    dyadic_exponent(eps).map_or(eps.to_string(), |k| format!("2^-{k}"))
}

pub const NO_LOSS_COLUMNS: [&str; 14] = [
    "eps",
    "steps",
    "c",
    "forced",
    "datum_norm",
    "delta",
    "converged",
    "iterations",
    "oracle_error",
    "bound_ratio",
    "bound_constant",
    "nonlinear_effect",
    "error",
    "wall_seconds",
];

fn no_loss_row(r: &NoLossRecord) -> Vec<String> {
    vec![
        f(r.eps),
        r.steps.to_string(),
        f(r.c),
        r.forced.to_string(),
        f(r.datum_norm),
        f(r.delta),
        r.converged.to_string(),
        r.iterations.to_string(),
        fo(r.oracle_error),
        fo(r.bound_ratio),
        fo(r.bound_constant),
        fo(r.nonlinear_effect),
        r.error.clone().unwrap_or_default(),
        format!("{:.3}", r.wall_seconds),
    ]
}

pub const WITH_LOSS_COLUMNS: [&str; 13] = [
    "eps",
    "sigma",
    "threshold",
    "steps",
    "converged",
    "iterations",
    "a0_norm",
    "correction_norm",
    "correction_ratio",
    "profile_echo_error",
    "oracle_error",
    "error",
    "wall_seconds",
];

/// Runs one experiment and writes its directory.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut rd = RunDir::create(&cfg.out)?;
    let mut lines = Vec::new();
    let mut checks: BTreeMap<String, bool> = BTreeMap::new();
    let mut fitted: BTreeMap<String, f64> = BTreeMap::new();
    rd.json("config.json", cfg)?;
    match cfg.kind {
        ExperimentKind::Thresholds => {
            let rows = thresholds_table(&[1, 2, 3], &[1, 2, 3])?;
            let opt = |v: Option<f64>| v.map_or("N/A".to_string(), |x| format!("{x:.6}"));
            let optb = |v: Option<bool>| v.map_or("N/A".to_string(), |x| x.to_string());
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.d.to_string(),
                        r.p.to_string(),
                        format!("{}", r.sigma_a),
                        format!("{:.6}", r.sigma_mr),
                        format!("{:.6}", r.sigma0),
                        format!("{:.6}", r.sigma1),
                        opt(r.sigma_es),
                        opt(r.c),
                        optb(r.sigma1_below_c),
                        optb(r.sigma0_below_es),
                    ]
                })
                .collect();
            let header = ["d", "p", "sigma_a", "sigma_mr", "sigma0", "sigma1", "sigma_es", "c", "sigma1_lt_c", "sigma0_lt_es"];
            rd.csv("thresholds.csv", &header, &table)?;
            lines.push(header.join("\t"));
            lines.extend(table.iter().map(|r| r.join("\t")));
            let ok = rows.iter().filter(|r| r.d >= 2 && r.p >= 2).all(|r| r.sigma1_below_c == Some(true) && r.sigma0_below_es == Some(true));
            checks.insert("orderings".into(), ok);
        }
        ExperimentKind::Radius => {
            let r = &cfg.radius;
            let rep: RadiusReport = optimize_radius(r.a, r.b, r.c, r.r, r.p)?;
            rd.json("radius.json", &rep)?;
            lines.push(format!("r* = {:.6}", rep.r_star));
            lines.push(format!("delta* = {:.6}", rep.delta_star));
            lines.push(format!("lambda* = {:.6}", rep.lambda_star));
            match rep.r0 {
                Some(r0) => lines.push(format!("interior critical point r0 = {r0:.6}")),
                None => lines.push("no interior critical point (p = 1): r* = R".into()),
            }
        }
        ExperimentKind::VerifyEstimates => {
            let lab = LabConfig { seed: cfg.seed, ..cfg.lab.clone().unwrap_or_default() };
            let rep = run_lab(&lab, &default_cases(lab.d))?;
            let sub = rd.dir.join("estimates");
            write_lab_report(&rep, &sub)?;
            rd.files.push("estimates/estimates.json".into());
            let rows: Vec<Vec<String>> = rep
                .cases
                .iter()
                .map(|c| vec![c.case.clone(), f(c.c_pooled), f(c.slope), f(c.heldout_max), c.rejected.to_string(), c.pass.to_string()])
                .collect();
            rd.csv("estimates.csv", &["case", "c_est", "slope", "heldout_max", "rejected", "pass"], &rows)?;
            for c in &rep.cases {
                lines.push(format!("{:40} {}  slope {:+.4}  {}", c.case, if c.pass { "PASS" } else { "FAIL" }, c.slope, c.verdict));
                checks.insert(c.case.clone(), c.pass);
            }
            for s in &rep.sharp {
                lines.push(format!("elementary_1 sharp C_{} = {:.9} (scan {:.9})", s.s, s.closed_form, s.scan));
                checks.insert(format!("sharp_{}", s.s), s.abs_err <= 1e-6);
            }
            checks.insert("elementary_1_monotone".into(), rep.elementary_1_monotone);
        }
        ExperimentKind::NoLossSweep => {
            let tdir = rd.dir.join("traces");
            std::fs::create_dir_all(&tdir)?;
            let rep = no_loss_sweep(cfg, Some(&tdir))?;
            for r in &rep.records {
                rd.files.push(format!("traces/no_loss_eps_{}.jsonl", eps_tag(r.eps)));
            }
            for r in &rep.probe {
                rd.files.push(format!("traces/probe_x{}_eps_{}.jsonl", r.c / cfg.no_loss.c, eps_tag(r.eps)));
            }
            let rows: Vec<Vec<String>> = rep.records.iter().chain(rep.probe.iter()).map(no_loss_row).collect();
            rd.csv("no_loss.csv", &NO_LOSS_COLUMNS, &rows)?;
            rd.json("no_loss.json", &rep)?;
            for r in &rep.records {
                lines.push(format!(
                    "eps {:<8} {} it {:>2}  oracle {}  bound ratio {}  {}",
                    eps_tag(r.eps),
                    if r.converged { "converged" } else { "FAILED   " },
                    r.iterations,
                    r.oracle_error.map_or("-".into(), |e| format!("{e:.2e}")),
                    r.bound_ratio.map_or("-".into(), |e| format!("{e:.4}")),
                    r.error.clone().unwrap_or_default()
                ));
            }
            for p in &rep.probe {
                lines.push(format!(
                    "probe c x {} at eps {}: {}",
                    p.c / cfg.no_loss.c,
                    eps_tag(p.eps),
                    if p.converged { "converged".to_string() } else { format!("diverged ({})", p.error.clone().unwrap_or_default()) }
                ));
            }
            checks.insert("all_converged".into(), rep.all_converged);
            checks.insert("bound_ratio_spread".into(), rep.bound_ratio_spread.is_some_and(|s| s <= cfg.tolerances.spread));
            if cfg.no_loss.oracle {
                checks.insert("oracle".into(), rep.max_oracle_error.is_some_and(|e| e <= cfg.tolerances.oracle));
            }
        }
        ExperimentKind::WithLossSweep => {
            let sw = with_loss_sweep(cfg)?;
            let tdir = rd.dir.join("traces");
            std::fs::create_dir_all(&tdir)?;
            let mut rows = Vec::new();
            for r in &sw.report.records {
                rd.trace(&format!("traces/with_loss_eps_{}.jsonl", eps_tag(r.eps)), &r.trace)?;
                rows.push(vec![
                    f(r.eps),
                    f(r.sigma),
                    f(r.threshold),
                    r.steps.to_string(),
                    r.converged.to_string(),
                    r.iterations.to_string(),
                    f(r.a0_norm),
                    f(r.correction_norm),
                    f(r.correction_ratio),
                    f(r.profile_echo_error),
                    fo(r.oracle_error),
                    r.error.clone().unwrap_or_default(),
                    format!("{:.3}", r.wall_seconds),
                ]);
                lines.push(format!(
                    "eps {:<8} {} it {:>2}  |u~| {:.3e}  ratio {:.3e}  oracle {}  {}",
                    eps_tag(r.eps),
                    if r.converged { "converged" } else { "FAILED   " },
                    r.iterations,
                    r.correction_norm,
                    r.correction_ratio,
                    r.oracle_error.map_or("-".into(), |e| format!("{e:.2e}")),
                    r.error.clone().unwrap_or_default()
                ));
            }
            rd.csv("with_loss.csv", &WITH_LOSS_COLUMNS, &rows)?;
            rd.json("with_loss.json", &sw)?;
            lines.push(format!(
                "sigma {} (threshold {:.4}); data in H^{}, output in H^{}_eps; fitted exponent {} vs target {}",
                sw.sigma,
                sw.threshold,
                sw.data_index,
                sw.output_index,
                sw.report.fitted_exponent.map_or("-".into(), |e| format!("{e:.4}")),
                sw.report.target_exponent
            ));
            if let Some(e) = sw.report.fitted_exponent {
                fitted.insert("correction_vs_eps".into(), e);
            }
            checks.insert("with_loss".into(), sw.pass);
        }
        ExperimentKind::Solve | ExperimentKind::NmhDemo => {
            let sys = cfg.system()?;
            let profile = cfg.profile.clone().unwrap_or_else(default_no_loss_profile);
            let eps = cfg.eps[0];
            let tpath = rd.path(&format!("trace_eps_{}.jsonl", eps_tag(eps)));
            let (rec, sol) = no_loss_run_full(&sys, &profile, eps, cfg.no_loss.c, cfg, cfg.force, Some(tpath))?;
            rd.csv("solve.csv", &NO_LOSS_COLUMNS, &[no_loss_row(&rec)])?;
            lines.push(format!(
                "eps {}: {} after {} iterations; oracle {}",
                eps_tag(eps),
                if rec.converged { "converged" } else { "failed" },
                rec.iterations,
                rec.oracle_error.map_or("-".into(), |e| format!("{e:.2e}"))
            ));
            for s in &rec.trace.steps {
                lines.push(format!(
                    "  j {:>2}  residual {:.3e}  |u|_mu {:.3e}  query {} <= {}",
                    s.j,
                    s.residual_a1,
                    s.e_mu,
                    s.query_frequency.map_or("-".into(), |q| format!("{q:.2}")),
                    s.query_cap.map_or("-".into(), |q| format!("{q:.2}"))
                ));
            }
            if let Some(e) = &rec.error {
                lines.push(format!("  error: {e}"));
            }
            checks.insert("converged".into(), rec.converged);
            if cfg.no_loss.oracle {
                checks.insert("oracle".into(), rec.oracle_error.is_some_and(|e| e <= cfg.tolerances.oracle));
            }
            if let (ExperimentKind::Solve, Some(u)) = (cfg.kind, &sol) {
                let every = (u.grid.steps / 64).max(1);
                let p = rd.path("trajectory.csv");
                u.write_csv(&p, &[0.0, cfg.no_loss.s1], every)?;
            }
            if cfg.kind == ExperimentKind::NmhDemo && rec.converged {
                let setup = no_loss_setup(&sys, &profile, eps, cfg.no_loss.c, cfg)?;
                let problem = setup.problem(&sys, cfg);
                match higher_regularity_audit(&problem, &setup.nmh, &problem.datum(&setup.u0), 1.0, &SolveOptions::default()) {
                    Ok((_, reg)) => {
                        lines.push(format!("higher regularity (c = 1): |u|_(alpha+c) / |g|_(beta+c) = {:.4}", reg.ratio));
                        rd.json("regularity.json", &reg)?;
                    }
                    Err(e) => lines.push(format!("higher regularity audit failed: {}", e.error)),
                }
            }
        }
    }
    let pass = checks.values().all(|&b| b);
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.into(),
        kind: cfg.kind.name().into(),
        config_hash: cfg.hash()?,
        seed: cfg.seed,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        parallel: par::is_parallel(),
        pass,
        files: {
            let mut v = rd.files.clone();
            v.push("manifest.json".into());
            v
        },
        fitted_exponents: fitted,
        checks,
        config: cfg.clone(),
    };
    rd.json("manifest.json", &manifest)?;
    Ok(RunOutcome { pass, dir: rd.dir, lines })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_threshold_rows() {
        let r = thresholds(2, 2, 0.0).unwrap();
        assert_eq!((r.sigma_mr, r.sigma0, r.sigma1, r.sigma_es), (2.0, 1.5, 1.0, Some(2.0)));
        assert!((r.c.unwrap() - 4.0 / 3.0).abs() < 1e-15);
        let r = thresholds(2, 2, 1.0).unwrap();
        assert_eq!((r.sigma_mr, r.sigma0, r.sigma1, r.sigma_es), (1.0, 0.5, 0.5, Some(1.0)));
        let r = thresholds(1, 1, 0.5).unwrap();
        assert_eq!((r.sigma_es, r.c, r.sigma1_below_c), (None, None, None));
    }

    #[test]
    fn orderings_for_d_p_at_least_two() {
        for d in 2..=6 {
            for p in 2..=6 {
                for sa in [0.0, d as f64 / 2.0] {
                    let r = thresholds(d, p, sa).unwrap();
                    assert_eq!(r.sigma0_below_es, Some(true), "{r:?}");
                    assert_eq!(r.sigma1_below_c, Some(true), "{r:?}");
                }
            }
        }
    }

    #[test]
    fn config_roundtrip_and_validation() {
        let cfg = RunConfig::new(ExperimentKind::NoLossSweep);
        let t = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&t).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.hash().unwrap(), back.hash().unwrap());
        let mut bad = cfg.clone();
        bad.eps = vec![0.3];
        assert!(matches!(bad.validate(), Err(Error::NotDyadic(_))));
        let mut bad = cfg;
        bad.system = Some(PathBuf::from("/nonexistent/system.toml"));
        assert!(bad.validate().is_err());
    }
}
