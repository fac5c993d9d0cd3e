//! Time evolution on a uniform grid: exact free flow, the discrete operator
//! Phi_dt(u) = (D u + N(M u), u(0)) in the interaction picture, its linearization and
//! right inverse, and an explicit integrating-factor RK4 reference solver.
//!
//! For slices u_k at t_k = k dt, with S(tau) the free propagator,
//!   D u_{k+1/2} = (S(-dt/2) u_{k+1} - S(dt/2) u_k) / dt,
//!   M u_{k+1/2} = (S(-dt/2) u_{k+1} + S(dt/2) u_k) / 2,
//! and N(w) = -eps^-1 B(w, eps d) w. D vanishes on free solutions, so the stiff part is
//! exact and only the nonlinearity is discretized (exponential midpoint rule).

use std::io::Write;
use std::path::Path;

use num_complex::Complex64 as C64;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::normal_form::NormalForm;
use crate::par;
use crate::spectral::{Ctx, NormTag, SpectralField};
use crate::system::{apply_free, apply_p_second, Frozen, SystemSpec};

const ONE: C64 = C64 { re: 1.0, im: 0.0 };

/// Uniform time grid on [0, T].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) || steps == 0 {
            return invalid(format!("bad time grid T = {horizon}, steps = {steps}"));
        }
        Ok(Self { horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }

    pub fn t_mid(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.dt()
    }

    pub fn refined(&self, factor: usize) -> Self {
        Self { horizon: self.horizon, steps: self.steps * factor }
    }
}

/// Whether slices sit at the nodes t_k or at the midpoints t_{k+1/2}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stagger {
    Nodes,
    Midpoints,
}

/// Slices of a time-dependent field on a [`TimeGrid`].
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub stagger: Stagger,
    pub slices: Vec<SpectralField>,
}

impl Trajectory {
    pub fn new(grid: TimeGrid, stagger: Stagger, slices: Vec<SpectralField>) -> Result<Self> {
        let want = match stagger {
            Stagger::Nodes => grid.steps + 1,
            Stagger::Midpoints => grid.steps,
        };
        if slices.len() != want {
            return invalid(format!("expected {want} slices, got {}", slices.len()));
        }
        for s in &slices[1..] {
            slices[0].check_same(s)?;
        }
        Ok(Self { grid, stagger, slices })
    }

    pub fn zeros(grid: TimeGrid, stagger: Stagger, ctx: &Ctx, ncomp: usize) -> Self {
        let n = match stagger {
            Stagger::Nodes => grid.steps + 1,
            Stagger::Midpoints => grid.steps,
        };
        Self { grid, stagger, slices: vec![SpectralField::zeros(ctx, ncomp); n] }
    }

    /// Builds slice k from its time.
    pub fn from_fn(
        grid: TimeGrid,
        stagger: Stagger,
        f: impl Fn(f64) -> SpectralField + Sync + Send,
    ) -> Result<Self> {
        let n = match stagger {
            Stagger::Nodes => grid.steps + 1,
            Stagger::Midpoints => grid.steps,
        };
        let times: Vec<f64> = (0..n)
            .map(|k| match stagger {
                Stagger::Nodes => grid.t(k),
                Stagger::Midpoints => grid.t_mid(k),
            })
            .collect();
        let slices = par::map(&times, |&t| f(t).with_t(t));
        Self::new(grid, stagger, slices)
    }

    pub fn ctx(&self) -> &Ctx {
        self.slices[0].ctx()
    }

    pub fn ncomp(&self) -> usize {
        self.slices[0].ncomp()
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        match self.stagger {
            Stagger::Nodes => self.grid.t(k),
            Stagger::Midpoints => self.grid.t_mid(k),
        }
    }

    pub fn check_same(&self, other: &Self) -> Result<()> {
        if self.grid != other.grid || self.stagger != other.stagger {
            return invalid("trajectories live on different time grids");
        }
        self.slices[0].check_same(&other.slices[0])
    }

    pub fn map(&self, f: impl Fn(&SpectralField) -> SpectralField + Sync + Send) -> Self {
        Self { grid: self.grid, stagger: self.stagger, slices: par::map(&self.slices, f) }
    }

    fn zip(&self, other: &Self, f: impl Fn(&SpectralField, &SpectralField) -> SpectralField + Sync + Send) -> Self {
        let slices = par::map_range(self.len(), |k| f(&self.slices[k], &other.slices[k]));
        Self { grid: self.grid, stagger: self.stagger, slices }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a.add(b))
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a.sub(b))
    }

    pub fn scale_re(&self, a: f64) -> Self {
        self.map(|s| s.scale_re(a))
    }

    pub fn max_over(&self, f: impl Fn(&SpectralField) -> f64 + Sync + Send) -> f64 {
        par::map(&self.slices, f).into_iter().fold(0.0, f64::max)
    }

    /// sup_t |u(t)|_{H^s_eps}
    pub fn c0_hs(&self, s: f64) -> f64 {
        self.max_over(|u| u.hs_eps(s))
    }

    pub fn c0_hs_unit(&self, s: f64) -> f64 {
        self.max_over(|u| u.hs_unit(s))
    }

    pub fn c0_linf(&self) -> f64 {
        self.max_over(|u| u.linf())
    }

    pub fn c0_w_inf(&self, m: u32) -> f64 {
        self.max_over(|u| u.w_inf_eps(m))
    }

    /// d_t u at the nodes: second-order differences of the interaction-picture
    /// variable, one-sided at the ends, plus the free generator.
    pub fn time_derivative(&self, sys: &SystemSpec) -> Result<Self> {
        if self.stagger != Stagger::Nodes {
            return invalid("time derivative needs node slices");
        }
        let n = self.grid.steps;
        let dt = self.grid.dt();
        let slices = par::map_range(n + 1, |k| {
            let u = &self.slices;
            let raw = if n == 1 {
                let a = propagate(sys, &u[1], -dt);
                let mut d = a.sub(&u[0]).scale_re(1.0 / dt);
                if k == 1 {
                    d = propagate(sys, &d, dt);
                }
                d
            } else if k == 0 {
                let mut d = u[0].scale_re(-3.0);
                d.axpy(C64::new(4.0, 0.0), &propagate(sys, &u[1], -dt));
                d.axpy(-ONE, &propagate(sys, &u[2], -2.0 * dt));
                d.scale_re(0.5 / dt)
            } else if k == n {
                let mut d = u[n].scale_re(3.0);
                d.axpy(C64::new(-4.0, 0.0), &propagate(sys, &u[n - 1], dt));
                d.axpy(ONE, &propagate(sys, &u[n - 2], 2.0 * dt));
                d.scale_re(0.5 / dt)
            } else {
                propagate(sys, &u[k + 1], -dt)
                    .sub(&propagate(sys, &u[k - 1], dt))
                    .scale_re(0.5 / dt)
            };
            let mut out = raw;
            out.axpy(-ONE, &apply_free(sys, &u[k]));
            out.with_t(self.time(k))
        });
        Self::new(self.grid, Stagger::Nodes, slices)
    }

    /// |u|_{C^1_eps H^s_eps} = |u|_{C^0 H^s_eps} + eps^2 |d_t u|_{C^0 H^{s-2}_eps}
    pub fn c1_hs(&self, sys: &SystemSpec, s: f64) -> Result<f64> {
        let e2 = self.ctx().eps().powi(2);
        Ok(self.c0_hs(s) + e2 * self.time_derivative(sys)?.c0_hs(s - 2.0))
    }

    /// |u|_{C^1_eps W^m_eps}; the time-derivative part uses W^{max(m-2,0)}.
    pub fn c1_w_inf(&self, sys: &SystemSpec, m: u32) -> Result<f64> {
        let e2 = self.ctx().eps().powi(2);
        Ok(self.c0_w_inf(m) + e2 * self.time_derivative(sys)?.c0_w_inf(m.saturating_sub(2)))
    }

    pub fn norm(&self, sys: &SystemSpec, tag: NormTag) -> Result<f64> {
        match tag {
            NormTag::C0Hs(s) | NormTag::HsEps(s) => Ok(self.c0_hs(s)),
            NormTag::C1Hs(s) => self.c1_hs(sys, s),
            NormTag::L2 => Ok(self.c0_hs(0.0)),
            NormTag::Linf => Ok(self.c0_linf()),
            NormTag::WmInfEps(m) if m >= 0 => Ok(self.c0_w_inf(m as u32)),
            NormTag::WmInfEps(m) => invalid(format!("W^{{{m},inf}} needs m >= 0")),
        }
    }

    /// S_j on every slice.
    pub fn smooth(&self, j: u32) -> Self {
        self.map(|u| u.smooth(j))
    }

    pub fn smooth_unit(&self, j: u32) -> Self {
        self.map(|u| u.smooth_unit(j))
    }

    pub fn dyadic_block(&self, j: u32) -> Self {
        self.map(|u| u.dyadic_block(j))
    }

    pub fn spectral_level(&self) -> u32 {
        self.slices.iter().map(|u| u.spectral_level()).max().unwrap_or(0)
    }

    pub fn is_finite(&self) -> bool {
        self.slices.iter().all(|u| u.is_finite())
    }

    pub fn conjugate_pair_defect(&self) -> f64 {
        self.max_over(|u| u.conjugate_pair_defect())
    }

    /// Every `every`-th slice (always keeping the last), for export.
    pub fn decimated(&self, every: usize) -> Vec<(f64, &SpectralField)> {
        let every = every.max(1);
        let mut out: Vec<(f64, &SpectralField)> =
            (0..self.len()).step_by(every).map(|k| (self.time(k), &self.slices[k])).collect();
        let last = self.len() - 1;
        if last % every != 0 {
            out.push((self.time(last), &self.slices[last]));
        }
        out
    }

    /// Norm time series: t, H^s_eps for each requested s, Linf.
    pub fn write_csv(&self, path: &Path, s_list: &[f64], every: usize) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend(s_list.iter().map(|s| format!("hs_eps_{s}")));
        header.push("linf".into());
        w.write_record(&header)?;
        for (t, u) in self.decimated(every) {
            let mut row = vec![format!("{t:.12e}")];
            row.extend(s_list.iter().map(|&s| format!("{:.12e}", u.hs_eps(s))));
            row.push(format!("{:.12e}", u.linf()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Snapshots of decimated slices as JSON lines.
    pub fn write_snapshots(&self, path: &Path, every: usize) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (t, u) in self.decimated(every) {
            let snap = u.clone().with_t(t).to_snapshot();
            serde_json::to_writer(&mut f, &snap)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Free propagator S(tau): component r picks up exp(i lambda_r |xi|^2 tau).
pub fn propagate(sys: &SystemSpec, u: &SpectralField, tau: f64) -> SpectralField {
    if tau == 0.0 {
        return u.clone();
    }
    let ctx = u.ctx().clone();
    u.comp_multiplier(|r, k| C64::from_polar(1.0, sys.lambda_doubled(r) * ctx.xi_abs2(k) * tau))
}

/// Free flow y(t) = S(t) y0 sampled on the grid.
pub fn free_flow(sys: &SystemSpec, y0: &SpectralField, grid: TimeGrid) -> Result<Trajectory> {
    if y0.ncomp() != sys.m() {
        return invalid("datum does not match the system size");
    }
    let y0 = y0.clone();
    Trajectory::from_fn(grid, Stagger::Nodes, move |t| propagate(sys, &y0, t))
}

/// (D u, M u) at the midpoint of step k.
pub fn midpoint_pair(sys: &SystemSpec, u: &Trajectory, k: usize) -> (SpectralField, SpectralField) {
    let h = 0.5 * u.grid.dt();
    let a = propagate(sys, &u.slices[k + 1], -h);
    let b = propagate(sys, &u.slices[k], h);
    (a.sub(&b).scale_re(1.0 / u.grid.dt()), a.add(&b).scale_re(0.5))
}

/// d_t u at the midpoints: D u - i eps^-2 A (M u).
pub fn midpoint_time_derivative(sys: &SystemSpec, u: &Trajectory) -> Trajectory {
    let slices = par::map_range(u.grid.steps, |k| {
        let (d, m) = midpoint_pair(sys, u, k);
        d.sub(&apply_free(sys, &m)).with_t(u.grid.t_mid(k))
    });
    Trajectory { grid: u.grid, stagger: Stagger::Midpoints, slices }
}

fn outside(e: Error, k: usize) -> Error {
    match e {
        Error::LinfBall(v) => Error::OutsideBall(format!("|M u|_inf = {v:.3e} > 1 at step {k}")),
        other => other,
    }
}

/// Phi_dt(u) = (D u + N(M u) at midpoints, u(0)).
pub fn phi_discrete(sys: &SystemSpec, u: &Trajectory) -> Result<(Trajectory, SpectralField)> {
    if u.stagger != Stagger::Nodes {
        return invalid("Phi acts on node trajectories");
    }
    let eps = u.ctx().eps();
    let slices: Result<Vec<SpectralField>> = par::map_range(u.grid.steps, |k| {
        let (d, m) = midpoint_pair(sys, u, k);
        let fz = Frozen::new(sys, &m).map_err(|e| outside(e, k))?;
        let mut out = d;
        out.axpy(C64::new(-1.0 / eps, 0.0), &fz.apply_b(&m));
        Ok(out.with_t(u.grid.t_mid(k)))
    })
    .into_iter()
    .collect();
    Ok((Trajectory::new(u.grid, Stagger::Midpoints, slices?)?, u.slices[0].clone()))
}

/// Phi_dt'(u) h = (D h + N'(M u) M h, h(0)).
pub fn phi_prime_discrete(sys: &SystemSpec, u: &Trajectory, h: &Trajectory) -> Result<(Trajectory, SpectralField)> {
    u.check_same(h)?;
    let slices: Result<Vec<SpectralField>> = par::map_range(u.grid.steps, |k| {
        let (_, mu) = midpoint_pair(sys, u, k);
        let (dh, mh) = midpoint_pair(sys, h, k);
        let fz = Frozen::new(sys, &mu).map_err(|e| outside(e, k))?;
        let mut out = dh;
        out.axpy(ONE, &fz.apply_nonlinear_prime(&mh));
        Ok(out.with_t(u.grid.t_mid(k)))
    })
    .into_iter()
    .collect();
    Ok((Trajectory::new(u.grid, Stagger::Midpoints, slices?)?, h.slices[0].clone()))
}

/// Phi_dt''(u)[h1, h2] = (N''(M u)[M h1, M h2], 0).
pub fn phi_second_discrete(sys: &SystemSpec, u: &Trajectory, h1: &Trajectory, h2: &Trajectory) -> Result<Trajectory> {
    u.check_same(h1)?;
    u.check_same(h2)?;
    let slices: Result<Vec<SpectralField>> = par::map_range(u.grid.steps, |k| {
        let (_, mu) = midpoint_pair(sys, u, k);
        let (_, m1) = midpoint_pair(sys, h1, k);
        let (_, m2) = midpoint_pair(sys, h2, k);
        apply_p_second(sys, &mu, &m1, &m2).map_err(|e| outside(e, k))
    })
    .into_iter()
    .collect();
    Trajectory::new(u.grid, Stagger::Midpoints, slices?)
}

/// F_s-type norm of a pair: sup_t |f1|_{H^s_eps} + |f2|_{H^s_eps}.
pub fn pair_norm(f1: &Trajectory, f2: &SpectralField, s: f64) -> f64 {
    f1.c0_hs(s) + f2.hs_eps(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LinearMethod {
    /// Conjugate by I + K, march the reduced problem, then correct defects.
    NormalForm,
    /// March the linearized equation directly.
    Direct,
}

#[derive(Debug, Clone, Serialize)]
pub struct LinearOptions {
    pub method: LinearMethod,
    /// Target relative residual of Phi_dt'(u) h - (f1, f2) in the pair norm at `residual_s`.
    pub tol: f64,
    pub residual_s: f64,
    pub max_rounds: usize,
    pub fixed_point_tol: f64,
    pub max_fixed_point: usize,
    /// Ball eps^{-1-pd/2} |u|^p_{C^1_eps H^{s0+2}_eps} <= rho, checked when set as (s0, rho).
    pub ball: Option<(f64, f64)>,
}

impl Default for LinearOptions {
    fn default() -> Self {
        Self {
            method: LinearMethod::NormalForm,
            tol: 1e-8,
            residual_s: 0.0,
            max_rounds: 12,
            fixed_point_tol: 1e-14,
            max_fixed_point: 200,
            ball: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct LinearReport {
    pub residual_rel: f64,
    pub rounds: usize,
    pub max_fixed_point_iters: usize,
    pub max_neumann_factor: f64,
    pub ball_value: Option<f64>,
    pub residual_history: Vec<f64>,
}

/// Solves y + (dt/2) L y = rhs by fixed-point iteration.
fn implicit_half(
    rhs: &SpectralField,
    dt: f64,
    tol: f64,
    max_iter: usize,
    mut op: impl FnMut(&SpectralField) -> Result<SpectralField>,
) -> Result<(SpectralField, usize)> {
    let scale = rhs.l2();
    if scale == 0.0 {
        return Ok((rhs.clone(), 0));
    }
    let mut y = rhs.clone();
    let mut last = f64::INFINITY;
    for it in 1..=max_iter {
        let mut next = rhs.clone();
        next.axpy(C64::new(-0.5 * dt, 0.0), &op(&y)?);
        let change = next.sub(&y).l2();
        y = next;
        if change <= tol * scale {
            return Ok((y, it));
        }
        if change >= last && it > 3 {
            return Err(Error::NoConvergence { iterations: it, residual: change / scale });
        }
        last = change;
    }
    Err(Error::NoConvergence { iterations: max_iter, residual: last / scale })
}

/// Marches D h + L_k(M h) = f_k, h_0 = h0, where `op(k)` gives L_k.
fn march<F>(
    sys: &SystemSpec,
    grid: TimeGrid,
    h0: &SpectralField,
    f: &Trajectory,
    opts: &LinearOptions,
    mut op_at: F,
) -> Result<(Trajectory, usize)>
where
    F: FnMut(usize, &SpectralField) -> Result<SpectralField>,
{
    let dt = grid.dt();
    let mut slices = Vec::with_capacity(grid.steps + 1);
    slices.push(h0.clone().with_t(0.0));
    let mut worst = 0;
    for k in 0..grid.steps {
        let z = propagate(sys, &slices[k], 0.5 * dt);
        let lz = op_at(k, &z)?;
        let mut rhs = z;
        rhs.axpy(C64::new(-0.5 * dt, 0.0), &lz);
        rhs.axpy(C64::new(dt, 0.0), &f.slices[k]);
        let (y, it) = implicit_half(&rhs, dt, opts.fixed_point_tol, opts.max_fixed_point, |v| op_at(k, v))?;
        worst = worst.max(it);
        slices.push(propagate(sys, &y, 0.5 * dt).with_t(grid.t(k + 1)));
    }
    Ok((Trajectory::new(grid, Stagger::Nodes, slices)?, worst))
}

fn direct_pass(
    sys: &SystemSpec,
    u: &Trajectory,
    f1: &Trajectory,
    f2: &SpectralField,
    opts: &LinearOptions,
) -> Result<(Trajectory, usize, f64)> {
    let mids: Vec<SpectralField> = par::map_range(u.grid.steps, |k| midpoint_pair(sys, u, k).1);
    let mut cache: Option<(usize, Frozen)> = None;
    let (h, it) = march(sys, u.grid, f2, f1, opts, |k, v| {
        if cache.as_ref().map(|c| c.0) != Some(k) {
            cache = Some((k, Frozen::new(sys, &mids[k]).map_err(|e| outside(e, k))?));
        }
        Ok(cache.as_ref().expect("set").1.apply_nonlinear_prime(v))
    })?;
    Ok((h, it, 0.0))
}

fn normal_form_pass(
    sys: &SystemSpec,
    u: &Trajectory,
    f1: &Trajectory,
    f2: &SpectralField,
    opts: &LinearOptions,
) -> Result<(Trajectory, usize, f64)> {
    let grid = u.grid;
    let mids: Vec<SpectralField> = par::map_range(grid.steps, |k| midpoint_pair(sys, u, k).1);
    let dtu = midpoint_time_derivative(sys, u);
    // g1 = (I + K(M u))^{-1} f1 at each midpoint
    let g1: Result<Vec<(SpectralField, f64)>> = par::map_range(grid.steps, |k| {
        let nf = NormalForm::new(sys, &mids[k]).map_err(|e| outside(e, k))?;
        let fac = nf.contraction_factor(&f1.slices[k]);
        Ok((nf.neumann_invert(&f1.slices[k])?, fac))
    })
    .into_iter()
    .collect();
    let g1 = g1?;
    let mut factor = g1.iter().map(|x| x.1).fold(0.0, f64::max);
    let g1 = Trajectory::new(grid, Stagger::Midpoints, g1.into_iter().map(|x| x.0).collect())?;
    let nf0 = NormalForm::new(sys, &u.slices[0]).map_err(|e| outside(e, 0))?;
    factor = factor.max(nf0.contraction_factor(f2));
    let g2 = nf0.neumann_invert(f2)?;

    let mut cache: Option<(usize, NormalForm)> = None;
    let (phi, it) = march(sys, grid, &g2, &g1, opts, |k, v| {
        if cache.as_ref().map(|c| c.0) != Some(k) {
            let nf = NormalForm::new(sys, &mids[k])
                .map_err(|e| outside(e, k))?
                .with_time_derivative(&dtu.slices[k])?;
            cache = Some((k, nf));
        }
        cache.as_ref().expect("set").1.apply_q_lower(v)
    })?;
    // h = (I + K(u_k)) phi_k at the nodes
    let slices: Result<Vec<SpectralField>> = par::map_range(grid.steps + 1, |k| {
        let nf = NormalForm::new(sys, &u.slices[k]).map_err(|e| outside(e, k))?;
        Ok(nf.apply_i_plus_k(&phi.slices[k]).with_t(grid.t(k)))
    })
    .into_iter()
    .collect();
    Ok((Trajectory::new(grid, Stagger::Nodes, slices?)?, it, factor))
}

/// Value of eps^{-1-pd/2} |u|^p_{C^1_eps H^{s0+2}_eps}.
pub fn ball_value(sys: &SystemSpec, u: &Trajectory, s0: f64) -> Result<f64> {
    let eps = u.ctx().eps();
    let d = u.ctx().d() as f64;
    let p = sys.p() as f64;
    Ok(eps.powf(-1.0 - p * d / 2.0) * u.c1_hs(sys, s0 + 2.0)?.powf(p))
}

/// Right inverse of Phi_dt'(u): h with D h + N'(M u) M h = f1 and h(0) = f2.
pub fn solve_linearized(
    sys: &SystemSpec,
    u: &Trajectory,
    f1: &Trajectory,
    f2: &SpectralField,
    opts: &LinearOptions,
) -> Result<(Trajectory, LinearReport)> {
    if u.stagger != Stagger::Nodes || f1.stagger != Stagger::Midpoints || f1.grid != u.grid {
        return invalid("solve_linearized expects u at nodes and f1 at midpoints of the same grid");
    }
    u.slices[0].check_same(&f1.slices[0])?;
    u.slices[0].check_same(f2)?;
    let mut report = LinearReport::default();
    if let Some((s0, rho)) = opts.ball {
        let v = ball_value(sys, u, s0)?;
        report.ball_value = Some(v);
        if v > rho {
            return Err(Error::OutsideBall(format!(
                "eps^(-1-pd/2)|u|^p_(C1 H^(s0+2)) = {v:.3e} > {rho:.3e}"
            )));
        }
    }
    let fnorm = pair_norm(f1, f2, opts.residual_s);
    let ctx = u.ctx().clone();
    if fnorm == 0.0 {
        return Ok((Trajectory::zeros(u.grid, Stagger::Nodes, &ctx, u.ncomp()), report));
    }
    let pass = |r1: &Trajectory, r2: &SpectralField| match opts.method {
        LinearMethod::NormalForm => normal_form_pass(sys, u, r1, r2, opts),
        LinearMethod::Direct => direct_pass(sys, u, r1, r2, opts),
    };
    let (mut h, it, fac) = pass(f1, f2)?;
    report.max_fixed_point_iters = it;
    report.max_neumann_factor = fac;
    loop {
        let (a1, a2) = phi_prime_discrete(sys, u, &h)?;
        let r1 = f1.sub(&a1);
        let r2 = f2.sub(&a2);
        let rel = pair_norm(&r1, &r2, opts.residual_s) / fnorm;
        report.residual_history.push(rel);
        report.residual_rel = rel;
        if rel <= opts.tol {
            break;
        }
        if report.rounds >= opts.max_rounds {
            return Err(Error::NoConvergence { iterations: report.rounds, residual: rel });
        }
        let n = report.residual_history.len();
        if n >= 2 && rel >= report.residual_history[n - 2] {
            return Err(Error::NoConvergence { iterations: report.rounds, residual: rel });
        }
        let (dh, it, fac) = pass(&r1, &r2)?;
        report.max_fixed_point_iters = report.max_fixed_point_iters.max(it);
        report.max_neumann_factor = report.max_neumann_factor.max(fac);
        h = h.add(&dh);
        report.rounds += 1;
    }
    Ok((h, report))
}

/// Ratio of |h|_{C^1_eps H^s_eps} to the right side of the energy estimate
/// |f1|_{C^0 H^s} + |f2|_{H^s} + eps^{-1-pd/2}|u|^{p-1}_{C^1 H^{s0+2}}|u|_{C^1 H^{s+2}}(|f1|_{C^0 H^{s0}} + |f2|_{H^{s0}}).
pub fn estimate_ratio(
    sys: &SystemSpec,
    u: &Trajectory,
    f1: &Trajectory,
    f2: &SpectralField,
    h: &Trajectory,
    s: f64,
    s0: f64,
) -> Result<f64> {
    let eps = u.ctx().eps();
    let d = u.ctx().d() as f64;
    let p = sys.p() as f64;
    let low = u.c1_hs(sys, s0 + 2.0)?;
    let high = u.c1_hs(sys, s + 2.0)?;
    let rhs = pair_norm(f1, f2, s) + eps.powf(-1.0 - p * d / 2.0) * low.powf(p - 1.0) * high * pair_norm(f1, f2, s0);
    let lhs = h.c1_hs(sys, s)?;
    Ok(if rhs == 0.0 { 0.0 } else { lhs / rhs })
}

/// Options for the explicit reference integrator.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ReferenceOptions {
    /// RK4 substeps per grid step.
    pub substeps: usize,
    /// Also run with doubled substeps and report the Richardson estimate.
    pub richardson: bool,
    pub blowup_factor: f64,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        Self { substeps: 4, richardson: true, blowup_factor: 1e6 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReferenceReport {
    pub substeps: usize,
    /// Richardson estimate of the C^0 L^2 error of the returned trajectory.
    pub error_estimate: Option<f64>,
}

/// eps^{-1} B(u) u, the interaction-picture forcing; the oracle does not enforce the
/// L-infinity ball.
fn forcing_unchecked(sys: &SystemSpec, u: &SpectralField) -> Result<SpectralField> {
    let fz = Frozen::new_unchecked(sys, u)?;
    Ok(fz.apply_b(u).scale_re(1.0 / u.ctx().eps()))
}

fn if_rk4(sys: &SystemSpec, u0: &SpectralField, grid: TimeGrid, sub: usize, blowup: f64) -> Result<Trajectory> {
    let h = grid.dt() / sub as f64;
    let n0 = u0.l2();
    let mut slices = Vec::with_capacity(grid.steps + 1);
    let mut u = u0.clone();
    slices.push(u.clone().with_t(0.0));
    // interaction picture relative to the start of each substep
    let rhs = |w: &SpectralField, tau: f64| -> Result<SpectralField> {
        let v = propagate(sys, w, tau);
        Ok(propagate(sys, &forcing_unchecked(sys, &v)?, -tau))
    };
    for k in 0..grid.steps {
        for j in 0..sub {
            let k1 = rhs(&u, 0.0)?;
            let mut w = u.clone();
            w.axpy(C64::new(0.5 * h, 0.0), &k1);
            let k2 = rhs(&w, 0.5 * h)?;
            let mut w = u.clone();
            w.axpy(C64::new(0.5 * h, 0.0), &k2);
            let k3 = rhs(&w, 0.5 * h)?;
            let mut w = u.clone();
            w.axpy(C64::new(h, 0.0), &k3);
            let k4 = rhs(&w, h)?;
            let mut next = u.clone();
            next.axpy(C64::new(h / 6.0, 0.0), &k1);
            next.axpy(C64::new(h / 3.0, 0.0), &k2);
            next.axpy(C64::new(h / 3.0, 0.0), &k3);
            next.axpy(C64::new(h / 6.0, 0.0), &k4);
            u = propagate(sys, &next, h);
            let t = grid.t(k) + (j + 1) as f64 * h;
            let n = u.l2();
            if !u.is_finite() || (n0 > 0.0 && n > blowup * n0) {
                return Err(Error::Diverged { t });
            }
        }
        slices.push(u.clone().with_t(grid.t(k + 1)));
    }
    Trajectory::new(grid, Stagger::Nodes, slices)
}

/// Integrating-factor RK4 for d_t u + i eps^-2 A u = eps^-1 B(u) u: the free part is
/// exact, RK4 acts on the nonlinearity in the interaction picture.
pub fn reference_nonlinear_solve(
    sys: &SystemSpec,
    u0: &SpectralField,
    grid: TimeGrid,
    opts: ReferenceOptions,
) -> Result<(Trajectory, ReferenceReport)> {
    if u0.ncomp() != sys.m() {
        return invalid("datum does not match the system size");
    }
    let sub = opts.substeps.max(1);
    let coarse = if_rk4(sys, u0, grid, sub, opts.blowup_factor)?;
    if !opts.richardson {
        return Ok((coarse, ReferenceReport { substeps: sub, error_estimate: None }));
    }
    let fine = if_rk4(sys, u0, grid, 2 * sub, opts.blowup_factor)?;
    let est = fine.sub(&coarse).c0_hs(0.0) / 15.0;
    Ok((fine, ReferenceReport { substeps: 2 * sub, error_estimate: Some(est) }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::SemiclassicalContext;
    use crate::system::{make_initial_datum, BaseProfile, DataProfile, ProfileKind};

    fn datum(sys: &SystemSpec, ctx: &Ctx, amp: f64) -> SpectralField {
        let prof = DataProfile {
            kind: ProfileKind::Concentrating,
            sigma: 0.0,
            base: BaseProfile::Gaussian { amplitude: amp, width: 1.0, center: [0.0, 0.0] },
            weights: vec![[1.0, 0.0], [0.5, 0.3]],
        };
        make_initial_datum(sys, &prof, ctx).unwrap().u0
    }

    #[test]
    fn free_flow_single_mode_phase() {
        let sys = SystemSpec::benchmark(1, 2);
        let ctx = SemiclassicalContext::new(1, 32, 2.0 * std::f64::consts::PI, 1.0).unwrap();
        let k = ctx.flat_of(&[2]).unwrap();
        let u0 = SpectralField::from_spectrum(&ctx, 4, |c, kk| if c == 0 && kk == k { ONE } else { C64::new(0.0, 0.0) });
        let y = propagate(&sys, &u0, 0.5);
        assert!((y.comp(0)[k] - C64::from_polar(1.0, 2.0)).norm() < 1e-14);
    }

    #[test]
    fn free_flow_conserves_norms() {
        let sys = SystemSpec::benchmark(1, 2);
        let ctx = SemiclassicalContext::new(1, 128, 16.0, 0.25).unwrap();
        let u0 = datum(&sys, &ctx, 0.5);
        let y = free_flow(&sys, &u0, TimeGrid::new(1.0, 16).unwrap()).unwrap();
        for s in [0.0, 2.0, 5.0] {
            let n0 = u0.hs_eps(s);
            for sl in &y.slices {
                assert!((sl.hs_eps(s) - n0).abs() <= 1e-12 * n0);
            }
        }
        for k in 0..16 {
            assert!(midpoint_pair(&sys, &y, k).0.l2() < 1e-13);
        }
    }

    #[test]
    fn time_derivative_of_free_flow_vanishes_on_residual() {
        let sys = SystemSpec::benchmark(1, 2);
        let ctx = SemiclassicalContext::new(1, 64, 16.0, 0.5).unwrap();
        let u0 = datum(&sys, &ctx, 0.5);
        let y = free_flow(&sys, &u0, TimeGrid::new(1.0, 8).unwrap()).unwrap();
        let dt = y.time_derivative(&sys).unwrap();
        for (a, b) in dt.slices.iter().zip(&y.slices) {
            let expect = apply_free(&sys, b).scale_re(-1.0);
            assert!(a.sub(&expect).l2() <= 1e-12 * expect.l2());
        }
    }

    #[test]
    fn zero_forcing_gives_zero() {
        let sys = SystemSpec::benchmark(1, 2);
        let ctx = SemiclassicalContext::new(1, 64, 16.0, 0.5).unwrap();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let u = free_flow(&sys, &datum(&sys, &ctx, 0.3), grid).unwrap();
        let f1 = Trajectory::zeros(grid, Stagger::Midpoints, &ctx, 4);
        let (h, _) = solve_linearized(&sys, &u, &f1, &SpectralField::zeros(&ctx, 4), &LinearOptions::default()).unwrap();
        assert_eq!(h.c0_hs(0.0), 0.0);
    }

    #[test]
    fn right_inverse_both_methods() {
        let sys = SystemSpec::benchmark(1, 2);
        let ctx = SemiclassicalContext::new(1, 128, 16.0, 0.25).unwrap();
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let u = free_flow(&sys, &datum(&sys, &ctx, 0.4), grid).unwrap();
        let g = datum(&sys, &ctx, 1.0);
        let f1 = Trajectory::from_fn(grid, Stagger::Midpoints, |t| propagate(&sys, &g, t).scale_re(t.cos())).unwrap();
        let f2 = datum(&sys, &ctx, 0.7);
        let mut opts = LinearOptions { tol: 1e-10, ..Default::default() };
        let (h1, r1) = solve_linearized(&sys, &u, &f1, &f2, &opts).unwrap();
        assert!(r1.residual_rel <= 1e-10, "{r1:?}");
        opts.method = LinearMethod::Direct;
        let (h2, r2) = solve_linearized(&sys, &u, &f1, &f2, &opts).unwrap();
        assert!(r2.residual_rel <= 1e-10);
        assert!(h1.sub(&h2).c0_hs(0.0) <= 1e-8 * h2.c0_hs(0.0));
        assert!(h1.conjugate_pair_defect() < 1e-10);
    }

    #[test]
    fn reference_matches_free_flow_at_tiny_amplitude() {
        let sys = SystemSpec::benchmark(1, 2);
        let ctx = SemiclassicalContext::new(1, 64, 16.0, 0.5).unwrap();
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let u0 = datum(&sys, &ctx, 1e-4);
        let (r, _) = reference_nonlinear_solve(&sys, &u0, grid, ReferenceOptions::default()).unwrap();
        let y = free_flow(&sys, &u0, grid).unwrap();
        assert!(r.sub(&y).c0_hs(0.0) <= 1e-8 * y.c0_hs(0.0));
        let z = SpectralField::zeros(&ctx, 4);
        let (r0, _) = reference_nonlinear_solve(&sys, &z, grid, ReferenceOptions::default()).unwrap();
        assert_eq!(r0.c0_hs(0.0), 0.0);
    }
}
