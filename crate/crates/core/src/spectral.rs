//! Periodic-grid Fourier calculus with semiclassical weights.
//!
//! Coefficients are normalized so that the discrete Parseval identity reproduces the
//! L^2 integral over the box: `u(x) = L^{-d/2} sum_k u_k exp(i xi_k . x)` and
//! `sum_k |u_k|^2 = int_box |u|^2`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64 as C64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const SNAPSHOT_VERSION: &str = "sfld-1";
pub const S_MIN: f64 = -2.0;
pub const S_MAX: f64 = 12.0;

/// Returns `k` if `eps == 2^-k` exactly.
pub fn dyadic_exponent(eps: f64) -> Option<u32> {
    if !(eps > 0.0 && eps <= 1.0) {
        return None;
    }
    let k = (-eps.log2()).round();
    if k < 0.0 || k > 60.0 {
        return None;
    }
    if (2f64).powi(-(k as i32)) == eps {
        Some(k as u32)
    } else {
        None
    }
}

/// Grid geometry plus the semiclassical parameter.
#[derive(Debug)]
pub struct SemiclassicalContext {
    d: usize,
    n: usize,
    box_len: f64,
    eps: f64,
    axis_index: Vec<i64>,
    abs2: Vec<f64>,
    lattice: Vec<bool>,
    dealias: Vec<bool>,
}

pub type Ctx = Arc<SemiclassicalContext>;

impl SemiclassicalContext {
    pub fn new(d: usize, n: usize, box_len: f64, eps: f64) -> Result<Ctx> {
        if d != 1 && d != 2 {
            return invalid(format!("dimension must be 1 or 2, got {d}"));
        }
        if n < 4 || !n.is_power_of_two() {
            return invalid(format!("points per axis must be a power of two >= 4, got {n}"));
        }
        if !(box_len.is_finite() && box_len > 0.0) {
            return invalid(format!("box length must be positive, got {box_len}"));
        }
        if dyadic_exponent(eps).is_none() {
            return Err(Error::NotDyadic(eps));
        }
        let axis_index: Vec<i64> = (0..n)
            .map(|i| if i < n / 2 { i as i64 } else { i as i64 - n as i64 })
            .collect();
        let total = n.pow(d as u32);
        let dk = 2.0 * std::f64::consts::PI / box_len;
        let half = (n / 2) as i64;
        let cut = (n / 3) as i64;
        let mut abs2 = vec![0.0; total];
        let mut lattice = vec![true; total];
        let mut dealias = vec![true; total];
        for flat in 0..total {
            let mut s = 0.0;
            for ax in 0..d {
                let k = axis_index[axis_of(flat, ax, n, d)];
                s += (k as f64 * dk).powi(2);
                if k.abs() >= half {
                    lattice[flat] = false;
                }
                if k.abs() > cut {
                    dealias[flat] = false;
                }
            }
            abs2[flat] = s;
        }
        Ok(Arc::new(Self { d, n, box_len, eps, axis_index, abs2, lattice, dealias }))
    }

    /// Same grid, different semiclassical parameter.
    pub fn with_eps(&self, eps: f64) -> Result<Ctx> {
        Self::new(self.d, self.n, self.box_len, eps)
    }

    pub fn d(&self) -> usize {
        self.d
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn box_len(&self) -> f64 {
        self.box_len
    }
    pub fn eps(&self) -> f64 {
        self.eps
    }
    pub fn total(&self) -> usize {
        self.abs2.len()
    }
    pub fn dx(&self) -> f64 {
        self.box_len / self.n as f64
    }
    /// Largest representable |xi_i|, i.e. pi n / L (excluded from the lattice).
    pub fn xi_max(&self) -> f64 {
        std::f64::consts::PI * self.n as f64 / self.box_len
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.d == other.d
            && self.n == other.n
            && self.box_len == other.box_len
            && self.eps == other.eps
    }

    /// Signed lattice index of `flat` along `axis`.
    pub fn index(&self, flat: usize, axis: usize) -> i64 {
        self.axis_index[axis_of(flat, axis, self.n, self.d)]
    }

    pub fn xi(&self, flat: usize, axis: usize) -> f64 {
        self.index(flat, axis) as f64 * 2.0 * std::f64::consts::PI / self.box_len
    }

    pub fn xi_abs2(&self, flat: usize) -> f64 {
        self.abs2[flat]
    }

    /// |eps xi| at a flat index.
    pub fn eps_xi_abs(&self, flat: usize) -> f64 {
        self.eps * self.abs2[flat].sqrt()
    }

    pub fn in_lattice(&self, flat: usize) -> bool {
        self.lattice[flat]
    }

    pub fn in_dealias(&self, flat: usize) -> bool {
        self.dealias[flat]
    }

    /// Flat index of -xi.
    pub fn neg_index(&self, flat: usize) -> usize {
        let mut out = 0;
        for ax in 0..self.d {
            let i = axis_of(flat, ax, self.n, self.d);
            let j = (self.n - i) % self.n;
            out = out * self.n + j;
        }
        out
    }

    /// Flat index of a signed multi-index, if it is representable.
    pub fn flat_of(&self, idx: &[i64]) -> Option<usize> {
        let half = (self.n / 2) as i64;
        let mut out = 0;
        for &k in idx.iter().take(self.d) {
            if k.abs() >= half {
                return None;
            }
            let i = if k < 0 { (k + self.n as i64) as usize } else { k as usize };
            out = out * self.n + i;
        }
        Some(out)
    }

    /// Minimum-image grid coordinates in [-L/2, L/2).
    pub fn coords(&self, flat: usize) -> [f64; 2] {
        let mut x = [0.0; 2];
        for (ax, xa) in x.iter_mut().enumerate().take(self.d) {
            *xa = self.axis_index[axis_of(flat, ax, self.n, self.d)] as f64 * self.dx();
        }
        x
    }

    /// Continuum-to-lattice factor: `u_k = (2 pi / L)^{d/2} (F u)(xi_k)` with F unitary on R^d.
    pub fn unitary_ft_factor(&self) -> f64 {
        (2.0 * std::f64::consts::PI / self.box_len).powf(self.d as f64 / 2.0)
    }

    /// Semiclassical weight (1+|eps xi|^2)^{s/2}.
    pub fn lambda_eps(&self, flat: usize, s: f64) -> f64 {
        (1.0 + self.eps * self.eps * self.abs2[flat]).powf(0.5 * s)
    }

    /// Standard weight (1+|xi|^2)^{s/2}.
    pub fn lambda_unit(&self, flat: usize, s: f64) -> f64 {
        (1.0 + self.abs2[flat]).powf(0.5 * s)
    }
}

fn axis_of(flat: usize, axis: usize, n: usize, d: usize) -> usize {
    // row-major: axis 0 is slowest
    let stride = n.pow((d - 1 - axis) as u32);
    (flat / stride) % n
}

thread_local! {
    static PLANS: RefCell<HashMap<(usize, bool), Arc<dyn Fft<f64>>>> = RefCell::new(HashMap::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|p| {
        p.borrow_mut()
            .entry((n, inverse))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                if inverse {
                    planner.plan_fft_inverse(n)
                } else {
                    planner.plan_fft_forward(n)
                }
            })
            .clone()
    })
}

fn fft_nd(ctx: &SemiclassicalContext, data: &mut [C64], inverse: bool) {
    let n = ctx.n;
    let f = plan(n, inverse);
    match ctx.d {
        1 => f.process(data),
        _ => {
            for row in data.chunks_mut(n) {
                f.process(row);
            }
            let mut col = vec![C64::new(0.0, 0.0); n];
            for c in 0..n {
                for r in 0..n {
                    col[r] = data[r * n + c];
                }
                f.process(&mut col);
                for r in 0..n {
                    data[r * n + c] = col[r];
                }
            }
        }
    }
}

/// Grid values to normalized coefficients; the Nyquist planes are dropped.
pub fn forward(ctx: &SemiclassicalContext, grid: &[C64]) -> Vec<C64> {
    let mut a = grid.to_vec();
    fft_nd(ctx, &mut a, false);
    let scale = ctx.box_len.powf(ctx.d as f64 / 2.0) / ctx.total() as f64;
    for (k, v) in a.iter_mut().enumerate() {
        *v = if ctx.lattice[k] { *v * scale } else { C64::new(0.0, 0.0) };
    }
    a
}

/// Normalized coefficients to grid values.
pub fn inverse(ctx: &SemiclassicalContext, coeffs: &[C64]) -> Vec<C64> {
    let mut a = coeffs.to_vec();
    fft_nd(ctx, &mut a, true);
    let scale = ctx.box_len.powf(-(ctx.d as f64) / 2.0);
    for v in a.iter_mut() {
        *v *= scale;
    }
    a
}

/// Norm selector. Time-dependent tags are evaluated on trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NormTag {
    HsEps(f64),
    L2,
    Linf,
    WmInfEps(i32),
    C0Hs(f64),
    C1Hs(f64),
}

pub(crate) fn check_s(s: f64) -> Result<()> {
    if !(S_MIN..=S_MAX).contains(&s) {
        return invalid(format!("Sobolev order {s} outside [{S_MIN}, {S_MAX}]"));
    }
    Ok(())
}

/// Multi-indices alpha in N^d with |alpha| <= m.
pub fn multi_indices(d: usize, m: u32) -> Vec<[u32; 2]> {
    let mut out = Vec::new();
    for a0 in 0..=m {
        if d == 1 {
            out.push([a0, 0]);
        } else {
            for a1 in 0..=(m - a0) {
                out.push([a0, a1]);
            }
        }
    }
    out
}

/// A multi-component periodic field stored by its Fourier coefficients.
#[derive(Clone, Debug)]
pub struct SpectralField {
    ctx: Ctx,
    comps: Vec<Vec<C64>>,
    pub t: Option<f64>,
}

impl SpectralField {
    pub fn zeros(ctx: &Ctx, ncomp: usize) -> Self {
        Self { ctx: ctx.clone(), comps: vec![vec![C64::new(0.0, 0.0); ctx.total()]; ncomp], t: None }
    }

    pub fn from_coeffs(ctx: &Ctx, comps: Vec<Vec<C64>>) -> Result<Self> {
        if comps.iter().any(|c| c.len() != ctx.total()) {
            return invalid("coefficient array length does not match the grid");
        }
        let mut f = Self { ctx: ctx.clone(), comps, t: None };
        f.mask_lattice();
        Ok(f)
    }

    pub fn from_grid(ctx: &Ctx, grid: &[Vec<C64>]) -> Result<Self> {
        if grid.iter().any(|c| c.len() != ctx.total()) {
            return invalid("grid array length does not match the grid");
        }
        let comps = grid.iter().map(|g| forward(ctx, g)).collect();
        Ok(Self { ctx: ctx.clone(), comps, t: None })
    }

    /// Samples `f(component, x)` on the grid (minimum-image coordinates) and transforms.
    pub fn from_fn(ctx: &Ctx, ncomp: usize, f: impl Fn(usize, [f64; 2]) -> C64) -> Self {
        let grid: Vec<Vec<C64>> = (0..ncomp)
            .map(|c| (0..ctx.total()).map(|k| f(c, ctx.coords(k))).collect())
            .collect();
        Self::from_grid(ctx, &grid).expect("grid sized from context")
    }

    /// Builds coefficients directly from `f(component, flat index)`.
    pub fn from_spectrum(ctx: &Ctx, ncomp: usize, f: impl Fn(usize, usize) -> C64) -> Self {
        let comps = (0..ncomp)
            .map(|c| {
                (0..ctx.total())
                    .map(|k| if ctx.in_lattice(k) { f(c, k) } else { C64::new(0.0, 0.0) })
                    .collect()
            })
            .collect();
        Self { ctx: ctx.clone(), comps, t: None }
    }

    pub fn ctx(&self) -> &Ctx {
        &self.ctx
    }
    pub fn ncomp(&self) -> usize {
        self.comps.len()
    }
    pub fn comp(&self, c: usize) -> &[C64] {
        &self.comps[c]
    }
    pub fn comp_mut(&mut self, c: usize) -> &mut Vec<C64> {
        &mut self.comps[c]
    }
    pub fn comps(&self) -> &[Vec<C64>] {
        &self.comps
    }
    pub fn into_comps(self) -> Vec<Vec<C64>> {
        self.comps
    }

    pub fn with_t(mut self, t: f64) -> Self {
        self.t = Some(t);
        self
    }

    /// Same coefficients, reinterpreted on another context with an identical grid shape.
    pub fn relabel(&self, ctx: &Ctx) -> Result<Self> {
        if ctx.total() != self.ctx.total() || ctx.d() != self.ctx.d() {
            return Err(Error::ContextMismatch);
        }
        Ok(Self { ctx: ctx.clone(), comps: self.comps.clone(), t: self.t })
    }

    pub fn grid(&self) -> Vec<Vec<C64>> {
        self.comps.iter().map(|c| inverse(&self.ctx, c)).collect()
    }

    pub fn grid_comp(&self, c: usize) -> Vec<C64> {
        inverse(&self.ctx, &self.comps[c])
    }

    pub fn is_finite(&self) -> bool {
        self.comps.iter().flatten().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn check_same(&self, other: &Self) -> Result<()> {
        if !self.ctx.same_grid(&other.ctx) || self.ncomp() != other.ncomp() {
            return Err(Error::ContextMismatch);
        }
        Ok(())
    }

    fn mask_lattice(&mut self) {
        for c in self.comps.iter_mut() {
            for (k, v) in c.iter_mut().enumerate() {
                if !self.ctx.lattice[k] {
                    *v = C64::new(0.0, 0.0);
                }
            }
        }
    }

    pub fn scale(&self, a: C64) -> Self {
        let mut out = self.clone();
        out.scale_mut(a);
        out
    }

    pub fn scale_mut(&mut self, a: C64) {
        for v in self.comps.iter_mut().flatten() {
            *v *= a;
        }
    }

    pub fn scale_re(&self, a: f64) -> Self {
        self.scale(C64::new(a, 0.0))
    }

    /// self += a * other
    pub fn axpy(&mut self, a: C64, other: &Self) {
        debug_assert!(self.ctx.same_grid(&other.ctx));
        for (x, y) in self.comps.iter_mut().zip(&other.comps) {
            for (xv, yv) in x.iter_mut().zip(y) {
                *xv += a * yv;
            }
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(C64::new(1.0, 0.0), other);
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(C64::new(-1.0, 0.0), other);
        out
    }

    /// Applies `m(flat)` to every component.
    pub fn multiplier(&self, m: impl Fn(usize) -> C64) -> Self {
        self.comp_multiplier(|_, k| m(k))
    }

    /// Applies `m(component, flat)`.
    pub fn comp_multiplier(&self, m: impl Fn(usize, usize) -> C64) -> Self {
        let comps = self
            .comps
            .iter()
            .enumerate()
            .map(|(c, v)| v.iter().enumerate().map(|(k, z)| z * m(c, k)).collect())
            .collect();
        Self { ctx: self.ctx.clone(), comps, t: self.t }
    }

    /// Spectral derivative along `axis`.
    pub fn derivative(&self, axis: usize) -> Self {
        let ctx = self.ctx.clone();
        self.multiplier(|k| C64::new(0.0, ctx.xi(k, axis)))
    }

    /// eps d/dx along `axis`.
    pub fn eps_derivative(&self, axis: usize) -> Self {
        let ctx = self.ctx.clone();
        self.multiplier(|k| C64::new(0.0, ctx.eps * ctx.xi(k, axis)))
    }

    /// Lambda^s_eps applied componentwise.
    pub fn lambda_eps(&self, s: f64) -> Self {
        let ctx = self.ctx.clone();
        self.multiplier(|k| C64::new(ctx.lambda_eps(k, s), 0.0))
    }

    /// Standard Lambda^s applied componentwise.
    pub fn lambda_unit(&self, s: f64) -> Self {
        let ctx = self.ctx.clone();
        self.multiplier(|k| C64::new(ctx.lambda_unit(k, s), 0.0))
    }

    /// Zeroes modes outside the 2/3 band.
    pub fn dealias(&mut self) {
        for c in self.comps.iter_mut() {
            for (k, v) in c.iter_mut().enumerate() {
                if !self.ctx.dealias[k] {
                    *v = C64::new(0.0, 0.0);
                }
            }
        }
    }

    /// Weighted l^2 sum with weight w(flat).
    fn weighted_sq(&self, w: impl Fn(usize) -> f64) -> f64 {
        self.comps
            .iter()
            .map(|c| c.iter().enumerate().map(|(k, z)| w(k) * z.norm_sqr()).sum::<f64>())
            .sum()
    }

    pub fn hs_eps(&self, s: f64) -> f64 {
        let ctx = &self.ctx;
        let e2 = ctx.eps * ctx.eps;
        self.weighted_sq(|k| (1.0 + e2 * ctx.abs2[k]).powf(s)).sqrt()
    }

    /// Standard (eps = 1) Sobolev norm.
    pub fn hs_unit(&self, s: f64) -> f64 {
        let ctx = &self.ctx;
        self.weighted_sq(|k| (1.0 + ctx.abs2[k]).powf(s)).sqrt()
    }

    pub fn l2(&self) -> f64 {
        self.weighted_sq(|_| 1.0).sqrt()
    }

    /// sup_x of the Euclidean norm of the component vector.
    pub fn linf(&self) -> f64 {
        sup_abs(&self.grid())
    }

    /// sum_{|alpha|<=m} eps^{|alpha|} sup |d^alpha u|.
    pub fn w_inf_eps(&self, m: u32) -> f64 {
        self.w_inf_with(m, self.ctx.eps)
    }

    /// Standard W^{m,inf} norm.
    pub fn w_inf_unit(&self, m: u32) -> f64 {
        self.w_inf_with(m, 1.0)
    }

    fn w_inf_with(&self, m: u32, eps: f64) -> f64 {
        let ctx = self.ctx.clone();
        multi_indices(ctx.d, m)
            .into_iter()
            .map(|alpha| {
                let f = self.multiplier(|k| {
                    let mut z = C64::new(1.0, 0.0);
                    for (ax, &a) in alpha.iter().enumerate().take(ctx.d) {
                        z *= C64::new(0.0, eps * ctx.xi(k, ax)).powu(a);
                    }
                    z
                });
                f.linf()
            })
            .sum()
    }

    pub fn norm(&self, tag: NormTag) -> Result<f64> {
        if !self.is_finite() {
            return Err(Error::NonFinite("field"));
        }
        match tag {
            NormTag::HsEps(s) | NormTag::C0Hs(s) => {
                check_s(s)?;
                Ok(self.hs_eps(s))
            }
            NormTag::L2 => Ok(self.l2()),
            NormTag::Linf => Ok(self.linf()),
            NormTag::WmInfEps(m) => {
                if m < 0 {
                    return invalid(format!("W^(m,inf) order must be >= 0, got {m}"));
                }
                Ok(self.w_inf_eps(m as u32))
            }
            NormTag::C1Hs(_) => invalid("C1 norms need a trajectory"),
        }
    }

    /// <u, v>_{H^s_eps} = sum conj(u_k) v_k weights.
    pub fn inner_hs_eps(&self, other: &Self, s: f64) -> C64 {
        let ctx = &self.ctx;
        let e2 = ctx.eps * ctx.eps;
        let mut acc = C64::new(0.0, 0.0);
        for (a, b) in self.comps.iter().zip(&other.comps) {
            for (k, (x, y)) in a.iter().zip(b).enumerate() {
                acc += x.conj() * y * (1.0 + e2 * ctx.abs2[k]).powf(s);
            }
        }
        acc
    }

    /// Keeps modes with `keep(|xi|)`; shared by S_j variants.
    fn truncate(&self, keep: impl Fn(usize) -> bool) -> Self {
        let comps = self
            .comps
            .iter()
            .map(|c| {
                c.iter()
                    .enumerate()
                    .map(|(k, z)| if keep(k) { *z } else { C64::new(0.0, 0.0) })
                    .collect()
            })
            .collect();
        Self { ctx: self.ctx.clone(), comps, t: self.t }
    }

    /// S_j: keep eps|xi| <= 2^j.
    pub fn smooth(&self, j: u32) -> Self {
        let ctx = self.ctx.clone();
        let cut = (2f64).powi(j as i32);
        self.truncate(|k| ctx.eps_xi_abs(k) <= cut)
    }

    /// S^1_j: keep |xi| <= 2^j regardless of eps.
    pub fn smooth_unit(&self, j: u32) -> Self {
        let ctx = self.ctx.clone();
        let cut = (2f64).powi(j as i32);
        self.truncate(|k| ctx.abs2[k].sqrt() <= cut)
    }

    /// R_0 = S_1, R_j = S_{j+1} - S_j.
    pub fn dyadic_block(&self, j: u32) -> Self {
        let ctx = self.ctx.clone();
        let hi = (2f64).powi(j as i32 + 1);
        let lo = (2f64).powi(j as i32);
        self.truncate(|k| {
            let r = ctx.eps_xi_abs(k);
            r <= hi && (j == 0 || r > lo)
        })
    }

    /// Unit-frequency blocks: R^1_0 = S^1_1, R^1_j = S^1_{j+1} - S^1_j.
    pub fn dyadic_block_unit(&self, j: u32) -> Self {
        let ctx = self.ctx.clone();
        let hi = (2f64).powi(j as i32 + 1);
        let lo = (2f64).powi(j as i32);
        self.truncate(|k| {
            let r = ctx.abs2[k].sqrt();
            r <= hi && (j == 0 || r > lo)
        })
    }

    /// Smallest J with S^1_J u = u.
    pub fn spectral_level_unit(&self) -> u32 {
        let mut rmax: f64 = 0.0;
        for c in &self.comps {
            for (k, z) in c.iter().enumerate() {
                if z.norm_sqr() > 0.0 {
                    rmax = rmax.max(self.ctx.abs2[k].sqrt());
                }
            }
        }
        if rmax <= 1.0 {
            0
        } else {
            rmax.log2().ceil() as u32
        }
    }

    /// Smallest J with S_J u = u.
    pub fn spectral_level(&self) -> u32 {
        let mut rmax: f64 = 0.0;
        for c in &self.comps {
            for (k, z) in c.iter().enumerate() {
                if z.norm_sqr() > 0.0 {
                    rmax = rmax.max(self.ctx.eps_xi_abs(k));
                }
            }
        }
        if rmax <= 1.0 {
            0
        } else {
            rmax.log2().ceil() as u32
        }
    }

    /// Coefficients of the pointwise conjugate of component `c`: conj(u_c(-xi)).
    pub fn conj_reflect_comp(&self, c: usize) -> Vec<C64> {
        (0..self.ctx.total())
            .map(|k| self.comps[c][self.ctx.neg_index(k)].conj())
            .collect()
    }

    /// Largest |u_{j+N}(xi) - conj(u_j(-xi))|, relative to the largest coefficient.
    pub fn conjugate_pair_defect(&self) -> f64 {
        let nn = self.ncomp() / 2;
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for j in 0..nn {
            let refl = self.conj_reflect_comp(j);
            for (a, b) in self.comps[j + nn].iter().zip(&refl) {
                worst = worst.max((a - b).norm());
            }
        }
        for z in self.comps.iter().flatten() {
            scale = scale.max(z.norm());
        }
        if scale == 0.0 {
            0.0
        } else {
            worst / scale
        }
    }

    /// Relative mismatch between grid L^2 (rectangle rule) and coefficient l^2.
    pub fn parseval_defect(&self) -> f64 {
        let dv = self.ctx.dx().powi(self.ctx.d as i32);
        let grid: f64 = self.grid().iter().flatten().map(|z| z.norm_sqr()).sum::<f64>() * dv;
        let coef = self.l2().powi(2);
        if coef == 0.0 {
            grid
        } else {
            ((grid - coef) / coef).abs()
        }
    }

    pub fn to_snapshot(&self) -> FieldSnapshot {
        FieldSnapshot {
            version: SNAPSHOT_VERSION.to_string(),
            d: self.ctx.d,
            box_len: self.ctx.box_len,
            n: self.ctx.n,
            eps: self.ctx.eps,
            ncomp: self.ncomp(),
            t: self.t,
            coeffs: self
                .comps
                .iter()
                .map(|c| c.iter().map(|z| [z.re, z.im]).collect())
                .collect(),
        }
    }

    pub fn from_snapshot(s: &FieldSnapshot) -> Result<Self> {
        if s.version != SNAPSHOT_VERSION {
            return invalid(format!("unsupported snapshot version {}", s.version));
        }
        let ctx = SemiclassicalContext::new(s.d, s.n, s.box_len, s.eps)?;
        let comps = s
            .coeffs
            .iter()
            .map(|c| c.iter().map(|p| C64::new(p[0], p[1])).collect())
            .collect();
        let mut f = Self::from_coeffs(&ctx, comps)?;
        f.t = s.t;
        Ok(f)
    }
}

/// sup over grid points of the Euclidean norm across components.
pub fn sup_abs(grid: &[Vec<C64>]) -> f64 {
    if grid.is_empty() {
        return 0.0;
    }
    let mut best: f64 = 0.0;
    for k in 0..grid[0].len() {
        let s: f64 = grid.iter().map(|g| g[k].norm_sqr()).sum();
        best = best.max(s);
    }
    best.sqrt()
}

/// Field snapshot container, row-major coefficient order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldSnapshot {
    pub version: String,
    pub d: usize,
    pub box_len: f64,
    pub n: usize,
    pub eps: f64,
    pub ncomp: usize,
    pub t: Option<f64>,
    pub coeffs: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rescale {
    /// (R_eps u)(x) = u(eps x), landing on a box of length L/eps with eps = 1.
    ToUnit,
    /// Inverse map from a unit-scale box to scale `2^-k`.
    FromUnit { eps: f64 },
}

/// Rescaling between scale eps and unit scale. The lattice index is preserved, so
/// the map is exact on the grid.
pub fn rescale(field: &SpectralField, dir: Rescale) -> Result<SpectralField> {
    let ctx = field.ctx();
    let d = ctx.d() as f64;
    match dir {
        Rescale::ToUnit => {
            let e = ctx.eps();
            let target = SemiclassicalContext::new(ctx.d(), ctx.n(), ctx.box_len() / e, 1.0)?;
            let mut out = field.relabel(&target)?;
            out.scale_mut(C64::new(e.powf(-d / 2.0), 0.0));
            Ok(out)
        }
        Rescale::FromUnit { eps } => {
            if ctx.eps() != 1.0 {
                return invalid("from_unit expects a unit-scale field");
            }
            let target = SemiclassicalContext::new(ctx.d(), ctx.n(), ctx.box_len() * eps, eps)?;
            let mut out = field.relabel(&target)?;
            out.scale_mut(C64::new(eps.powf(d / 2.0), 0.0));
            Ok(out)
        }
    }
}

/// Rescales and embeds into `target`, which must carry the rescaled box length.
/// Nonzero modes beyond the target lattice are rejected.
pub fn rescale_onto(field: &SpectralField, dir: Rescale, target: &Ctx) -> Result<SpectralField> {
    let r = rescale(field, dir)?;
    let src = r.ctx().clone();
    if src.d() != target.d() {
        return Err(Error::ContextMismatch);
    }
    if ((src.box_len() - target.box_len()) / target.box_len()).abs() > 1e-12 || src.eps() != target.eps() {
        return invalid(format!(
            "target box {} / eps {} does not match rescaled box {} / eps {}",
            target.box_len(),
            target.eps(),
            src.box_len(),
            src.eps()
        ));
    }
    let mut out = SpectralField::zeros(target, r.ncomp());
    out.t = r.t;
    let mut idx = [0i64; 2];
    for k in 0..src.total() {
        for (ax, slot) in idx.iter_mut().enumerate().take(src.d()) {
            *slot = src.index(k, ax);
        }
        let dest = target.flat_of(&idx[..src.d()]);
        for c in 0..r.ncomp() {
            let z = r.comp(c)[k];
            if z.norm() == 0.0 {
                continue;
            }
            match dest {
                Some(t) => out.comp_mut(c)[t] = z,
                None => {
                    return Err(Error::LatticeOverflow(format!(
                        "mode {:?} has no slot on an n = {} grid",
                        &idx[..src.d()],
                        target.n()
                    )))
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn dyadic_detection() {
        assert_eq!(dyadic_exponent(1.0), Some(0));
        assert_eq!(dyadic_exponent(0.125), Some(3));
        assert_eq!(dyadic_exponent(0.3), None);
        assert_eq!(dyadic_exponent(2.0), None);
    }

    #[test]
    fn single_mode_norm() {
        let ctx = SemiclassicalContext::new(1, 64, 2.0 * std::f64::consts::PI, 0.25).unwrap();
        let u = SpectralField::from_fn(&ctx, 1, |_, x| C64::new(0.0, 4.0 * x[0]).exp());
        // hand value: weight (1 + 1)^2, mass 2 pi
        let expect = 2.0 * (2.0 * std::f64::consts::PI).sqrt();
        assert_relative_eq!(u.hs_eps(2.0), expect, max_relative = 1e-12);
        assert_relative_eq!(u.hs_eps(2.0), 5.0132565, epsilon = 1e-7);
    }

    #[test]
    fn roundtrip_and_parseval_2d() {
        let ctx = SemiclassicalContext::new(2, 16, 3.0, 0.5).unwrap();
        let u = SpectralField::from_fn(&ctx, 2, |c, x| {
            C64::new((x[0] * 2.0 * std::f64::consts::PI / 3.0).cos(), c as f64 * (x[1]).sin().powi(2))
        });
        assert!(u.parseval_defect() < 1e-12);
        let back = SpectralField::from_grid(&ctx, &u.grid()).unwrap();
        assert!(back.sub(&u).l2() < 1e-12 * u.l2());
    }

    #[test]
    fn smoothing_examples() {
        let ctx = SemiclassicalContext::new(1, 64, 2.0 * std::f64::consts::PI, 0.5).unwrap();
        let u = SpectralField::from_fn(&ctx, 1, |_, x| C64::new(0.0, 8.0 * x[0]).exp());
        let tol = 1e-12 * u.l2();
        assert!(u.smooth(1).l2() < tol);
        assert!(u.smooth(2).sub(&u).l2() < tol);
        let hits: Vec<u32> = (0..8).filter(|&j| u.dyadic_block(j).l2() > tol).collect();
        assert_eq!(hits, vec![1]);
    }

    #[test]
    fn rescale_overflow_rejected() {
        let ctx = SemiclassicalContext::new(1, 32, 4.0, 0.5).unwrap();
        let u = SpectralField::from_spectrum(&ctx, 1, |_, k| C64::new(1.0 / (1.0 + ctx.xi_abs2(k)), 0.0));
        let small = SemiclassicalContext::new(1, 16, 8.0, 1.0).unwrap();
        assert!(matches!(rescale_onto(&u, Rescale::ToUnit, &small), Err(Error::LatticeOverflow(_))));
        let big = SemiclassicalContext::new(1, 64, 8.0, 1.0).unwrap();
        let r = rescale_onto(&u, Rescale::ToUnit, &big).unwrap();
        assert_relative_eq!(u.hs_eps(3.0), 0.5f64.sqrt() * r.hs_eps(3.0), max_relative = 1e-12);
    }

    #[test]
    fn snapshot_roundtrip() {
        let ctx = SemiclassicalContext::new(1, 16, 5.0, 0.25).unwrap();
        let u = SpectralField::from_fn(&ctx, 2, |c, x| C64::new(x[0].cos(), c as f64));
        let s = serde_json::to_string(&u.to_snapshot()).unwrap();
        let v = SpectralField::from_snapshot(&serde_json::from_str(&s).unwrap()).unwrap();
        assert_eq!(v.sub(&u).l2(), 0.0);
    }
}
