//! Normal form: splitting of B into resonant, non-resonant and low-frequency parts,
//! the order -1 symbol M removing the non-resonant part, Neumann inversion of
//! I + eps op_eps(M), and the conjugated operator Q(u).

use num_complex::Complex64 as C64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::spectral::{SpectralField, Ctx};
use crate::system::{apply_free, EntryClass, Frozen, SystemSpec};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

/// Radial cutoff: 1 on r <= 1/2, 0 on r >= 1, quintic smoothstep in between.
pub fn chi(r: f64) -> f64 {
    if r <= 0.5 {
        1.0
    } else if r >= 1.0 {
        0.0
    } else {
        let t = 2.0 * (r - 0.5);
        1.0 - t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
    }
}

/// Tag recorded in run metadata.
pub const CHI_PROFILE: &str = "quintic-smoothstep[1/2,1]";

/// chi(|xi|) tabulated on the lattice of `ctx` (unscaled xi).
pub fn chi_table(ctx: &Ctx) -> Vec<f64> {
    (0..ctx.total()).map(|k| chi(ctx.xi_abs2(k).sqrt())).collect()
}

/// m_l(xi) = (1 - chi(xi)) xi_l / |xi|^2
pub fn m_multiplier(xi: &[f64]) -> Vec<f64> {
    let r2: f64 = xi.iter().map(|x| x * x).sum();
    let r = r2.sqrt();
    let w = 1.0 - chi(r);
    if w == 0.0 {
        return vec![0.0; xi.len()];
    }
    xi.iter().map(|x| w * x / r2).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Part {
    Resonant,
    NonResonant,
    LowFrequency,
}

/// Normal-form operators frozen at one time slice of u.
pub struct NormalForm<'a> {
    pub fz: Frozen<'a>,
    /// coeff / (omega_r - omega_c) on non-resonant entries
    msym: Vec<Option<Vec<C64>>>,
    /// time derivative of msym, set by `with_time_derivative`
    dt_msym: Option<Vec<Option<Vec<C64>>>>,
    pub tol: f64,
    pub max_iter: usize,
}

impl<'a> NormalForm<'a> {
    pub fn new(sys: &'a SystemSpec, u: &SpectralField) -> Result<Self> {
        Ok(Self::from_frozen(Frozen::new(sys, u)?))
    }

    pub fn from_frozen(fz: Frozen<'a>) -> Self {
        let msym = Self::divide(&fz, &fz.coeff);
        Self { fz, msym, dt_msym: None, tol: 1e-13, max_iter: 200 }
    }

    fn divide(fz: &Frozen<'a>, grids: &[Option<Vec<C64>>]) -> Vec<Option<Vec<C64>>> {
        let sys = fz.sys;
        let m = sys.m();
        let mut out = Vec::with_capacity(grids.len());
        for l in 0..sys.d() {
            for r in 0..m {
                for c in 0..m {
                    let i = fz.idx(l, r, c);
                    let dw = sys.omega(r) - sys.omega(c);
                    let keep = sys.entry_class(l, r, c) == EntryClass::NonResonant && dw != 0.0;
                    out.push(match (&grids[i], keep) {
                        (Some(g), true) => Some(g.iter().map(|z| z / dw).collect()),
                        _ => None,
                    });
                }
            }
        }
        out
    }

    /// Supplies d_t u at this slice, enabling d_t K via the chain rule.
    pub fn with_time_derivative(mut self, dtu: &SpectralField) -> Result<Self> {
        self.fz.u.check_same(dtu)?;
        let d = self.fz.directional(&dtu.grid());
        self.dt_msym = Some(Self::divide(&self.fz, &d));
        Ok(self)
    }

    pub fn ctx(&self) -> &Ctx {
        &self.fz.ctx
    }

    fn eps(&self) -> f64 {
        self.fz.ctx.eps()
    }

    /// Resonant set J = {(j, k): lambda_j + lambda_k = 0}, 1-based.
    pub fn resonant_set(&self) -> Vec<(usize, usize)> {
        let lam = self.fz.sys.lambda();
        let n = lam.len();
        let mut out = Vec::new();
        for j in 0..n {
            for k in 0..n {
                if lam[j] + lam[k] == 0.0 {
                    out.push((j + 1, k + 1));
                }
            }
        }
        out
    }

    /// One part of B(u, eps d) h. Parts sum to B.
    pub fn split_b(&self, h: &SpectralField, part: Part) -> SpectralField {
        let sys = self.fz.sys;
        let res = |l, r, c| sys.entry_class(l, r, c) == EntryClass::Resonant;
        match part {
            Part::Resonant => self.fz.b_part(h, res, |_| 1.0),
            Part::NonResonant => self.fz.b_part(h, |l, r, c| !res(l, r, c), |e| 1.0 - chi(e)),
            Part::LowFrequency => self.fz.b_part(h, |l, r, c| !res(l, r, c), chi),
        }
    }

    /// op_eps(M) phi = sum_l coeff_l(u(x)) (m_l(eps D) phi)(x)
    pub fn apply_op_m(&self, phi: &SpectralField) -> SpectralField {
        self.op_with(&self.msym, phi)
    }

    fn op_with(&self, weights: &[Option<Vec<C64>>], phi: &SpectralField) -> SpectralField {
        let ctx = self.fz.ctx.clone();
        let e = ctx.eps();
        let d = ctx.d();
        self.fz.first_order(phi, |_, _, _| true, weights, move |l, k| {
            let mut xi = [0.0; 2];
            for (a, x) in xi.iter_mut().enumerate().take(d) {
                *x = e * ctx.xi(k, a);
            }
            C64::new(m_multiplier(&xi[..d])[l], 0.0)
        })
    }

    /// K phi = eps op_eps(M) phi
    pub fn apply_k(&self, phi: &SpectralField) -> SpectralField {
        self.apply_op_m(phi).scale_re(self.eps())
    }

    /// (d_t K) phi; requires `with_time_derivative`.
    pub fn apply_dt_k(&self, phi: &SpectralField) -> Result<SpectralField> {
        let w = self
            .dt_msym
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("d_t u not supplied".into()))?;
        Ok(self.op_with(w, phi).scale_re(self.eps()))
    }

    /// (I + K) phi
    pub fn apply_i_plus_k(&self, phi: &SpectralField) -> SpectralField {
        let mut out = phi.clone();
        out.axpy(ONE, &self.apply_k(phi));
        out
    }

    /// Solves (I + K) phi = h by phi <- h - K phi.
    pub fn neumann_invert(&self, h: &SpectralField) -> Result<SpectralField> {
        let hn = h.l2();
        if hn == 0.0 {
            return Ok(h.clone());
        }
        let mut phi = h.clone();
        let mut kphi = self.apply_k(&phi);
        let factor = kphi.l2() / hn;
        if factor >= 1.0 {
            return Err(Error::DivergentNeumann { factor });
        }
        let mut last = f64::INFINITY;
        for _ in 0..self.max_iter {
            let next = h.sub(&kphi);
            // (I + K) phi - h = phi - next
            let res = phi.sub(&next).l2();
            if res <= self.tol * hn {
                return Ok(phi);
            }
            if res >= last && last.is_finite() {
                return Err(Error::DivergentNeumann { factor: res / last });
            }
            last = res;
            phi = next;
            kphi = self.apply_k(&phi);
        }
        Err(Error::NoConvergence { iterations: self.max_iter, residual: last / hn })
    }

    /// Contraction factor |K h| / |h| measured on h.
    pub fn contraction_factor(&self, h: &SpectralField) -> f64 {
        let n = h.l2();
        if n == 0.0 {
            0.0
        } else {
            self.apply_k(h).l2() / n
        }
    }

    /// Bracket of G before applying (I + K)^{-1}, evaluated right to left:
    /// i eps^-2 [A, K] phi - eps^-1 B_nr phi + K eps^-1 B_r phi - eps^-1 B_lf phi
    ///   + (d_t K) phi - eps^-1 B K phi + R_0 (I + K) phi.
    pub fn g_bracket(&self, phi: &SpectralField) -> Result<SpectralField> {
        let sys = self.fz.sys;
        let ie = 1.0 / self.eps();
        let kphi = self.apply_k(phi);
        let mut out = apply_free(sys, &kphi);
        out.axpy(-ONE, &self.apply_k(&apply_free(sys, phi)));
        out.axpy(C64::new(-ie, 0.0), &self.split_b(phi, Part::NonResonant));
        out.axpy(C64::new(ie, 0.0), &self.apply_k(&self.split_b(phi, Part::Resonant)));
        out.axpy(C64::new(-ie, 0.0), &self.split_b(phi, Part::LowFrequency));
        if self.dt_msym.is_some() {
            out.axpy(ONE, &self.apply_dt_k(phi)?);
        }
        out.axpy(C64::new(-ie, 0.0), &self.fz.apply_b(&kphi));
        let mut ik = phi.clone();
        ik.axpy(ONE, &kphi);
        out.axpy(ONE, &self.fz.apply_r0(&ik));
        Ok(out)
    }

    /// G(u) phi
    pub fn apply_g(&self, phi: &SpectralField) -> Result<SpectralField> {
        self.neumann_invert(&self.g_bracket(phi)?)
    }

    /// -eps^-1 B_r(u, eps d) phi + G(u) phi: the part of Q beyond the free generator.
    pub fn apply_q_lower(&self, phi: &SpectralField) -> Result<SpectralField> {
        let mut out = self.apply_g(phi)?;
        out.axpy(C64::new(-1.0 / self.eps(), 0.0), &self.split_b(phi, Part::Resonant));
        Ok(out)
    }

    /// Q(u) phi = i eps^-2 A(eps d) phi - eps^-1 B_r phi + G phi (without d_t).
    pub fn apply_q(&self, phi: &SpectralField) -> Result<SpectralField> {
        let mut out = apply_free(self.fz.sys, phi);
        out.axpy(ONE, &self.apply_q_lower(phi)?);
        Ok(out)
    }

    /// |(d_t + P'(u))(I + K) phi - (I + K)(d_t + Q(u)) phi| / |(d_t + P'(u))(I + K) phi|
    /// at this slice, for a test phi with time derivative `dt_phi`.
    pub fn conjugation_residual(&self, phi: &SpectralField, dt_phi: &SpectralField) -> Result<f64> {
        let ipk_dt = self.apply_i_plus_k(dt_phi);
        let h = self.apply_i_plus_k(phi);
        let mut lhs = ipk_dt.clone();
        lhs.axpy(ONE, &self.apply_dt_k(phi)?);
        lhs.axpy(ONE, &self.fz.apply_p_prime(&h));
        let mut inner = dt_phi.clone();
        inner.axpy(ONE, &self.apply_q(phi)?);
        let rhs = self.apply_i_plus_k(&inner);
        let scale = lhs.l2().max(f64::MIN_POSITIVE);
        Ok(lhs.sub(&rhs).l2() / scale)
    }

    /// Matrix M(u(x), eps xi) at grid point `x` and lattice mode `k` (includes the eps
    /// of the semiclassical scaling in its argument, not the eps prefactor of K).
    pub fn symbol_at(&self, x: usize, k: usize) -> Vec<Vec<C64>> {
        let sys = self.fz.sys;
        let m = sys.m();
        let d = sys.d();
        let xi: Vec<f64> = (0..d).map(|a| self.eps() * self.fz.ctx.xi(k, a)).collect();
        let ml = m_multiplier(&xi);
        let mut out = vec![vec![ZERO; m]; m];
        for (l, mlv) in ml.iter().enumerate() {
            for (r, row) in out.iter_mut().enumerate() {
                for (c, slot) in row.iter_mut().enumerate() {
                    if let Some(g) = &self.msym[self.fz.idx(l, r, c)] {
                        *slot += g[x] * mlv;
                    }
                }
            }
        }
        out
    }

    /// B_part(u(x), i eta) as a matrix.
    pub fn b_symbol_at(&self, x: usize, eta: &[f64], part: Part) -> Vec<Vec<C64>> {
        let sys = self.fz.sys;
        let m = sys.m();
        let r_abs = eta.iter().map(|e| e * e).sum::<f64>().sqrt();
        let mut out = vec![vec![ZERO; m]; m];
        for (l, &el) in eta.iter().enumerate() {
            for (r, row) in out.iter_mut().enumerate() {
                for (c, slot) in row.iter_mut().enumerate() {
                    let res = sys.entry_class(l, r, c) == EntryClass::Resonant;
                    let w = match part {
                        Part::Resonant if res => 1.0,
                        Part::NonResonant if !res => 1.0 - chi(r_abs),
                        Part::LowFrequency if !res => chi(r_abs),
                        _ => 0.0,
                    };
                    if w == 0.0 {
                        continue;
                    }
                    if let Some(g) = &self.fz.coeff[self.fz.idx(l, r, c)] {
                        *slot += g[x] * C64::new(0.0, el * w);
                    }
                }
            }
        }
        out
    }

    /// max over grid points and lattice modes of |B_nr(u, i eta) - i[A(i eta), M(u, eta)]|,
    /// eta = eps xi, normalized by the largest |B_nr| entry.
    pub fn homological_residual(&self) -> f64 {
        let sys = self.fz.sys;
        let m = sys.m();
        let ctx = self.fz.ctx.clone();
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for x in 0..ctx.total() {
            for k in 0..ctx.total() {
                if !ctx.in_lattice(k) {
                    continue;
                }
                let eta: Vec<f64> = (0..sys.d()).map(|a| ctx.eps() * ctx.xi(k, a)).collect();
                let e2: f64 = eta.iter().map(|e| e * e).sum();
                let b = self.b_symbol_at(x, &eta, Part::NonResonant);
                let mm = self.symbol_at(x, k);
                for r in 0..m {
                    for c in 0..m {
                        let comm = C64::new(0.0, e2 * (sys.omega(r) - sys.omega(c))) * mm[r][c];
                        worst = worst.max((b[r][c] - comm).norm());
                        scale = scale.max(b[r][c].norm());
                    }
                }
            }
        }
        if scale == 0.0 {
            worst
        } else {
            worst / scale
        }
    }
}

/// u-independent diagnostic: multiplier tables m_l(eps xi) on the lattice.
pub fn multiplier_tables(ctx: &Ctx) -> Vec<Vec<f64>> {
    let d = ctx.d();
    let mut out = vec![Vec::with_capacity(ctx.total()); d];
    for k in 0..ctx.total() {
        let xi: Vec<f64> = (0..d).map(|a| ctx.eps() * ctx.xi(k, a)).collect();
        for (l, v) in m_multiplier(&xi).into_iter().enumerate() {
            out[l].push(v);
        }
    }
    out
}
