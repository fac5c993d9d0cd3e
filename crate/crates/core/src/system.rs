//! The Schrodinger system in doubled real form u = (v, conj v): polynomial
//! coefficients, transparency validation, and the operators A, B, P, P', P'', R_0.

use std::path::Path;

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::spectral::{forward, rescale, sup_abs, Ctx, Rescale, SemiclassicalContext, SpectralField};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// c * prod v_j^{v[j]} * prod conj(v_j)^{vbar[j]}
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coef: [f64; 2],
    pub v: Vec<u32>,
    pub vbar: Vec<u32>,
}

/// Coefficient entry b_{l j k} or c_{l j k}; indices in the config are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientEntry {
    pub l: usize,
    pub j: usize,
    pub k: usize,
    pub terms: Vec<Monomial>,
}

/// On-disk description of a system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    #[serde(default)]
    pub name: String,
    pub d: usize,
    pub lambda: Vec<f64>,
    pub p: u32,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub b: Vec<CoefficientEntry>,
    #[serde(default)]
    pub c: Vec<CoefficientEntry>,
}

fn default_horizon() -> f64 {
    1.0
}

/// Polynomial in the 2N holomorphic variables z = (v, w), evaluated at w = conj v.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Poly {
    terms: Vec<(C64, Vec<u32>)>,
}

impl Poly {
    fn from_monomials(n: usize, ms: &[Monomial]) -> Result<Self> {
        let mut terms = Vec::new();
        for m in ms {
            if m.v.len() != n || m.vbar.len() != n {
                return Err(Error::Config(format!("monomial exponent vectors must have length {n}")));
            }
            let mut e = m.v.clone();
            e.extend_from_slice(&m.vbar);
            terms.push((C64::new(m.coef[0], m.coef[1]), e));
        }
        Ok(Self { terms })
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|(c, _)| *c == ZERO)
    }

    /// Smallest total degree among nonzero terms.
    pub fn min_degree(&self) -> Option<u32> {
        self.terms.iter().filter(|(c, _)| *c != ZERO).map(|(_, e)| e.iter().sum()).min()
    }

    /// conj(g(v)) written as a polynomial in (v, w).
    fn conjugate(&self, n: usize) -> Self {
        let terms = self
            .terms
            .iter()
            .map(|(c, e)| {
                let mut s = e[n..].to_vec();
                s.extend_from_slice(&e[..n]);
                (c.conj(), s)
            })
            .collect();
        Self { terms }
    }

    pub fn eval(&self, z: &[C64]) -> C64 {
        self.terms.iter().map(|(c, e)| c * mono(z, e, None)).sum()
    }

    /// d/dz_q
    pub fn partial(&self, z: &[C64], q: usize) -> C64 {
        self.terms
            .iter()
            .filter(|(_, e)| e[q] > 0)
            .map(|(c, e)| c * e[q] as f64 * mono(z, e, Some((q, 1))))
            .sum()
    }

    /// d^2/dz_q dz_r
    pub fn partial2(&self, z: &[C64], q: usize, r: usize) -> C64 {
        let mut acc = ZERO;
        for (c, e) in &self.terms {
            if q == r {
                if e[q] >= 2 {
                    acc += c * (e[q] * (e[q] - 1)) as f64 * mono(z, e, Some((q, 2)));
                }
            } else if e[q] >= 1 && e[r] >= 1 {
                let mut e2 = e.clone();
                e2[q] -= 1;
                e2[r] -= 1;
                acc += c * (e[q] * e[r]) as f64 * mono(z, &e2, None);
            }
        }
        acc
    }
}

fn mono(z: &[C64], e: &[u32], lower: Option<(usize, u32)>) -> C64 {
    let mut acc = C64::new(1.0, 0.0);
    for (i, (&zi, &ei)) in z.iter().zip(e).enumerate() {
        let mut k = ei;
        if let Some((q, by)) = lower {
            if q == i {
                k -= by;
            }
        }
        if k > 0 {
            acc *= zi.powu(k);
        }
    }
    acc
}

/// Which entries of the doubled matrix B are resonant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryClass {
    Resonant,
    NonResonant,
}

/// Validated system. Entry (r, c) of the doubled 2N x 2N matrix for direction l is
/// `entries[(l * 2N + r) * 2N + c]`.
#[derive(Debug, Clone)]
pub struct SystemSpec {
    pub config: SystemConfig,
    n: usize,
    d: usize,
    p: u32,
    lambda: Vec<f64>,
    entries: Vec<Poly>,
    class: Vec<EntryClass>,
}

/// Transparency verdict with human-readable violations.
#[derive(Debug, Clone, Serialize)]
pub struct TransparencyReport {
    pub pass: bool,
    pub distinct_lambda: bool,
    pub resonant_symmetry: bool,
    pub real_diagonal: bool,
    pub order_p: bool,
    pub violations: Vec<String>,
}

impl SystemSpec {
    /// Builds without enforcing transparency; see [`SystemSpec::from_config`].
    pub fn build(config: SystemConfig) -> Result<Self> {
        let n = config.lambda.len();
        let d = config.d;
        if n == 0 {
            return Err(Error::Config("lambda must be nonempty".into()));
        }
        if d != 1 && d != 2 {
            return Err(Error::Config(format!("d must be 1 or 2, got {d}")));
        }
        if config.p < 1 {
            return Err(Error::Config("nonlinearity order p must be >= 1".into()));
        }
        if !(config.horizon.is_finite() && config.horizon > 0.0) {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if config.lambda.iter().any(|l| !l.is_finite()) {
            return Err(Error::Config("lambda must be finite reals".into()));
        }
        let m = 2 * n;
        let mut bmat = vec![vec![vec![Poly::default(); n]; n]; d];
        let mut cmat = vec![vec![vec![Poly::default(); n]; n]; d];
        for (tables, target) in [(&config.b, &mut bmat), (&config.c, &mut cmat)] {
            for e in tables.iter() {
                if e.l < 1 || e.l > d || e.j < 1 || e.j > n || e.k < 1 || e.k > n {
                    return Err(Error::Config(format!(
                        "coefficient index (l={}, j={}, k={}) out of range",
                        e.l, e.j, e.k
                    )));
                }
                let poly = Poly::from_monomials(n, &e.terms)?;
                let slot = &mut target[e.l - 1][e.j - 1][e.k - 1];
                slot.terms.extend(poly.terms);
            }
        }
        let mut entries = Vec::with_capacity(d * m * m);
        let mut class = Vec::with_capacity(d * m * m);
        for l in 0..d {
            for r in 0..m {
                for c in 0..m {
                    let (poly, resonant) = match (r < n, c < n) {
                        (true, true) => (bmat[l][r][c].clone(), r == c),
                        (true, false) => {
                            let k = c - n;
                            (cmat[l][r][k].clone(), is_pair(&config.lambda, r, k))
                        }
                        (false, true) => {
                            let j = r - n;
                            (cmat[l][j][c].conjugate(n), is_pair(&config.lambda, j, c))
                        }
                        (false, false) => {
                            let (j, k) = (r - n, c - n);
                            (bmat[l][j][k].conjugate(n), j == k)
                        }
                    };
                    entries.push(poly);
                    class.push(if resonant { EntryClass::Resonant } else { EntryClass::NonResonant });
                }
            }
        }
        Ok(Self { n, d, p: config.p, lambda: config.lambda.clone(), entries, class, config })
    }

    /// Builds and refuses non-transparent systems unless `allow_nontransparent`.
    pub fn from_config(config: SystemConfig, allow_nontransparent: bool) -> Result<Self> {
        let s = Self::build(config)?;
        let rep = s.transparency_check();
        if !rep.pass && !allow_nontransparent {
            return Err(Error::NonTransparent(rep.violations.join("; ")));
        }
        Ok(s)
    }

    /// Loads JSON or TOML by extension.
    pub fn load(path: &Path, allow_nontransparent: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: SystemConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?,
            _ => serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?,
        };
        Self::from_config(cfg, allow_nontransparent)
    }

    /// Shipped benchmark: N = 2, lambda = (1, -1), homogeneous coefficients of degree p.
    pub fn benchmark(d: usize, p: u32) -> Self {
        Self::from_config(benchmark_config(d, p), false).expect("benchmark system is transparent")
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn d(&self) -> usize {
        self.d
    }
    pub fn p(&self) -> u32 {
        self.p
    }
    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }
    pub fn horizon(&self) -> f64 {
        self.config.horizon
    }
    /// nu = max(p - 2, 0)
    pub fn nu(&self) -> u32 {
        self.p.saturating_sub(2)
    }
    /// nu_3 = max(p - 3, 0)
    pub fn nu3(&self) -> u32 {
        self.p.saturating_sub(3)
    }
    /// Size 2N of the doubled system.
    pub fn m(&self) -> usize {
        2 * self.n
    }

    /// Signed dispersion coefficients (lambda, -lambda) of the doubled system.
    pub fn lambda_doubled(&self, r: usize) -> f64 {
        if r < self.n {
            self.lambda[r]
        } else {
            -self.lambda[r - self.n]
        }
    }

    /// omega_j = -lambda_j (j <= N), lambda_{j-N} otherwise; A(i xi) = |xi|^2 diag(omega).
    pub fn omega(&self, r: usize) -> f64 {
        -self.lambda_doubled(r)
    }

    pub fn entry(&self, l: usize, r: usize, c: usize) -> &Poly {
        let m = self.m();
        &self.entries[(l * m + r) * m + c]
    }

    pub fn entry_class(&self, l: usize, r: usize, c: usize) -> EntryClass {
        let m = self.m();
        self.class[(l * m + r) * m + c]
    }

    /// Evaluates every doubled-matrix entry at a point v in C^N.
    pub fn matrix_at(&self, l: usize, v: &[C64]) -> Vec<Vec<C64>> {
        let z = doubled_point(v);
        let m = self.m();
        (0..m).map(|r| (0..m).map(|c| self.entry(l, r, c).eval(&z)).collect()).collect()
    }

    pub fn transparency_check(&self) -> TransparencyReport {
        let n = self.n;
        let mut violations = Vec::new();
        let mut distinct = true;
        for j in 0..n {
            for k in (j + 1)..n {
                if self.lambda[j] == self.lambda[k] {
                    distinct = false;
                    violations.push(format!("(i) lambda_{} = lambda_{} = {}", j + 1, k + 1, self.lambda[j]));
                }
            }
        }
        let cloud = unit_ball_cloud(n, 64, 0x5eed);
        let mut sym = true;
        let mut real = true;
        for l in 0..self.d {
            for j in 0..n {
                for k in 0..n {
                    if j != k && is_pair(&self.lambda, j, k) {
                        let a = self.entry(l, j, n + k);
                        let b = self.entry(l, k, n + j);
                        let worst = cloud
                            .iter()
                            .map(|v| {
                                let z = doubled_point(v);
                                (a.eval(&z) - b.eval(&z)).norm()
                            })
                            .fold(0.0, f64::max);
                        if worst > 1e-12 {
                            sym = false;
                            violations.push(format!(
                                "(ii) c_{l}{}{} != c_{l}{}{} (max gap {worst:.2e})",
                                j + 1,
                                k + 1,
                                k + 1,
                                j + 1,
                                l = l + 1
                            ));
                        }
                    }
                }
                let b = self.entry(l, j, j);
                let worst = cloud
                    .iter()
                    .map(|v| b.eval(&doubled_point(v)).im.abs())
                    .fold(0.0, f64::max);
                if worst > 1e-12 {
                    real = false;
                    violations.push(format!(
                        "(iii) b_{}{}{} not real (max |Im| {worst:.2e})",
                        l + 1,
                        j + 1,
                        j + 1
                    ));
                }
            }
        }
        let mut order = true;
        for (idx, poly) in self.entries.iter().enumerate() {
            if let Some(deg) = poly.min_degree() {
                if deg < self.p {
                    order = false;
                    violations.push(format!("entry {idx} has a term of degree {deg} < p = {}", self.p));
                }
            }
        }
        TransparencyReport {
            pass: distinct && sym && real && order,
            distinct_lambda: distinct,
            resonant_symmetry: sym,
            real_diagonal: real,
            order_p: order,
            violations,
        }
    }

    /// Largest |g(tau v)| / tau^p over a ray family and tau in {1e-1, 1e-2, 1e-3}.
    pub fn order_constant_on_rays(&self) -> f64 {
        let cloud = unit_ball_cloud(self.n, 16, 0x0dd);
        let mut worst: f64 = 0.0;
        for v in &cloud {
            for tau in [1e-1, 1e-2, 1e-3] {
                let vs: Vec<C64> = v.iter().map(|z| z * tau).collect();
                let z = doubled_point(&vs);
                for e in &self.entries {
                    worst = worst.max(e.eval(&z).norm() / tau.powi(self.p as i32));
                }
            }
        }
        worst
    }
}

fn is_pair(lambda: &[f64], j: usize, k: usize) -> bool {
    lambda[j] + lambda[k] == 0.0
}

/// z = (v, conj v)
pub fn doubled_point(v: &[C64]) -> Vec<C64> {
    let mut z = v.to_vec();
    z.extend(v.iter().map(|x| x.conj()));
    z
}

fn unit_ball_cloud(n: usize, count: usize, seed: u64) -> Vec<Vec<C64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let v: Vec<C64> = (0..n)
                .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let r: f64 = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            let target: f64 = rng.gen_range(0.0..1.0);
            v.into_iter().map(|z| z * (target / r.max(1e-300))).collect()
        })
        .collect()
}

fn mono_term(coef: [f64; 2], v: [u32; 2], vbar: [u32; 2]) -> Monomial {
    Monomial { coef, v: v.to_vec(), vbar: vbar.to_vec() }
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Benchmark coefficient tables.
pub fn benchmark_config(d: usize, p: u32) -> SystemConfig {
    let diag: Vec<Monomial> = if p % 2 == 0 {
        // (|v1|^2 + |v2|^2)^{p/2}
        let h = p / 2;
        (0..=h)
            .map(|i| mono_term([binomial(h, i), 0.0], [i, h - i], [i, h - i]))
            .collect()
    } else {
        // Re(v1^p)
        vec![mono_term([0.5, 0.0], [p, 0], [0, 0]), mono_term([0.5, 0.0], [0, 0], [p, 0])]
    };
    let mut b = Vec::new();
    let mut c = Vec::new();
    for l in 1..=d {
        let w = if l == 1 { 1.0 } else { 0.5 };
        let sc = |ms: &[Monomial]| -> Vec<Monomial> {
            ms.iter()
                .map(|m| Monomial { coef: [m.coef[0] * w, m.coef[1] * w], ..m.clone() })
                .collect()
        };
        b.push(CoefficientEntry { l, j: 1, k: 1, terms: sc(&diag) });
        b.push(CoefficientEntry { l, j: 2, k: 2, terms: sc(&diag) });
        b.push(CoefficientEntry { l, j: 1, k: 2, terms: sc(&[mono_term([0.5, 0.0], [p - 1, 0], [0, 1])]) });
        b.push(CoefficientEntry { l, j: 2, k: 1, terms: sc(&[mono_term([0.5, 0.0], [0, p - 1], [1, 0])]) });
        let res = [mono_term([1.0, 0.0], [p - 1, 1], [0, 0])];
        c.push(CoefficientEntry { l, j: 1, k: 2, terms: sc(&res) });
        c.push(CoefficientEntry { l, j: 2, k: 1, terms: sc(&res) });
        c.push(CoefficientEntry { l, j: 1, k: 1, terms: sc(&[mono_term([0.0, 0.3], [0, 0], [p, 0])]) });
        c.push(CoefficientEntry { l, j: 2, k: 2, terms: sc(&[mono_term([0.0, 0.3], [0, 0], [0, p])]) });
    }
    SystemConfig {
        name: format!("benchmark-d{d}-p{p}"),
        d,
        lambda: vec![1.0, -1.0],
        p,
        horizon: 1.0,
        b,
        c,
    }
}

/// Grid data of u frozen at one time: point values, eps-derivatives and coefficient
/// grids of every nonzero entry of B(u, .), with first derivatives.
pub struct Frozen<'a> {
    pub sys: &'a SystemSpec,
    pub ctx: Ctx,
    pub u: SpectralField,
    pub ug: Vec<Vec<C64>>,
    /// eps d_l u_c on the grid, indexed [l][c]
    pub dug: Vec<Vec<Vec<C64>>>,
    /// entry grids indexed like SystemSpec::entry; None for zero entries
    pub coeff: Vec<Option<Vec<C64>>>,
    /// d coeff / d z_q grids, [entry][q]
    pub grad: Vec<Option<Vec<Vec<C64>>>>,
    pub linf: f64,
}

impl<'a> Frozen<'a> {
    /// Freezes `u`; rejects fields outside the unit L-infinity ball.
    pub fn new(sys: &'a SystemSpec, u: &SpectralField) -> Result<Self> {
        let f = Self::new_unchecked(sys, u)?;
        if f.linf > 1.0 {
            return Err(Error::LinfBall(f.linf));
        }
        Ok(f)
    }

    pub fn new_unchecked(sys: &'a SystemSpec, u: &SpectralField) -> Result<Self> {
        if u.ncomp() != sys.m() || u.ctx().d() != sys.d() {
            return invalid("field does not match the system size");
        }
        if !u.is_finite() {
            return Err(Error::NonFinite("coefficient field"));
        }
        let ctx = u.ctx().clone();
        let ug = u.grid();
        let linf = sup_abs(&ug);
        let dug = (0..sys.d())
            .map(|l| (0..sys.m()).map(|c| u.eps_derivative(l).grid_comp(c)).collect())
            .collect();
        let total = ctx.total();
        let m = sys.m();
        let mut coeff = Vec::with_capacity(sys.entries.len());
        let mut grad = Vec::with_capacity(sys.entries.len());
        let mut z = vec![ZERO; m];
        for poly in &sys.entries {
            if poly.is_zero() {
                coeff.push(None);
                grad.push(None);
                continue;
            }
            let mut cg = vec![ZERO; total];
            let mut gg = vec![vec![ZERO; total]; m];
            for x in 0..total {
                for (q, zq) in z.iter_mut().enumerate() {
                    *zq = ug[q][x];
                }
                cg[x] = poly.eval(&z);
                for (q, g) in gg.iter_mut().enumerate() {
                    g[x] = poly.partial(&z, q);
                }
            }
            coeff.push(Some(cg));
            grad.push(Some(gg));
        }
        Ok(Self { sys, ctx, u: u.clone(), ug, dug, coeff, grad, linf })
    }

    pub fn idx(&self, l: usize, r: usize, c: usize) -> usize {
        let m = self.sys.m();
        (l * m + r) * m + c
    }

    /// sum_l sum_c w(l, r, c)(x) * (mult_l h_c)(x) over entries with `keep`, dealiased.
    /// `weights` holds one grid per entry index (coefficients, gradients, ...).
    pub fn first_order<K, M>(
        &self,
        h: &SpectralField,
        keep: K,
        weights: &[Option<Vec<C64>>],
        mult: M,
    ) -> SpectralField
    where
        K: Fn(usize, usize, usize) -> bool,
        M: Fn(usize, usize) -> C64,
    {
        let m = self.sys.m();
        let total = self.ctx.total();
        let mut out_grid = vec![vec![ZERO; total]; m];
        let mut any = vec![false; m];
        for l in 0..self.sys.d() {
            for c in 0..m {
                let rows: Vec<(usize, &Vec<C64>)> = (0..m)
                    .filter(|&r| keep(l, r, c))
                    .filter_map(|r| weights[self.idx(l, r, c)].as_ref().map(|w| (r, w)))
                    .collect();
                if rows.is_empty() {
                    continue;
                }
                let hc: Vec<C64> = h.comp(c).iter().enumerate().map(|(k, z)| z * mult(l, k)).collect();
                let hg = crate::spectral::inverse(&self.ctx, &hc);
                for (r, w) in rows {
                    any[r] = true;
                    for x in 0..total {
                        out_grid[r][x] += w[x] * hg[x];
                    }
                }
            }
        }
        let comps = out_grid
            .iter()
            .zip(&any)
            .map(|(g, &a)| if a { forward(&self.ctx, g) } else { vec![ZERO; total] })
            .collect();
        let mut out = SpectralField::from_coeffs(&self.ctx, comps).expect("sized");
        out.dealias();
        out
    }

    pub fn eps_xi(&self, l: usize, k: usize) -> C64 {
        C64::new(0.0, self.ctx.eps() * self.ctx.xi(k, l))
    }

    /// B(u, eps d) h restricted to entries with `keep`, h filtered by `filter(|eps xi|)`.
    pub fn b_part(
        &self,
        h: &SpectralField,
        keep: impl Fn(usize, usize, usize) -> bool,
        filter: impl Fn(f64) -> f64,
    ) -> SpectralField {
        let ctx = self.ctx.clone();
        self.first_order(
            h,
            keep,
            &self.coeff,
            |l, k| self.eps_xi(l, k) * filter(ctx.eps_xi_abs(k)),
        )
    }

    /// B(u, eps d) h
    pub fn apply_b(&self, h: &SpectralField) -> SpectralField {
        self.b_part(h, |_, _, _| true, |_| 1.0)
    }

    /// Entry grids of the directional derivative D coeff(u)[h], from grid values of h.
    pub fn directional(&self, hg: &[Vec<C64>]) -> Vec<Option<Vec<C64>>> {
        let total = self.ctx.total();
        self.grad
            .iter()
            .map(|g| {
                g.as_ref().map(|g| {
                    (0..total).map(|x| (0..self.sys.m()).map(|q| g[q][x] * hg[q][x]).sum()).collect()
                })
            })
            .collect()
    }

    /// (d_u B)(u, eps d)[h1] h2
    pub fn apply_db(&self, h1: &SpectralField, h2: &SpectralField) -> SpectralField {
        let weights = self.directional(&h1.grid());
        self.first_order(
            h2,
            |_, _, _| true,
            &weights,
            |l, k| self.eps_xi(l, k),
        )
    }

    /// (d_uu B)(u, eps d)[h1, h2] w
    pub fn apply_ddb(&self, h1: &SpectralField, h2: &SpectralField, w: &SpectralField) -> SpectralField {
        let h1g = h1.grid();
        let h2g = h2.grid();
        let total = self.ctx.total();
        let m = self.sys.m();
        let mut z = vec![ZERO; m];
        let mut weights: Vec<Option<Vec<C64>>> = Vec::with_capacity(self.sys.entries.len());
        for poly in &self.sys.entries {
            if poly.is_zero() {
                weights.push(None);
                continue;
            }
            let mut g = vec![ZERO; total];
            for x in 0..total {
                for (q, zq) in z.iter_mut().enumerate() {
                    *zq = self.ug[q][x];
                }
                let mut acc = ZERO;
                for q in 0..m {
                    for r in 0..m {
                        let h = poly.partial2(&z, q, r);
                        if h != ZERO {
                            acc += h * h1g[q][x] * h2g[r][x];
                        }
                    }
                }
                g[x] = acc;
            }
            weights.push(Some(g));
        }
        self.first_order(w, |_, _, _| true, &weights, |l, k| self.eps_xi(l, k))
    }

    /// R_0(u) h = -eps^{-1} (d_u B)(u, eps d)[h] u
    pub fn apply_r0(&self, h: &SpectralField) -> SpectralField {
        let hg = h.grid();
        let total = self.ctx.total();
        let m = self.sys.m();
        let mut out_grid = vec![vec![ZERO; total]; m];
        for l in 0..self.sys.d() {
            for r in 0..m {
                for c in 0..m {
                    if let Some(g) = &self.grad[self.idx(l, r, c)] {
                        let du = &self.dug[l][c];
                        for x in 0..total {
                            let mut s = ZERO;
                            for q in 0..m {
                                s += g[q][x] * hg[q][x];
                            }
                            out_grid[r][x] += s * du[x];
                        }
                    }
                }
            }
        }
        let comps = out_grid.iter().map(|g| forward(&self.ctx, g)).collect();
        let mut out = SpectralField::from_coeffs(&self.ctx, comps).expect("sized");
        out.dealias();
        out.scale(C64::new(-1.0 / self.ctx.eps(), 0.0))
    }

    /// P'(u) h - i eps^{-2} A(eps d) h = -eps^{-1} B(u) h + R_0(u) h
    pub fn apply_nonlinear_prime(&self, h: &SpectralField) -> SpectralField {
        let mut out = self.apply_b(h).scale_re(-1.0 / self.ctx.eps());
        out.axpy(C64::new(1.0, 0.0), &self.apply_r0(h));
        out
    }

    /// P'(u) h
    pub fn apply_p_prime(&self, h: &SpectralField) -> SpectralField {
        let mut out = apply_free(self.sys, h);
        out.axpy(C64::new(1.0, 0.0), &self.apply_nonlinear_prime(h));
        out
    }
}

/// A(eps d) h: multiplier -|eps xi|^2 (lambda, -lambda).
pub fn apply_a(sys: &SystemSpec, h: &SpectralField) -> SpectralField {
    let ctx = h.ctx().clone();
    let e2 = ctx.eps() * ctx.eps();
    h.comp_multiplier(|r, k| C64::new(-e2 * ctx.xi_abs2(k) * sys.lambda_doubled(r), 0.0))
}

/// i eps^{-2} A(eps d) h, which equals i A(d) h.
pub fn apply_free(sys: &SystemSpec, h: &SpectralField) -> SpectralField {
    let ctx = h.ctx().clone();
    h.comp_multiplier(|r, k| C64::new(0.0, -ctx.xi_abs2(k) * sys.lambda_doubled(r)))
}

/// B(u, eps d) h; requires |u|_inf <= 1.
pub fn apply_b(sys: &SystemSpec, u: &SpectralField, h: &SpectralField) -> Result<SpectralField> {
    u.check_same(h)?;
    Ok(Frozen::new(sys, u)?.apply_b(h))
}

/// -eps^{-1} B(u, eps d) u
pub fn nonlinear_term(sys: &SystemSpec, u: &SpectralField) -> Result<SpectralField> {
    let f = Frozen::new(sys, u)?;
    Ok(f.apply_b(u).scale_re(-1.0 / u.ctx().eps()))
}

/// P(u) = i eps^{-2} A(eps d) u - eps^{-1} B(u, eps d) u
pub fn apply_p(sys: &SystemSpec, u: &SpectralField) -> Result<SpectralField> {
    let mut out = apply_free(sys, u);
    out.axpy(C64::new(1.0, 0.0), &nonlinear_term(sys, u)?);
    Ok(out)
}

pub fn apply_p_prime(sys: &SystemSpec, u: &SpectralField, h: &SpectralField) -> Result<SpectralField> {
    u.check_same(h)?;
    Ok(Frozen::new(sys, u)?.apply_p_prime(h))
}

/// P''(u)[h1, h2]
pub fn apply_p_second(
    sys: &SystemSpec,
    u: &SpectralField,
    h1: &SpectralField,
    h2: &SpectralField,
) -> Result<SpectralField> {
    u.check_same(h1)?;
    u.check_same(h2)?;
    let f = Frozen::new(sys, u)?;
    let mut out = f.apply_db(h1, h2);
    out.axpy(C64::new(1.0, 0.0), &f.apply_db(h2, h1));
    out.axpy(C64::new(1.0, 0.0), &f.apply_ddb(h1, h2, u));
    Ok(out.scale_re(-1.0 / u.ctx().eps()))
}

/// Assembles u = (v, conj v) from N single-component fields.
pub fn conjugate_pair(v: &[SpectralField]) -> Result<SpectralField> {
    let ctx = v[0].ctx().clone();
    let mut comps: Vec<Vec<C64>> = Vec::with_capacity(2 * v.len());
    for f in v {
        if f.ncomp() != 1 || !f.ctx().same_grid(&ctx) {
            return Err(Error::ContextMismatch);
        }
        comps.push(f.comp(0).to_vec());
    }
    for f in v {
        comps.push(f.conj_reflect_comp(0));
    }
    SpectralField::from_coeffs(&ctx, comps)
}

/// Concentrating or oscillating data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProfileKind {
    Concentrating,
    Oscillating { xi0: [f64; 2] },
}

/// Base profile a_0, evaluated analytically on a unit-scale grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum BaseProfile {
    /// amplitude * exp(-|x - center|^2 / (2 width^2))
    Gaussian { amplitude: f64, width: f64, center: [f64; 2] },
    /// amplitude * sech(|x| / width)
    Sech { amplitude: f64, width: f64 },
}

impl BaseProfile {
    pub fn eval(&self, x: [f64; 2], d: usize) -> C64 {
        match *self {
            BaseProfile::Gaussian { amplitude, width, center } => {
                let r2: f64 = (0..d).map(|i| (x[i] - center[i]).powi(2)).sum();
                C64::new(amplitude * (-r2 / (2.0 * width * width)).exp(), 0.0)
            }
            BaseProfile::Sech { amplitude, width } => {
                let r: f64 = (0..d).map(|i| x[i] * x[i]).sum::<f64>().sqrt();
                C64::new(amplitude / (r / width).cosh(), 0.0)
            }
        }
    }
}

/// Initial-data family eps^sigma T_{eps,c} a_0, placed on the components with `weights`
/// (empty: first component only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataProfile {
    pub kind: ProfileKind,
    pub sigma: f64,
    pub base: BaseProfile,
    #[serde(default)]
    pub weights: Vec<[f64; 2]>,
}

impl DataProfile {
    /// sigma_a = d/2 (concentrating) or 0 (oscillating).
    pub fn sigma_a(&self, d: usize) -> f64 {
        match self.kind {
            ProfileKind::Concentrating => d as f64 / 2.0,
            ProfileKind::Oscillating { .. } => 0.0,
        }
    }

    pub fn weight(&self, j: usize) -> C64 {
        match self.weights.get(j) {
            Some(w) => C64::new(w[0], w[1]),
            None if self.weights.is_empty() && j == 0 => C64::new(1.0, 0.0),
            None => ZERO,
        }
    }

    /// Unit-scale grid on which a_0 lives for a given eps-context.
    pub fn profile_context(&self, ctx: &Ctx) -> Result<Ctx> {
        match self.kind {
            ProfileKind::Concentrating => {
                SemiclassicalContext::new(ctx.d(), ctx.n(), ctx.box_len() / ctx.eps(), 1.0)
            }
            ProfileKind::Oscillating { .. } => SemiclassicalContext::new(ctx.d(), ctx.n(), ctx.box_len(), 1.0),
        }
    }

    /// a_0 sampled on its unit-scale grid.
    pub fn sample(&self, pctx: &Ctx) -> SpectralField {
        let d = pctx.d();
        let base = self.base;
        SpectralField::from_fn(pctx, 1, move |_, x| base.eval(x, d))
    }
}

/// T_{eps,c} a: concentrating a(x/eps) or oscillating a(x) e^{i x xi0/eps}. Returns the
/// field on `ctx` and, for oscillating data, the carrier rounding error.
pub fn transform_profile(kind: ProfileKind, a: &SpectralField, ctx: &Ctx) -> Result<(SpectralField, f64)> {
    match kind {
        ProfileKind::Concentrating => {
            let t = rescale(a, Rescale::FromUnit { eps: ctx.eps() })?;
            if ((t.ctx().box_len() - ctx.box_len()) / ctx.box_len()).abs() > 1e-12 || t.ctx().n() != ctx.n() {
                return invalid("profile grid does not match the target context");
            }
            Ok((t.relabel(ctx)?, 0.0))
        }
        ProfileKind::Oscillating { xi0 } => {
            let pctx = a.ctx();
            if pctx.n() != ctx.n() || pctx.box_len() != ctx.box_len() {
                return invalid("oscillating profile must share the box and grid");
            }
            let dk = 2.0 * std::f64::consts::PI / ctx.box_len();
            let mut shift = [0i64; 2];
            let mut off: f64 = 0.0;
            for i in 0..ctx.d() {
                let target = xi0[i] / ctx.eps() / dk;
                shift[i] = target.round() as i64;
                off = off.max((target - shift[i] as f64).abs() * dk);
            }
            let mut out = SpectralField::zeros(ctx, a.ncomp());
            let mut idx = [0i64; 2];
            for k in 0..pctx.total() {
                for (i, slot) in idx.iter_mut().enumerate().take(ctx.d()) {
                    *slot = pctx.index(k, i) + shift[i];
                }
                for c in 0..a.ncomp() {
                    let z = a.comp(c)[k];
                    if z.norm() == 0.0 {
                        continue;
                    }
                    match ctx.flat_of(&idx[..ctx.d()]) {
                        Some(t) => out.comp_mut(c)[t] = z,
                        None if z.norm() < 1e-14 => {}
                        None => {
                            return Err(Error::LatticeOverflow(format!(
                                "carrier shift {:?} pushes modes past the grid",
                                &shift[..ctx.d()]
                            )))
                        }
                    }
                }
            }
            Ok((out, off))
        }
    }
}

/// Initial datum with its unit-scale profile.
#[derive(Debug, Clone)]
pub struct InitialDatum {
    pub u0: SpectralField,
    pub profile: SpectralField,
    pub warning: Option<String>,
}

/// u_0 = eps^sigma (T a_0 w_j, conj(T a_0 w_j)).
pub fn make_initial_datum(sys: &SystemSpec, profile: &DataProfile, ctx: &Ctx) -> Result<InitialDatum> {
    let pctx = profile.profile_context(ctx)?;
    let a = profile.sample(&pctx);
    let mut out = datum_from_profile(sys, profile, &a, ctx)?;
    if let ProfileKind::Oscillating { xi0 } = profile.kind {
        let (_, off) = transform_profile(profile.kind, &a, ctx)?;
        if off > 1e-9 {
            out.warning = Some(format!("carrier {xi0:?}/eps rounded to the lattice (offset {off:.3e})"));
        }
    }
    Ok(out)
}

/// Same as [`make_initial_datum`] for an explicit profile field.
pub fn datum_from_profile(
    sys: &SystemSpec,
    profile: &DataProfile,
    a: &SpectralField,
    ctx: &Ctx,
) -> Result<InitialDatum> {
    let (ta, _) = transform_profile(profile.kind, a, ctx)?;
    let amp = ctx.eps().powf(profile.sigma);
    let v: Vec<SpectralField> = (0..sys.n()).map(|j| ta.scale(profile.weight(j) * amp)).collect();
    Ok(InitialDatum { u0: conjugate_pair(&v)?, profile: a.clone(), warning: None })
}
