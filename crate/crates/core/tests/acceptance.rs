//! Acceptance suite. Runs every criterion in order and prints one PASS/FAIL line per
//! criterion; exits non-zero if any fails. Built with `harness = false` so the lines are
//! always visible under `cargo test`.

use std::process::ExitCode;
use std::time::Instant;

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nmh_core::error::Result;
use nmh_core::estimates::{default_cases, run_lab, LabConfig};
use nmh_core::evolution::{
    ball_value, free_flow, pair_norm, phi_discrete, phi_prime_discrete, phi_second_discrete, propagate,
    solve_linearized, LinearMethod, LinearOptions, Stagger, TimeGrid, Trajectory,
};
use nmh_core::experiments::{
    default_no_loss_profile, no_loss_setup, no_loss_sweep, thresholds, with_loss_sweep, ExperimentKind, RunConfig,
};
use nmh_core::nash_moser::{branch_slopes, optimize_radius, NmhConfig};
use nmh_core::normal_form::{chi, NormalForm};
use nmh_core::spectral::{SemiclassicalContext, SpectralField};
use nmh_core::system::{
    conjugate_pair, make_initial_datum, BaseProfile, DataProfile, EntryClass, ProfileKind, SystemSpec,
};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Conjugate pair built from two random low-mode fields, scaled to sup norm `amp`.
fn random_pair(ctx: &nmh_core::spectral::Ctx, rng: &mut ChaCha8Rng, modes: i64, amp: f64) -> Result<SpectralField> {
    let d = ctx.d();
    let mut v = Vec::new();
    for _ in 0..2 {
        let coeffs: Vec<C64> = (0..ctx.total())
            .map(|k| {
                if (0..d).all(|a| ctx.index(k, a).abs() <= modes) {
                    C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                } else {
                    ZERO
                }
            })
            .collect();
        v.push(SpectralField::from_coeffs(ctx, vec![coeffs])?);
    }
    let u = conjugate_pair(&v)?;
    let s = amp / u.linf();
    Ok(u.scale_re(s))
}

fn gaussian(kind: ProfileKind, amp: f64, width: f64, center: f64) -> DataProfile {
    DataProfile {
        kind,
        sigma: 0.0,
        base: BaseProfile::Gaussian { amplitude: amp, width, center: [center, 0.0] },
        weights: vec![[1.0, 0.0], [0.4, -0.3]],
    }
}

/// |B_nr(u(x), i eta) - i[A(i eta), M(u(x), eta)]| with B evaluated directly from the
/// coefficient polynomials and A(i eta) = diag(omega_r |eta|^2).
fn homological_oracle(sys: &SystemSpec, u: &SpectralField, nf: &NormalForm) -> f64 {
    let ctx = u.ctx();
    let (m, d) = (sys.m(), sys.d());
    let grid = u.grid();
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for x in 0..ctx.total() {
        let v: Vec<C64> = (0..m).map(|c| grid[c][x]).collect();
        let mats: Vec<Vec<Vec<C64>>> = (0..d).map(|l| sys.matrix_at(l, &v)).collect();
        for k in 0..ctx.total() {
            if !ctx.in_lattice(k) {
                continue;
            }
            let eta: Vec<f64> = (0..d).map(|a| ctx.eps() * ctx.xi(k, a)).collect();
            let e2: f64 = eta.iter().map(|e| e * e).sum();
            let w = 1.0 - chi(e2.sqrt());
            let mm = nf.symbol_at(x, k);
            for r in 0..m {
                for c in 0..m {
                    let mut b = ZERO;
                    for l in 0..d {
                        if sys.entry_class(l, r, c) == EntryClass::NonResonant {
                            b += mats[l][r][c] * C64::new(0.0, eta[l] * w);
                        }
                    }
                    let comm = C64::new(0.0, e2 * (sys.omega(r) - sys.omega(c))) * mm[r][c];
                    worst = worst.max((b - comm).norm());
                    scale = scale.max(b.norm());
                }
            }
        }
    }
    worst / scale.max(f64::MIN_POSITIVE)
}

fn criterion_1() -> Result<Outcome> {
    let mut worst_module: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    let mut r = rng(101);
    for (d, n, box_len) in [(1usize, 32usize, 8.0), (2, 16, 6.0)] {
        let sys = SystemSpec::benchmark(d, 2);
        let ctx = SemiclassicalContext::new(d, n, box_len, 0.5)?;
        for _ in 0..20 {
            let u = random_pair(&ctx, &mut r, 3, 0.3)?;
            let nf = NormalForm::new(&sys, &u)?;
            worst_module = worst_module.max(nf.homological_residual());
            worst_oracle = worst_oracle.max(homological_oracle(&sys, &u, &nf));
        }
    }
    let worst = worst_module.max(worst_oracle);
    outcome(
        worst <= 1e-12,
        format!("20 fields each for d = 1, 2: residual {worst_module:.2e} (module), {worst_oracle:.2e} (direct symbol evaluation)"),
    )
}

fn dyadic_eps(k: i32) -> f64 {
    0.5f64.powi(k)
}

/// Constants of the smoothing inequalities measured on one ensemble, normalized by the
/// sharp lattice bounds: c1 (S1), c2 (S2), c3 (S3), c4 (block bound for all a, b), and
/// the orthogonality defect.
fn smoothing_constants(eps: f64, fields: usize) -> Result<[f64; 5]> {
    let ctx = SemiclassicalContext::new(1, 256, 16.0 * eps, eps)?;
    let ss = [0.0, 1.0, 2.0, 4.0, 6.0];
    let mut r = rng(202);
    let mut out = [0.0f64; 5];
    for _ in 0..fields {
        let decay = r.gen_range(0.5..4.0);
        let coeffs: Vec<C64> = (0..ctx.total())
            .map(|k| {
                let w = (1.0 + ctx.eps_xi_abs(k).powi(2)).powf(-decay / 2.0);
                C64::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)) * w
            })
            .collect();
        let u = SpectralField::from_coeffs(&ctx, vec![coeffs])?;
        let top = u.spectral_level();
        for j in 0..=top {
            let sj = u.smooth(j);
            let tail = u.sub(&sj);
            let rj = u.dyadic_block(j);
            let pj = 2f64.powi(j as i32);
            let q = 4f64.powi(-(j as i32));
            for &a in &ss {
                out[0] = out[0].max(sj.hs_eps(a) / u.hs_eps(a));
                for &b in &ss {
                    let db = b - a;
                    if a < b && sj.l2() > 0.0 {
                        let sharp = pj.powf(db) * (1.0 + q).powf(db / 2.0);
                        out[1] = out[1].max(sj.hs_eps(b) / (sharp * sj.hs_eps(a)));
                    }
                    if a > b && tail.l2() > 0.0 {
                        out[2] = out[2].max(tail.hs_eps(b) / (pj.powf(db) * tail.hs_eps(a)));
                    }
                    if a != b && rj.l2() > 0.0 {
                        let k = if j == 0 && b < a { 1.0 } else { (4.0 + q).powf(db / 2.0).max((1.0 + q).powf(db / 2.0)) };
                        out[3] = out[3].max(rj.hs_eps(b) / (k * pj.powf(db) * rj.hs_eps(a)));
                    }
                }
                let sum: f64 = (0..=top).map(|i| u.dyadic_block(i).hs_eps(a).powi(2)).sum();
                let full = u.hs_eps(a).powi(2);
                out[4] = out[4].max((sum - full).abs() / full);
            }
        }
    }
    Ok(out)
}

fn criterion_2() -> Result<Outcome> {
    let per_eps: Vec<[f64; 5]> = (0..=6).map(|k| smoothing_constants(dyadic_eps(k), 12)).collect::<Result<_>>()?;
    let tol = 1.0 + 1e-12;
    let bounded = per_eps.iter().all(|c| c[0] <= tol && c[1] <= tol && c[2] <= tol && c[3] <= tol && c[4] <= 1e-12);
    let mut variation: f64 = 0.0;
    for i in 0..4 {
        let hi = per_eps.iter().map(|c| c[i]).fold(0.0, f64::max);
        let lo = per_eps.iter().map(|c| c[i]).fold(f64::INFINITY, f64::min);
        variation = variation.max((hi - lo) / hi);
    }
    let c = per_eps[0];
    outcome(
        bounded && variation < 0.05,
        format!(
            "eps 1..2^-6, s in {{0,1,2,4,6}}: S1 {:.6}, S2 {:.6}, S3 {:.6}, blocks {:.6} (ratios to sharp bounds), orthogonality defect {:.1e}, eps-variation {:.1e}",
            c[0], c[1], c[2], c[3], c[4], variation
        ),
    )
}

fn criterion_3() -> Result<Outcome> {
    let sys = SystemSpec::benchmark(1, 2);
    let s0 = 1.0;
    let mut conservation: f64 = 0.0;
    let mut spreads = Vec::new();
    let kinds = [
        ("concentrating", ProfileKind::Concentrating, 256usize),
        ("oscillating", ProfileKind::Oscillating { xi0: [2.0, 0.0] }, 1024usize),
    ];
    for (_, kind, n) in kinds {
        // rows: |y|_inf, eps^2 |d_t y|_inf, eps |d_x y|_inf, eps^2 |d_x^2 y|_inf, each over its profile norm
        let mut ratios: Vec<[f64; 4]> = Vec::new();
        for k in 0..=5 {
            let eps = dyadic_eps(k);
            let box_len = match kind {
                ProfileKind::Concentrating => 16.0 * eps,
                ProfileKind::Oscillating { .. } => 16.0,
            };
            let ctx = SemiclassicalContext::new(1, n, box_len, eps)?;
            let prof = DataProfile { weights: vec![[1.0, 0.0]], ..gaussian(kind, 1.0, 1.0, 0.0) };
            let datum = make_initial_datum(&sys, &prof, &ctx)?;
            let a = datum.profile;
            let y = free_flow(&sys, &datum.u0, TimeGrid::new(1.0, 64)?)?;
            for s in [0.0, 1.0, 2.0, 4.0, 6.0] {
                let n0 = datum.u0.hs_eps(s);
                for sl in &y.slices {
                    conservation = conservation.max((sl.hs_eps(s) - n0).abs() / n0);
                }
            }
            let dt = y.time_derivative(&sys)?;
            let dx = y.map(|f| f.eps_derivative(0));
            let dxx = dx.map(|f| f.eps_derivative(0));
            ratios.push([
                y.c0_linf() / a.hs_eps(s0),
                eps * eps * dt.c0_linf() / a.hs_eps(s0 + 2.0),
                dx.c0_linf() / a.hs_eps(s0 + 1.0),
                dxx.c0_linf() / a.hs_eps(s0 + 2.0),
            ]);
        }
        for i in 0..4 {
            let hi = ratios.iter().map(|r| r[i]).fold(0.0, f64::max);
            let lo = ratios.iter().map(|r| r[i]).fold(f64::INFINITY, f64::min);
            spreads.push(hi / lo);
        }
    }
    let spread = spreads.iter().cloned().fold(0.0, f64::max);
    outcome(
        conservation <= 1e-12 && spread <= 2.0,
        format!(
            "norm drift {conservation:.1e}; L-inf ratio spread over eps 1..2^-5: concentrating {:.3}, oscillating {:.3}",
            spreads[..4].iter().cloned().fold(0.0, f64::max),
            spreads[4..].iter().cloned().fold(0.0, f64::max)
        ),
    )
}

fn criterion_4() -> Result<Outcome> {
    let sys = SystemSpec::benchmark(1, 2);
    let cfg = RunConfig::new(ExperimentKind::NoLossSweep);
    let mut worst_ri: f64 = 0.0;
    let mut worst_ball: f64 = 0.0;
    for eps in [0.5, 0.25, 0.125] {
        let setup = no_loss_setup(&sys, &default_no_loss_profile(), eps, cfg.no_loss.c, &cfg)?;
        let grid = setup.grid;
        let ctx = &setup.ctx;
        let u = free_flow(&sys, &setup.u0, grid)?;
        worst_ball = worst_ball.max(ball_value(&sys, &u, setup.s0)?);
        let g = make_initial_datum(&sys, &gaussian(ProfileKind::Concentrating, 1.0, 0.7, 1.0), ctx)?.u0;
        let f2 = make_initial_datum(&sys, &gaussian(ProfileKind::Concentrating, 0.5, 1.3, -0.5), ctx)?.u0;
        let f1 = Trajectory::from_fn(grid, Stagger::Midpoints, |t| propagate(&sys, &g, t).scale_re((3.0 * t).cos()))?;
        for method in [LinearMethod::NormalForm, LinearMethod::Direct] {
            let opts = LinearOptions { method, tol: 1e-10, ball: Some((setup.s0, 1.0)), ..Default::default() };
            let (h, _) = solve_linearized(&sys, &u, &f1, &f2, &opts)?;
            let (r1, r2) = phi_prime_discrete(&sys, &u, &h)?;
            let rel = pair_norm(&r1.sub(&f1), &r2.sub(&f2), setup.s0) / pair_norm(&f1, &f2, setup.s0);
            worst_ri = worst_ri.max(rel);
        }
    }

    // u = 0 with forcing S(t)(g + t g2): h(t) = S(t)(h0 + t g + t^2/2 g2)
    let ctx = SemiclassicalContext::new(1, 128, 8.0, 0.25)?;
    let grid = TimeGrid::new(1.0, 24)?;
    let g = make_initial_datum(&sys, &gaussian(ProfileKind::Concentrating, 1.0, 1.0, 0.0), &ctx)?.u0;
    let g2 = make_initial_datum(&sys, &gaussian(ProfileKind::Concentrating, 0.6, 0.5, 1.5), &ctx)?.u0;
    let h0 = make_initial_datum(&sys, &gaussian(ProfileKind::Concentrating, 0.8, 1.5, -1.0), &ctx)?.u0;
    let zero = Trajectory::zeros(grid, Stagger::Nodes, &ctx, sys.m());
    let f1 = Trajectory::from_fn(grid, Stagger::Midpoints, |t| {
        let mut w = g.clone();
        w.axpy(C64::new(t, 0.0), &g2);
        propagate(&sys, &w, t)
    })?;
    let exact = Trajectory::from_fn(grid, Stagger::Nodes, |t| {
        let mut w = h0.clone();
        w.axpy(C64::new(t, 0.0), &g);
        w.axpy(C64::new(t * t / 2.0, 0.0), &g2);
        propagate(&sys, &w, t)
    })?;
    let mut duhamel: f64 = 0.0;
    for method in [LinearMethod::NormalForm, LinearMethod::Direct] {
        let opts = LinearOptions { method, tol: 1e-12, ..Default::default() };
        let (h, _) = solve_linearized(&sys, &zero, &f1, &h0, &opts)?;
        duhamel = duhamel.max(h.sub(&exact).c0_hs(2.0) / exact.c0_hs(2.0));
    }
    outcome(
        worst_ri <= 1e-6 && duhamel <= 1e-8 && worst_ball <= 1.0,
        format!("right-inverse residual {worst_ri:.2e} (both methods, ball value <= {worst_ball:.2e}); u = 0 vs Duhamel {duhamel:.2e}"),
    )
}

fn criterion_5() -> Result<Outcome> {
    let cfg = RunConfig::new(ExperimentKind::NoLossSweep);
    let rep = no_loss_sweep(&cfg, None)?;
    let probe = rep.probe.last().map_or("no probe".to_string(), |p| {
        format!(
            "probe at eps {} {} at c x {}",
            p.eps,
            if p.converged { "still converged" } else { "diverged" },
            p.c / cfg.no_loss.c
        )
    });
    outcome(
        rep.pass,
        format!(
            "{} runs, eps 2^-1..2^-5, all converged {}; oracle error {:.2e}; bound ratio spread {:.4}; {probe}",
            rep.records.len(),
            rep.all_converged,
            rep.max_oracle_error.unwrap_or(f64::NAN),
            rep.bound_ratio_spread.unwrap_or(f64::NAN)
        ),
    )
}

fn criterion_6() -> Result<Outcome> {
    let cfg = RunConfig::new(ExperimentKind::WithLossSweep);
    let sw = with_loss_sweep(&cfg)?;
    let fitted = sw.report.fitted_exponent.unwrap_or(f64::NAN);
    let target = sw.sigma + 0.5;
    outcome(
        sw.pass && fitted >= target - 0.1,
        format!("sigma = {:.2} (threshold {:.2}); fitted exponent {fitted:.4} >= {:.2}", sw.sigma, sw.threshold, target - 0.1),
    )
}

/// argmax of 1/(A/r + (B+C) r^{p-1}) over (0, R]: a 10^6-point scan, then a second
/// 10^6-point scan of the bracketing cell.
fn radius_scan(a: f64, b: f64, c: f64, r: f64, p: f64) -> (f64, f64) {
    let delta = |x: f64| 1.0 / (a / x + (b + c) * x.powf(p - 1.0));
    let scan = |lo: f64, hi: f64| {
        let n = 1_000_000;
        let h = (hi - lo) / n as f64;
        (1..=n).map(|i| lo + h * i as f64).fold((lo + h, f64::NEG_INFINITY), |best, x| {
            let v = delta(x);
            if v > best.1 {
                (x, v)
            } else {
                best
            }
        })
    };
    let (x1, _) = scan(0.0, r);
    let h = r / 1e6;
    let (x2, v2) = scan((x1 - h).max(0.0), (x1 + h).min(r));
    (x2, v2)
}

fn criterion_7() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for (a, b, c, r, p) in [
        (1.0, 1.0, 1.0, 10.0, 2.0),
        (2.0, 0.5, 1.0, 3.0, 3.0),
        (1.0, 1.0, 1.0, 0.3, 2.0),
        (3.0, 1.0, 2.0, 7.0, 1.0),
        (0.7, 2.0, 0.1, 5.0, 2.5),
    ] {
        let rep = optimize_radius(a, b, c, r, p)?;
        let (rs, ds) = radius_scan(a, b, c, r, p);
        worst = worst.max((rep.r_star - rs).abs()).max((rep.delta_star - ds).abs());
    }
    let eps: Vec<f64> = (1..=6).map(dyadic_eps).collect();
    let no_loss = branch_slopes(&eps, |e| NmhConfig::no_loss(1, 2, e, 5.0, 1.0).map(|x| x.0), 1.0)?;
    let with_loss = branch_slopes(&eps, |e| NmhConfig::with_loss(1, 2, e, 0.7, 0.5, 1.25, 1.0, 1.0), 1.0)?;
    let gap = |s: [f64; 3]| {
        let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
        hi - lo
    };
    let dslope = gap(no_loss).max(gap(with_loss));
    outcome(
        worst <= 1e-6 && dslope < 0.05,
        format!(
            "radius vs grid scan {worst:.1e}; branch slopes no-loss [{:.3}, {:.3}, {:.3}], with-loss [{:.3}, {:.3}, {:.3}], max gap {dslope:.1e}",
            no_loss[0], no_loss[1], no_loss[2], with_loss[0], with_loss[1], with_loss[2]
        ),
    )
}

fn criterion_8() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut orderings = true;
    let mut shown = Vec::new();
    for d in [2usize, 3] {
        for p in [2u32, 3] {
            for sa in [0.0, d as f64 / 2.0] {
                let row = thresholds(d, p, sa)?;
                let (df, pf) = (d as f64, p as f64);
                // the same quantities over a common denominator 2(p-1)(p+1)p
                let den = 2.0 * (pf - 1.0) * (pf + 1.0) * pf;
                let mr = 1.0 + df / 2.0 - sa;
                let expect = [
                    mr,
                    (2.0 * (pf - 1.0) * (pf + 1.0) + df * (pf - 1.0) * (pf + 1.0) * pf - 2.0 * (pf - 1.0) * (pf + 1.0) * pf * sa) / den,
                    (2.0 + df - 2.0 * sa) / (2.0 * pf),
                    (df * pf - 2.0 * (pf - 1.0) * sa) / (2.0 * (pf - 1.0)),
                    (4.0 * (pf - 1.0) + df * pf - 2.0 * (pf - 1.0) * sa) / (2.0 * (pf - 1.0) * (pf + 1.0)),
                ];
                let got = [row.sigma_mr, row.sigma0, row.sigma1, row.sigma_es.unwrap_or(f64::NAN), row.c.unwrap_or(f64::NAN)];
                for (x, y) in got.iter().zip(&expect) {
                    worst = worst.max((x - y).abs());
                }
                orderings &= row.sigma1 < got[4] && row.sigma0 < got[3];
                orderings &= row.sigma1_below_c == Some(true) && row.sigma0_below_es == Some(true);
                if sa == 0.0 {
                    shown.push(format!("({d},{p}): s0 {:.3} < ES {:.3}, s1 {:.3} < c {:.3}", got[1], got[3], got[2], got[4]));
                }
            }
        }
    }
    outcome(worst <= 1e-12 && orderings, format!("max deviation {worst:.1e}; {}", shown.join("; ")))
}

fn criterion_9() -> Result<Outcome> {
    let cfg = LabConfig::default();
    let rep = run_lab(&cfg, &default_cases(cfg.d))?;
    let failed: Vec<&str> = rep.cases.iter().filter(|c| !c.pass).map(|c| c.case.as_str()).collect();
    let worst_slope = rep.cases.iter().map(|c| c.slope).fold(f64::NEG_INFINITY, f64::max);
    let c2 = rep.sharp.iter().find(|s| s.s == 2.0).map_or(f64::NAN, |s| s.scan);
    outcome(
        rep.pass,
        format!(
            "{} cases x {} samples x {} eps + held-out; worst slope {worst_slope:.4}; sharp C_2 scan {c2:.9}; failing: {}",
            rep.cases.len(),
            cfg.samples,
            cfg.eps.len(),
            if failed.is_empty() { "none".to_string() } else { failed.join(", ") }
        ),
    )
}

/// Smallest observed order of a first-order finite-difference error sequence at t, t/2, ...
fn min_order(errors: &[f64]) -> f64 {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).fold(f64::INFINITY, f64::min)
}

fn criterion_10() -> Result<Outcome> {
    let sys = SystemSpec::benchmark(1, 2);
    let ctx = SemiclassicalContext::new(1, 64, 8.0, 0.5)?;
    let grid = TimeGrid::new(1.0, 16)?;
    let u0 = make_initial_datum(&sys, &gaussian(ProfileKind::Concentrating, 0.4, 1.0, 0.0), &ctx)?.u0;
    let g1 = make_initial_datum(&sys, &gaussian(ProfileKind::Concentrating, 1.0, 0.8, 1.0), &ctx)?.u0;
    let g2 = make_initial_datum(&sys, &gaussian(ProfileKind::Concentrating, 1.0, 1.2, -1.0), &ctx)?.u0;
    let u = Trajectory::from_fn(grid, Stagger::Nodes, |t| propagate(&sys, &u0, t).scale_re(1.0 + 0.5 * t))?;
    let h1 = Trajectory::from_fn(grid, Stagger::Nodes, |t| propagate(&sys, &g1, t).scale_re((2.0 * t).cos()))?;
    let h2 = Trajectory::from_fn(grid, Stagger::Nodes, |t| propagate(&sys, &g2, t).scale_re(1.0 - t))?;

    let (p0, _) = phi_discrete(&sys, &u)?;
    let (d1, _) = phi_prime_discrete(&sys, &u, &h1)?;
    let (d2, _) = phi_prime_discrete(&sys, &u, &h2)?;
    let second = phi_second_discrete(&sys, &u, &h1, &h2)?;
    let ts: Vec<f64> = (0..5).map(|k| 1e-2 * 0.5f64.powi(k)).collect();
    let mut e1 = Vec::new();
    let mut e2 = Vec::new();
    for &t in &ts {
        let ut = u.add(&h1.scale_re(t));
        let (pt, _) = phi_discrete(&sys, &ut)?;
        e1.push(pt.sub(&p0).scale_re(1.0 / t).sub(&d1).c0_hs(0.0) / d1.c0_hs(0.0));
        let (dt2, _) = phi_prime_discrete(&sys, &ut, &h2)?;
        e2.push(dt2.sub(&d2).scale_re(1.0 / t).sub(&second).c0_hs(0.0) / second.c0_hs(0.0));
    }
    let order = min_order(&e1).min(min_order(&e2));

    let (h, _) = solve_linearized(&sys, &u, &d1, &g1, &LinearOptions::default())?;
    let outputs = [
        p0.conjugate_pair_defect(),
        d1.conjugate_pair_defect(),
        second.conjugate_pair_defect(),
        h.conjugate_pair_defect(),
        free_flow(&sys, &u0, grid)?.conjugate_pair_defect(),
    ];
    let conj = outputs.iter().cloned().fold(0.0, f64::max);

    let mut r = rng(1010);
    let mut parseval: f64 = 0.0;
    for _ in 0..10 {
        let f = random_pair(&ctx, &mut r, 20, 1.0)?;
        for g in [f.clone(), f.smooth(2), f.dyadic_block(1), f.eps_derivative(0), f.lambda_eps(1.5)] {
            parseval = parseval.max(g.parseval_defect());
        }
        for sl in phi_discrete(&sys, &Trajectory::from_fn(grid, Stagger::Nodes, |t| propagate(&sys, &f.scale_re(0.2), t))?)?.0.slices {
            parseval = parseval.max(sl.parseval_defect());
        }
    }
    outcome(
        order >= 0.9 && conj <= 1e-12 && parseval <= 1e-12,
        format!("finite-difference order P' {:.3}, P'' {:.3}; conjugate-pair defect {conj:.1e}; Parseval defect {parseval:.1e}", min_order(&e1), min_order(&e2)),
    )
}

type Criterion = fn() -> Result<Outcome>;

fn main() -> ExitCode {
    nmh_core::par::init_pool_from_env();
    let criteria: [(&str, Criterion, f64); 10] = [
        ("homological identity", criterion_1, 10.0),
        ("smoothing axioms", criterion_2, 30.0),
        ("free flow", criterion_3, 30.0),
        ("right inverse", criterion_4, 120.0),
        ("Nash-Moser end-to-end", criterion_5, 600.0),
        ("with-loss decomposition", criterion_6, 600.0),
        ("radius machinery", criterion_7, 5.0),
        ("thresholds table", criterion_8, 1.0),
        ("estimates lab", criterion_9, 300.0),
        ("structural", criterion_10, 120.0),
    ];
    let filter: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failures = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let res = run();
        let secs = t0.elapsed().as_secs_f64();
        let (pass, detail) = match res {
            Ok(o) => (o.pass && secs <= *budget, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failures += 1;
        }
        println!(
            "criterion {id:>2} {:<24} {}  {detail}  [{secs:.1} s, budget {budget} s]",
            name,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
