//! Data-parallel core against its sequential fallback: one calibration batch of the
//! estimates lab, and the slices of a free-flow trajectory.
//!
//! Build with `--no-default-features` to make `par::map_range` sequential as well.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use nmh_core::estimates::{evaluate_case, CaseId, CaseInput, FunctionEnsemble, InequalityCase, LabConfig};
use nmh_core::evolution::propagate;
use nmh_core::par;
use nmh_core::spectral::SemiclassicalContext;
use nmh_core::system::{make_initial_datum, BaseProfile, DataProfile, ProfileKind, SystemSpec};

fn batch(c: &mut Criterion) {
    let cfg = LabConfig::default();
    let ctx = cfg.context(0.125).unwrap();
    let ens = FunctionEnsemble::new(cfg.seed, 64, cfg.band);
    let case = InequalityCase::new(CaseId::KpCommutator, 2.5, 1.0).unwrap();
    let cap = (cfg.n / 4) as i64;
    let eval = |i: usize| {
        let (_, u) = ens.field(&ctx, 2 * i as u64, cap).unwrap();
        let (_, v) = ens.field(&ctx, 2 * i as u64 + 1, cap).unwrap();
        evaluate_case(&case, CaseInput::Fields(&u, &v)).map(|e| e.ratio).unwrap_or(0.0)
    };
    let mut g = c.benchmark_group("estimates_batch");
    g.sample_size(20);
    for n in [16usize, 64] {
        g.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, &n| b.iter(|| black_box(par::map_range(n, eval))));
        g.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, &n| {
            b.iter(|| black_box(par::map_range_seq(n, eval)))
        });
    }
    g.finish();
}

fn trajectory(c: &mut Criterion) {
    let sys = SystemSpec::benchmark(1, 2);
    let ctx = SemiclassicalContext::new(1, 1024, 16.0, 0.0625).unwrap();
    let prof = DataProfile {
        kind: ProfileKind::Oscillating { xi0: [1.0, 0.0] },
        sigma: 0.0,
        base: BaseProfile::Gaussian { amplitude: 1.0, width: 1.0, center: [0.0, 0.0] },
        weights: vec![],
    };
    let u0 = make_initial_datum(&sys, &prof, &ctx).unwrap().u0;
    let steps = 256;
    let slice = |k: usize| propagate(&sys, &u0, k as f64 / steps as f64).hs_eps(2.0);
    let mut g = c.benchmark_group("free_flow_slices");
    g.sample_size(20);
    g.bench_function("parallel", |b| b.iter(|| black_box(par::map_range(steps + 1, slice))));
    g.bench_function("sequential", |b| b.iter(|| black_box(par::map_range_seq(steps + 1, slice))));
    g.finish();
}

criterion_group!(benches, batch, trajectory);
criterion_main!(benches);
