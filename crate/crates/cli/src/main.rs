use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nmh_core::experiments::{run, thresholds, ExperimentKind, RunConfig};
use nmh_core::par;

#[derive(Parser)]
#[command(name = "nmh", version, about = "Semiclassical Schrodinger systems: pseudospectral solver, Nash-Moser experiments and estimate checks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration (TOML or JSON), or a manifest.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated dyadic eps values, e.g. 0.5,0.25,0.125.
    #[arg(long, value_delimiter = ',')]
    eps: Option<Vec<f64>>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run sweeps below the with-loss threshold instead of rejecting them.
    #[arg(long)]
    probe_below: bool,
    /// Solve even when the datum lies outside the admissible ball.
    #[arg(long)]
    force: bool,
    /// Load systems that fail the transparency check.
    #[arg(long)]
    allow_nontransparent: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve one no-loss Cauchy problem (first eps) and write the trajectory.
    Solve(Common),
    /// No-loss sweep over eps with oracle check and a probe outside the ball.
    NoLossSweep(Common),
    /// With-loss decomposition sweep over eps.
    WithLossSweep(Common),
    /// Randomized calibration of the product and commutator inequalities.
    VerifyEstimates(Common),
    /// Single NMH solve with its iteration trace and a higher-regularity audit.
    NmhDemo(Common),
    /// Radius maximizing 1/(A/r + (B+C) r^{p-1}) on (0, R].
    Radius {
        #[arg(long = "A")]
        a: f64,
        #[arg(long = "B")]
        b: f64,
        #[arg(long = "C")]
        c: f64,
        #[arg(long = "R")]
        r: f64,
        #[arg(long)]
        p: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Threshold table; with --d and --p prints a single row.
    Thresholds {
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        p: Option<u32>,
        #[arg(long, default_value_t = 0.0)]
        sigma_a: f64,
        #[command(flatten)]
        common: Common,
    },
}

fn build(kind: ExperimentKind, c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::new(kind),
    };
    cfg.kind = kind;
    if let Some(e) = &c.eps {
        cfg.eps = e.clone();
    }
    if c.sigma.is_some() {
        cfg.sigma = c.sigma;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.probe_below |= c.probe_below;
    cfg.force |= c.force;
    cfg.allow_nontransparent |= c.allow_nontransparent;
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<bool> {
    let cfg = match &cli.cmd {
        Cmd::Solve(c) => build(ExperimentKind::Solve, c)?,
        Cmd::NoLossSweep(c) => build(ExperimentKind::NoLossSweep, c)?,
        Cmd::WithLossSweep(c) => build(ExperimentKind::WithLossSweep, c)?,
        Cmd::VerifyEstimates(c) => build(ExperimentKind::VerifyEstimates, c)?,
        Cmd::NmhDemo(c) => build(ExperimentKind::NmhDemo, c)?,
        Cmd::Radius { a, b, c, r, p, common } => {
            let mut cfg = build(ExperimentKind::Radius, common)?;
            cfg.radius.a = *a;
            cfg.radius.b = *b;
            cfg.radius.c = *c;
            cfg.radius.r = *r;
            cfg.radius.p = *p;
            cfg
        }
        Cmd::Thresholds { d, p, sigma_a, common } => {
            match (d, p) {
                (Some(d), Some(p)) => {
                    let row = thresholds(*d, *p, *sigma_a)?;
                    let na = |v: Option<f64>| v.map_or("N/A".to_string(), |x| format!("{x:.6}"));
                    println!("sigma_MR = {:.6}", row.sigma_mr);
                    println!("sigma0   = {:.6}", row.sigma0);
                    println!("sigma1   = {:.6}", row.sigma1);
                    println!("sigma_ES = {}", na(row.sigma_es));
                    println!("c        = {}", na(row.c));
                    return Ok(true);
                }
                (None, None) => {}
                _ => bail!("--d and --p go together"),
            }
            build(ExperimentKind::Thresholds, common)?
        }
    };
    let out = run(&cfg)?;
    for l in &out.lines {
        println!("{l}");
    }
    println!("run directory: {}", out.dir.display());
    println!("{}", if out.pass { "all checks passed" } else { "some checks FAILED" });
    Ok(out.pass)
}

fn main() -> ExitCode {
    par::init_pool_from_env();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
