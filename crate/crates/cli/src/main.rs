use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bfm_core::ensemble::{run_ensemble, EnsembleOptions, PerturbationSpec, VictoryClass};
use bfm_core::files::{load_ensemble, load_scenario};
use bfm_core::output::{output_root, run_dir_name, write_run, DirSink, OUT_ENV};
use bfm_core::scenario::Scenario;
use bfm_core::solver::{run, RunOptions, SnapshotSink};
use bfm_core::units::Side;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bfm", version, about = "Continuum battle-flow infantry combat simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a scenario and its terrain and report what would be run.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Run one scenario and write its run directory.
    Run(RunArgs),
    /// Run seeded perturbations of a scenario and classify the outcomes.
    Ensemble(EnsembleArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    /// Slope and overlay effects on walking speed.
    #[arg(long, value_enum, default_value = "on")]
    terrain: Toggle,
    /// Shorthand for `--terrain off`.
    #[arg(long)]
    no_terrain: bool,
    /// Output root; defaults to $BFM_OUT, then ./runs.
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Row bands per unit box evaluated in parallel.
    #[arg(long, default_value_t = 1)]
    tiles: usize,
    /// Override the simulated duration (s).
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Snapshot interval in simulated seconds; 0 disables snapshots.
    #[arg(long, default_value_t = 60.0)]
    snapshots: f64,
}

#[derive(Args)]
struct EnsembleArgs {
    #[command(flatten)]
    common: Common,
    /// Ensemble description (case count and perturbation bands).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Inclusive case range `a..b`, or a single case.
    #[arg(long)]
    cases: Option<String>,
    /// Case-level workers; defaults to the available cores.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Keep per-unit histories for every case.
    #[arg(long)]
    keep_runs: bool,
}

fn parse_cases(s: &str) -> Result<std::ops::Range<u64>> {
    let s = s.trim();
    let (a, b) = match s.split_once("..") {
        Some((a, b)) => (a, b.trim_start_matches('=')),
        None => (s, s),
    };
    let a: u64 = a.trim().parse().with_context(|| format!("bad case range start in {s:?}"))?;
    let b: u64 = b.trim().parse().with_context(|| format!("bad case range end in {s:?}"))?;
    if b < a {
        bail!("empty case range {s:?}");
    }
    Ok(a..b + 1)
}

fn load(common: &Common) -> Result<Scenario> {
    let mut s = load_scenario(&common.scenario)?;
    if common.terrain == Toggle::Off || common.no_terrain {
        s.params.terrain_effects = false;
    }
    if let Some(d) = common.duration {
        s.params.duration = d;
    }
    s.validate().context("scenario after command-line overrides")?;
    Ok(s)
}

fn validate(path: &Path) -> Result<()> {
    let s = load_scenario(path)?;
    let g = s.map.grid;
    let p = &s.params;
    println!("scenario {}", s.name);
    println!(
        "grid {} x {} cells of {} m ({} x {} m), origin ({}, {})",
        g.nx,
        g.ny,
        g.ds,
        g.width(),
        g.height(),
        g.origin.x,
        g.origin.y
    );
    println!(
        "elevation {:.1} .. {:.1} m, overlay {:.2} .. {:.2}",
        s.map.elevation.min(),
        s.map.elevation.max(),
        s.map.overlay.min(),
        s.map.overlay.max()
    );
    let (blue, red) = s.infantry_totals();
    let (bg, rg) = s.gun_totals();
    let count = |side: Side| s.units.iter().filter(|u| u.side == side).count();
    println!("Blue infantry {blue:.0}, Red infantry {red:.0}");
    println!("Blue guns {bg}, Red guns {rg}");
    println!(
        "flow units: {} blue, {} red; batteries: {}",
        count(Side::Blue),
        count(Side::Red),
        s.artillery.len()
    );
    let limit = p.dt_limit(g.ds);
    println!("dt {} s, limit {:.4} s, margin {:.1}%", p.dt, limit, 100.0 * (1.0 - p.dt / limit));
    println!("duration {} s ({} steps)", p.duration, p.steps());
    println!("parameters:");
    println!("{}", serde_json::to_string_pretty(p)?);
    Ok(())
}

/// Tees snapshots to disk and to the log.
struct Progress<'a> {
    inner: Option<&'a mut DirSink>,
}

impl SnapshotSink for Progress<'_> {
    fn snapshot(&mut self, sim: &bfm_core::solver::Simulation) -> std::io::Result<()> {
        let (b, r) = sim.summaries().iter().fold((0.0, 0.0), |(b, r), u| match u.side {
            Side::Blue => (b + u.strength, r),
            Side::Red => (b, r + u.strength),
        });
        log::info!("t = {:>6.0} s  blue {b:>8.1}  red {r:>8.1}", sim.time);
        match self.inner.as_deref_mut() {
            Some(s) => s.snapshot(sim),
            None => Ok(()),
        }
    }
}

fn run_one(args: &RunArgs) -> Result<()> {
    let s = load(&args.common)?;
    let dir = output_root(args.common.out.as_deref()).join(run_dir_name(&s.name, 0));
    let snapshot_interval = (args.snapshots > 0.0).then_some(args.snapshots);
    let options = RunOptions {
        tiles: args.common.tiles.max(1),
        history_interval: snapshot_interval.unwrap_or(60.0),
        snapshot_interval: Some(snapshot_interval.unwrap_or(60.0)),
    };
    let mut sink = match snapshot_interval {
        Some(_) => Some(DirSink::create(&dir, &s).with_context(|| format!("creating {}", dir.display()))?),
        None => None,
    };
    let mut progress = Progress { inner: sink.as_mut() };
    let result = run(&s, &options, Some(&mut progress))?;
    write_run(&dir, &s, &result).with_context(|| format!("writing {}", dir.display()))?;
    let (bi, bf, bc) = result.side_totals(Side::Blue);
    let (ri, rf, rc) = result.side_totals(Side::Red);
    println!("run directory {}", dir.display());
    println!("Blue {bi:.0} -> {bf:.0} (casualties {bc:.0})");
    println!("Red  {ri:.0} -> {rf:.0} (casualties {rc:.0})");
    for u in &result.units {
        let broke = u.retreat_time.map_or(String::new(), |t| format!(", broke at {t:.0} s"));
        println!(
            "  {:>3} {:<24} {:<4} {:>7.0} -> {:>7.0} {:?}{broke}",
            u.id, u.label, u.side, u.initial_strength, u.final_strength, u.status
        );
    }
    Ok(())
}

fn run_cases(args: &EnsembleArgs) -> Result<ExitCode> {
    let s = load(&args.common)?;
    let (spec, count) = match &args.spec {
        Some(p) => {
            let f = load_ensemble(p)?;
            (f.perturbation, f.cases)
        }
        None => (PerturbationSpec::default(), 100),
    };
    let cases = match &args.cases {
        Some(c) => parse_cases(c)?,
        None => 0..u64::from(count),
    };
    let root = output_root(args.common.out.as_deref()).join(format!("{}-ensemble", s.name));
    let options = EnsembleOptions {
        cases,
        workers: args.workers,
        run: RunOptions {
            tiles: args.common.tiles.max(1),
            ..RunOptions::default()
        },
        write_case_runs: args.keep_runs,
    };
    let report = run_ensemble(&s, &spec, &options, &root)?;
    println!("ensemble directory {}", root.display());
    println!(
        "{} cases ({} reused from disk, {} failed)",
        report.summary.cases,
        report.skipped.len(),
        report.failures.len()
    );
    for c in VictoryClass::ALL {
        println!("  {:<17} {:.4}", c.name(), report.summary.fraction(c));
    }
    if report.failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for (c, e) in &report.failures {
            eprintln!("case {c} failed: {e}");
        }
        let ids: Vec<String> = report.failures.iter().map(|(c, _)| c.to_string()).collect();
        eprintln!("failed cases: {}", ids.join(","));
        Ok(ExitCode::FAILURE)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Validate { scenario } => validate(scenario).map(|_| ExitCode::SUCCESS),
        Command::Run(a) => run_one(a).map(|_| ExitCode::SUCCESS),
        Command::Ensemble(a) => run_cases(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
