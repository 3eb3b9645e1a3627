//! Seeded scenario perturbations, victory classification and ensemble runs.
//!
//! Case `k` draws from a PCG-64 stream seeded with `k`. The draw order is fixed:
//! units (flow units and batteries together) in id order; for a flow unit the
//! centre x, y, then every order point x, y, then the facing bearing and every
//! order bearing, then width, depth, morale, strength and march speed
//! multipliers; for a battery its position x, y and bearing. After all units
//! come the global multipliers for `k`, `k'` and the ranges `R_0`. Shape
//! redraws for over-dense formations consume further width/depth pairs.

use std::fs;
use std::io;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_distr::{Distribution, Normal, Uniform};
use rand_pcg::Pcg64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::command::Order;
use crate::geom::{wrap_angle, Vec2};
use crate::output::{run_dir_name, write_run};
use crate::scenario::{Scenario, ScenarioError};
use crate::solver::{run, RunOptions, RunResult, SolverError};
use crate::terrain::Grid;
use crate::units::{formation_density, Side, UnitError, UnitStatus};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationSpec {
    /// Standard deviation of every initial and goal position component (m).
    pub position_sigma: f64,
    /// Standard deviation of every bearing (degrees).
    pub bearing_sigma_deg: f64,
    /// Multiplier band for shape, morale, strength and march speed.
    pub unit_band: [f64; 2],
    /// Global multiplier band for `k`, `k'` and `R_0`.
    pub combat_band: [f64; 2],
    /// Shape redraws allowed per unit before the case is rejected.
    pub max_redraws: u32,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            position_sigma: 100.0,
            bearing_sigma_deg: 10.0,
            unit_band: [0.8, 1.2],
            combat_band: [0.5, 2.0],
            max_redraws: 100,
        }
    }
}

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("case {case}: unit {id} still invalid after {tries} shape redraws: {source}")]
    Redraws {
        case: u64,
        id: u32,
        tries: u32,
        #[source]
        source: UnitError,
    },
    #[error("case {case}: {source}")]
    Scenario {
        case: u64,
        #[source]
        source: ScenarioError,
    },
    #[error("case {case}: {source}")]
    Solver {
        case: u64,
        #[source]
        source: SolverError,
    },
    #[error("case {case}: {source}")]
    Io {
        case: u64,
        #[source]
        source: io::Error,
    },
    #[error("perturbation band {name} = [{lo}, {hi}] is not a valid positive interval")]
    Band { name: &'static str, lo: f64, hi: f64 },
}

fn band(name: &'static str, b: [f64; 2]) -> Result<Uniform<f64>, EnsembleError> {
    let [lo, hi] = b;
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(EnsembleError::Band { name, lo, hi });
    }
    Ok(Uniform::new_inclusive(lo, hi))
}

fn clamp_to_map(p: Vec2, g: &Grid) -> Vec2 {
    let m = 2.0 * g.ds;
    Vec2::new(
        p.x.clamp(g.origin.x + m, g.origin.x + g.width() - m),
        p.y.clamp(g.origin.y + m, g.origin.y + g.height() - m),
    )
}

enum Slot {
    Flow(usize),
    Battery(usize),
}

/// Perturbed copy of `base` for case `case_id`; case 0 is `base` itself.
pub fn perturb_scenario(base: &Scenario, case_id: u64, spec: &PerturbationSpec) -> Result<Scenario, EnsembleError> {
    let mut s = base.clone();
    if case_id == 0 {
        return Ok(s);
    }
    let unit_band = band("unit_band", spec.unit_band)?;
    let combat_band = band("combat_band", spec.combat_band)?;
    let pos = Normal::new(0.0, spec.position_sigma.max(0.0)).expect("finite sigma");
    let ang = Normal::new(0.0, spec.bearing_sigma_deg.max(0.0)).expect("finite sigma");
    let mut rng = Pcg64::seed_from_u64(case_id);
    let g = s.map.grid;
    let shift = |rng: &mut Pcg64, p: Vec2| {
        let dx = pos.sample(rng);
        let dy = pos.sample(rng);
        clamp_to_map(p + Vec2::new(dx, dy), &g)
    };

    let mut slots: Vec<(u32, Slot)> = s
        .units
        .iter()
        .enumerate()
        .map(|(k, u)| (u.id, Slot::Flow(k)))
        .chain(s.artillery.iter().enumerate().map(|(k, a)| (a.id, Slot::Battery(k))))
        .collect();
    slots.sort_by_key(|(id, _)| *id);

    for (_, slot) in slots {
        match slot {
            Slot::Flow(k) => {
                let u = &mut s.units[k];
                u.formation.center = shift(&mut rng, u.formation.center);
                for o in &mut u.orders {
                    if let Order::TranslateTo { point } | Order::Flank { point, .. } = o {
                        *point = shift(&mut rng, *point);
                    }
                }
                let turn = ang.sample(&mut rng).to_radians();
                u.formation.bearing = wrap_angle(u.formation.bearing + turn);
                for o in &mut u.orders {
                    if let Order::RotateTo { bearing } | Order::Flank { bearing, .. } = o {
                        *bearing += ang.sample(&mut rng);
                    }
                }
                let (w0, d0) = (u.formation.width, u.formation.depth);
                u.formation.width = w0 * unit_band.sample(&mut rng);
                u.formation.depth = d0 * unit_band.sample(&mut rng);
                u.initial_morale *= unit_band.sample(&mut rng);
                u.formation.strength *= unit_band.sample(&mut rng);
                u.march_speed *= unit_band.sample(&mut rng);
                let mut tries = 0;
                while let Err(e) = formation_density(u.id, &u.formation, &g) {
                    if tries == spec.max_redraws {
                        return Err(EnsembleError::Redraws {
                            case: case_id,
                            id: u.id,
                            tries,
                            source: e,
                        });
                    }
                    tries += 1;
                    log::debug!("case {case_id}: redrawing shape of unit {} ({e})", u.id);
                    u.formation.width = w0 * unit_band.sample(&mut rng);
                    u.formation.depth = d0 * unit_band.sample(&mut rng);
                }
            }
            Slot::Battery(k) => {
                let a = &mut s.artillery[k];
                a.position = shift(&mut rng, a.position);
                a.bearing = wrap_angle(a.bearing + ang.sample(&mut rng).to_radians());
            }
        }
    }

    let c = &mut s.params.combat;
    let k = combat_band.sample(&mut rng);
    let kr = combat_band.sample(&mut rng);
    let r0 = combat_band.sample(&mut rng);
    c.k_close *= k;
    c.k_ranged_infantry *= kr;
    c.k_ranged_artillery *= kr;
    c.range_infantry *= r0;
    c.range_artillery *= r0;
    s.validate().map_err(|source| EnsembleError::Scenario { case: case_id, source })?;
    Ok(s)
}

/// Outcome class from the end-of-run Red retreat fractions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VictoryClass {
    ConclusiveUnion,
    ThinUnion,
    Confederate,
}

impl VictoryClass {
    pub const ALL: [VictoryClass; 3] = [Self::ConclusiveUnion, Self::ThinUnion, Self::Confederate];

    pub fn name(self) -> &'static str {
        match self {
            Self::ConclusiveUnion => "conclusive-union",
            Self::ThinUnion => "thin-union",
            Self::Confederate => "confederate",
        }
    }
}

impl std::fmt::Display for VictoryClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Red retreat measures `(initial, survivors, retreating)` in persons.
pub fn red_retreat(result: &RunResult) -> (f64, f64, f64) {
    result
        .units
        .iter()
        .filter(|u| u.side == Side::Red)
        .fold((0.0, 0.0, 0.0), |(i, s, r), u| {
            let back = if u.status == UnitStatus::Retreating { u.final_strength } else { 0.0 };
            (i + u.initial_strength, s + u.final_strength, r + back)
        })
}

/// Classifies from `(initial, survivors, retreating)` Red persons.
///
/// The conclusive threshold is relative to survivors and the Confederate one to
/// the initial total. No survivors counts as conclusive.
pub fn classify_totals(initial: f64, survivors: f64, retreating: f64) -> VictoryClass {
    if survivors <= 0.0 || retreating >= 0.5 * survivors {
        VictoryClass::ConclusiveUnion
    } else if retreating <= 0.1 * initial {
        VictoryClass::Confederate
    } else {
        VictoryClass::ThinUnion
    }
}

pub fn classify(result: &RunResult) -> VictoryClass {
    let (i, s, r) = red_retreat(result);
    classify_totals(i, s, r)
}

/// Per-case record written as `case.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case: u64,
    pub class: VictoryClass,
    pub blue_initial: f64,
    pub red_initial: f64,
    pub blue_final: f64,
    pub red_final: f64,
    pub red_retreating: f64,
    pub times: Vec<f64>,
    pub blue_history: Vec<f64>,
    pub red_history: Vec<f64>,
}

impl CaseRecord {
    pub fn from_result(case: u64, result: &RunResult) -> Self {
        let (blue_initial, blue_final, _) = result.side_totals(Side::Blue);
        let (red_initial, red_final, _) = result.side_totals(Side::Red);
        let (_, _, red_retreating) = red_retreat(result);
        let side_row = |side: Side| -> Vec<f64> {
            result
                .strength
                .iter()
                .map(|row| {
                    row.iter()
                        .zip(&result.units)
                        .filter(|(_, u)| u.side == side)
                        .map(|(s, _)| s)
                        .sum()
                })
                .collect()
        };
        Self {
            case,
            class: classify(result),
            blue_initial,
            red_initial,
            blue_final,
            red_final,
            red_retreating,
            times: result.times.clone(),
            blue_history: side_row(Side::Blue),
            red_history: side_row(Side::Red),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassShare {
    pub class: VictoryClass,
    pub count: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub cases: usize,
    pub classes: Vec<ClassShare>,
}

impl EnsembleSummary {
    pub fn fraction(&self, class: VictoryClass) -> f64 {
        self.classes.iter().find(|c| c.class == class).map_or(0.0, |c| c.fraction)
    }
}

/// Class fractions over a set of cases; order-independent.
pub fn aggregate(records: &[CaseRecord]) -> EnsembleSummary {
    let n = records.len();
    let classes = VictoryClass::ALL
        .iter()
        .map(|&class| {
            let count = records.iter().filter(|r| r.class == class).count();
            ClassShare {
                class,
                count,
                fraction: if n == 0 { 0.0 } else { count as f64 / n as f64 },
            }
        })
        .collect();
    EnsembleSummary { cases: n, classes }
}

#[derive(Debug, Clone)]
pub struct EnsembleOptions {
    pub cases: Range<u64>,
    /// Case-level worker threads; 0 means one per available core.
    pub workers: usize,
    pub run: RunOptions,
    /// Keep per-unit histories for every case.
    pub write_case_runs: bool,
}

#[derive(Debug)]
pub struct EnsembleReport {
    pub records: Vec<CaseRecord>,
    pub summary: EnsembleSummary,
    /// Cases found complete on disk and not rerun.
    pub skipped: Vec<u64>,
    pub failures: Vec<(u64, String)>,
}

fn case_dir(root: &Path, name: &str, case: u64) -> PathBuf {
    root.join("cases").join(run_dir_name(name, case))
}

fn load_record(path: &Path) -> Option<CaseRecord> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

/// Runs one case end to end without touching the disk.
pub fn run_case(base: &Scenario, case: u64, spec: &PerturbationSpec, options: &RunOptions) -> Result<(Scenario, RunResult), EnsembleError> {
    let scenario = perturb_scenario(base, case, spec)?;
    let result = run(&scenario, options, None).map_err(|source| EnsembleError::Solver { case, source })?;
    Ok((scenario, result))
}

fn execute(base: &Scenario, case: u64, spec: &PerturbationSpec, options: &EnsembleOptions, root: &Path) -> Result<CaseRecord, EnsembleError> {
    let io_err = |source| EnsembleError::Io { case, source };
    let run_opts = RunOptions {
        snapshot_interval: None,
        ..options.run
    };
    let (scenario, result) = run_case(base, case, spec, &run_opts)?;
    let record = CaseRecord::from_result(case, &result);
    let dir = case_dir(root, &base.name, case);
    fs::create_dir_all(&dir).map_err(io_err)?;
    if options.write_case_runs {
        write_run(&dir, &scenario, &result).map_err(io_err)?;
    }
    // case.json marks completion, so it is written last via a rename.
    let tmp = dir.join("case.json.tmp");
    let json = serde_json::to_string(&record).map_err(|e| io_err(io::Error::other(e)))?;
    fs::write(&tmp, json).map_err(io_err)?;
    fs::rename(&tmp, dir.join("case.json")).map_err(io_err)?;
    Ok(record)
}

/// Runs the requested cases, skipping those already complete under `root`,
/// then writes `summary.csv`, `classes.csv` and `histories.csv` over every
/// requested case that has a record.
pub fn run_ensemble(base: &Scenario, spec: &PerturbationSpec, options: &EnsembleOptions, root: &Path) -> Result<EnsembleReport, EnsembleError> {
    band("unit_band", spec.unit_band)?;
    band("combat_band", spec.combat_band)?;
    fs::create_dir_all(root).map_err(|source| EnsembleError::Io { case: 0, source })?;
    let cases: Vec<u64> = options.cases.clone().collect();
    let mut done = Vec::new();
    let mut todo = Vec::new();
    for &c in &cases {
        match load_record(&case_dir(root, &base.name, c).join("case.json")) {
            Some(r) => done.push(r),
            None => todo.push(c),
        }
    }
    let skipped: Vec<u64> = done.iter().map(|r| r.case).collect();
    log::info!("{} cases requested, {} already complete", cases.len(), skipped.len());

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers)
        .build()
        .map_err(|e| EnsembleError::Io {
            case: 0,
            source: io::Error::other(e),
        })?;
    let outcomes: Vec<(u64, Result<CaseRecord, EnsembleError>)> = pool.install(|| {
        todo.par_iter()
            .map(|&c| {
                let r = execute(base, c, spec, options, root);
                match &r {
                    Ok(rec) => log::info!("case {c}: {}", rec.class),
                    Err(e) => log::warn!("case {c} failed: {e}"),
                }
                (c, r)
            })
            .collect()
    });
    let mut failures = Vec::new();
    for (c, r) in outcomes {
        match r {
            Ok(rec) => done.push(rec),
            Err(e) => failures.push((c, e.to_string())),
        }
    }
    done.sort_by_key(|r| r.case);
    let summary = aggregate(&done);
    write_tables(root, &done, &summary).map_err(|source| EnsembleError::Io { case: 0, source })?;
    Ok(EnsembleReport {
        records: done,
        summary,
        skipped,
        failures,
    })
}

#[derive(Serialize)]
struct SummaryRow {
    case: u64,
    blue_initial: f64,
    red_initial: f64,
    blue_final: f64,
    red_final: f64,
    red_retreating: f64,
    class: VictoryClass,
}

#[derive(Serialize)]
struct HistoryRow {
    case: u64,
    time: f64,
    blue: f64,
    red: f64,
}

fn write_tables(root: &Path, records: &[CaseRecord], summary: &EnsembleSummary) -> io::Result<()> {
    let err = io::Error::other;
    let mut w = csv::Writer::from_path(root.join("summary.csv")).map_err(err)?;
    for r in records {
        w.serialize(SummaryRow {
            case: r.case,
            blue_initial: r.blue_initial,
            red_initial: r.red_initial,
            blue_final: r.blue_final,
            red_final: r.red_final,
            red_retreating: r.red_retreating,
            class: r.class,
        })
        .map_err(err)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(root.join("classes.csv")).map_err(err)?;
    for c in &summary.classes {
        w.serialize(c).map_err(err)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(root.join("histories.csv")).map_err(err)?;
    for r in records {
        for ((&time, &blue), &red) in r.times.iter().zip(&r.blue_history).zip(&r.red_history) {
            w.serialize(HistoryRow { case: r.case, time, blue, red }).map_err(err)?;
        }
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::ModelParams;
    use crate::terrain::TerrainMap;
    use crate::units::{ArtilleryUnit, FormationSpec, UnitSeed};
    use std::f64::consts::PI;

    pub(crate) fn base() -> Scenario {
        let grid = Grid::new(100, 60, 8.0, Vec2::ZERO).unwrap();
        let seed = |id, side, x: f64, bearing: f64, orders| UnitSeed {
            id,
            label: format!("u{id}"),
            side,
            formation: FormationSpec {
                center: Vec2::new(x, 240.0),
                width: 150.0,
                depth: 30.0,
                bearing,
                strength: 900.0,
                density_cap: 5.6,
            },
            orders,
            initial_morale: 1.0,
            march_speed: 0.6,
        };
        Scenario {
            name: "pair".into(),
            map: TerrainMap::flat(grid, 1.0),
            units: vec![
                seed(
                    2,
                    Side::Red,
                    150.0,
                    0.0,
                    vec![
                        Order::RotateTo { bearing: 0.0 },
                        Order::TranslateTo {
                            point: Vec2::new(500.0, 240.0),
                        },
                    ],
                ),
                seed(1, Side::Blue, 650.0, PI, vec![Order::FaceNearestEnemy]),
            ],
            artillery: vec![ArtilleryUnit {
                id: 5,
                label: "bty".into(),
                side: Side::Blue,
                position: Vec2::new(700.0, 300.0),
                guns: 6,
                bearing: PI,
                peak_density: 0.56,
                footprint_scale: 20.0,
            }],
            params: ModelParams::default(),
        }
    }

    #[test]
    fn case_zero_is_the_baseline() {
        let b = base();
        assert_eq!(perturb_scenario(&b, 0, &PerturbationSpec::default()).unwrap(), b);
    }

    #[test]
    fn cases_are_reproducible_and_distinct() {
        let b = base();
        let spec = PerturbationSpec::default();
        let a1 = perturb_scenario(&b, 7, &spec).unwrap();
        let a2 = perturb_scenario(&b, 7, &spec).unwrap();
        let c = perturb_scenario(&b, 8, &spec).unwrap();
        assert_eq!(a1, a2);
        assert_ne!(a1.units[0].formation.center, c.units[0].formation.center);
        assert_ne!(a1.params.combat.k_close, b.params.combat.k_close);
        // One global factor scales both ranged coefficients.
        let ri = a1.params.combat.k_ranged_infantry / b.params.combat.k_ranged_infantry;
        let ra = a1.params.combat.k_ranged_artillery / b.params.combat.k_ranged_artillery;
        assert!((ri - ra).abs() < 1e-12);
        assert!((0.5..=2.0).contains(&ri));
    }

    #[test]
    fn narrow_bands_collapse_to_the_baseline() {
        let b = base();
        let spec = PerturbationSpec {
            position_sigma: 0.0,
            bearing_sigma_deg: 0.0,
            unit_band: [1.0, 1.0],
            combat_band: [1.0, 1.0],
            max_redraws: 0,
        };
        let p = perturb_scenario(&b, 3, &spec).unwrap();
        assert_eq!(p, b);
    }

    #[test]
    fn classification_thresholds() {
        assert_eq!(classify_totals(10000.0, 8000.0, 4800.0), VictoryClass::ConclusiveUnion);
        assert_eq!(classify_totals(10000.0, 8000.0, 400.0), VictoryClass::Confederate);
        assert_eq!(classify_totals(10000.0, 8000.0, 2000.0), VictoryClass::ThinUnion);
        assert_eq!(classify_totals(10000.0, 0.0, 0.0), VictoryClass::ConclusiveUnion);
        // Both clauses hold: the survivor clause wins.
        assert_eq!(classify_totals(10000.0, 100.0, 60.0), VictoryClass::ConclusiveUnion);
    }

    #[test]
    fn aggregate_partitions_unity() {
        let rec = |case, class| CaseRecord {
            case,
            class,
            blue_initial: 1.0,
            red_initial: 1.0,
            blue_final: 1.0,
            red_final: 1.0,
            red_retreating: 0.0,
            times: vec![],
            blue_history: vec![],
            red_history: vec![],
        };
        let rs: Vec<_> = (0..7).map(|k| rec(k, VictoryClass::ALL[(k % 3) as usize])).collect();
        let s = aggregate(&rs);
        let total: f64 = s.classes.iter().map(|c| c.fraction).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(s.fraction(VictoryClass::ConclusiveUnion), 3.0 / 7.0);
        let same: Vec<_> = (0..4).map(|k| rec(k, VictoryClass::ThinUnion)).collect();
        assert_eq!(aggregate(&same).fraction(VictoryClass::ThinUnion), 1.0);
        let mut rev = rs.clone();
        rev.reverse();
        assert_eq!(aggregate(&rev), s);
    }

    #[test]
    fn bad_band_is_rejected() {
        let spec = PerturbationSpec {
            unit_band: [1.2, 0.8],
            ..Default::default()
        };
        assert!(matches!(perturb_scenario(&base(), 1, &spec), Err(EnsembleError::Band { .. })));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn perturbation_depends_only_on_case(case in 1u64..1_000_000) {
            let spec = PerturbationSpec::default();
            let a = perturb_scenario(&base(), case, &spec).unwrap();
            let b = perturb_scenario(&base(), case, &spec).unwrap();
            proptest::prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn combat_multipliers_average_to_band_mean() {
        let spec = PerturbationSpec::default();
        let b = base();
        let n = 2000;
        let (mut k, mut r0) = (0.0, 0.0);
        for case in 1..=n {
            let s = perturb_scenario(&b, case, &spec).unwrap();
            k += s.params.combat.k_close / b.params.combat.k_close;
            r0 += s.params.combat.range_infantry / b.params.combat.range_infantry;
        }
        // Uniform on [0.5, 2]: mean 1.25, standard error about 0.01 here.
        let (k, r0) = (k / n as f64, r0 / n as f64);
        assert!((k - 1.25).abs() < 0.04, "{k}");
        assert!((r0 - 1.25).abs() < 0.04, "{r0}");
    }
}
