//! Time stepping of the coupled density / identity system.
//!
//! Each unit is advanced only inside its active box, the bounding box of its
//! support grown by [`BOX_MARGIN`] cells. Density cannot travel more than one
//! cell per stage, so faces on the box edge carry no flux and the box result
//! equals the full-map result for ρ. Velocity and identity are evaluated
//! only within a few cells of the support; elsewhere the identity is frozen.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::combat::{fire_elevation_angle, ranged_factors, select_target, CombatParams};
use crate::command::{advance_orders, update_morale};
use crate::geom::{angle_between, Vec2};
use crate::kinematics::{GoalTransform, WalkContext};
use crate::scenario::{Scenario, ScenarioError, TimeScheme};
use crate::terrain::{Grid, Raster};
use crate::units::{
    add_artillery_density, artillery_summary, density_moments, init_unit, summary_from_moments, ArtilleryUnit, Side,
    UnitError, UnitState, UnitStatus, UnitSummary,
};

/// Cells kept around a unit's support.
pub const BOX_MARGIN: usize = 4;
/// Stencil reach of the limited upwind scheme.
const HALO: usize = 2;
/// Distance from the support within which identity and velocity are evaluated.
const REACH: usize = 3;
/// Densities below this are dropped after each step (persons/m²).
pub const DENSITY_CUTOFF: f64 = 1e-8;
/// Width of the boundary velocity taper as a fraction of each map dimension.
pub const BOUNDARY_BAND: f64 = 0.02;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("unit {unit}: speed {speed:.3} m/s at cell ({i}, {j}) gives Courant number {courant:.3} ≥ 1")]
    Cfl {
        unit: u32,
        i: usize,
        j: usize,
        speed: f64,
        courant: f64,
    },
    #[error("unit {unit}: non-finite {field} at cell ({i}, {j})")]
    NonFinite {
        unit: u32,
        field: &'static str,
        i: usize,
        j: usize,
    },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Unit(#[from] UnitError),
    #[error("snapshot output failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Harmonic (van Leer) limited slope from the two adjacent differences.
#[inline]
pub fn harmonic_slope(a: f64, b: f64) -> f64 {
    let ab = a * b;
    if ab > 0.0 {
        2.0 * ab / (a + b)
    } else {
        0.0
    }
}

/// Upwind flux through the face between cells `l` and `r`; `q` holds the
/// values at `l-1, l, r, r+1`, and each side moves with its own cell velocity.
#[inline]
pub fn face_flux(u_l: f64, u_r: f64, q: [f64; 4]) -> f64 {
    let mut f = 0.0;
    if u_l > 0.0 {
        f += u_l * (q[1] + 0.5 * harmonic_slope(q[1] - q[0], q[2] - q[1]));
    }
    if u_r < 0.0 {
        f += u_r * (q[2] - 0.5 * harmonic_slope(q[2] - q[1], q[3] - q[2]));
    }
    f
}

/// Limited second-order upwind derivative at the middle of a five-cell stencil.
#[inline]
pub fn upwind_derivative(u: f64, q: [f64; 5], ds: f64) -> f64 {
    if u > 0.0 {
        let here = harmonic_slope(q[2] - q[1], q[3] - q[2]);
        let behind = harmonic_slope(q[1] - q[0], q[2] - q[1]);
        ((q[2] + 0.5 * here) - (q[1] + 0.5 * behind)) / ds
    } else if u < 0.0 {
        let here = harmonic_slope(q[2] - q[1], q[3] - q[2]);
        let ahead = harmonic_slope(q[3] - q[2], q[4] - q[3]);
        ((q[3] - 0.5 * ahead) - (q[2] - 0.5 * here)) / ds
    } else {
        0.0
    }
}

/// `(stage fraction, weight of stage 0 rate, weight of stage 1 rate)`.
fn scheme_weights(s: TimeScheme) -> (f64, f64, f64) {
    match s {
        TimeScheme::Midpoint => (0.5, 0.0, 1.0),
        TimeScheme::Heun => (1.0, 0.5, 0.5),
    }
}

/// Periodic one-dimensional versions of the advection operators.
pub mod line {
    use super::{face_flux, scheme_weights, upwind_derivative};
    use crate::scenario::TimeScheme;

    fn at(q: &[f64], k: isize) -> f64 {
        q[k.rem_euclid(q.len() as isize) as usize]
    }

    /// `-∂(ρu)/∂x` in flux form.
    pub fn density_rate(rho: &[f64], u: &[f64], ds: f64) -> Vec<f64> {
        let n = rho.len() as isize;
        let flux = |k: isize| {
            face_flux(
                at(u, k),
                at(u, k + 1),
                [at(rho, k - 1), at(rho, k), at(rho, k + 1), at(rho, k + 2)],
            )
        };
        (0..n).map(|k| -(flux(k) - flux(k - 1)) / ds).collect()
    }

    /// `-u ∂q/∂x` in advective form.
    pub fn identity_rate(q: &[f64], u: &[f64], ds: f64) -> Vec<f64> {
        let n = q.len() as isize;
        (0..n)
            .map(|k| {
                let s = [at(q, k - 2), at(q, k - 1), at(q, k), at(q, k + 1), at(q, k + 2)];
                -u[k as usize] * upwind_derivative(u[k as usize], s, ds)
            })
            .collect()
    }

    /// One two-stage step of the conservative density update.
    pub fn step(rho: &[f64], u: &[f64], dt: f64, ds: f64, scheme: TimeScheme) -> Vec<f64> {
        let (c, a, b) = scheme_weights(scheme);
        let l0 = density_rate(rho, u, ds);
        let mid: Vec<f64> = rho.iter().zip(&l0).map(|(r, l)| r + c * dt * l).collect();
        let l1 = density_rate(&mid, u, ds);
        rho.iter()
            .zip(l0.iter().zip(&l1))
            .map(|(r, (x, y))| r + dt * (a * x + b * y))
            .collect()
    }

    /// One two-stage step of the advective identity update.
    pub fn step_identity(q: &[f64], u: &[f64], dt: f64, ds: f64, scheme: TimeScheme) -> Vec<f64> {
        let (c, a, b) = scheme_weights(scheme);
        let l0 = identity_rate(q, u, ds);
        let mid: Vec<f64> = q.iter().zip(&l0).map(|(r, l)| r + c * dt * l).collect();
        let l1 = identity_rate(&mid, u, ds);
        q.iter().zip(l0.iter().zip(&l1)).map(|(r, (x, y))| r + dt * (a * x + b * y)).collect()
    }
}

/// Smooth ramp `3t² - 2t³` on `[0, 1]`.
#[inline]
fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Multiplier on the velocity component normal to the nearest edge along
/// one axis with `n` cells: 0 on the border cell, 1 beyond the band.
pub fn taper_profile(n: usize) -> Vec<f64> {
    let band = (BOUNDARY_BAND * n as f64).max(1.0);
    (0..n).map(|k| smoothstep(k.min(n - 1 - k) as f64 / band)).collect()
}

/// Tapers the normal velocity component to zero at the map border.
pub fn boundary_taper(vx: &mut Raster, vy: &mut Raster, grid: &Grid) {
    let tx = taper_profile(grid.nx);
    let ty = taper_profile(grid.ny);
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let c = grid.idx(i, j);
            vx.data[c] *= tx[i];
            vy.data[c] *= ty[j];
        }
    }
}

/// Half-open cell rectangle `[i0, i1) × [j0, j1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CellBox {
    pub i0: usize,
    pub j0: usize,
    pub i1: usize,
    pub j1: usize,
}

impl CellBox {
    pub fn full(grid: &Grid) -> Self {
        Self {
            i0: 0,
            j0: 0,
            i1: grid.nx,
            j1: grid.ny,
        }
    }

    pub fn width(&self) -> usize {
        self.i1 - self.i0
    }

    pub fn height(&self) -> usize {
        self.j1 - self.j0
    }

    pub fn grown(&self, margin: usize, grid: &Grid) -> Self {
        Self {
            i0: self.i0.saturating_sub(margin),
            j0: self.j0.saturating_sub(margin),
            i1: (self.i1 + margin).min(grid.nx),
            j1: (self.j1 + margin).min(grid.ny),
        }
    }
}

/// Bounding box of the positive cells of `rho` inside `within`.
pub fn support_box(rho: &Raster, grid: &Grid, within: CellBox) -> Option<CellBox> {
    let mut found: Option<CellBox> = None;
    for j in within.j0..within.j1 {
        let row = &rho.data[grid.idx(within.i0, j)..grid.idx(within.i0, j) + within.width()];
        let first = row.iter().position(|&v| v > 0.0);
        let Some(first) = first else { continue };
        let last = row.iter().rposition(|&v| v > 0.0).unwrap_or(first);
        let (a, b) = (within.i0 + first, within.i0 + last + 1);
        found = Some(match found {
            None => CellBox {
                i0: a,
                j0: j,
                i1: b,
                j1: j + 1,
            },
            Some(f) => CellBox {
                i0: f.i0.min(a),
                j0: f.j0,
                i1: f.i1.max(b),
                j1: j + 1,
            },
        });
    }
    found
}

/// Losses of one unit, split by cause (persons).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Casualties {
    pub close_in: f64,
    pub ranged: f64,
}

impl Casualties {
    pub fn total(&self) -> f64 {
        self.close_in + self.ranged
    }
}

/// A unit changing status during a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StatusEvent {
    pub time: f64,
    pub unit: u32,
    pub status: UnitStatus,
}

/// Box-local copy of one unit's fields with a [`HALO`]-cell rim.
#[derive(Debug, Clone, Default)]
struct Patch {
    bx: Option<CellBox>,
    w: usize,
    h: usize,
    rho: Vec<f64>,
    xi_x: Vec<f64>,
    xi_y: Vec<f64>,
}

impl Patch {
    fn load(&mut self, u: &UnitState, bx: CellBox, grid: &Grid) {
        self.bx = Some(bx);
        self.w = bx.width() + 2 * HALO;
        self.h = bx.height() + 2 * HALO;
        let n = self.w * self.h;
        for v in [&mut self.rho, &mut self.xi_x, &mut self.xi_y] {
            v.clear();
            v.resize(n, 0.0);
        }
        for b in 0..self.h {
            let gj = bx.j0 as isize + b as isize - HALO as isize;
            for a in 0..self.w {
                let gi = bx.i0 as isize + a as isize - HALO as isize;
                let k = b * self.w + a;
                if gi >= 0 && gj >= 0 && (gi as usize) < grid.nx && (gj as usize) < grid.ny {
                    let c = grid.idx(gi as usize, gj as usize);
                    self.rho[k] = u.density.data[c];
                    self.xi_x[k] = u.identity_x.data[c];
                    self.xi_y[k] = u.identity_y.data[c];
                } else {
                    // Outside the map: empty, identity equal to the ghost cell position.
                    self.xi_x[k] = grid.origin.x + (gi as f64 + 0.5) * grid.ds;
                    self.xi_y[k] = grid.origin.y + (gj as f64 + 0.5) * grid.ds;
                }
            }
        }
    }

    #[inline]
    fn local(&self, a: usize, b: usize) -> usize {
        (b + HALO) * self.w + a + HALO
    }
}

/// Per-cell stage output: `[dρ/dt, dξx/dt, dξy/dt, ω', ω'']`.
type CellRate = [f64; 5];

#[derive(Debug, Clone, Default)]
struct Workspace {
    q0: Patch,
    s1: Patch,
    velocity: Vec<Vec2>,
    near: Vec<bool>,
    l0: Vec<CellRate>,
    l1: Vec<CellRate>,
}

struct StageShared<'a> {
    grid: &'a Grid,
    ctx: WalkContext<'a>,
    total: &'a Raster,
    sides: &'a [Raster; 2],
    taper_x: &'a [f64],
    taper_y: &'a [f64],
    k_close: f64,
    closein_floor: f64,
    diffusion: f64,
    tiles: usize,
}

struct UnitStage<'a> {
    goal: &'a GoalTransform,
    matrix: [[f64; 2]; 2],
    enemy_side: usize,
    ranged: f64,
}

fn side_index(s: Side) -> usize {
    match s {
        Side::Red => 0,
        Side::Blue => 1,
    }
}

/// Splits `data` (rows of `row_len`) into `tiles` row bands processed in parallel.
fn for_row_bands<T: Send>(data: &mut [T], row_len: usize, tiles: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    let rows = data.len() / row_len.max(1);
    if tiles <= 1 || rows < 2 {
        f(0, data);
        return;
    }
    let per = rows.div_ceil(tiles);
    data.par_chunks_mut(per * row_len)
        .enumerate()
        .for_each(|(k, chunk)| f(k * per, chunk));
}

/// Marks the box cells of `p` with density within [`REACH`] cells. Cells
/// outside the mask have no flux, no sinks, and keep their identity.
fn near_mask(p: &Patch, out: &mut Vec<bool>) {
    let bx = p.bx.expect("loaded patch");
    let (bw, bh) = (bx.width(), bx.height());
    // Row pass over the whole patch, then column pass restricted to the box.
    let mut rows = vec![false; p.w * p.h];
    for b in 0..p.h {
        let line = &p.rho[b * p.w..(b + 1) * p.w];
        let mut last: Option<usize> = None;
        for (a, &r) in line.iter().enumerate() {
            if r > 0.0 {
                let lo = a.saturating_sub(REACH).max(last.map_or(0, |l| l + 1));
                for x in lo..(a + REACH + 1).min(p.w) {
                    rows[b * p.w + x] = true;
                }
                last = Some((a + REACH).min(p.w - 1));
            }
        }
    }
    out.clear();
    out.resize(bw * bh, false);
    for bj in 0..bh {
        let pb = bj + HALO;
        let (lo, hi) = (pb.saturating_sub(REACH), (pb + REACH + 1).min(p.h));
        for a in 0..bw {
            let pa = a + HALO;
            out[bj * bw + a] = (lo..hi).any(|y| rows[y * p.w + pa]);
        }
    }
}

/// Velocities of the box cells of `p`.
fn stage_velocity(p: &Patch, near: &[bool], unit: &UnitStage<'_>, sh: &StageShared<'_>, out: &mut Vec<Vec2>) {
    let bx = p.bx.expect("loaded patch");
    let (bw, bh) = (bx.width(), bx.height());
    out.clear();
    out.resize(bw * bh, Vec2::ZERO);
    let grid = sh.grid;
    for_row_bands(out, bw, sh.tiles, |first, chunk| {
        for (r, row) in chunk.chunks_mut(bw).enumerate() {
            let b = first + r;
            let gj = bx.j0 + b;
            for (a, v) in row.iter_mut().enumerate() {
                if !near[b * bw + a] {
                    continue;
                }
                let gi = bx.i0 + a;
                let c = grid.idx(gi, gj);
                let k = p.local(a, b);
                let xi = Vec2::new(p.xi_x[k], p.xi_y[k]);
                let d = sh.ctx.directed_with(grid.center(gi, gj), xi, unit.goal, &unit.matrix, sh.total.data[c], c);
                *v = Vec2::new(d.x * sh.taper_x[gi], d.y * sh.taper_y[gj]);
            }
        }
    });
}

/// Rates of change over the box cells of `p` given its velocities.
fn stage_rates(p: &Patch, near: &[bool], vel: &[Vec2], unit: &UnitStage<'_>, sh: &StageShared<'_>, out: &mut Vec<CellRate>) {
    let bx = p.bx.expect("loaded patch");
    let (bw, bh) = (bx.width(), bx.height());
    out.clear();
    out.resize(bw * bh, [0.0; 5]);
    let grid = sh.grid;
    let ds = grid.ds;
    let d = sh.diffusion;
    let pw = p.w;
    // Velocity of box-local cell (a, b); zero outside the box.
    let v = |a: isize, b: isize| -> Vec2 {
        if a < 0 || b < 0 || a >= bw as isize || b >= bh as isize {
            Vec2::ZERO
        } else {
            vel[b as usize * bw + a as usize]
        }
    };
    let enemy = &sh.sides[unit.enemy_side];
    let rho = &p.rho;
    // Flux through the south face of every cell in row `b`.
    let south_faces = |b: isize, faces: &mut Vec<f64>| {
        faces.clear();
        for a in 0..bw {
            let k = p.local(a, 0) as isize + b * pw as isize;
            let col = |o: isize| rho[(k + o * pw as isize) as usize];
            let ai = a as isize;
            faces.push(face_flux(v(ai, b - 1).y, v(ai, b).y, [col(-2), col(-1), col(0), col(1)]));
        }
    };
    for_row_bands(out, bw, sh.tiles, |first, chunk| {
        let mut below = Vec::with_capacity(bw);
        let mut above = Vec::with_capacity(bw);
        let mut west = vec![0.0; bw + 1];
        south_faces(first as isize, &mut below);
        for (r, row) in chunk.chunks_mut(bw).enumerate() {
            let b = (first + r) as isize;
            let gj = bx.j0 + b as usize;
            south_faces(b + 1, &mut above);
            let row0 = p.local(0, b as usize);
            let q = |a: isize| rho[(row0 as isize + a) as usize];
            for (a, f) in west.iter_mut().enumerate() {
                let a = a as isize;
                *f = face_flux(v(a - 1, b).x, v(a, b).x, [q(a - 2), q(a - 1), q(a), q(a + 1)]);
            }
            for (a, cell) in row.iter_mut().enumerate() {
                if !near[b as usize * bw + a] {
                    continue;
                }
                let k = row0 + a;
                let at = |f: &[f64], dx: isize, dy: isize| f[(k as isize + dx + dy * pw as isize) as usize];
                let mut div = (west[a + 1] - west[a] + above[a] - below[a]) / ds;
                let here = rho[k];
                let mut u = vel[b as usize * bw + a];
                if d > 0.0 {
                    let lap = at(rho, 1, 0) + at(rho, -1, 0) + at(rho, 0, 1) + at(rho, 0, -1) - 4.0 * here;
                    div -= d * lap / (ds * ds);
                    if here >= crate::kinematics::DIFFUSION_DENSITY_FLOOR {
                        let gx = (at(rho, 1, 0) - at(rho, -1, 0)) / (2.0 * ds);
                        let gy = (at(rho, 0, 1) - at(rho, 0, -1)) / (2.0 * ds);
                        u = u - Vec2::new(gx, gy) * (d / here);
                    }
                }
                let stencil_x = |f: &[f64]| [at(f, -2, 0), at(f, -1, 0), f[k], at(f, 1, 0), at(f, 2, 0)];
                let stencil_y = |f: &[f64]| [at(f, 0, -2), at(f, 0, -1), f[k], at(f, 0, 1), at(f, 0, 2)];
                let dxi_x =
                    -(u.x * upwind_derivative(u.x, stencil_x(&p.xi_x), ds) + u.y * upwind_derivative(u.y, stencil_y(&p.xi_x), ds));
                let dxi_y =
                    -(u.x * upwind_derivative(u.x, stencil_x(&p.xi_y), ds) + u.y * upwind_derivative(u.y, stencil_y(&p.xi_y), ds));
                let c = grid.idx(bx.i0 + a, gj);
                let close = if here > 0.0 && sh.k_close > 0.0 {
                    crate::combat::closein_taper(here, sh.closein_floor) * here * sh.k_close * enemy.data[c]
                } else {
                    0.0
                };
                let ranged = here * unit.ranged;
                *cell = [-div - close - ranged, dxi_x, dxi_y, close, ranged];
            }
            std::mem::swap(&mut below, &mut above);
        }
    });
}

/// Row-ordered sums of `(ω', ω'')` over a stage.
fn sink_totals(rates: &[CellRate], bw: usize) -> (f64, f64) {
    let (mut c, mut r) = (0.0, 0.0);
    for row in rates.chunks(bw) {
        let (mut rc, mut rr) = (0.0, 0.0);
        for cell in row {
            rc += cell[3];
            rr += cell[4];
        }
        c += rc;
        r += rr;
    }
    (c, r)
}

/// Options that do not change the physics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    /// Row bands per unit box evaluated in parallel.
    pub tiles: usize,
    /// Interval of the strength history (s).
    pub history_interval: f64,
    /// Interval of field snapshots (s); `None` disables them.
    pub snapshot_interval: Option<f64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            tiles: 1,
            history_interval: 60.0,
            snapshot_interval: Some(60.0),
        }
    }
}

/// Receives the simulation state at snapshot times.
pub trait SnapshotSink {
    fn snapshot(&mut self, sim: &Simulation) -> std::io::Result<()>;
}

/// State of a run in progress.
pub struct Simulation {
    pub scenario: Scenario,
    pub units: Vec<UnitState>,
    pub artillery: Vec<ArtilleryUnit>,
    pub time: f64,
    pub steps_taken: usize,
    pub casualties: Vec<Casualties>,
    /// Mass added by clamping negative densities (persons, per unit).
    pub clamped_mass: Vec<f64>,
    /// Mass removed by the density cutoff (persons, per unit).
    pub trimmed_mass: Vec<f64>,
    pub events: Vec<StatusEvent>,
    grad_x: Raster,
    grad_y: Raster,
    static_density: Raster,
    total: Raster,
    sides: [Raster; 2],
    dirty: Vec<CellBox>,
    taper_x: Vec<f64>,
    taper_y: Vec<f64>,
    tiles: usize,
    work: Vec<Workspace>,
}

impl Simulation {
    pub fn new(scenario: Scenario, tiles: usize) -> Result<Self, SolverError> {
        scenario.validate()?;
        let grid = scenario.map.grid;
        let mut units = scenario
            .units
            .iter()
            .map(|s| init_unit(s, &grid))
            .collect::<Result<Vec<_>, _>>()?;
        units.sort_by_key(|u| u.id);
        let mut artillery = scenario.artillery.clone();
        artillery.sort_by_key(|a| a.id);
        let mut static_density = Raster::zeros(&grid);
        for a in &artillery {
            add_artillery_density(&mut static_density, a, &grid);
        }
        let (grad_x, grad_y) = scenario.map.gradient_field();
        let n = units.len();
        Ok(Self {
            units,
            artillery,
            time: 0.0,
            steps_taken: 0,
            casualties: vec![Casualties::default(); n],
            clamped_mass: vec![0.0; n],
            trimmed_mass: vec![0.0; n],
            events: Vec::new(),
            grad_x,
            grad_y,
            total: static_density.clone(),
            static_density,
            sides: [Raster::zeros(&grid), Raster::zeros(&grid)],
            dirty: Vec::new(),
            taper_x: taper_profile(grid.nx),
            taper_y: taper_profile(grid.ny),
            tiles: tiles.max(1),
            work: vec![Workspace::default(); n],
            scenario,
        })
    }

    pub fn grid(&self) -> Grid {
        self.scenario.map.grid
    }

    fn active_box(&self, k: usize) -> Option<CellBox> {
        let grid = self.grid();
        let within = self.work[k]
            .q0
            .bx
            .map(|b| b.grown(HALO, &grid))
            .unwrap_or_else(|| CellBox::full(&grid));
        support_box(&self.units[k].density, &grid, within)
    }

    /// Summaries of every flow unit, in id order.
    pub fn summaries(&self) -> Vec<UnitSummary> {
        let grid = self.grid();
        self.units
            .iter()
            .enumerate()
            .map(|(k, u)| {
                let m = match self.active_box(k) {
                    Some(b) => density_moments(&u.density, &grid, (b.i0, b.i1), (b.j0, b.j1)),
                    None => (0.0, 0.0, 0.0),
                };
                summary_from_moments(u, &grid, m)
            })
            .collect()
    }

    pub fn artillery_summaries(&self) -> Vec<UnitSummary> {
        self.artillery.iter().map(artillery_summary).collect()
    }

    /// Crowd density of all units and batteries at the current state.
    pub fn total_density(&self) -> Raster {
        let mut t = self.static_density.clone();
        for u in &self.units {
            for (d, s) in t.data.iter_mut().zip(&u.density.data) {
                *d += s;
            }
        }
        t
    }

    /// Summed density of one side's flow units.
    pub fn side_density(&self, side: Side) -> Raster {
        let mut t = Raster::zeros(&self.grid());
        for u in self.units.iter().filter(|u| u.side == side) {
            for (d, s) in t.data.iter_mut().zip(&u.density.data) {
                *d += s;
            }
        }
        t
    }

    /// Per-unit ranged loss coefficients `Σ k' f R / N` for this step.
    fn ranged_coefficients(&self, flow: &[UnitSummary], guns: &[UnitSummary]) -> Vec<f64> {
        let p: &CombatParams = &self.scenario.params.combat;
        let mut coeff = vec![0.0; flow.len()];
        if !self.scenario.params.ranged {
            return coeff;
        }
        let half = p.sector_half_angle();
        let map = &self.scenario.map;
        let terrain = self.scenario.params.terrain_effects;
        let attackers = flow
            .iter()
            .filter(|s| !s.destroyed && s.status != UnitStatus::Retreating)
            .chain(guns.iter());
        for att in attackers {
            let t = select_target(att, flow, half);
            let Some(def_id) = t.defender else { continue };
            let Some(k) = flow.iter().position(|s| s.id == def_id) else { continue };
            let def = &flow[k];
            let (Some(ca), Some(cd)) = (att.centroid, def.centroid) else { continue };
            let theta = if terrain {
                fire_elevation_angle(ca, map.elevation_at(ca), cd, map.elevation_at(cd))
            } else {
                0.0
            };
            let beta = angle_between(att.bearing, def.bearing);
            let (k_prime, r0, speed) = if att.artillery {
                (p.k_ranged_artillery, p.range_artillery, 0.0)
            } else {
                (p.k_ranged_infantry, p.range_infantry, att.mean_speed)
            };
            let f = ranged_factors(t.range, t.off_bearing, beta, theta, speed, r0, p);
            coeff[k] += k_prime * f.product() * att.strength / p.ranged_normalization;
        }
        coeff
    }

    /// Resets the density accumulators and adds the given patches.
    fn rebuild_density(&mut self, use_stage: bool) {
        let grid = self.grid();
        for b in self.dirty.drain(..) {
            for j in b.j0..b.j1 {
                let s = grid.idx(b.i0, j);
                let e = s + b.width();
                self.total.data[s..e].copy_from_slice(&self.static_density.data[s..e]);
                self.sides[0].data[s..e].fill(0.0);
                self.sides[1].data[s..e].fill(0.0);
            }
        }
        for (u, w) in self.units.iter().zip(&self.work) {
            let p = if use_stage { &w.s1 } else { &w.q0 };
            let Some(b) = p.bx else { continue };
            let side = side_index(u.side);
            for bj in 0..b.height() {
                let c0 = grid.idx(b.i0, b.j0 + bj);
                let k0 = p.local(0, bj);
                for a in 0..b.width() {
                    let v = p.rho[k0 + a];
                    self.total.data[c0 + a] += v;
                    self.sides[side].data[c0 + a] += v;
                }
            }
            self.dirty.push(b);
        }
    }

    /// Serial phase: morale, orders and ranged-fire bookkeeping.
    fn command_phase(&mut self) -> Vec<f64> {
        let p = self.scenario.params;
        let mut flow = self.summaries();
        let before: Vec<UnitStatus> = self.units.iter().map(|u| u.status).collect();
        update_morale(&mut self.units, &mut flow, p.combat.sector_half_angle(), &p.command);
        let guns = self.artillery_summaries();
        let everyone: Vec<UnitSummary> = flow.iter().chain(guns.iter()).cloned().collect();
        for (u, own) in self.units.iter_mut().zip(&flow) {
            advance_orders(u, own, &everyone, self.time, p.dt, &p.command);
        }
        for (k, u) in self.units.iter().enumerate() {
            if u.status != before[k] {
                log::debug!("t = {:.0} s: unit {} is now {:?}", self.time, u.id, u.status);
                self.events.push(StatusEvent {
                    time: self.time,
                    unit: u.id,
                    status: u.status,
                });
            }
            flow[k].status = u.status;
            flow[k].bearing = u.bearing();
        }
        self.ranged_coefficients(&flow, &guns)
    }

    /// Advances the whole system by one time step.
    pub fn step(&mut self) -> Result<(), SolverError> {
        let ranged = self.command_phase();
        let grid = self.grid();
        let params = self.scenario.params;
        let dt = params.dt;
        let (c1, wa, wb) = scheme_weights(params.scheme);

        for k in 0..self.units.len() {
            let bx = self.active_box(k).map(|b| b.grown(BOX_MARGIN, &grid));
            match bx {
                Some(b) => self.work[k].q0.load(&self.units[k], b, &grid),
                None => self.work[k].q0.bx = None,
            }
        }
        self.rebuild_density(false);

        let shared_parts = (
            params.combat.k_close * f64::from(u8::from(params.close_in)),
            params.combat.closein_floor_fraction * params.kinematics.max_density,
        );
        let taper_x = std::mem::take(&mut self.taper_x);
        let taper_y = std::mem::take(&mut self.taper_y);

        // Stage 1.
        {
            let sh = StageShared {
                grid: &grid,
                ctx: WalkContext {
                    map: &self.scenario.map,
                    grad_x: &self.grad_x,
                    grad_y: &self.grad_y,
                    params: &params.kinematics,
                    terrain_effects: params.terrain_effects,
                },
                total: &self.total,
                sides: &self.sides,
                taper_x: &taper_x,
                taper_y: &taper_y,
                k_close: shared_parts.0,
                closein_floor: shared_parts.1,
                diffusion: params.kinematics.diffusion,
                tiles: self.tiles,
            };
            self.work
                .par_iter_mut()
                .zip(self.units.par_iter_mut())
                .zip(ranged.par_iter())
                .for_each(|((w, u), &rc)| {
                    if w.q0.bx.is_none() {
                        w.s1.bx = None;
                        u.mean_speed = 0.0;
                        return;
                    }
                    let stage = UnitStage {
                        goal: &u.goal,
                        matrix: u.goal.matrix(),
                        enemy_side: side_index(u.side.enemy()),
                        ranged: rc,
                    };
                    near_mask(&w.q0, &mut w.near);
                    stage_velocity(&w.q0, &w.near, &stage, &sh, &mut w.velocity);
                    stage_rates(&w.q0, &w.near, &w.velocity, &stage, &sh, &mut w.l0);
                    let (mut m, mut mv) = (0.0, 0.0);
                    for (k, v) in w.velocity.iter().enumerate() {
                        let bw = w.q0.bx.map_or(1, |b| b.width());
                        let r = w.q0.rho[w.q0.local(k % bw, k / bw)];
                        m += r;
                        mv += r * v.norm();
                    }
                    u.mean_speed = if m > 0.0 { mv / m } else { 0.0 };
                    w.s1.clone_from(&w.q0);
                    let bw = w.q0.bx.map_or(1, |b| b.width());
                    for (k, rate) in w.l0.iter().enumerate() {
                        let idx = w.s1.local(k % bw, k / bw);
                        w.s1.rho[idx] = (w.q0.rho[idx] + c1 * dt * rate[0]).max(0.0);
                        w.s1.xi_x[idx] = w.q0.xi_x[idx] + c1 * dt * rate[1];
                        w.s1.xi_y[idx] = w.q0.xi_y[idx] + c1 * dt * rate[2];
                    }
                });
        }
        for (k, w) in self.work.iter().enumerate() {
            if let Some(b) = w.q0.bx {
                self.check_courant(k, &w.velocity, b)?;
            }
        }
        self.rebuild_density(true);

        // Stage 2.
        {
            let sh = StageShared {
                grid: &grid,
                ctx: WalkContext {
                    map: &self.scenario.map,
                    grad_x: &self.grad_x,
                    grad_y: &self.grad_y,
                    params: &params.kinematics,
                    terrain_effects: params.terrain_effects,
                },
                total: &self.total,
                sides: &self.sides,
                taper_x: &taper_x,
                taper_y: &taper_y,
                k_close: shared_parts.0,
                closein_floor: shared_parts.1,
                diffusion: params.kinematics.diffusion,
                tiles: self.tiles,
            };
            self.work
                .par_iter_mut()
                .zip(self.units.par_iter())
                .zip(ranged.par_iter())
                .for_each(|((w, u), &rc)| {
                    if w.s1.bx.is_none() {
                        return;
                    }
                    let stage = UnitStage {
                        goal: &u.goal,
                        matrix: u.goal.matrix(),
                        enemy_side: side_index(u.side.enemy()),
                        ranged: rc,
                    };
                    near_mask(&w.s1, &mut w.near);
                    stage_velocity(&w.s1, &w.near, &stage, &sh, &mut w.velocity);
                    stage_rates(&w.s1, &w.near, &w.velocity, &stage, &sh, &mut w.l1);
                });
        }
        self.taper_x = taper_x;
        self.taper_y = taper_y;

        let area = grid.cell_area();
        for k in 0..self.units.len() {
            let w = &self.work[k];
            let Some(b) = w.q0.bx else { continue };
            let bw = b.width();
            let (c0, r0) = sink_totals(&w.l0, bw);
            let (cs, rs) = sink_totals(&w.l1, bw);
            self.casualties[k].close_in += dt * (wa * c0 + wb * cs) * area;
            self.casualties[k].ranged += dt * (wa * r0 + wb * rs) * area;
            let u = &mut self.units[k];
            let (mut clamped, mut trimmed) = (0.0, 0.0);
            for bj in 0..b.height() {
                for a in 0..bw {
                    let idx = w.q0.local(a, bj);
                    let r = bj * bw + a;
                    let (x, y) = (w.l0[r], w.l1[r]);
                    let mut rho = w.q0.rho[idx] + dt * (wa * x[0] + wb * y[0]);
                    let xi_x = w.q0.xi_x[idx] + dt * (wa * x[1] + wb * y[1]);
                    let xi_y = w.q0.xi_y[idx] + dt * (wa * x[2] + wb * y[2]);
                    let (gi, gj) = (b.i0 + a, b.j0 + bj);
                    for (field, v) in [("density", rho), ("identity", xi_x), ("identity", xi_y)] {
                        if !v.is_finite() {
                            return Err(SolverError::NonFinite {
                                unit: u.id,
                                field,
                                i: gi,
                                j: gj,
                            });
                        }
                    }
                    if rho < 0.0 {
                        clamped -= rho;
                        rho = 0.0;
                    } else if rho < DENSITY_CUTOFF {
                        trimmed += rho;
                        rho = 0.0;
                    }
                    let c = grid.idx(gi, gj);
                    u.density.data[c] = rho;
                    u.identity_x.data[c] = xi_x;
                    u.identity_y.data[c] = xi_y;
                }
            }
            self.clamped_mass[k] += clamped * area;
            self.trimmed_mass[k] += trimmed * area;
        }
        self.steps_taken += 1;
        self.time = self.steps_taken as f64 * dt;
        Ok(())
    }

    fn check_courant(&self, k: usize, vel: &[Vec2], b: CellBox) -> Result<(), SolverError> {
        let p = &self.scenario.params;
        let scale = p.dt / self.grid().ds;
        for (n, v) in vel.iter().enumerate() {
            let speed = v.norm();
            if !speed.is_finite() || speed * scale >= 1.0 {
                let (i, j) = (b.i0 + n % b.width(), b.j0 + n / b.width());
                if !speed.is_finite() {
                    return Err(SolverError::NonFinite {
                        unit: self.units[k].id,
                        field: "velocity",
                        i,
                        j,
                    });
                }
                return Err(SolverError::Cfl {
                    unit: self.units[k].id,
                    i,
                    j,
                    speed,
                    courant: speed * scale,
                });
            }
        }
        Ok(())
    }
}

/// Final state of one flow unit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitOutcome {
    pub id: u32,
    pub label: String,
    pub side: Side,
    pub initial_strength: f64,
    pub final_strength: f64,
    pub casualties: Casualties,
    pub status: UnitStatus,
    pub morale: f64,
    /// Time the unit first broke, if it did.
    pub retreat_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub scenario: String,
    pub duration: f64,
    pub unit_ids: Vec<u32>,
    /// Times of the history rows (s).
    pub times: Vec<f64>,
    /// `strength[row][unit]` (persons).
    pub strength: Vec<Vec<f64>>,
    /// Cumulative casualties, `casualties[row][unit]` (persons).
    pub casualties: Vec<Vec<f64>>,
    pub units: Vec<UnitOutcome>,
    pub events: Vec<StatusEvent>,
    pub clamped_mass: f64,
    pub trimmed_mass: f64,
}

impl RunResult {
    /// Summed `(initial, final, casualties)` of one side's infantry.
    pub fn side_totals(&self, side: Side) -> (f64, f64, f64) {
        self.units
            .iter()
            .filter(|u| u.side == side)
            .fold((0.0, 0.0, 0.0), |(i, f, c), u| {
                (i + u.initial_strength, f + u.final_strength, c + u.casualties.total())
            })
    }
}

fn record(sim: &Simulation, times: &mut Vec<f64>, strength: &mut Vec<Vec<f64>>, casualties: &mut Vec<Vec<f64>>) {
    times.push(sim.time);
    strength.push(sim.summaries().iter().map(|s| s.strength).collect());
    casualties.push(sim.casualties.iter().map(|c| c.total()).collect());
}

/// Runs a scenario to completion.
pub fn run(scenario: &Scenario, options: &RunOptions, mut sink: Option<&mut dyn SnapshotSink>) -> Result<RunResult, SolverError> {
    let mut sim = Simulation::new(scenario.clone(), options.tiles)?;
    let steps = scenario.params.steps();
    let dt = scenario.params.dt;
    let every = |interval: f64| ((interval / dt).round() as usize).max(1);
    let history_every = every(options.history_interval);
    let snapshot_every = options.snapshot_interval.map(every);

    let (mut times, mut strength, mut casualties) = (Vec::new(), Vec::new(), Vec::new());
    record(&sim, &mut times, &mut strength, &mut casualties);
    if let Some(s) = sink.as_deref_mut() {
        if snapshot_every.is_some() {
            s.snapshot(&sim)?;
        }
    }
    for n in 1..=steps {
        sim.step()?;
        if n % history_every == 0 || n == steps {
            record(&sim, &mut times, &mut strength, &mut casualties);
        }
        if let (Some(s), Some(e)) = (sink.as_deref_mut(), snapshot_every) {
            if n % e == 0 || n == steps {
                s.snapshot(&sim)?;
            }
        }
    }
    let finals = sim.summaries();
    let units = sim
        .units
        .iter()
        .zip(&finals)
        .zip(&sim.casualties)
        .map(|((u, s), c)| UnitOutcome {
            id: u.id,
            label: u.label.clone(),
            side: u.side,
            initial_strength: u.initial_strength,
            final_strength: s.strength,
            casualties: *c,
            status: u.status,
            morale: u.morale.value,
            retreat_time: sim
                .events
                .iter()
                .find(|e| e.unit == u.id && e.status == UnitStatus::Retreating)
                .map(|e| e.time),
        })
        .collect();
    Ok(RunResult {
        scenario: scenario.name.clone(),
        duration: sim.time,
        unit_ids: sim.units.iter().map(|u| u.id).collect(),
        times,
        strength,
        casualties,
        units,
        events: sim.events.clone(),
        clamped_mass: sim.clamped_mass.iter().sum(),
        trimmed_mass: sim.trimmed_mass.iter().sum(),
    })
}
