//! Flow-unit state, formation initialization and discrete artillery.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::command::{MoraleState, Order, OrderQueue};
use crate::geom::Vec2;
use crate::kinematics::GoalTransform;
use crate::terrain::{Grid, Raster};

/// Units whose total falls below this many persons count as destroyed.
pub const DESTROYED_THRESHOLD: f64 = 1.0;

/// Subsamples per cell axis used to anti-alias formation edges.
const COVERAGE_SAMPLES: usize = 8;

/// Artillery footprints are cut off beyond this many decay scales.
const ARTILLERY_CUTOFF_SCALES: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum UnitError {
    #[error("unit {id}: formation width and depth must be positive")]
    BadShape { id: u32 },
    #[error("unit {id}: strength must be positive, got {strength}")]
    BadStrength { id: u32, strength: f64 },
    #[error("unit {id}: implied density {density:.4}/m² exceeds the cap {cap:.4}/m²")]
    TooDense { id: u32, density: f64, cap: f64 },
    #[error("unit {id}: formation does not intersect the map")]
    OffMap { id: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Red,
    Blue,
}

impl Side {
    pub fn enemy(self) -> Side {
        match self {
            Side::Red => Side::Blue,
            Side::Blue => Side::Red,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Red => "red",
            Side::Blue => "blue",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitStatus {
    Active,
    Retreating,
    Pressing,
}

/// Initial rectangle of a flow unit. `depth` runs along the bearing,
/// `width` across it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormationSpec {
    pub center: Vec2,
    pub width: f64,
    pub depth: f64,
    /// Facing direction, radians counter-clockwise from east.
    pub bearing: f64,
    pub strength: f64,
    /// Largest admissible uniform density (persons/m²).
    pub density_cap: f64,
}

impl FormationSpec {
    pub fn uniform_density(&self) -> f64 {
        self.strength / (self.width * self.depth)
    }

    fn contains(&self, p: Vec2, forward: Vec2, lateral: Vec2) -> bool {
        let d = p - self.center;
        d.dot(forward).abs() <= 0.5 * self.depth && d.dot(lateral).abs() <= 0.5 * self.width
    }
}

/// Density raster of a formation: uniform fill, anti-aliased over one cell,
/// rescaled so it integrates to the formation strength.
pub fn formation_density(id: u32, spec: &FormationSpec, grid: &Grid) -> Result<Raster, UnitError> {
    if !(spec.width > 0.0 && spec.depth > 0.0) {
        return Err(UnitError::BadShape { id });
    }
    if !(spec.strength > 0.0 && spec.strength.is_finite()) {
        return Err(UnitError::BadStrength {
            id,
            strength: spec.strength,
        });
    }
    let density = spec.uniform_density();
    if density > spec.density_cap {
        return Err(UnitError::TooDense {
            id,
            density,
            cap: spec.density_cap,
        });
    }
    let forward = Vec2::from_angle(spec.bearing);
    let lateral = Vec2::new(-forward.y, forward.x);
    let reach = 0.5 * spec.width.hypot(spec.depth) + grid.ds;
    let (i0, i1) = grid.column_range(spec.center.x - reach, spec.center.x + reach);
    let (j0, j1) = grid.row_range(spec.center.y - reach, spec.center.y + reach);

    let n = COVERAGE_SAMPLES;
    let sub = grid.ds / n as f64;
    let mut raster = Raster::zeros(grid);
    let mut covered = 0.0;
    for j in j0..j1 {
        for i in i0..i1 {
            let corner = grid.center(i, j) - Vec2::new(0.5 * grid.ds, 0.5 * grid.ds);
            let mut hits = 0usize;
            for sj in 0..n {
                for si in 0..n {
                    let p = corner + Vec2::new((si as f64 + 0.5) * sub, (sj as f64 + 0.5) * sub);
                    if spec.contains(p, forward, lateral) {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                let frac = hits as f64 / (n * n) as f64;
                raster.set(i, j, frac * density);
                covered += frac;
            }
        }
    }
    if covered == 0.0 {
        return Err(UnitError::OffMap { id });
    }
    let total = raster.sum() * grid.cell_area();
    let scale = spec.strength / total;
    for v in &mut raster.data {
        *v *= scale;
    }
    Ok(raster)
}

/// Scenario description of one flow unit before initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSeed {
    pub id: u32,
    pub label: String,
    pub side: Side,
    pub formation: FormationSpec,
    pub orders: Vec<Order>,
    pub initial_morale: f64,
    /// Ordered marching speed of the goal center (m/s).
    pub march_speed: f64,
}

/// One continuum unit during a run.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitState {
    pub id: u32,
    pub label: String,
    pub side: Side,
    /// ρ (persons/m²).
    pub density: Raster,
    /// ξ, the initial-formation position carried by each parcel.
    pub identity_x: Raster,
    pub identity_y: Raster,
    pub initial_bearing: f64,
    pub goal: GoalTransform,
    pub morale: MoraleState,
    pub initial_strength: f64,
    pub orders: OrderQueue,
    pub status: UnitStatus,
    /// Enemy being pursued while pressing the attack.
    pub pursuit: Option<u32>,
    pub march_speed: f64,
    /// Density-weighted mean walking speed from the latest field evaluation.
    pub mean_speed: f64,
}

impl UnitState {
    /// Current facing direction.
    pub fn bearing(&self) -> f64 {
        self.initial_bearing + self.goal.theta
    }
}

/// Builds the starting state of a flow unit.
pub fn init_unit(seed: &UnitSeed, grid: &Grid) -> Result<UnitState, UnitError> {
    let density = formation_density(seed.id, &seed.formation, grid)?;
    let identity_x = Raster::from_fn(grid, |i, j| grid.center(i, j).x);
    let identity_y = Raster::from_fn(grid, |i, j| grid.center(i, j).y);
    Ok(UnitState {
        id: seed.id,
        label: seed.label.clone(),
        side: seed.side,
        density,
        identity_x,
        identity_y,
        initial_bearing: seed.formation.bearing,
        goal: GoalTransform::identity(seed.formation.center),
        morale: MoraleState::new(seed.initial_morale),
        initial_strength: seed.formation.strength,
        orders: OrderQueue::new(seed.orders.clone()),
        status: UnitStatus::Active,
        pursuit: None,
        march_speed: seed.march_speed,
        mean_speed: 0.0,
    })
}

/// Immobile battery. Deals ranged fire, takes no losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtilleryUnit {
    pub id: u32,
    pub label: String,
    pub side: Side,
    pub position: Vec2,
    pub guns: u32,
    /// Facing direction (rad); fixed toward the enemy line at scenario start.
    pub bearing: f64,
    /// Peak of the obstacle footprint (persons/m²).
    pub peak_density: f64,
    /// Gaussian footprint scale (m).
    pub footprint_scale: f64,
}

/// Obstacle footprint of a battery: `peak · exp(-(r/scale)²)`.
pub fn artillery_density(a: &ArtilleryUnit, grid: &Grid) -> Raster {
    let mut r = Raster::zeros(grid);
    add_artillery_density(&mut r, a, grid);
    r
}

pub fn add_artillery_density(target: &mut Raster, a: &ArtilleryUnit, grid: &Grid) {
    let reach = ARTILLERY_CUTOFF_SCALES * a.footprint_scale;
    let (i0, i1) = grid.column_range(a.position.x - reach, a.position.x + reach);
    let (j0, j1) = grid.row_range(a.position.y - reach, a.position.y + reach);
    for j in j0..j1 {
        for i in i0..i1 {
            let d = grid.center(i, j).distance(a.position);
            if d <= reach {
                let q = d / a.footprint_scale;
                target.data[grid.idx(i, j)] += a.peak_density * (-q * q).exp();
            }
        }
    }
}

/// Aggregate view of a unit used by targeting, morale and orders.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSummary {
    pub id: u32,
    pub side: Side,
    /// Total persons `R = Σ ρ ds²` (guns for artillery).
    pub strength: f64,
    /// Density-weighted mean position; `None` when destroyed.
    pub centroid: Option<Vec2>,
    pub mean_speed: f64,
    pub bearing: f64,
    pub status: UnitStatus,
    pub destroyed: bool,
    pub artillery: bool,
}

/// Row-ordered moments `(Σρ, Σρx, Σρy)` over rows `j0..j1` and columns `i0..i1`.
pub fn density_moments(rho: &Raster, grid: &Grid, cols: (usize, usize), rows: (usize, usize)) -> (f64, f64, f64) {
    let (mut m0, mut mx, mut my) = (0.0, 0.0, 0.0);
    for j in rows.0..rows.1 {
        let (mut r0, mut rx, mut ry) = (0.0, 0.0, 0.0);
        let y = grid.center(0, j).y;
        for i in cols.0..cols.1 {
            let v = rho.data[grid.idx(i, j)];
            if v != 0.0 {
                r0 += v;
                rx += v * grid.center(i, 0).x;
                ry += v * y;
            }
        }
        m0 += r0;
        mx += rx;
        my += ry;
    }
    (m0, mx, my)
}

pub fn summary_from_moments(u: &UnitState, grid: &Grid, moments: (f64, f64, f64)) -> UnitSummary {
    let (m0, mx, my) = moments;
    let strength = m0 * grid.cell_area();
    let destroyed = strength < DESTROYED_THRESHOLD;
    let centroid = (m0 > 0.0).then(|| Vec2::new(mx / m0, my / m0));
    UnitSummary {
        id: u.id,
        side: u.side,
        strength,
        centroid: if destroyed { None } else { centroid },
        mean_speed: u.mean_speed,
        bearing: u.bearing(),
        status: u.status,
        destroyed,
        artillery: false,
    }
}

/// Strength, centroid, speed and bearing of a flow unit.
pub fn unit_summary(u: &UnitState, grid: &Grid) -> UnitSummary {
    let m = density_moments(&u.density, grid, (0, grid.nx), (0, grid.ny));
    summary_from_moments(u, grid, m)
}

pub fn artillery_summary(a: &ArtilleryUnit) -> UnitSummary {
    UnitSummary {
        id: a.id,
        side: a.side,
        strength: a.guns as f64,
        centroid: Some(a.position),
        mean_speed: 0.0,
        bearing: a.bearing,
        status: UnitStatus::Active,
        destroyed: false,
        artillery: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::new(80, 60, 8.0, Vec2::ZERO).unwrap()
    }

    fn spec(strength: f64, width: f64, depth: f64, bearing: f64) -> FormationSpec {
        FormationSpec {
            center: Vec2::new(320.0, 240.0),
            width,
            depth,
            bearing,
            strength,
            density_cap: 5.6,
        }
    }

    fn seed(formation: FormationSpec) -> UnitSeed {
        UnitSeed {
            id: 19,
            label: "Kemper".into(),
            side: Side::Red,
            formation,
            orders: vec![],
            initial_morale: 1.0,
            march_speed: 0.6,
        }
    }

    #[test]
    fn uniform_fill_integrates_to_strength() {
        let g = grid();
        // Facing north: 200 m across, 50 m deep.
        let s = spec(1000.0, 200.0, 50.0, std::f64::consts::FRAC_PI_2);
        let u = init_unit(&seed(s), &g).unwrap();
        let sum = unit_summary(&u, &g);
        assert!((sum.strength - 1000.0).abs() < 1.0);
        let (i, j) = g.locate(s.center).unwrap();
        assert!((u.density.get(i, j) - 0.1).abs() < 1e-3);
        assert!((sum.centroid.unwrap() - s.center).norm() < 1e-9);
    }

    #[test]
    fn table_strength_preserved() {
        let g = grid();
        let u = init_unit(&seed(spec(1163.0, 240.0, 40.0, 0.4)), &g).unwrap();
        let r = unit_summary(&u, &g).strength;
        assert!(((r - 1163.0) / 1163.0).abs() < 1e-3);
    }

    #[test]
    fn identity_starts_as_position() {
        let g = grid();
        let u = init_unit(&seed(spec(500.0, 100.0, 40.0, 1.0)), &g).unwrap();
        for (i, j) in [(0, 0), (79, 59), (13, 41), (40, 30), (66, 7)] {
            let c = g.center(i, j);
            assert_eq!(u.identity_x.get(i, j), c.x);
            assert_eq!(u.identity_y.get(i, j), c.y);
        }
        assert_eq!(u.morale.value, 1.0);
        assert_eq!(u.bearing(), 1.0);
    }

    #[test]
    fn overpacked_formation_rejected() {
        let g = grid();
        let err = init_unit(&seed(spec(60_000.0, 100.0, 100.0, 0.0)), &g).unwrap_err();
        assert!(matches!(err, UnitError::TooDense { id: 19, .. }));
    }

    #[test]
    fn off_map_formation_rejected() {
        let g = grid();
        let mut s = spec(100.0, 50.0, 20.0, 0.0);
        s.center = Vec2::new(-5000.0, 0.0);
        assert_eq!(init_unit(&seed(s), &g).unwrap_err(), UnitError::OffMap { id: 19 });
    }

    #[test]
    fn centroid_of_two_masses() {
        let g = Grid::new(40, 8, 5.0, Vec2::new(-2.5, -2.5)).unwrap();
        let mut u = init_unit(&seed(FormationSpec {
            center: Vec2::new(10.0, 10.0),
            width: 5.0,
            depth: 5.0,
            bearing: 0.0,
            strength: 1.0,
            density_cap: 5.6,
        }), &g)
        .unwrap();
        u.density = Raster::zeros(&g);
        // Cell centers at (0,0) and (100,0).
        u.density.set(0, 0, 1.0);
        u.density.set(20, 0, 1.0);
        let c = unit_summary(&u, &g).centroid.unwrap();
        assert!((c - Vec2::new(50.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn empty_unit_is_destroyed() {
        let g = grid();
        let mut u = init_unit(&seed(spec(100.0, 50.0, 20.0, 0.0)), &g).unwrap();
        u.density = Raster::zeros(&g);
        let s = unit_summary(&u, &g);
        assert!(s.destroyed);
        assert!(s.centroid.is_none());
    }

    #[test]
    fn artillery_footprint() {
        let g = Grid::new(100, 100, 4.0, Vec2::ZERO).unwrap();
        let a = ArtilleryUnit {
            id: 22,
            label: "Cushing".into(),
            side: Side::Blue,
            position: g.center(50, 50),
            guns: 6,
            bearing: std::f64::consts::PI,
            peak_density: 0.1 * 5.6,
            footprint_scale: 20.0,
        };
        let r = artillery_density(&a, &g);
        assert!((r.get(50, 50) - 0.56).abs() < 1e-15);
        // 20 m = 5 cells east: one decay scale.
        assert!((r.get(55, 50) - 0.56 * (-1.0f64).exp()).abs() < 1e-15);
        // 200 m = 50 cells is outside the map here; 10 scales in the diagonal is negligible.
        assert!(r.get(99, 50) < 1e-40 * 5.6);
    }
}
