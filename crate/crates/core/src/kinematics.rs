//! Directed walking velocity of a flow unit.
//!
//! Each parcel walks toward its slot in the ordered formation. The slot is
//! found by pushing the parcel's identity (its position in the initial
//! formation) through the unit's goal transform. Speed is the product of the
//! maximum walking speed and four multipliers: crowding `f`, uphill slope
//! `g`, goal proximity `h` and the terrain overlay `T`.

use serde::{Deserialize, Serialize};

use crate::geom::Vec2;
use crate::terrain::{Raster, TerrainMap};

/// Distances below this are treated as "already at the goal".
pub const GOAL_EPSILON: f64 = 1e-9;

/// Density floor used when dividing by ρ in the diffusive velocity.
pub const DIFFUSION_DENSITY_FLOOR: f64 = 1e-12;

/// Uphill slowdown coefficient in `g(s) = 1 / (1 + c s)`.
pub const UPHILL_COEFFICIENT: f64 = 3.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KinematicsParams {
    /// Maximum walking speed `V_m` (m/s).
    pub max_speed: f64,
    /// Density at which motion stops, `ρ_m` (persons/m²).
    pub max_density: f64,
    /// Diffusion coefficient `D` (m²/s).
    pub diffusion: f64,
    /// Near-goal slowdown scale in cells.
    pub near_goal_cells: f64,
    /// Distance in cells at which double time sets in.
    pub double_time_onset_cells: f64,
    /// Width in cells of the double-time ramp.
    pub double_time_ramp_cells: f64,
}

impl Default for KinematicsParams {
    fn default() -> Self {
        Self {
            max_speed: 1.4,
            max_density: 5.6,
            diffusion: 0.0,
            near_goal_cells: 1.5,
            double_time_onset_cells: 40.0,
            double_time_ramp_cells: 10.0,
        }
    }
}

/// Maps initial formation slots to their current targets:
/// `z = A (ξ - y1) + y2` with `A = R(θ) diag(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalTransform {
    /// Initial formation center `y1`.
    pub origin: Vec2,
    /// Current target center `y2`.
    pub target: Vec2,
    /// Rotation relative to the initial formation (rad).
    pub theta: f64,
    pub stretch_a: f64,
    pub stretch_b: f64,
}

impl GoalTransform {
    pub fn identity(center: Vec2) -> Self {
        Self {
            origin: center,
            target: center,
            theta: 0.0,
            stretch_a: 1.0,
            stretch_b: 1.0,
        }
    }

    /// Matrix entries `[[m00, m01], [m10, m11]]`.
    pub fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.theta.sin_cos();
        [
            [self.stretch_a * c, -self.stretch_b * s],
            [self.stretch_a * s, self.stretch_b * c],
        ]
    }
}

/// Crowding factor `f(ρ)`: smooth quintic from 1 at ρ = 0 to 0 at ρ = ρ_m.
pub fn density_factor(rho_total: f64, max_density: f64) -> f64 {
    let q = rho_total / max_density;
    if q >= 1.0 {
        return 0.0;
    }
    if q <= 0.0 {
        return 1.0;
    }
    let q3 = q * q * q;
    1.0 + q3 * (-10.0 + q * (15.0 - 6.0 * q))
}

/// Slope factor `g(s)`; downhill walking is unaffected.
pub fn slope_factor(s: f64) -> f64 {
    if s > 0.0 {
        1.0 / (1.0 + UPHILL_COEFFICIENT * s)
    } else {
        1.0
    }
}

/// Goal proximity factor `h(r)` with the default cell multiples.
pub fn goal_proximity_factor(r: f64, ds: f64) -> f64 {
    let p = KinematicsParams::default();
    goal_proximity_with(r, ds, &p)
}

pub fn goal_proximity_with(r: f64, ds: f64, p: &KinematicsParams) -> f64 {
    let near = libm::erf(r / (p.near_goal_cells * ds));
    let far_arg = (r - p.double_time_onset_cells * ds) / (p.double_time_ramp_cells * ds);
    near + 0.5 * libm::erfc(-far_arg)
}

/// Target slot `z` of the parcel with identity `xi`.
pub fn goal_position(xi: Vec2, g: &GoalTransform) -> Vec2 {
    goal_position_with(xi, g, &g.matrix())
}

/// [`goal_position`] with the matrix of `g` already evaluated.
#[inline]
pub fn goal_position_with(xi: Vec2, g: &GoalTransform, m: &[[f64; 2]; 2]) -> Vec2 {
    let d = xi - g.origin;
    Vec2::new(
        m[0][0] * d.x + m[0][1] * d.y + g.target.x,
        m[1][0] * d.x + m[1][1] * d.y + g.target.y,
    )
}

/// Steepest descent direction of `|x - z|²`, i.e. the unit vector toward `z`.
pub fn walking_direction(x: Vec2, z: Vec2) -> Vec2 {
    let d = z - x;
    let r = d.norm();
    if r < GOAL_EPSILON {
        Vec2::ZERO
    } else {
        d * (1.0 / r)
    }
}

/// Velocity rasters of one unit.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    /// Directed velocity `V`.
    pub directed_x: Raster,
    pub directed_y: Raster,
    /// Total velocity `u = V - (D/ρ)∇ρ`.
    pub total_x: Raster,
    pub total_y: Raster,
}

/// Inputs that stay fixed while a unit's velocity is evaluated.
#[derive(Debug, Clone, Copy)]
pub struct WalkContext<'a> {
    pub map: &'a TerrainMap,
    pub grad_x: &'a Raster,
    pub grad_y: &'a Raster,
    pub params: &'a KinematicsParams,
    pub terrain_effects: bool,
}

impl WalkContext<'_> {
    /// Directed velocity at a cell center.
    #[inline]
    pub fn directed(&self, x: Vec2, xi: Vec2, goal: &GoalTransform, rho_total: f64, cell: usize) -> Vec2 {
        self.directed_with(x, xi, goal, &goal.matrix(), rho_total, cell)
    }

    /// [`Self::directed`] with the goal matrix already evaluated.
    #[inline]
    pub fn directed_with(
        &self,
        x: Vec2,
        xi: Vec2,
        goal: &GoalTransform,
        m: &[[f64; 2]; 2],
        rho_total: f64,
        cell: usize,
    ) -> Vec2 {
        let p = self.params;
        let z = goal_position_with(xi, goal, m);
        let delta = z - x;
        let r = delta.norm();
        if r < GOAL_EPSILON {
            return Vec2::ZERO;
        }
        let d = delta * (1.0 / r);
        let f = density_factor(rho_total, p.max_density);
        if f == 0.0 {
            return Vec2::ZERO;
        }
        let ds = self.map.grid.ds;
        let h = proximity_fast(r, ds, p);
        let (g, t) = if self.terrain_effects {
            let s = d.x * self.grad_x.data[cell] + d.y * self.grad_y.data[cell];
            (slope_factor(s), self.map.overlay.data[cell])
        } else {
            (1.0, 1.0)
        };
        d * (p.max_speed * f * g * h * t)
    }
}

/// `h(r)` with the saturated tails short-circuited; identical values to
/// [`goal_proximity_with`] wherever the erf terms round to ±1.
#[inline]
fn proximity_fast(r: f64, ds: f64, p: &KinematicsParams) -> f64 {
    let near_arg = r / (p.near_goal_cells * ds);
    let near = if near_arg >= 6.0 { 1.0 } else { libm::erf(near_arg) };
    let far_arg = (r - p.double_time_onset_cells * ds) / (p.double_time_ramp_cells * ds);
    let far = if far_arg <= -6.0 {
        0.0
    } else if far_arg >= 6.0 {
        1.0
    } else {
        0.5 * libm::erfc(-far_arg)
    };
    near + far
}

/// Full-map velocity of one unit given the crowd density of every unit
/// (artillery footprints included).
pub fn velocity_field(
    density: &Raster,
    identity: (&Raster, &Raster),
    rho_total: &Raster,
    goal: &GoalTransform,
    ctx: &WalkContext<'_>,
) -> VelocityField {
    let grid = ctx.map.grid;
    let mut vx = Raster::zeros(&grid);
    let mut vy = Raster::zeros(&grid);
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let c = grid.idx(i, j);
            let xi = Vec2::new(identity.0.data[c], identity.1.data[c]);
            let v = ctx.directed(grid.center(i, j), xi, goal, rho_total.data[c], c);
            vx.data[c] = v.x;
            vy.data[c] = v.y;
        }
    }
    let (total_x, total_y) = if ctx.params.diffusion > 0.0 {
        let d = ctx.params.diffusion;
        let mut ux = vx.clone();
        let mut uy = vy.clone();
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let c = grid.idx(i, j);
                let rho = density.data[c];
                if rho < DIFFUSION_DENSITY_FLOOR {
                    continue;
                }
                let grad = crate::terrain::gradient_at(density, grid.ds, i, j);
                ux.data[c] -= d / rho * grad.x;
                uy.data[c] -= d / rho * grad.y;
            }
        }
        (ux, uy)
    } else {
        (vx.clone(), vy.clone())
    };
    VelocityField {
        directed_x: vx,
        directed_y: vy,
        total_x,
        total_y,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terrain::Grid;
    use std::f64::consts::PI;

    #[test]
    fn density_factor_anchors() {
        assert_eq!(density_factor(0.0, 5.6), 1.0);
        assert_eq!(density_factor(5.6, 5.6), 0.0);
        assert_eq!(density_factor(9.0, 5.6), 0.0);
        // -6/32 + 15/16 - 10/8 + 1 = 0.5
        assert!((density_factor(2.8, 5.6) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn density_factor_monotone() {
        let mut prev = density_factor(0.0, 5.6);
        for k in 1..=100 {
            let v = density_factor(5.6 * k as f64 / 100.0, 5.6);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn slope_factor_values() {
        assert_eq!(slope_factor(0.0), 1.0);
        assert_eq!(slope_factor(-0.2), 1.0);
        assert!((slope_factor(0.1) - 1.0 / 1.35).abs() < 1e-15);
    }

    #[test]
    fn proximity_values() {
        let ds = 8.0;
        // erf(0) + 0.5 (1 + erf(-4)); erfc(4) = 1.541725790028002e-8
        let at_goal = goal_proximity_factor(0.0, ds);
        assert!((at_goal - 0.5 * 1.541_725_790_028_002e-8).abs() < 1e-20);
        assert!(at_goal <= 1e-4);
        assert!((goal_proximity_factor(40.0 * ds, ds) - 1.5).abs() < 1e-12);
        assert!((goal_proximity_factor(1e5, ds) - 2.0).abs() < 1e-15);
        let p = KinematicsParams::default();
        for r in [0.0, 3.0, 11.9, 50.0, 200.0, 319.0, 320.0, 700.0, 900.0, 5000.0] {
            assert_eq!(proximity_fast(r, ds, &p), goal_proximity_with(r, ds, &p));
        }
    }

    #[test]
    fn goal_transform_examples() {
        let y1 = Vec2::new(10.0, 20.0);
        let id = GoalTransform::identity(y1);
        let xi = Vec2::new(13.0, -4.0);
        assert_eq!(goal_position(xi, &id), xi);

        let quarter = GoalTransform {
            origin: y1,
            target: Vec2::ZERO,
            theta: PI / 2.0,
            stretch_a: 1.0,
            stretch_b: 1.0,
        };
        let z = goal_position(y1 + Vec2::new(1.0, 0.0), &quarter);
        assert!(z.x.abs() < 1e-15 && (z.y - 1.0).abs() < 1e-15);

        let stretched = GoalTransform {
            origin: y1,
            target: Vec2::new(5.0, 0.0),
            theta: 0.0,
            stretch_a: 2.0,
            stretch_b: 1.0,
        };
        assert_eq!(goal_position(y1 + Vec2::new(1.0, 1.0), &stretched), Vec2::new(7.0, 1.0));
    }

    #[test]
    fn walking_direction_examples() {
        assert_eq!(walking_direction(Vec2::ZERO, Vec2::new(10.0, 0.0)), Vec2::new(1.0, 0.0));
        assert_eq!(walking_direction(Vec2::new(2.0, 2.0), Vec2::new(2.0, 2.0)), Vec2::ZERO);
        let d = walking_direction(Vec2::ZERO, Vec2::new(3.0, 4.0));
        assert!((d.x - 0.6).abs() < 1e-15 && (d.y - 0.8).abs() < 1e-15);
    }

    fn ctx_for<'a>(map: &'a TerrainMap, gx: &'a Raster, gy: &'a Raster, p: &'a KinematicsParams) -> WalkContext<'a> {
        WalkContext {
            map,
            grad_x: gx,
            grad_y: gy,
            params: p,
            terrain_effects: true,
        }
    }

    #[test]
    fn double_time_on_empty_flat_map() {
        let g = Grid::new(16, 16, 8.0, Vec2::ZERO).unwrap();
        let map = TerrainMap::flat(g, 1.0);
        let (gx, gy) = map.gradient_field();
        let p = KinematicsParams::default();
        let ctx = ctx_for(&map, &gx, &gy, &p);
        let goal = GoalTransform {
            target: Vec2::new(5000.0, 0.0),
            ..GoalTransform::identity(Vec2::ZERO)
        };
        let x = g.center(3, 3);
        let v = ctx.directed(x, x, &goal, 0.0, g.idx(3, 3));
        assert!((v.norm() - 2.8).abs() < 1e-12);
        // Jammed crowd cannot move.
        assert_eq!(ctx.directed(x, x, &goal, 5.6, g.idx(3, 3)), Vec2::ZERO);
    }

    #[test]
    fn woods_halve_speed_at_mid_range() {
        let g = Grid::new(16, 16, 8.0, Vec2::ZERO).unwrap();
        let map = TerrainMap::flat(g, 0.5);
        let (gx, gy) = map.gradient_field();
        let p = KinematicsParams::default();
        let ctx = ctx_for(&map, &gx, &gy, &p);
        // 44 m from the slot both erf tails are below 1e-6, so h ≈ 1.
        let goal = GoalTransform {
            target: Vec2::new(44.0, 0.0),
            ..GoalTransform::identity(Vec2::ZERO)
        };
        let x = g.center(5, 5);
        let v = ctx.directed(x, x, &goal, 0.0, g.idx(5, 5));
        assert!((v.norm() - 0.7).abs() < 1e-5);
        assert!((v.norm() - 0.7 * goal_proximity_factor(44.0, 8.0)).abs() < 1e-15);
        let flat_ctx = WalkContext {
            terrain_effects: false,
            ..ctx
        };
        assert!((flat_ctx.directed(x, x, &goal, 0.0, g.idx(5, 5)).norm() - 1.4).abs() < 1e-5);
    }

    #[test]
    fn quarter_turn_covariance() {
        // Rotating map, parcel and goal by 90° rotates the velocity by 90°.
        let g = Grid::new(16, 16, 8.0, Vec2::new(-64.0, -64.0)).unwrap();
        let h = Raster::from_fn(&g, |i, j| {
            let c = g.center(i, j);
            0.05 * c.x + 0.02 * c.y
        });
        let h_rot = Raster::from_fn(&g, |i, j| {
            // value at p is original value at R(-90°) p
            let c = g.center(i, j).rotated(-PI / 2.0);
            0.05 * c.x + 0.02 * c.y
        });
        let map = TerrainMap::new(g, h, Raster::filled(&g, 1.0)).unwrap();
        let map_rot = TerrainMap::new(g, h_rot, Raster::filled(&g, 1.0)).unwrap();
        let p = KinematicsParams::default();
        let (gx, gy) = map.gradient_field();
        let (rgx, rgy) = map_rot.gradient_field();
        let ctx = ctx_for(&map, &gx, &gy, &p);
        let ctx_rot = ctx_for(&map_rot, &rgx, &rgy, &p);
        let goal = GoalTransform {
            origin: Vec2::new(4.0, -8.0),
            target: Vec2::new(40.0, 20.0),
            theta: 0.3,
            stretch_a: 1.0,
            stretch_b: 1.0,
        };
        let goal_rot = GoalTransform {
            origin: goal.origin.rotated(PI / 2.0),
            target: goal.target.rotated(PI / 2.0),
            ..goal
        };
        // cell (10, 5) rotates to cell (16 - 1 - 5, 10) = (10, 10) about the map center
        let (i, j) = (10, 5);
        let (ri, rj) = (g.ny - 1 - j, i);
        let x = g.center(i, j);
        let xr = g.center(ri, rj);
        assert!((xr - x.rotated(PI / 2.0)).norm() < 1e-12);
        let xi = x + Vec2::new(-3.0, 1.0);
        let v = ctx.directed(x, xi, &goal, 0.4, g.idx(i, j));
        let vr = ctx_rot.directed(xr, xi.rotated(PI / 2.0), &goal_rot, 0.4, g.idx(ri, rj));
        assert!((vr - v.rotated(PI / 2.0)).norm() < 1e-12, "{v:?} vs {vr:?}");
    }

    #[test]
    fn speed_bounded_by_double_time() {
        let g = Grid::new(32, 32, 8.0, Vec2::ZERO).unwrap();
        let h = Raster::from_fn(&g, |i, j| ((i * 7 + j * 3) % 11) as f64);
        let map = TerrainMap::new(g, h, Raster::filled(&g, 0.8)).unwrap();
        let (gx, gy) = map.gradient_field();
        let p = KinematicsParams::default();
        let ctx = ctx_for(&map, &gx, &gy, &p);
        let goal = GoalTransform {
            target: Vec2::new(-900.0, 400.0),
            ..GoalTransform::identity(Vec2::ZERO)
        };
        let rho = Raster::filled(&g, 0.3);
        let xi_x = Raster::from_fn(&g, |i, j| g.center(i, j).x);
        let xi_y = Raster::from_fn(&g, |i, j| g.center(i, j).y);
        let vf = velocity_field(&rho, (&xi_x, &xi_y), &rho, &goal, &ctx);
        for c in 0..g.len() {
            let s = vf.directed_x.data[c].hypot(vf.directed_y.data[c]);
            assert!(s <= 2.0 * p.max_speed + 1e-12);
        }
    }
}
