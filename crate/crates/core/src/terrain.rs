//! Elevation and overlay rasters.
//!
//! The map frame has x pointing east and y north, in meters. Cell `(i, j)`
//! has its center at `origin + ((i + 0.5) ds, (j + 0.5) ds)`; rasters are
//! stored row-major with row `j = 0` at the southern edge.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{point_in_polygon, polygon_area, segment_distance, Vec2};

/// Smallest admissible raster dimension along either axis.
pub const MIN_CELLS: usize = 8;

/// Beyond this many decay scales `erf` rounds to exactly 1.0 in f64.
const ERF_SATURATION: f64 = 6.0;

#[derive(Debug, Error, PartialEq)]
pub enum TerrainError {
    #[error("grid must have at least {MIN_CELLS}x{MIN_CELLS} cells, got {nx}x{ny}")]
    GridTooSmall { nx: usize, ny: usize },
    #[error("cell size must be positive and finite, got {0}")]
    BadCellSize(f64),
    #[error("raster has {got} cells but the grid needs {expected}")]
    RasterSize { expected: usize, got: usize },
    #[error("feature {index}: polygon needs at least 3 vertices")]
    TooFewVertices { index: usize },
    #[error("feature {index}: degenerate polygon (zero area)")]
    DegeneratePolygon { index: usize },
    #[error("feature {index}: line feature needs at least 2 points")]
    TooFewPoints { index: usize },
    #[error("feature {index}: decay scale must be positive, got {scale}")]
    BadScale { index: usize, scale: f64 },
    #[error("feature {index}: overlay value {value} outside [0, 1]")]
    BadValue { index: usize, value: f64 },
    #[error("open-field overlay value {0} outside (0, 1]")]
    BadBase(f64),
    #[error("elevation is not finite at cell ({i}, {j})")]
    NonFiniteElevation { i: usize, j: usize },
    #[error("overlay value {value} outside [0, 1] at cell ({i}, {j})")]
    OverlayRange { i: usize, j: usize, value: f64 },
}

/// Uniform structured grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    /// Cell size in meters.
    pub ds: f64,
    /// World coordinates of the south-west map corner.
    pub origin: Vec2,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, ds: f64, origin: Vec2) -> Result<Self, TerrainError> {
        if nx < MIN_CELLS || ny < MIN_CELLS {
            return Err(TerrainError::GridTooSmall { nx, ny });
        }
        if !(ds > 0.0 && ds.is_finite()) {
            return Err(TerrainError::BadCellSize(ds));
        }
        Ok(Self { nx, ny, ds, origin })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn center(&self, i: usize, j: usize) -> Vec2 {
        Vec2::new(
            self.origin.x + (i as f64 + 0.5) * self.ds,
            self.origin.y + (j as f64 + 0.5) * self.ds,
        )
    }

    pub fn width(&self) -> f64 {
        self.nx as f64 * self.ds
    }

    pub fn height(&self) -> f64 {
        self.ny as f64 * self.ds
    }

    pub fn cell_area(&self) -> f64 {
        self.ds * self.ds
    }

    /// Fractional cell coordinates of a world point (cell centers sit on integers).
    pub fn to_cell_coords(&self, p: Vec2) -> (f64, f64) {
        (
            (p.x - self.origin.x) / self.ds - 0.5,
            (p.y - self.origin.y) / self.ds - 0.5,
        )
    }

    /// Cell containing `p`, if it lies on the map.
    pub fn locate(&self, p: Vec2) -> Option<(usize, usize)> {
        let fx = (p.x - self.origin.x) / self.ds;
        let fy = (p.y - self.origin.y) / self.ds;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (i, j) = (fx as usize, fy as usize);
        (i < self.nx && j < self.ny).then_some((i, j))
    }

    /// Inclusive-exclusive index range of cells whose centers may lie within
    /// `[lo, hi]` along x, clipped to the map.
    pub fn column_range(&self, lo: f64, hi: f64) -> (usize, usize) {
        axis_range(lo, hi, self.origin.x, self.ds, self.nx)
    }

    pub fn row_range(&self, lo: f64, hi: f64) -> (usize, usize) {
        axis_range(lo, hi, self.origin.y, self.ds, self.ny)
    }
}

fn axis_range(lo: f64, hi: f64, origin: f64, ds: f64, n: usize) -> (usize, usize) {
    let a = ((lo - origin) / ds - 0.5).floor().max(0.0);
    let b = ((hi - origin) / ds - 0.5).ceil() + 1.0;
    let b = b.clamp(0.0, n as f64);
    let a = a.min(b);
    (a as usize, b as usize)
}

/// Scalar field on a [`Grid`], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub nx: usize,
    pub ny: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn filled(grid: &Grid, value: f64) -> Self {
        Self {
            nx: grid.nx,
            ny: grid.ny,
            data: vec![value; grid.len()],
        }
    }

    pub fn zeros(grid: &Grid) -> Self {
        Self::filled(grid, 0.0)
    }

    pub fn from_vec(grid: &Grid, data: Vec<f64>) -> Result<Self, TerrainError> {
        if data.len() != grid.len() {
            return Err(TerrainError::RasterSize {
                expected: grid.len(),
                got: data.len(),
            });
        }
        Ok(Self {
            nx: grid.nx,
            ny: grid.ny,
            data,
        })
    }

    pub fn from_fn(grid: &Grid, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                data.push(f(i, j));
            }
        }
        Self {
            nx: grid.nx,
            ny: grid.ny,
            data,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.nx + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[j * self.nx + i] = v;
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Row-by-row sum; the summation order is fixed so results are reproducible.
    pub fn sum(&self) -> f64 {
        self.data
            .chunks(self.nx)
            .map(|row| row.iter().sum::<f64>())
            .sum()
    }

    /// Bilinear interpolation at fractional cell coordinates, clamped to the map.
    pub fn sample(&self, fi: f64, fj: f64) -> f64 {
        let fi = fi.clamp(0.0, (self.nx - 1) as f64);
        let fj = fj.clamp(0.0, (self.ny - 1) as f64);
        let i0 = (fi.floor() as usize).min(self.nx - 2);
        let j0 = (fj.floor() as usize).min(self.ny - 2);
        let tx = fi - i0 as f64;
        let ty = fj - j0 as f64;
        let a = self.get(i0, j0) * (1.0 - tx) + self.get(i0 + 1, j0) * tx;
        let b = self.get(i0, j0 + 1) * (1.0 - tx) + self.get(i0 + 1, j0 + 1) * tx;
        a * (1.0 - ty) + b * ty
    }
}

/// Named overlay feature classes with their tabulated values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureClass {
    Woods,
    Orchard,
    Corn,
    Grain,
    Building,
    PostAndRailFence,
    WormFence,
    StoneWall,
    Road,
}

impl FeatureClass {
    /// Speed multiplier at the core of the feature.
    pub fn overlay_value(self) -> f64 {
        match self {
            Self::Woods => 0.50,
            Self::Orchard => 0.55,
            Self::Corn => 0.60,
            Self::Grain => 0.65,
            Self::Building => 0.05,
            Self::PostAndRailFence => 0.05,
            Self::WormFence => 0.10,
            Self::StoneWall => 0.30,
            Self::Road => 1.00,
        }
    }

    /// Decay scale for line and point features; `None` for area features.
    pub fn decay_scale(self) -> Option<f64> {
        match self {
            Self::Woods | Self::Orchard | Self::Corn | Self::Grain => None,
            Self::Building => Some(20.0),
            Self::PostAndRailFence | Self::WormFence | Self::StoneWall | Self::Road => Some(10.0),
        }
    }
}

/// Geometric overlay feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TerrainFeature {
    /// Constant multiplier inside a closed polygon.
    Polygon { value: f64, vertices: Vec<Vec2> },
    /// Polyline with an error-function dip around it.
    Line {
        value: f64,
        scale: f64,
        points: Vec<Vec2>,
    },
    /// Single point with an error-function dip around it.
    Point { value: f64, scale: f64, at: Vec2 },
}

impl TerrainFeature {
    pub fn value(&self) -> f64 {
        match self {
            Self::Polygon { value, .. } | Self::Line { value, .. } | Self::Point { value, .. } => {
                *value
            }
        }
    }

    pub fn validate(&self, index: usize) -> Result<(), TerrainError> {
        let value = self.value();
        if !(0.0..=1.0).contains(&value) {
            return Err(TerrainError::BadValue { index, value });
        }
        match self {
            Self::Polygon { vertices, .. } => {
                if vertices.len() < 3 {
                    return Err(TerrainError::TooFewVertices { index });
                }
                if polygon_area(vertices).abs() < 1e-9 {
                    return Err(TerrainError::DegeneratePolygon { index });
                }
            }
            Self::Line { scale, points, .. } => {
                if points.len() < 2 {
                    return Err(TerrainError::TooFewPoints { index });
                }
                check_scale(index, *scale)?;
            }
            Self::Point { scale, .. } => check_scale(index, *scale)?,
        }
        Ok(())
    }

    /// Mirror image about the vertical line `x = axis_x`.
    pub fn reflected_x(&self, axis_x: f64) -> Self {
        let r = |p: &Vec2| Vec2::new(2.0 * axis_x - p.x, p.y);
        match self {
            Self::Polygon { value, vertices } => Self::Polygon {
                value: *value,
                vertices: vertices.iter().map(r).collect(),
            },
            Self::Line {
                value,
                scale,
                points,
            } => Self::Line {
                value: *value,
                scale: *scale,
                points: points.iter().map(r).collect(),
            },
            Self::Point { value, scale, at } => Self::Point {
                value: *value,
                scale: *scale,
                at: r(at),
            },
        }
    }
}

fn check_scale(index: usize, scale: f64) -> Result<(), TerrainError> {
    if scale > 0.0 && scale.is_finite() {
        Ok(())
    } else {
        Err(TerrainError::BadScale { index, scale })
    }
}

/// Overlay multiplier at distance `dist` from a line or point feature.
pub fn decay_profile(dist: f64, value: f64, scale: f64, base: f64) -> f64 {
    value + (base - value) * libm::erf(dist / scale)
}

/// Builds the overlay raster; overlapping features combine by minimum.
pub fn rasterize_features(
    grid: &Grid,
    base_speed: f64,
    features: &[TerrainFeature],
) -> Result<Raster, TerrainError> {
    if !(base_speed > 0.0 && base_speed <= 1.0) {
        return Err(TerrainError::BadBase(base_speed));
    }
    for (index, f) in features.iter().enumerate() {
        f.validate(index)?;
    }
    let mut overlay = Raster::filled(grid, base_speed);
    for feature in features {
        match feature {
            TerrainFeature::Polygon { value, vertices } => {
                let (lo, hi) = bounds(vertices, 0.0);
                let (i0, i1) = grid.column_range(lo.x, hi.x);
                let (j0, j1) = grid.row_range(lo.y, hi.y);
                for j in j0..j1 {
                    for i in i0..i1 {
                        if point_in_polygon(grid.center(i, j), vertices) {
                            let cell = &mut overlay.data[grid.idx(i, j)];
                            *cell = cell.min(*value);
                        }
                    }
                }
            }
            TerrainFeature::Line {
                value,
                scale,
                points,
            } => {
                let (lo, hi) = bounds(points, ERF_SATURATION * scale);
                let (i0, i1) = grid.column_range(lo.x, hi.x);
                let (j0, j1) = grid.row_range(lo.y, hi.y);
                for j in j0..j1 {
                    for i in i0..i1 {
                        let c = grid.center(i, j);
                        let dist = points
                            .windows(2)
                            .map(|w| segment_distance(c, w[0], w[1]))
                            .fold(f64::INFINITY, f64::min);
                        let t = decay_profile(dist, *value, *scale, base_speed);
                        let cell = &mut overlay.data[grid.idx(i, j)];
                        *cell = cell.min(t);
                    }
                }
            }
            TerrainFeature::Point { value, scale, at } => {
                let reach = ERF_SATURATION * scale;
                let (i0, i1) = grid.column_range(at.x - reach, at.x + reach);
                let (j0, j1) = grid.row_range(at.y - reach, at.y + reach);
                for j in j0..j1 {
                    for i in i0..i1 {
                        let dist = grid.center(i, j).distance(*at);
                        let t = decay_profile(dist, *value, *scale, base_speed);
                        let cell = &mut overlay.data[grid.idx(i, j)];
                        *cell = cell.min(t);
                    }
                }
            }
        }
    }
    Ok(overlay)
}

fn bounds(points: &[Vec2], pad: f64) -> (Vec2, Vec2) {
    let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        lo.x = lo.x.min(p.x);
        lo.y = lo.y.min(p.y);
        hi.x = hi.x.max(p.x);
        hi.y = hi.y.max(p.y);
    }
    (lo - Vec2::new(pad, pad), hi + Vec2::new(pad, pad))
}

/// Repeated 3x3 box averaging with replicated edges.
pub fn smooth_raster(raster: &Raster, passes: usize) -> Raster {
    let (nx, ny) = (raster.nx, raster.ny);
    let mut cur = raster.clone();
    let mut next = raster.clone();
    for _ in 0..passes {
        for j in 0..ny {
            for i in 0..nx {
                let mut acc = 0.0;
                for dj in [-1isize, 0, 1] {
                    let jj = (j as isize + dj).clamp(0, ny as isize - 1) as usize;
                    for di in [-1isize, 0, 1] {
                        let ii = (i as isize + di).clamp(0, nx as isize - 1) as usize;
                        acc += cur.data[jj * nx + ii];
                    }
                }
                next.data[j * nx + i] = acc / 9.0;
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Elevation plus overlay on a shared grid. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct TerrainMap {
    pub grid: Grid,
    pub elevation: Raster,
    pub overlay: Raster,
}

impl TerrainMap {
    pub fn new(grid: Grid, elevation: Raster, overlay: Raster) -> Result<Self, TerrainError> {
        for r in [&elevation, &overlay] {
            if r.data.len() != grid.len() || r.nx != grid.nx {
                return Err(TerrainError::RasterSize {
                    expected: grid.len(),
                    got: r.data.len(),
                });
            }
        }
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                if !elevation.get(i, j).is_finite() {
                    return Err(TerrainError::NonFiniteElevation { i, j });
                }
                let value = overlay.get(i, j);
                if !(0.0..=1.0).contains(&value) {
                    return Err(TerrainError::OverlayRange { i, j, value });
                }
            }
        }
        Ok(Self {
            grid,
            elevation,
            overlay,
        })
    }

    /// Flat map with a uniform overlay.
    pub fn flat(grid: Grid, overlay: f64) -> Self {
        Self {
            elevation: Raster::zeros(&grid),
            overlay: Raster::filled(&grid, overlay),
            grid,
        }
    }

    pub fn smoothed(&self, passes: usize) -> Self {
        Self {
            grid: self.grid,
            elevation: self.elevation.clone(),
            overlay: smooth_raster(&self.overlay, passes),
        }
    }

    /// Elevation gradient at a cell center.
    pub fn gradient(&self, i: usize, j: usize) -> Vec2 {
        gradient_at(&self.elevation, self.grid.ds, i, j)
    }

    /// Gradient rasters (∂H/∂x, ∂H/∂y) for the whole map.
    pub fn gradient_field(&self) -> (Raster, Raster) {
        let g = &self.grid;
        let mut gx = Raster::zeros(g);
        let mut gy = Raster::zeros(g);
        for j in 0..g.ny {
            for i in 0..g.nx {
                let d = self.gradient(i, j);
                gx.set(i, j, d.x);
                gy.set(i, j, d.y);
            }
        }
        (gx, gy)
    }

    /// Elevation at a world point (bilinear).
    pub fn elevation_at(&self, p: Vec2) -> f64 {
        let (fi, fj) = self.grid.to_cell_coords(p);
        self.elevation.sample(fi, fj)
    }

    /// Mirror image about the map's vertical center line.
    pub fn reflected_x(&self) -> Self {
        let g = self.grid;
        let flip = |r: &Raster| Raster::from_fn(&g, |i, j| r.get(g.nx - 1 - i, j));
        Self {
            grid: g,
            elevation: flip(&self.elevation),
            overlay: flip(&self.overlay),
        }
    }
}

/// Overlay smoothing as a map-to-map operation.
pub fn smooth_overlay(map: &TerrainMap, passes: usize) -> TerrainMap {
    map.smoothed(passes)
}

/// Central differences inside, first-order one-sided differences on the border.
pub fn gradient_at(h: &Raster, ds: f64, i: usize, j: usize) -> Vec2 {
    let (nx, ny) = (h.nx, h.ny);
    let dx = if i == 0 {
        (h.get(1, j) - h.get(0, j)) / ds
    } else if i == nx - 1 {
        (h.get(nx - 1, j) - h.get(nx - 2, j)) / ds
    } else {
        (h.get(i + 1, j) - h.get(i - 1, j)) / (2.0 * ds)
    };
    let dy = if j == 0 {
        (h.get(i, 1) - h.get(i, 0)) / ds
    } else if j == ny - 1 {
        (h.get(i, ny - 1) - h.get(i, ny - 2)) / ds
    } else {
        (h.get(i, j + 1) - h.get(i, j - 1)) / (2.0 * ds)
    };
    Vec2::new(dx, dy)
}

/// Directional derivative of elevation along a unit `direction`.
pub fn slope_along(map: &TerrainMap, cell: (usize, usize), direction: Vec2) -> f64 {
    map.gradient(cell.0, cell.1).dot(direction)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Grid {
        Grid::new(n, n, 8.0, Vec2::ZERO).unwrap()
    }

    #[test]
    fn grid_rejects_tiny_and_bad_spacing() {
        assert!(matches!(
            Grid::new(4, 20, 8.0, Vec2::ZERO),
            Err(TerrainError::GridTooSmall { .. })
        ));
        assert!(Grid::new(20, 20, 0.0, Vec2::ZERO).is_err());
    }

    #[test]
    fn woods_interior_takes_table_value() {
        let g = grid(40);
        let woods = TerrainFeature::Polygon {
            value: FeatureClass::Woods.overlay_value(),
            vertices: vec![
                Vec2::new(40.0, 40.0),
                Vec2::new(200.0, 40.0),
                Vec2::new(200.0, 200.0),
                Vec2::new(40.0, 200.0),
            ],
        };
        let t = rasterize_features(&g, 1.0, &[woods]).unwrap();
        assert_eq!(t.get(15, 15), 0.50);
        assert_eq!(t.get(35, 35), 1.0);
    }

    #[test]
    fn stone_wall_profile() {
        let g = grid(64);
        // Wall along the vertical line through cell column 20's center.
        let x = g.center(20, 0).x;
        let wall = TerrainFeature::Line {
            value: 0.30,
            scale: 10.0,
            points: vec![Vec2::new(x, -100.0), Vec2::new(x, 1000.0)],
        };
        let t = rasterize_features(&g, 1.0, &[wall]).unwrap();
        assert_eq!(t.get(20, 30), 0.30);
        // Hand evaluation at one scale: 0.30 + 0.70 * erf(1) with erf(1) = 0.8427007929497149.
        let expected = 0.30 + 0.70 * 0.842_700_792_949_714_9;
        assert!((decay_profile(10.0, 0.30, 10.0, 1.0) - expected).abs() < 1e-15);
        // One cell (8 m) off the wall sits strictly between the wall value and open field.
        let off = t.get(21, 30);
        assert!((off - decay_profile(8.0, 0.30, 10.0, 1.0)).abs() < 1e-15);
        assert!(off > 0.30 && off < 1.0);
        // Far field (>= 10 scales) is the open-field value.
        assert_eq!(t.get(20 + 13, 30), 1.0);
    }

    #[test]
    fn degenerate_polygon_rejected_with_index() {
        let g = grid(16);
        let ok = TerrainFeature::Point {
            value: 0.05,
            scale: 20.0,
            at: Vec2::new(10.0, 10.0),
        };
        let flat = TerrainFeature::Polygon {
            value: 0.5,
            vertices: vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 1.0), Vec2::new(2.0, 2.0)],
        };
        assert_eq!(
            rasterize_features(&g, 1.0, &[ok, flat]),
            Err(TerrainError::DegeneratePolygon { index: 1 })
        );
    }

    #[test]
    fn feature_outside_map_is_clipped() {
        let g = grid(16);
        let far = TerrainFeature::Point {
            value: 0.05,
            scale: 20.0,
            at: Vec2::new(-5000.0, 9000.0),
        };
        let t = rasterize_features(&g, 1.0, &[far]).unwrap();
        assert!(t.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn smoothing_impulse_and_fixed_point() {
        let g = grid(9);
        let mut r = Raster::zeros(&g);
        r.set(4, 4, 1.0);
        let s = smooth_raster(&r, 1);
        for j in 3..=5 {
            for i in 3..=5 {
                assert!((s.get(i, j) - 1.0 / 9.0).abs() < 1e-15);
            }
        }
        assert_eq!(s.get(2, 4), 0.0);
        let u = Raster::filled(&g, 0.7);
        assert_eq!(smooth_raster(&u, 0), u);
        assert!(smooth_raster(&u, 3).data.iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn smoothing_preserves_interior_mass() {
        let g = grid(32);
        let mut r = Raster::zeros(&g);
        for (k, (i, j)) in [(10, 12), (15, 15), (20, 18), (16, 9)].into_iter().enumerate() {
            r.set(i, j, 0.3 + 0.1 * k as f64);
        }
        let before = r.sum();
        let mut cur = r;
        for _ in 0..3 {
            let next = smooth_raster(&cur, 1);
            assert!((next.sum() - cur.sum()).abs() < 1e-12);
            cur = next;
        }
        assert!((cur.sum() - before).abs() < 1e-12);
    }

    #[test]
    fn slope_of_linear_ramp() {
        let g = grid(16);
        let h = Raster::from_fn(&g, |i, _| g.center(i, 0).x);
        let map = TerrainMap::new(g, h, Raster::filled(&g, 1.0)).unwrap();
        for cell in [(0, 3), (7, 7), (15, 15)] {
            assert!((slope_along(&map, cell, Vec2::new(1.0, 0.0)) - 1.0).abs() < 1e-12);
            assert_eq!(slope_along(&map, cell, Vec2::new(0.0, 1.0)), 0.0);
        }
        let flat = TerrainMap::flat(g, 1.0);
        assert_eq!(slope_along(&flat, (5, 5), Vec2::new(0.6, 0.8)), 0.0);
    }

    #[test]
    fn overlay_validation() {
        let g = grid(8);
        let bad = Raster::filled(&g, 1.2);
        assert!(matches!(
            TerrainMap::new(g, Raster::zeros(&g), bad),
            Err(TerrainError::OverlayRange { .. })
        ));
    }

    #[test]
    fn table_classes() {
        assert_eq!(FeatureClass::StoneWall.overlay_value(), 0.30);
        assert_eq!(FeatureClass::Building.decay_scale(), Some(20.0));
        assert_eq!(FeatureClass::Grain.decay_scale(), None);
        assert_eq!(FeatureClass::Road.overlay_value(), 1.0);
    }

    proptest::proptest! {
        #[test]
        fn overlay_ignores_feature_order(
            xs in proptest::collection::vec((8.0..250.0f64, 8.0..250.0f64, 0.2..1.0f64), 1..6),
            rot in 0usize..6,
        ) {
            let g = grid(32);
            let features: Vec<TerrainFeature> = xs
                .iter()
                .enumerate()
                .map(|(k, &(x, y, value))| match k % 3 {
                    0 => TerrainFeature::Point { value, scale: 12.0, at: Vec2::new(x, y) },
                    1 => TerrainFeature::Line { value, scale: 9.0, points: vec![Vec2::new(x, y), Vec2::new(y, x)] },
                    _ => TerrainFeature::Polygon {
                        value,
                        vertices: vec![Vec2::new(x, y), Vec2::new(x + 40.0, y), Vec2::new(x, y + 40.0)],
                    },
                })
                .collect();
            let mut shuffled = features.clone();
            shuffled.rotate_left(rot % features.len());
            shuffled.reverse();
            let a = rasterize_features(&g, 0.9, &features).unwrap();
            let b = rasterize_features(&g, 0.9, &shuffled).unwrap();
            proptest::prop_assert_eq!(a, b);
        }

        #[test]
        fn slope_flips_with_direction(
            heights in proptest::collection::vec(0.0..50.0f64, 100),
            i in 0usize..10,
            j in 0usize..10,
            angle in 0.0..std::f64::consts::TAU,
        ) {
            let g = grid(10);
            let map = TerrainMap::new(g, Raster::from_vec(&g, heights).unwrap(), Raster::filled(&g, 1.0)).unwrap();
            let d = Vec2::new(angle.cos(), angle.sin());
            let s = slope_along(&map, (i, j), d);
            proptest::prop_assert_eq!(s, -slope_along(&map, (i, j), d * -1.0));
        }
    }
}
