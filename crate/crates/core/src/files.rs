//! Terrain, scenario and ensemble input files (TOML), plus raw elevation binaries.
//!
//! Relative paths inside a file are resolved against that file's directory.
//! Angles are in degrees, counter-clockwise from east; lengths in meters.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::command::{standard_order_lists, Order, OrderRole};
use crate::ensemble::PerturbationSpec;
use crate::geom::Vec2;
use crate::scenario::{ModelParams, Scenario, ScenarioError};
use crate::terrain::{rasterize_features, smooth_raster, FeatureClass, Grid, Raster, TerrainError, TerrainFeature, TerrainMap};
use crate::units::{ArtilleryUnit, FormationSpec, Side, UnitSeed};

#[derive(Debug, Error)]
pub enum FileError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Terrain {
        path: PathBuf,
        #[source]
        source: TerrainError,
    },
    #[error("{path}: {source}")]
    Scenario {
        path: PathBuf,
        #[source]
        source: ScenarioError,
    },
}

fn read_text(path: &Path) -> Result<String, FileError> {
    fs::read_to_string(path).map_err(|source| FileError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, FileError> {
    let text = read_text(path)?;
    toml::from_str(&text).map_err(|e| FileError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn schema(path: &Path, message: impl Into<String>) -> FileError {
    FileError::Schema {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn resolve(base: &Path, rel: &Path) -> PathBuf {
    if rel.is_absolute() {
        rel.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(rel)
    }
}

/// Reads a row-major little-endian f64 raster.
pub fn read_f64_raster(path: &Path, grid: &Grid) -> Result<Raster, FileError> {
    let bytes = fs::read(path).map_err(|source| FileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.len() != grid.len() * 8 {
        return Err(schema(
            path,
            format!("expected {} bytes for a {}x{} raster, found {}", grid.len() * 8, grid.nx, grid.ny, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Raster::from_vec(grid, data).map_err(|source| FileError::Terrain {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a raster as row-major little-endian f64 values.
pub fn write_f64_raster(path: &Path, raster: &Raster) -> Result<(), FileError> {
    let mut bytes = Vec::with_capacity(raster.data.len() * 8);
    for v in &raster.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|source| FileError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRecord {
    pub nx: usize,
    pub ny: usize,
    pub ds: f64,
    #[serde(default)]
    pub origin: Vec2,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlayRecord {
    #[serde(default = "one")]
    pub base_speed: f64,
    #[serde(default = "three")]
    pub smoothing_passes: usize,
}

fn one() -> f64 {
    1.0
}

fn three() -> usize {
    3
}

impl Default for OverlayRecord {
    fn default() -> Self {
        Self {
            base_speed: 1.0,
            smoothing_passes: 3,
        }
    }
}

/// Exactly one elevation source.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElevationRecord {
    pub file: Option<PathBuf>,
    pub values: Option<Vec<f64>>,
    pub constant: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    Polygon,
    Line,
    Point,
}

/// Feature entry; `value` and `scale` default to the class table.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    pub kind: FeatureKind,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub class: Option<FeatureClass>,
    #[serde(default)]
    pub value: Option<f64>,
    #[serde(default)]
    pub scale: Option<f64>,
    #[serde(default)]
    pub vertices: Vec<Vec2>,
    #[serde(default)]
    pub points: Vec<Vec2>,
    #[serde(default)]
    pub at: Option<Vec2>,
}

impl FeatureRecord {
    fn build(&self, index: usize, path: &Path) -> Result<TerrainFeature, FileError> {
        let value = self
            .value
            .or(self.class.map(FeatureClass::overlay_value))
            .ok_or_else(|| schema(path, format!("feature {index}: needs `value` or `class`")))?;
        let scale = || {
            self.scale
                .or(self.class.and_then(FeatureClass::decay_scale))
                .ok_or_else(|| schema(path, format!("feature {index}: needs `scale` or a line/point `class`")))
        };
        Ok(match self.kind {
            FeatureKind::Polygon => TerrainFeature::Polygon {
                value,
                vertices: self.vertices.clone(),
            },
            FeatureKind::Line => TerrainFeature::Line {
                value,
                scale: scale()?,
                points: self.points.clone(),
            },
            FeatureKind::Point => TerrainFeature::Point {
                value,
                scale: scale()?,
                at: self
                    .at
                    .ok_or_else(|| schema(path, format!("feature {index}: point feature needs `at`")))?,
            },
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerrainFile {
    pub grid: GridRecord,
    #[serde(default)]
    pub overlay: OverlayRecord,
    #[serde(default)]
    pub elevation: ElevationRecord,
    #[serde(default)]
    pub features: Vec<FeatureRecord>,
}

/// Parses a terrain file and builds the smoothed map.
pub fn load_terrain(path: &Path) -> Result<TerrainMap, FileError> {
    let file: TerrainFile = parse(path)?;
    build_terrain(&file, path)
}

pub fn build_terrain(file: &TerrainFile, path: &Path) -> Result<TerrainMap, FileError> {
    let terrain_err = |source| FileError::Terrain {
        path: path.to_path_buf(),
        source,
    };
    let g = &file.grid;
    let grid = Grid::new(g.nx, g.ny, g.ds, g.origin).map_err(terrain_err)?;
    let e = &file.elevation;
    let elevation = match (&e.file, &e.values, e.constant) {
        (Some(f), None, None) => read_f64_raster(&resolve(path, f), &grid)?,
        (None, Some(v), None) => Raster::from_vec(&grid, v.clone()).map_err(terrain_err)?,
        (None, None, Some(c)) => Raster::filled(&grid, c),
        (None, None, None) => Raster::zeros(&grid),
        _ => return Err(schema(path, "elevation: give only one of `file`, `values`, `constant`")),
    };
    let features = file
        .features
        .iter()
        .enumerate()
        .map(|(k, f)| f.build(k, path))
        .collect::<Result<Vec<_>, _>>()?;
    let overlay = rasterize_features(&grid, file.overlay.base_speed, &features).map_err(terrain_err)?;
    let overlay = smooth_raster(&overlay, file.overlay.smoothing_passes);
    TerrainMap::new(grid, elevation, overlay).map_err(terrain_err)
}

fn default_march() -> f64 {
    0.6
}

fn default_morale() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitRecord {
    pub id: u32,
    pub label: String,
    pub side: Side,
    pub strength: f64,
    #[serde(default = "default_morale")]
    pub morale: f64,
    pub center: Vec2,
    /// Extent across the facing direction (m).
    pub width: f64,
    /// Extent along the facing direction (m).
    pub depth: f64,
    /// Facing direction (degrees).
    pub bearing: f64,
    #[serde(default = "default_march")]
    pub march_speed: f64,
    #[serde(default)]
    pub orders: Vec<Order>,
    #[serde(default)]
    pub role: Option<OrderRole>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryRecord {
    pub id: u32,
    pub label: String,
    pub side: Side,
    pub guns: u32,
    pub position: Vec2,
    /// Facing direction (degrees); aimed at the enemy infantry when absent.
    #[serde(default)]
    pub bearing: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub terrain: PathBuf,
    #[serde(default)]
    pub params: ModelParams,
    #[serde(default)]
    pub units: Vec<UnitRecord>,
    #[serde(default)]
    pub artillery: Vec<BatteryRecord>,
}

/// Parses a scenario file and its terrain, and validates the result.
pub fn load_scenario(path: &Path) -> Result<Scenario, FileError> {
    let file: ScenarioFile = parse(path)?;
    let map = load_terrain(&resolve(path, &file.terrain))?;
    let scenario = build_scenario(&file, map, path)?;
    scenario.validate().map_err(|source| FileError::Scenario {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(scenario)
}

pub fn build_scenario(file: &ScenarioFile, map: TerrainMap, path: &Path) -> Result<Scenario, FileError> {
    let cap = file.params.kinematics.max_density;
    let mut units = Vec::with_capacity(file.units.len());
    for u in &file.units {
        let orders = match (&u.role, u.orders.is_empty()) {
            (Some(role), true) => standard_order_lists(u.side, role),
            (Some(_), false) => return Err(schema(path, format!("unit {}: give `orders` or `role`, not both", u.id))),
            (None, _) => u.orders.clone(),
        };
        units.push(UnitSeed {
            id: u.id,
            label: u.label.clone(),
            side: u.side,
            formation: FormationSpec {
                center: u.center,
                width: u.width,
                depth: u.depth,
                bearing: u.bearing.to_radians(),
                strength: u.strength,
                density_cap: cap,
            },
            orders,
            initial_morale: u.morale,
            march_speed: u.march_speed,
        });
    }
    let artillery = file
        .artillery
        .iter()
        .map(|b| ArtilleryUnit {
            id: b.id,
            label: b.label.clone(),
            side: b.side,
            position: b.position,
            guns: b.guns,
            bearing: b.bearing.map_or(f64::NAN, f64::to_radians),
            peak_density: 0.0,
            footprint_scale: 1.0,
        })
        .collect();
    let mut scenario = Scenario {
        name: file.name.clone(),
        map,
        units,
        artillery,
        params: file.params,
    };
    let unaimed: Vec<bool> = scenario.artillery.iter().map(|a| a.bearing.is_nan()).collect();
    let fixed: Vec<f64> = scenario.artillery.iter().map(|a| a.bearing).collect();
    scenario.aim_artillery();
    for ((a, free), b) in scenario.artillery.iter_mut().zip(unaimed).zip(fixed) {
        if !free {
            a.bearing = b;
        }
    }
    scenario.apply_artillery_footprint();
    Ok(scenario)
}

fn default_cases() -> u32 {
    100
}

/// Ensemble description: case count and perturbation bands.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleFile {
    /// Cases `0..cases` are run unless the command line narrows the range.
    #[serde(default = "default_cases")]
    pub cases: u32,
    #[serde(default)]
    pub perturbation: PerturbationSpec,
}

pub fn load_ensemble(path: &Path) -> Result<EnsembleFile, FileError> {
    parse(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raster_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new(9, 8, 2.0, Vec2::ZERO).unwrap();
        let r = Raster::from_fn(&g, |i, j| i as f64 * 0.5 - j as f64);
        let p = dir.path().join("h.bin");
        write_f64_raster(&p, &r).unwrap();
        assert_eq!(read_f64_raster(&p, &g).unwrap(), r);
        let small = Grid::new(8, 8, 2.0, Vec2::ZERO).unwrap();
        assert!(matches!(read_f64_raster(&p, &small), Err(FileError::Schema { .. })));
    }

    #[test]
    fn terrain_file_with_classes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.toml");
        fs::write(
            &p,
            r#"
[grid]
nx = 40
ny = 40
ds = 8.0

[overlay]
smoothing_passes = 0

[elevation]
constant = 12.5

[[features]]
kind = "polygon"
class = "woods"
vertices = [[0.0, 0.0], [160.0, 0.0], [160.0, 160.0], [0.0, 160.0]]

[[features]]
kind = "line"
class = "stone-wall"
points = [[250.0, 0.0], [250.0, 320.0]]
"#,
        )
        .unwrap();
        let map = load_terrain(&p).unwrap();
        assert_eq!(map.overlay.get(5, 5), 0.5);
        assert_eq!(map.elevation.get(30, 30), 12.5);
        // Cell 31 is centred 2 m from the wall.
        let expected = 0.3 + 0.7 * libm::erf(2.0 / 10.0);
        assert!((map.overlay.get(31, 20) - expected).abs() < 1e-12);
        assert_eq!(map.overlay.get(39, 39), 1.0);
    }

    #[test]
    fn terrain_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.toml");
        fs::write(&p, "[grid]\nnx = 40\nny = 40\nds = 8.0\n[[features]]\nkind = \"polygon\"\nvertices = [[0.0,0.0],[1.0,1.0],[2.0,2.0]]\nvalue = 0.5\n").unwrap();
        match load_terrain(&p) {
            Err(FileError::Terrain {
                source: TerrainError::DegeneratePolygon { index: 0 },
                ..
            }) => {}
            other => panic!("{other:?}"),
        }
        fs::write(&p, "[grid]\nnx = 40\nny = 40\nds = 8.0\nbogus = 1\n").unwrap();
        match load_terrain(&p) {
            Err(FileError::Parse { message, .. }) => assert!(message.contains("bogus"), "{message}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(load_terrain(&dir.path().join("missing.toml")), Err(FileError::Io { .. })));
    }

    fn write_scenario(dir: &Path, units: &str) -> PathBuf {
        fs::write(dir.join("t.toml"), "[grid]\nnx = 64\nny = 32\nds = 8.0\n").unwrap();
        let p = dir.join("s.toml");
        fs::write(
            &p,
            format!(
                r#"
name = "tiny"
terrain = "t.toml"

[params]
duration = 60.0

{units}

[[artillery]]
id = 9
label = "bty"
side = "blue"
guns = 4
position = [450.0, 60.0]
"#
            ),
        )
        .unwrap();
        p
    }

    #[test]
    fn scenario_file_roles_and_aim() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_scenario(
            dir.path(),
            r#"
[[units]]
id = 1
label = "Alpha"
side = "red"
strength = 500.0
center = [100.0, 128.0]
width = 100.0
depth = 20.0
bearing = 0.0
role = { role = "attacker", march_bearing = 0.0, waypoints = [[300.0, 128.0]] }

[[units]]
id = 2
label = "Bravo"
side = "blue"
strength = 400.0
morale = 0.8
center = [400.0, 128.0]
width = 100.0
depth = 20.0
bearing = 180.0
orders = [{ kind = "wait-until-enemy-within", range = 500.0 }, { kind = "face-nearest-enemy" }]
"#,
        );
        let s = load_scenario(&p).unwrap();
        assert_eq!(s.units.len(), 2);
        assert_eq!(s.units[0].orders.len(), 3);
        assert_eq!(s.units[1].initial_morale, 0.8);
        assert!((s.units[1].formation.bearing - std::f64::consts::PI).abs() < 1e-15);
        assert_eq!(s.params.duration, 60.0);
        assert!((s.artillery[0].peak_density - 0.56).abs() < 1e-12);
        let aim = (Vec2::new(100.0, 128.0) - Vec2::new(450.0, 60.0)).angle();
        assert!((s.artillery[0].bearing - aim).abs() < 1e-15);
    }

    #[test]
    fn scenario_without_units_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_scenario(dir.path(), "");
        assert!(matches!(
            load_scenario(&p),
            Err(FileError::Scenario {
                source: ScenarioError::NoUnits,
                ..
            })
        ));
    }
}
