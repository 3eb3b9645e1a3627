//! A complete simulation setup: terrain, units, batteries and parameters.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::combat::CombatParams;
use crate::command::{CommandParams, Order};
use crate::geom::{wrap_angle, Vec2};
use crate::kinematics::KinematicsParams;
use crate::terrain::TerrainMap;
use crate::units::{formation_density, ArtilleryUnit, Side, UnitError, UnitSeed};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario has no flow units")]
    NoUnits,
    #[error("unit id {0} is used more than once")]
    DuplicateId(u32),
    #[error("time step {dt} s violates the advection limit: dt must be below ds/(2 V_m) = {limit} s")]
    Cfl { dt: f64, limit: f64 },
    #[error("duration {duration} s is not a non-negative multiple of dt = {dt} s")]
    BadDuration { duration: f64, dt: f64 },
    #[error("battery {id} is off the map or has no guns")]
    BadBattery { id: u32 },
    #[error("parameter {name} = {value} is out of range")]
    BadParam { name: &'static str, value: f64 },
    #[error(transparent)]
    Unit(#[from] UnitError),
}

/// Two-stage Runge–Kutta variant. Heun is a convex combination of Euler
/// steps and keeps limited densities non-negative; midpoint does not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeScheme {
    Midpoint,
    Heun,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    pub kinematics: KinematicsParams,
    pub combat: CombatParams,
    pub command: CommandParams,
    /// Time step (s).
    pub dt: f64,
    /// Simulated duration (s).
    pub duration: f64,
    /// Slope and overlay effects on walking speed (and fire elevation).
    pub terrain_effects: bool,
    pub close_in: bool,
    pub ranged: bool,
    pub scheme: TimeScheme,
    /// Battery footprint peak as a fraction of ρ_m.
    pub artillery_peak_fraction: f64,
    /// Battery footprint Gaussian scale (m).
    pub artillery_footprint_scale: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            kinematics: KinematicsParams::default(),
            combat: CombatParams::default(),
            command: CommandParams::default(),
            dt: 1.0,
            duration: 3600.0,
            terrain_effects: true,
            close_in: true,
            ranged: true,
            scheme: TimeScheme::Heun,
            artillery_peak_fraction: 0.1,
            artillery_footprint_scale: 20.0,
        }
    }
}

impl ModelParams {
    /// Largest stable time step, `ds / (2 V_m)`.
    pub fn dt_limit(&self, ds: f64) -> f64 {
        ds / (2.0 * self.kinematics.max_speed)
    }

    /// Number of steps in the run.
    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub map: TerrainMap,
    pub units: Vec<UnitSeed>,
    pub artillery: Vec<ArtilleryUnit>,
    pub params: ModelParams,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.units.is_empty() {
            return Err(ScenarioError::NoUnits);
        }
        let mut ids: Vec<u32> = self.units.iter().map(|u| u.id).chain(self.artillery.iter().map(|a| a.id)).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(ScenarioError::DuplicateId(w[0]));
        }
        let p = &self.params;
        let checks: [(&'static str, f64, bool); 9] = [
            ("dt", p.dt, p.dt > 0.0),
            ("max_speed", p.kinematics.max_speed, p.kinematics.max_speed > 0.0),
            ("max_density", p.kinematics.max_density, p.kinematics.max_density > 0.0),
            ("diffusion", p.kinematics.diffusion, p.kinematics.diffusion >= 0.0),
            ("k_close", p.combat.k_close, p.combat.k_close >= 0.0),
            ("k_ranged_infantry", p.combat.k_ranged_infantry, p.combat.k_ranged_infantry >= 0.0),
            ("k_ranged_artillery", p.combat.k_ranged_artillery, p.combat.k_ranged_artillery >= 0.0),
            ("ranged_normalization", p.combat.ranged_normalization, p.combat.ranged_normalization > 0.0),
            ("morale_reference", p.command.morale_reference, p.command.morale_reference > 0.0),
        ];
        for (name, value, ok) in checks {
            if !ok || !value.is_finite() {
                return Err(ScenarioError::BadParam { name, value });
            }
        }
        let limit = p.dt_limit(self.map.grid.ds);
        if p.dt >= limit {
            return Err(ScenarioError::Cfl { dt: p.dt, limit });
        }
        let ratio = p.duration / p.dt;
        if !(p.duration >= 0.0) || (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(ScenarioError::BadDuration {
                duration: p.duration,
                dt: p.dt,
            });
        }
        for u in &self.units {
            if !(u.march_speed > 0.0) {
                return Err(ScenarioError::BadParam {
                    name: "march_speed",
                    value: u.march_speed,
                });
            }
            formation_density(u.id, &u.formation, &self.map.grid)?;
        }
        for a in &self.artillery {
            if a.guns == 0 || self.map.grid.locate(a.position).is_none() {
                return Err(ScenarioError::BadBattery { id: a.id });
            }
        }
        Ok(())
    }

    /// Initial infantry totals `(blue, red)`.
    pub fn infantry_totals(&self) -> (f64, f64) {
        self.units.iter().fold((0.0, 0.0), |(b, r), u| match u.side {
            Side::Blue => (b + u.formation.strength, r),
            Side::Red => (b, r + u.formation.strength),
        })
    }

    /// Gun totals `(blue, red)`.
    pub fn gun_totals(&self) -> (u32, u32) {
        self.artillery.iter().fold((0, 0), |(b, r), a| match a.side {
            Side::Blue => (b + a.guns, r),
            Side::Red => (b, r + a.guns),
        })
    }

    /// Points every battery at the strength-weighted centre of the enemy infantry.
    pub fn aim_artillery(&mut self) {
        for a in &mut self.artillery {
            let (mut w, mut c) = (0.0, Vec2::ZERO);
            for u in self.units.iter().filter(|u| u.side != a.side) {
                w += u.formation.strength;
                c += u.formation.center * u.formation.strength;
            }
            if w > 0.0 {
                let target = c * (1.0 / w);
                if target.distance(a.position) > 0.0 {
                    a.bearing = (target - a.position).angle();
                }
            }
        }
    }

    /// Sets every battery footprint from the model parameters.
    pub fn apply_artillery_footprint(&mut self) {
        let peak = self.params.artillery_peak_fraction * self.params.kinematics.max_density;
        for a in &mut self.artillery {
            a.peak_density = peak;
            a.footprint_scale = self.params.artillery_footprint_scale;
        }
    }

    /// Mirror image about the vertical line through the map centre.
    pub fn reflected_x(&self) -> Scenario {
        let g = self.map.grid;
        let axis = g.origin.x + 0.5 * g.width();
        let point = |p: Vec2| Vec2::new(2.0 * axis - p.x, p.y);
        let angle = |a: f64| wrap_angle(PI - a);
        let degrees = |d: f64| angle(d.to_radians()).to_degrees();
        let units = self
            .units
            .iter()
            .map(|u| {
                let mut m = u.clone();
                m.formation.center = point(u.formation.center);
                m.formation.bearing = angle(u.formation.bearing);
                m.orders = u
                    .orders
                    .iter()
                    .map(|o| match o {
                        Order::RotateTo { bearing } => Order::RotateTo { bearing: degrees(*bearing) },
                        Order::TranslateTo { point: p } => Order::TranslateTo { point: point(*p) },
                        Order::Flank { point: p, bearing } => Order::Flank {
                            point: point(*p),
                            bearing: degrees(*bearing),
                        },
                        other => other.clone(),
                    })
                    .collect();
                m
            })
            .collect();
        let artillery = self
            .artillery
            .iter()
            .map(|a| ArtilleryUnit {
                position: point(a.position),
                bearing: angle(a.bearing),
                ..a.clone()
            })
            .collect();
        Scenario {
            name: format!("{}-mirror", self.name),
            map: self.map.reflected_x(),
            units,
            artillery,
            params: self.params,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terrain::Grid;
    use crate::units::FormationSpec;

    fn small() -> Scenario {
        let grid = Grid::new(64, 32, 8.0, Vec2::ZERO).unwrap();
        let seed = |id, side, x: f64, bearing: f64| UnitSeed {
            id,
            label: format!("u{id}"),
            side,
            formation: FormationSpec {
                center: Vec2::new(x, 128.0),
                width: 100.0,
                depth: 20.0,
                bearing,
                strength: 500.0,
                density_cap: 5.6,
            },
            orders: vec![Order::TranslateTo { point: Vec2::new(256.0, 128.0) }],
            initial_morale: 1.0,
            march_speed: 0.6,
        };
        Scenario {
            name: "small".into(),
            map: TerrainMap::flat(grid, 1.0),
            units: vec![seed(1, Side::Red, 100.0, 0.0), seed(2, Side::Blue, 400.0, PI)],
            artillery: vec![ArtilleryUnit {
                id: 3,
                label: "bty".into(),
                side: Side::Blue,
                position: Vec2::new(450.0, 60.0),
                guns: 4,
                bearing: 0.0,
                peak_density: 0.56,
                footprint_scale: 20.0,
            }],
            params: ModelParams::default(),
        }
    }

    #[test]
    fn validates_and_rejects() {
        let s = small();
        s.validate().unwrap();
        let mut bad = s.clone();
        bad.units.clear();
        assert!(matches!(bad.validate(), Err(ScenarioError::NoUnits)));
        let mut bad = s.clone();
        bad.params.dt = 3.0;
        match bad.validate() {
            Err(ScenarioError::Cfl { limit, .. }) => assert!((limit - 8.0 / 2.8).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
        let mut bad = s.clone();
        bad.artillery[0].id = 1;
        assert!(matches!(bad.validate(), Err(ScenarioError::DuplicateId(1))));
        let mut bad = s.clone();
        bad.params.duration = 10.5;
        assert!(matches!(bad.validate(), Err(ScenarioError::BadDuration { .. })));
        let mut zero = s;
        zero.params.duration = 0.0;
        zero.validate().unwrap();
        assert_eq!(zero.params.steps(), 0);
    }

    #[test]
    fn totals_and_aim() {
        let mut s = small();
        assert_eq!(s.infantry_totals(), (500.0, 500.0));
        assert_eq!(s.gun_totals(), (4, 0));
        s.aim_artillery();
        let expected = (Vec2::new(100.0, 128.0) - Vec2::new(450.0, 60.0)).angle();
        assert!((s.artillery[0].bearing - expected).abs() < 1e-15);
    }

    #[test]
    fn reflection_is_an_involution() {
        let s = small();
        let back = s.reflected_x().reflected_x();
        for (a, b) in s.units.iter().zip(&back.units) {
            assert!(a.formation.center.distance(b.formation.center) < 1e-9);
            assert!((wrap_angle(a.formation.bearing - b.formation.bearing)).abs() < 1e-12);
        }
        let m = s.reflected_x();
        assert!((m.units[0].formation.center.x - 412.0).abs() < 1e-12);
        assert!((m.units[0].formation.bearing.abs() - PI).abs() < 1e-12);
    }
}
