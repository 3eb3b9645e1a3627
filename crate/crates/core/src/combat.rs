//! Casualty rates from close-in area fire and aggregated ranged fire.

use serde::{Deserialize, Serialize};

use crate::geom::{angle_between, Vec2};
use crate::terrain::Raster;
use crate::units::UnitSummary;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CombatParams {
    /// Close-in area-fire coefficient between enemy units (m²/s).
    pub k_close: f64,
    /// Ranged-fire coefficient of infantry (1/s).
    pub k_ranged_infantry: f64,
    /// Ranged-fire coefficient of artillery (1/s).
    pub k_ranged_artillery: f64,
    /// Characteristic range of rifle fire (m).
    pub range_infantry: f64,
    /// Characteristic range of artillery fire (m).
    pub range_artillery: f64,
    /// Off-bearing reference angle α_r (degrees).
    pub firing_angle_ref_deg: f64,
    /// Elevation reference angle θ_r (degrees).
    pub elevation_angle_ref_deg: f64,
    /// Reference attacker speed V_r (m/s).
    pub reference_speed: f64,
    /// Exponent multiplier in the moving-fire penalty.
    pub motion_penalty: f64,
    /// Close-in fire tapers off below this fraction of ρ_m.
    pub closein_floor_fraction: f64,
    /// Half-width of the visibility and targeting sector (degrees).
    pub sector_half_angle_deg: f64,
    /// Population scale dividing the aggregated ranged-fire product (persons).
    pub ranged_normalization: f64,
}

impl Default for CombatParams {
    fn default() -> Self {
        Self {
            k_close: 5.0e-2,
            k_ranged_infantry: 8.0,
            k_ranged_artillery: 16.0,
            range_infantry: 100.0,
            range_artillery: 1200.0,
            firing_angle_ref_deg: 90.0,
            elevation_angle_ref_deg: 30.0,
            reference_speed: 1.4,
            motion_penalty: 50.0,
            closein_floor_fraction: 1e-4,
            sector_half_angle_deg: 45.0,
            ranged_normalization: 5.0e6,
        }
    }
}

impl CombatParams {
    pub fn sector_half_angle(&self) -> f64 {
        self.sector_half_angle_deg.to_radians()
    }
}

/// Linear ramp that switches close-in fire off where a unit is essentially absent.
#[inline]
pub fn closein_taper(rho: f64, floor: f64) -> f64 {
    (rho / floor).clamp(0.0, 1.0)
}

/// Close-in loss rate `ω' = ρ_i Σ_j k_ij ρ_j`, tapered at vanishing ρ_i.
///
/// `enemies` pairs each enemy density with its coefficient; friendly units
/// are simply never passed in.
pub fn closein_rate(rho_i: &Raster, enemies: &[(&Raster, f64)], floor: f64) -> Raster {
    let mut out = rho_i.clone();
    for (c, w) in out.data.iter_mut().enumerate() {
        let r = *w;
        let fire: f64 = enemies.iter().map(|(rho_j, k)| k * rho_j.data[c]).sum();
        *w = closein_taper(r, floor) * r * fire;
    }
    out
}

/// Ranged target chosen by one attacker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetAssignment {
    pub attacker: u32,
    pub defender: Option<u32>,
    /// Centroid distance to the target (m).
    pub range: f64,
    /// Angle between the target direction and the attacker bearing (rad).
    pub off_bearing: f64,
}

/// Nearest live enemy centroid inside the ±`half_angle` sector about the
/// attacker's bearing; ties go to the lowest id.
pub fn select_target(attacker: &UnitSummary, candidates: &[UnitSummary], half_angle: f64) -> TargetAssignment {
    let mut best: Option<(f64, u32, f64)> = None;
    if let Some(origin) = attacker.centroid {
        for c in candidates {
            if c.side == attacker.side || c.destroyed || c.artillery {
                continue;
            }
            let Some(pos) = c.centroid else { continue };
            let delta = pos - origin;
            let dist = delta.norm();
            let off = if dist > 0.0 {
                angle_between(delta.angle(), attacker.bearing)
            } else {
                0.0
            };
            if off > half_angle {
                continue;
            }
            let better = match best {
                None => true,
                Some((d, id, _)) => dist < d || (dist == d && c.id < id),
            };
            if better {
                best = Some((dist, c.id, off));
            }
        }
    }
    match best {
        Some((range, id, off)) => TargetAssignment {
            attacker: attacker.id,
            defender: Some(id),
            range,
            off_bearing: off,
        },
        None => TargetAssignment {
            attacker: attacker.id,
            defender: None,
            range: f64::INFINITY,
            off_bearing: 0.0,
        },
    }
}

/// The five ranged-fire efficiency factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangedFactors {
    pub range: f64,
    pub firing_angle: f64,
    pub orientation: f64,
    pub elevation: f64,
    pub motion: f64,
}

impl RangedFactors {
    pub fn product(&self) -> f64 {
        self.range * self.firing_angle * self.orientation * self.elevation * self.motion
    }
}

/// Factors for range `r`, off-bearing angle `alpha`, relative bearing
/// `beta`, fire elevation `theta` and attacker speed `speed`, with
/// characteristic range `r0`.
pub fn ranged_factors(r: f64, alpha: f64, beta: f64, theta: f64, speed: f64, r0: f64, p: &CombatParams) -> RangedFactors {
    let alpha_r = p.firing_angle_ref_deg.to_radians();
    let theta_r = p.elevation_angle_ref_deg.to_radians();
    let range = if r < r0 { 1.0 } else { (r0 / r).powi(2) };
    RangedFactors {
        range,
        firing_angle: (-2.0 * alpha * alpha / (alpha_r * alpha_r)).exp(),
        orientation: (3.0 + beta.cos()) / 2.0,
        elevation: (-2.0 * theta * theta / (theta_r * theta_r)).exp(),
        motion: (-p.motion_penalty * speed / p.reference_speed).exp(),
    }
}

/// Angle of fire above horizontal from attacker to defender.
pub fn fire_elevation_angle(attacker: Vec2, h_attacker: f64, defender: Vec2, h_defender: f64) -> f64 {
    let horizontal = attacker.distance(defender);
    if horizontal == 0.0 {
        return 0.0;
    }
    (h_defender - h_attacker).atan2(horizontal)
}

/// One attacker's aggregated fire on one defender.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangedAttack {
    pub attacker: u32,
    pub defender: u32,
    /// k' of the attacker's weapon class (1/s).
    pub coefficient: f64,
    pub factors: RangedFactors,
    /// Attacking strength R_j (persons, or guns for artillery).
    pub attacker_strength: f64,
}

/// Per-person ranged loss rate `Σ_j k'_j f1..f5 R_j / N` for the attacks
/// aimed at one defender.
pub fn ranged_coefficient(attacks: &[RangedAttack], p: &CombatParams) -> f64 {
    attacks
        .iter()
        .map(|a| a.coefficient * a.factors.product() * a.attacker_strength)
        .sum::<f64>()
        / p.ranged_normalization
}

/// Ranged loss rate raster `ω'' = ρ_i Σ_j k'_j f1..f5 R_j / N`.
pub fn ranged_rate(defender_density: &Raster, attacks: &[RangedAttack], p: &CombatParams) -> Raster {
    let c = ranged_coefficient(attacks, p);
    let mut out = defender_density.clone();
    for v in &mut out.data {
        *v *= c;
    }
    out
}
