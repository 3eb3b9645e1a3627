//! Order execution, morale and the retreat / press-the-attack checks.
//!
//! Everything here runs in the serial phase between field updates.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::geom::{angle_between, wrap_angle, Vec2};
use crate::units::{Side, UnitState, UnitStatus, UnitSummary};

/// One entry of a unit's order list. Bearings are in degrees,
/// counter-clockwise from east.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Order {
    WaitUntilEnemyWithin { range: f64 },
    RotateTo { bearing: f64 },
    TranslateTo { point: Vec2 },
    FaceNearestEnemy,
    Flank { point: Vec2, bearing: f64 },
}

/// Order list with a monotone completion pointer.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderQueue {
    pub orders: Vec<Order>,
    /// Simulated time at which each finished order completed.
    pub completed_at: Vec<f64>,
}

impl OrderQueue {
    pub fn new(orders: Vec<Order>) -> Self {
        Self {
            orders,
            completed_at: Vec::new(),
        }
    }

    pub fn current(&self) -> Option<&Order> {
        self.orders.get(self.completed_at.len())
    }

    pub fn is_done(&self) -> bool {
        self.completed_at.len() >= self.orders.len()
    }

    fn complete(&mut self, time: f64) {
        if !self.is_done() {
            self.completed_at.push(time);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoraleState {
    pub initial: f64,
    pub value: f64,
    /// Fractional losses against the starting strength.
    pub losses: f64,
    pub increments: f64,
    /// Enemies whose retreat has already been credited.
    pub credited: BTreeSet<u32>,
}

impl MoraleState {
    pub fn new(initial: f64) -> Self {
        Self {
            initial,
            value: initial,
            losses: 0.0,
            increments: 0.0,
            credited: BTreeSet::new(),
        }
    }

    /// Recomputes `M = M0 - F/F_m + increments` for the current strength.
    pub fn refresh(&mut self, strength: f64, initial_strength: f64, reference: f64) {
        let f = (1.0 - strength / initial_strength).clamp(0.0, 1.0);
        self.losses = self.losses.max(f);
        self.value = morale_value(self.initial, self.losses, reference, self.increments);
    }
}

pub fn morale_value(initial: f64, losses: f64, reference: f64, increments: f64) -> f64 {
    initial - losses / reference + increments
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CommandParams {
    /// Distance over which translation slows to a stop (m).
    pub translate_taper: f64,
    /// Angle over which rotation slows to a stop (degrees).
    pub rotate_taper_deg: f64,
    /// A translation is complete inside this distance (m).
    pub translate_done: f64,
    /// A rotation is complete inside this angle (degrees).
    pub rotate_done_deg: f64,
    /// Arc radius converting march speed to a rotation rate (m).
    pub rotation_radius: f64,
    /// Reference fractional losses F_m.
    pub morale_reference: f64,
    /// Bonus for seeing the nearest enemy withdraw.
    pub sighting_increment: f64,
    /// Speed at which a retreating unit's goal returns to its start (m/s).
    pub retreat_speed: f64,
}

impl Default for CommandParams {
    fn default() -> Self {
        Self {
            translate_taper: 10.0,
            rotate_taper_deg: 10.0,
            translate_done: 0.5,
            rotate_done_deg: 0.5,
            rotation_radius: 50.0,
            morale_reference: 0.35,
            sighting_increment: 0.5,
            retreat_speed: 1.2,
        }
    }
}

/// Moves `from` toward `to` at `speed`, slowing linearly inside `taper`.
/// Returns the new point and whether the remaining distance is below `done`.
pub fn approach_point(from: Vec2, to: Vec2, speed: f64, taper: f64, done: f64, dt: f64) -> (Vec2, bool) {
    let delta = to - from;
    let dist = delta.norm();
    if dist < done {
        return (from, true);
    }
    let step = (speed * (dist / taper).min(1.0) * dt).min(dist);
    let next = from + delta * (step / dist);
    (next, to.distance(next) < done)
}

/// Turns `from` toward `to` (radians) along the shorter arc at `rate`,
/// slowing linearly inside `taper`.
pub fn approach_angle(from: f64, to: f64, rate: f64, taper: f64, done: f64, dt: f64) -> (f64, bool) {
    let delta = wrap_angle(to - from);
    if delta.abs() < done {
        return (from, true);
    }
    let step = (rate * (delta.abs() / taper).min(1.0) * dt).min(delta.abs());
    let next = from + step * delta.signum();
    (next, angle_between(next, to) < done)
}

fn nearest_enemy<'a>(own: &UnitSummary, enemies: &'a [UnitSummary]) -> Option<(&'a UnitSummary, f64)> {
    let origin = own.centroid?;
    let mut best: Option<(&UnitSummary, f64)> = None;
    for e in enemies {
        if e.side == own.side || e.destroyed || e.artillery {
            continue;
        }
        let Some(pos) = e.centroid else { continue };
        let d = pos.distance(origin);
        if best.map_or(true, |(b, bd)| d < bd || (d == bd && e.id < b.id)) {
            best = Some((e, d));
        }
    }
    best
}

/// Nearest live enemy flow unit whose centroid lies inside the ±`half_angle`
/// sector about the observer's bearing.
pub fn nearest_visible_enemy<'a>(
    own: &UnitSummary,
    enemies: &'a [UnitSummary],
    half_angle: f64,
) -> Option<&'a UnitSummary> {
    let origin = own.centroid?;
    let mut best: Option<(&UnitSummary, f64)> = None;
    for e in enemies {
        if e.side == own.side || e.destroyed || e.artillery {
            continue;
        }
        let Some(pos) = e.centroid else { continue };
        let delta = pos - origin;
        let d = delta.norm();
        if d > 0.0 && angle_between(delta.angle(), own.bearing) > half_angle {
            continue;
        }
        if best.map_or(true, |(b, bd)| d < bd || (d == bd && e.id < b.id)) {
            best = Some((e, d));
        }
    }
    best.map(|(e, _)| e)
}

struct Rates {
    speed: f64,
    turn: f64,
    taper: f64,
    done: f64,
    turn_taper: f64,
    turn_done: f64,
}

impl Rates {
    fn of(u: &UnitState, p: &CommandParams) -> Self {
        Self {
            speed: u.march_speed,
            turn: u.march_speed / p.rotation_radius,
            taper: p.translate_taper,
            done: p.translate_done,
            turn_taper: p.rotate_taper_deg.to_radians(),
            turn_done: p.rotate_done_deg.to_radians(),
        }
    }

    fn translate(&self, from: Vec2, to: Vec2, dt: f64) -> (Vec2, bool) {
        approach_point(from, to, self.speed, self.taper, self.done, dt)
    }

    fn rotate(&self, from: f64, to: f64, dt: f64) -> (f64, bool) {
        approach_angle(from, to, self.turn, self.turn_taper, self.turn_done, dt)
    }
}

/// Advances the unit's goal transform by one serial phase of length `dt`.
///
/// Active units work through their orders; retreating units walk their goal
/// back to the start; pressing units chase their quarry's centroid.
pub fn advance_orders(u: &mut UnitState, own: &UnitSummary, enemies: &[UnitSummary], time: f64, dt: f64, p: &CommandParams) {
    let rates = Rates::of(u, p);
    match u.status {
        UnitStatus::Retreating => {
            let retreat = Rates {
                speed: p.retreat_speed,
                turn: p.retreat_speed / p.rotation_radius,
                ..rates
            };
            u.goal.target = retreat.translate(u.goal.target, u.goal.origin, dt).0;
            u.goal.theta = retreat.rotate(u.goal.theta, 0.0, dt).0;
        }
        UnitStatus::Pressing => {
            let quarry = u.pursuit.and_then(|id| enemies.iter().find(|e| e.id == id));
            match quarry.and_then(|q| q.centroid) {
                Some(pos) => {
                    u.goal.target = pos;
                    if let Some(origin) = own.centroid {
                        if pos.distance(origin) > 0.0 {
                            let want = (pos - origin).angle() - u.initial_bearing;
                            u.goal.theta = rates.rotate(u.goal.theta, want, dt).0;
                        }
                    }
                }
                None => {
                    u.status = UnitStatus::Active;
                    u.pursuit = None;
                }
            }
        }
        UnitStatus::Active => {
            let Some(order) = u.orders.current().cloned() else { return };
            let finished = match order {
                Order::WaitUntilEnemyWithin { range } => nearest_enemy(own, enemies).is_some_and(|(_, d)| d <= range),
                Order::RotateTo { bearing } => {
                    let want = bearing.to_radians() - u.initial_bearing;
                    let (theta, done) = rates.rotate(u.goal.theta, want, dt);
                    u.goal.theta = theta;
                    done
                }
                Order::TranslateTo { point } => {
                    let (target, done) = rates.translate(u.goal.target, point, dt);
                    u.goal.target = target;
                    done
                }
                // Bearing from the pivot, which turning does not move.
                Order::FaceNearestEnemy => match (own.centroid, nearest_enemy(own, enemies)) {
                    (Some(_), Some((e, d))) if d > 0.0 && e.centroid.is_some_and(|c| c.distance(u.goal.target) > 0.0) => {
                        let want = (e.centroid.unwrap() - u.goal.target).angle() - u.initial_bearing;
                        let (theta, done) = rates.rotate(u.goal.theta, want, dt);
                        u.goal.theta = theta;
                        done
                    }
                    _ => true,
                },
                Order::Flank { point, bearing } => {
                    let (target, moved) = rates.translate(u.goal.target, point, dt);
                    let want = bearing.to_radians() - u.initial_bearing;
                    let (theta, turned) = rates.rotate(u.goal.theta, want, dt);
                    u.goal.target = target;
                    u.goal.theta = theta;
                    moved && turned
                }
            };
            if finished {
                u.orders.complete(time);
            }
        }
    }
}

/// First morale pass: recompute `M` and break units whose morale went negative.
pub fn check_breakpoint(u: &mut UnitState, own: &UnitSummary, p: &CommandParams) {
    u.morale.refresh(own.strength, u.initial_strength, p.morale_reference);
    if u.morale.value < 0.0 && u.status != UnitStatus::Retreating {
        u.status = UnitStatus::Retreating;
        u.pursuit = None;
    }
}

/// Second morale pass: credit a sighted retreat and decide on pursuit.
pub fn react_to_enemies(u: &mut UnitState, own: &UnitSummary, enemies: &[UnitSummary], half_angle: f64, p: &CommandParams) {
    if u.status == UnitStatus::Retreating {
        return;
    }
    let Some(seen) = nearest_visible_enemy(own, enemies, half_angle) else { return };
    if seen.status != UnitStatus::Retreating {
        return;
    }
    if u.morale.credited.insert(seen.id) {
        u.morale.increments += p.sighting_increment;
        u.morale.value = morale_value(u.morale.initial, u.morale.losses, p.morale_reference, u.morale.increments);
    }
    if u.side == Side::Red && seen.side == Side::Blue && u.morale.value > 0.0 && u.status == UnitStatus::Active {
        u.status = UnitStatus::Pressing;
        u.pursuit = Some(seen.id);
    }
}

/// Both morale passes over all flow units. `summaries[k]` describes `units[k]`.
///
/// Breakpoints are settled for everyone before anyone reacts, so the outcome
/// does not depend on unit order.
pub fn update_morale(units: &mut [UnitState], summaries: &mut [UnitSummary], half_angle: f64, p: &CommandParams) {
    for (u, s) in units.iter_mut().zip(summaries.iter_mut()) {
        check_breakpoint(u, s, p);
        s.status = u.status;
    }
    let frozen = summaries.to_vec();
    for (u, s) in units.iter_mut().zip(summaries.iter_mut()) {
        react_to_enemies(u, s, &frozen, half_angle, p);
        s.status = u.status;
    }
}

/// What a unit is meant to do in the standard plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "kebab-case")]
pub enum OrderRole {
    /// March on a bearing through waypoints, then face the enemy.
    Attacker { march_bearing: f64, waypoints: Vec<Vec2> },
    /// Hold until the enemy closes, shift position, face the enemy.
    Defender { wait_range: f64, bearing: f64, point: Vec2 },
    /// Hold until the enemy closes, then swing onto its flank in one motion.
    Flanker { wait_range: f64, point: Vec2, bearing: f64 },
}

/// Order list for a role.
pub fn standard_order_lists(side: Side, role: &OrderRole) -> Vec<Order> {
    log::trace!("building {side} orders for {role:?}");
    match role {
        OrderRole::Attacker { march_bearing, waypoints } => {
            let mut orders = vec![Order::RotateTo { bearing: *march_bearing }];
            orders.extend(waypoints.iter().map(|&point| Order::TranslateTo { point }));
            orders.push(Order::FaceNearestEnemy);
            orders
        }
        OrderRole::Defender { wait_range, bearing, point } => vec![
            Order::WaitUntilEnemyWithin { range: *wait_range },
            Order::RotateTo { bearing: *bearing },
            Order::TranslateTo { point: *point },
            Order::FaceNearestEnemy,
        ],
        OrderRole::Flanker { wait_range, point, bearing } => vec![
            Order::WaitUntilEnemyWithin { range: *wait_range },
            Order::Flank {
                point: *point,
                bearing: *bearing,
            },
        ],
    }
}
