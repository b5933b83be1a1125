//! Constant-velocity risk geometry over a trace of world states.

use super::geom::Vec2;
use super::state::WorldState;
use super::vehicle::VehicleState;

/// Time until two circles (relative position `p`, relative velocity `v`, radius sum `r`)
/// first touch. 0 if already overlapping, +∞ if they never meet going forward.
pub fn circle_ttc(p: Vec2, v: Vec2, r: f64) -> f64 {
    let c = p.norm_sq() - r * r;
    if c <= 0.0 {
        return 0.0;
    }
    let a = v.norm_sq();
    let b = 2.0 * p.dot(v);
    if a == 0.0 || b >= 0.0 {
        return f64::INFINITY;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return f64::INFINITY;
    }
    // Smaller root, written to avoid cancellation.
    let q = -0.5 * (b - disc.sqrt());
    c / q
}

pub fn pair_ttc(ego: &VehicleState, other: &VehicleState) -> f64 {
    let r = ego.footprint().bounding_radius() + other.footprint().bounding_radius();
    circle_ttc(other.position - ego.position, other.velocity() - ego.velocity(), r)
}

/// Minimum ego–agent time-to-collision over every tick of the trace.
pub fn min_ttc(trace: &[WorldState]) -> f64 {
    trace
        .iter()
        .flat_map(|w| w.agents.iter().map(move |a| pair_ttc(&w.ego, &a.vehicle)))
        .fold(f64::INFINITY, f64::min)
}

/// Gap between ego and agent bounding circles, floored at 0.
pub fn circle_gap(ego: &VehicleState, other: &VehicleState) -> f64 {
    let r = ego.footprint().bounding_radius() + other.footprint().bounding_radius();
    (ego.position.distance(other.position) - r).max(0.0)
}

/// Smallest ego–agent circle gap over the trace; +∞ without agents.
pub fn closest_approach(trace: &[WorldState]) -> f64 {
    trace
        .iter()
        .flat_map(|w| w.agents.iter().map(move |a| circle_gap(&w.ego, &a.vehicle)))
        .fold(f64::INFINITY, f64::min)
}
