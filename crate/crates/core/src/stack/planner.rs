//! Route tracking and the rule-based decision layer.

use serde::{Deserialize, Serialize};

use super::model::PerceptionOutput;
use super::ObstacleClass;
use crate::world::geom::{point_along_polyline, project_onto_polyline, wrap_angle, Vec2};
use crate::world::raycast::RangeScan;
use crate::world::vehicle::{ControlCommand, VehicleState, A_MAX, STEER_MAX, WHEELBASE};

/// Steering angle from the heading error `alpha` to a point `lookahead` meters away.
pub fn pure_pursuit_angle(alpha: f64, lookahead: f64) -> f64 {
    (2.0 * WHEELBASE * alpha.sin() / lookahead).atan().clamp(-STEER_MAX, STEER_MAX)
}

/// Steering angle (radians) toward the route point `lookahead` meters past the
/// vehicle's projection onto the route.
pub fn pure_pursuit(vehicle: &VehicleState, route: &[Vec2], lookahead: f64) -> f64 {
    let target = if route.len() == 1 {
        route[0]
    } else {
        let (_, s) = project_onto_polyline(vehicle.position, route);
        point_along_polyline(route, s + lookahead).0
    };
    let d = target - vehicle.position;
    if d.norm_sq() == 0.0 {
        return 0.0;
    }
    let alpha = wrap_angle(d.y.atan2(d.x) - vehicle.heading);
    pure_pursuit_angle(alpha, lookahead)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeciderConfig {
    pub cruise_speed: f64,
    pub lookahead: f64,
    pub speed_gain: f64,
    /// Beams within this angle of straight ahead count as "forward".
    pub forward_half_angle: f64,
    /// Extra clearance added to the stopping distance, meters.
    pub brake_margin: f64,
}

impl Default for DeciderConfig {
    fn default() -> Self {
        Self {
            cruise_speed: 10.0,
            lookahead: 6.0,
            speed_gain: 0.5,
            forward_half_angle: 0.15,
            brake_margin: 2.0,
        }
    }
}

impl DeciderConfig {
    /// Range below which a detected obstacle triggers full braking.
    pub fn braking_distance(&self, ego: &VehicleState) -> f64 {
        ego.speed * ego.speed / (2.0 * A_MAX) + ego.length * 0.5 + self.brake_margin
    }
}

/// Finite-state rule: brake fully when an obstacle is recognized and the forward
/// range is inside the braking distance, otherwise track the route at cruise speed.
pub fn decide(
    perception: &PerceptionOutput,
    scan: &RangeScan,
    cfg: &DeciderConfig,
    route: &[Vec2],
    ego: &VehicleState,
) -> ControlCommand {
    let steer = pure_pursuit(ego, route, cfg.lookahead) / STEER_MAX;
    let class = perception.argmax().map(ObstacleClass::from_index).unwrap_or(ObstacleClass::None);
    if class != ObstacleClass::None && scan.forward_min(cfg.forward_half_angle) < cfg.braking_distance(ego) {
        return ControlCommand::autonomy(-1.0, steer);
    }
    ControlCommand::autonomy(cfg.speed_gain * (cfg.cruise_speed - ego.speed), steer)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_6};

    use super::*;
    use crate::world::vehicle::VehicleClass;

    fn ego() -> VehicleState {
        VehicleState::new(VehicleClass::Car, Vec2::ZERO, 0.0, 10.0)
    }

    fn scan(range: f64) -> RangeScan {
        RangeScan {
            n_beams: 5,
            fov: 0.4,
            max_range: 40.0,
            ranges: vec![40.0, 40.0, range, 40.0, 40.0],
        }
    }

    #[test]
    fn dead_ahead_is_zero() {
        let route = [Vec2::ZERO, Vec2::new(100.0, 0.0)];
        assert_eq!(pure_pursuit(&ego(), &route, 5.0), 0.0);
    }

    #[test]
    fn closed_form_angle() {
        let s = pure_pursuit_angle(FRAC_PI_6, 5.0);
        assert!((s - 0.5f64.atan()).abs() < 1e-12);
        assert!((s - 0.4636).abs() < 1e-4);
    }

    #[test]
    fn left_right_symmetry() {
        let l = pure_pursuit(&ego(), &[Vec2::new(0.0, 5.0)], 5.0);
        let r = pure_pursuit(&ego(), &[Vec2::new(0.0, -5.0)], 5.0);
        assert_eq!(l, -r);
        assert!(l > 0.0);
        assert_eq!(pure_pursuit_angle(FRAC_PI_2, 5.0), pure_pursuit_angle(FRAC_PI_2, 5.0).min(STEER_MAX));
    }

    #[test]
    fn rule_table() {
        let cfg = DeciderConfig::default();
        let route = [Vec2::ZERO, Vec2::new(100.0, 0.0)];
        let e = ego();
        let brake_at = cfg.braking_distance(&e);
        for class in 0..4 {
            let mut p = vec![0.02; 4];
            p[class] = 0.94;
            let perception = PerceptionOutput::Classes(p);
            for range in [3.0, brake_at - 0.01, brake_at, 25.0, 40.0] {
                let cmd = decide(&perception, &scan(range), &cfg, &route, &e);
                let should_brake = class != 0 && range < brake_at;
                assert_eq!(cmd.throttle() == -1.0, should_brake, "class {class} range {range}");
                assert_eq!(cmd.steer_cmd(), 0.0);
            }
        }
    }

    #[test]
    fn cruise_when_clear() {
        let cfg = DeciderConfig::default();
        let route = [Vec2::ZERO, Vec2::new(100.0, 0.0)];
        let mut e = ego();
        e.speed = 6.0;
        let none = PerceptionOutput::Classes(vec![0.9, 0.05, 0.03, 0.02]);
        let cmd = decide(&none, &scan(3.0), &cfg, &route, &e);
        assert_eq!(cmd.throttle(), 1.0);
        let car = PerceptionOutput::Classes(vec![0.05, 0.9, 0.03, 0.02]);
        let cmd = decide(&car, &scan(3.0), &cfg, &route, &e);
        assert_eq!(cmd.throttle(), -1.0);
    }
}
