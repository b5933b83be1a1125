use serde::{Deserialize, Serialize};

use super::collision::{bodies, BodyId};
use super::geom::{ray_segment, Vec2};
use super::state::WorldState;
use super::WorldError;

/// Planar range scan from the ego center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeScan {
    pub n_beams: usize,
    pub fov: f64,
    pub max_range: f64,
    pub ranges: Vec<f64>,
}

impl RangeScan {
    /// Beam angle relative to the ego heading.
    pub fn beam_offset(&self, k: usize) -> f64 {
        beam_offset(self.n_beams, self.fov, k)
    }

    /// Shortest range among beams within `half_angle` of straight ahead.
    pub fn forward_min(&self, half_angle: f64) -> f64 {
        (0..self.n_beams)
            .filter(|&k| self.beam_offset(k).abs() <= half_angle)
            .map(|k| self.ranges[k])
            .fold(self.max_range, f64::min)
    }
}

fn beam_offset(n_beams: usize, fov: f64, k: usize) -> f64 {
    if n_beams == 1 {
        0.0
    } else {
        -fov / 2.0 + k as f64 * fov / (n_beams - 1) as f64
    }
}

pub fn raycast(world: &WorldState, n_beams: usize, fov: f64, max_range: f64) -> Result<RangeScan, WorldError> {
    if n_beams == 0 {
        return Err(WorldError::InvalidScan);
    }
    let origin = world.ego.position;
    let targets: Vec<_> = bodies(world)
        .into_iter()
        .filter(|(id, _)| *id != BodyId::Ego)
        .filter(|(_, b)| b.center.distance(origin) - b.bounding_radius() < max_range)
        .map(|(_, b)| b.edges())
        .collect();
    let ranges = (0..n_beams)
        .map(|k| {
            let dir = Vec2::from_angle(world.ego.heading + beam_offset(n_beams, fov, k));
            let mut best = max_range;
            for edges in &targets {
                for (a, b) in edges {
                    if let Some(t) = ray_segment(origin, dir, *a, *b) {
                        best = best.min(t);
                    }
                }
            }
            best.clamp(0.0, max_range)
        })
        .collect();
    Ok(RangeScan {
        n_beams,
        fov,
        max_range,
        ranges,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;
    use std::sync::Arc;

    use super::*;
    use crate::world::geom::Obb;
    use crate::world::map;
    use crate::world::state::{Agent, Behavior};
    use crate::world::vehicle::{VehicleClass, VehicleState};

    fn world() -> WorldState {
        let ego = VehicleState::new(VehicleClass::Car, Vec2::ZERO, 0.0, 0.0);
        WorldState::new(Arc::new(map::empty()), ego, 0)
    }

    #[test]
    fn empty_world_reads_max_range() {
        let s = raycast(&world(), 31, 1.0, 40.0).unwrap();
        assert!(s.ranges.iter().all(|&r| r == 40.0));
    }

    #[test]
    fn wall_five_meters_ahead() {
        let mut w = world();
        let mut m = map::empty();
        m.static_obstacles.push(Obb::new(Vec2::new(5.1, 0.0), 0.0, 0.2, 10.0));
        w.map = Arc::new(m);
        let s = raycast(&w, 11, 1.0, 40.0).unwrap();
        assert!((s.ranges[5] - 5.0).abs() < 1e-6);
        assert_eq!(s.beam_offset(5), 0.0);
    }

    #[test]
    fn body_behind_is_invisible_to_forward_fov() {
        let mut w = world();
        w.agents.push(Agent::new(
            VehicleState::new(VehicleClass::Truck, Vec2::new(-10.0, 0.0), 0.0, 0.0),
            Behavior::benign_cruise(),
        ));
        let s = raycast(&w, 21, FRAC_PI_2, 40.0).unwrap();
        assert!(s.ranges.iter().all(|&r| r == 40.0));
    }

    #[test]
    fn single_beam_points_ahead() {
        assert_eq!(beam_offset(1, 2.0, 0), 0.0);
        assert!(raycast(&world(), 0, 1.0, 10.0).is_err());
    }
}
