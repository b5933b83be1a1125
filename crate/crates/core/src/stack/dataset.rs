//! Synthetic labeled frames rendered through the world simulator.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::Target;
use super::ObstacleClass;
use crate::world::geom::Vec2;
use crate::world::map::{self, LANE_WIDTH};
use crate::world::render::{rasterize, render_sensor, CameraConfig, PixelOwner, Raster, SensorFrame};
use crate::world::state::{Agent, Behavior, WorldState};
use crate::world::vehicle::{VehicleClass, VehicleState};
use crate::world::{ppm, WorldError};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub frame: SensorFrame,
    pub label: Target,
    /// Seed of the generating scene.
    pub provenance: u64,
}

fn scene_seed(seed: u64, i: usize) -> u64 {
    crate::world::rng::CounterRng::new(seed).at(i as u64)
}

/// Random single-object scene in front of the ego. `None` leaves the road empty.
pub fn classification_scene(class: Option<VehicleClass>, scene_seed: u64) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let lane_y = if rng.random_bool(0.5) { 0.0 } else { LANE_WIDTH };
    let ego_pos = Vec2::new(rng.random_range(0.0..100.0), lane_y + rng.random_range(-0.8..0.8));
    let ego_heading = rng.random_range(-0.1..0.1);
    let ego = VehicleState::new(VehicleClass::Car, ego_pos, ego_heading, 0.0);
    let mut world = WorldState::new(Arc::new(map::straight()), ego, scene_seed);
    world.weather.fog_beta = rng.random_range(0.0..0.03);
    world.weather.brightness = rng.random_range(0.75..1.0);
    let fwd = rng.random_range(5.0..18.0);
    let left = rng.random_range(-5.0..5.0);
    let rel_heading = rng.random_range(-0.4..0.4);
    if let Some(class) = class {
        let dir = Vec2::from_angle(ego_heading);
        let p = ego_pos + dir * fwd + dir.perp() * left;
        let v = VehicleState::new(class, p, ego_heading + rel_heading, 0.0);
        world.agents.push(Agent::new(v, Behavior::benign_cruise()));
    }
    world
}

/// Random lane-keeping scene; the label is the ego's lateral offset from its lane center.
pub fn lane_scene(scene_seed: u64) -> (WorldState, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let lane_y = if rng.random_bool(0.5) { 0.0 } else { LANE_WIDTH };
    let offset = rng.random_range(-1.5..1.5);
    let ego = VehicleState::new(
        VehicleClass::Car,
        Vec2::new(rng.random_range(0.0..100.0), lane_y + offset),
        rng.random_range(-0.05..0.05),
        0.0,
    );
    let mut world = WorldState::new(Arc::new(map::straight()), ego, scene_seed);
    world.weather.fog_beta = rng.random_range(0.0..0.03);
    world.weather.brightness = rng.random_range(0.75..1.0);
    (world, offset)
}

/// Class id for frame `i` of a balanced dataset.
pub fn class_for_index(i: usize) -> ObstacleClass {
    ObstacleClass::ALL[i % ObstacleClass::ALL.len()]
}

/// Obstacle-recognition frames; class of frame `i` is `i mod 4`, so counts are balanced.
pub fn synthesize_dataset(n: usize, seed: u64, cam: &CameraConfig) -> Result<Vec<LabeledFrame>, WorldError> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let class = class_for_index(i);
            let s = scene_seed(seed, i);
            let world = classification_scene(class.vehicle_class(), s);
            Ok(LabeledFrame {
                frame: render_sensor(&world, cam)?,
                label: Target::Class(class as usize),
                provenance: s,
            })
        })
        .collect()
}

pub fn synthesize_lane_dataset(n: usize, seed: u64, cam: &CameraConfig) -> Result<Vec<LabeledFrame>, WorldError> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let s = scene_seed(seed ^ 0x6c61_6e65, i);
            let (world, offset) = lane_scene(s);
            Ok(LabeledFrame {
                frame: render_sensor(&world, cam)?,
                label: Target::Value(offset),
                provenance: s,
            })
        })
        .collect()
}

/// Class of the nearest agent that owns at least one pixel of the raster.
pub fn visible_class(world: &WorldState, raster: &Raster) -> ObstacleClass {
    let mut seen = vec![false; world.agents.len()];
    for o in &raster.owner {
        if let PixelOwner::Agent(i) = o {
            seen[*i] = true;
        }
    }
    seen.iter()
        .enumerate()
        .filter(|(_, s)| **s)
        .map(|(i, _)| &world.agents[i].vehicle)
        .min_by(|a, b| {
            let da = a.position.distance(world.ego.position);
            let db = b.position.distance(world.ego.position);
            da.total_cmp(&db)
        })
        .map(|v| ObstacleClass::from(v.class))
        .unwrap_or(ObstacleClass::None)
}

/// Independent label check: re-renders a classification scene from its seed and reads
/// the class back from pixel ownership.
pub fn relabel_from_scene(class_hint: ObstacleClass, scene_seed: u64, cam: &CameraConfig) -> Result<ObstacleClass, WorldError> {
    let world = classification_scene(class_hint.vehicle_class(), scene_seed);
    let raster = rasterize(&world, cam)?;
    Ok(visible_class(&world, &raster))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IndexEntry {
    pub file: String,
    pub label: Target,
    pub provenance: u64,
}

/// Writes `frame_NNNNN.ppm` files plus `labels.jsonl`.
pub fn dump_dataset(frames: &[LabeledFrame], dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = fs::File::create(dir.join("labels.jsonl"))?;
    for (i, f) in frames.iter().enumerate() {
        let name = format!("frame_{i:05}.ppm");
        fs::write(dir.join(&name), ppm::encode(f.frame.width, f.frame.height, &f.frame.pixels))?;
        let entry = IndexEntry {
            file: name,
            label: f.label,
            provenance: f.provenance,
        };
        writeln!(index, "{}", serde_json::to_string(&entry)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let cam = CameraConfig::default();
        let a = synthesize_dataset(40, 9, &cam).unwrap();
        let b = synthesize_dataset(40, 9, &cam).unwrap();
        assert_eq!(a, b);
        for c in 0..4 {
            assert_eq!(a.iter().filter(|f| f.label == Target::Class(c)).count(), 10);
        }
        assert!(a.iter().all(|f| f.frame.is_valid()));
    }

    #[test]
    fn labels_agree_with_rerender() {
        let cam = CameraConfig::default();
        for f in synthesize_dataset(24, 3, &cam).unwrap() {
            let Target::Class(c) = f.label else { panic!() };
            let class = ObstacleClass::ALL[c];
            assert_eq!(relabel_from_scene(class, f.provenance, &cam).unwrap(), class);
        }
    }

    #[test]
    fn lane_labels_in_range() {
        let cam = CameraConfig::default();
        let d = synthesize_lane_dataset(8, 1, &cam).unwrap();
        for f in d {
            let Target::Value(v) = f.label else { panic!() };
            assert!(v.abs() <= 1.5);
        }
    }
}
