use serde::{Deserialize, Serialize};

use super::geom::{Obb, Vec2};
use super::state::WorldState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "body", content = "index", rename_all = "snake_case")]
pub enum BodyId {
    Ego,
    Agent(usize),
    Obstacle(usize),
}

fn project(corners: &[Vec2; 4], axis: Vec2) -> (f64, f64) {
    corners.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
        let p = c.dot(axis);
        (lo.min(p), hi.max(p))
    })
}

/// Separating-axis test with strict-overlap semantics: boxes that only touch do not collide.
pub fn obb_overlap(a: &Obb, b: &Obb) -> bool {
    let ca = a.corners();
    let cb = b.corners();
    let (a0, a1) = a.axes();
    let (b0, b1) = b.axes();
    [a0, a1, b0, b1].into_iter().all(|axis| {
        let (alo, ahi) = project(&ca, axis);
        let (blo, bhi) = project(&cb, axis);
        ahi.min(bhi) - alo.max(blo) > 0.0
    })
}

pub fn bodies(world: &WorldState) -> Vec<(BodyId, Obb)> {
    let mut out = Vec::with_capacity(1 + world.agents.len() + world.map.static_obstacles.len());
    out.push((BodyId::Ego, world.ego.footprint()));
    out.extend(
        world
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| (BodyId::Agent(i), a.vehicle.footprint())),
    );
    out.extend(
        world
            .map
            .static_obstacles
            .iter()
            .enumerate()
            .map(|(i, o)| (BodyId::Obstacle(i), *o)),
    );
    out
}

/// All overlapping body pairs `(i, j)` with `i < j`. Obstacle–obstacle pairs are skipped.
pub fn detect_collisions(world: &WorldState) -> Vec<(BodyId, BodyId)> {
    let bs = bodies(world);
    let mut out = Vec::new();
    for i in 0..bs.len() {
        for j in (i + 1)..bs.len() {
            if matches!((bs[i].0, bs[j].0), (BodyId::Obstacle(_), BodyId::Obstacle(_))) {
                continue;
            }
            let (ri, rj) = (bs[i].1.bounding_radius(), bs[j].1.bounding_radius());
            if bs[i].1.center.distance(bs[j].1.center) >= ri + rj {
                continue;
            }
            if obb_overlap(&bs[i].1, &bs[j].1) {
                out.push((bs[i].0, bs[j].0));
            }
        }
    }
    out
}

pub fn ego_collides(world: &WorldState) -> bool {
    detect_collisions(world)
        .iter()
        .any(|(a, b)| *a == BodyId::Ego || *b == BodyId::Ego)
}
