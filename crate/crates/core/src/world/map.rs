//! Road maps: lane centerlines, static obstacles, named spawn poses and routes.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::geom::{point_segment_distance, Obb, Vec2};
use super::WorldError;

pub const MAP_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub centerline: Vec<Vec2>,
    pub width: f64,
}

impl Lane {
    pub fn distance_to_centerline(&self, p: Vec2) -> f64 {
        self.centerline
            .windows(2)
            .map(|w| point_segment_distance(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpawnPoint {
    pub name: String,
    #[serde(flatten)]
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub name: String,
    pub points: Vec<Vec2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSpec {
    pub schema_version: u32,
    pub name: String,
    pub lanes: Vec<Lane>,
    #[serde(default)]
    pub static_obstacles: Vec<Obb>,
    #[serde(default)]
    pub spawn_points: Vec<SpawnPoint>,
    #[serde(default)]
    pub routes: Vec<Route>,
}

impl MapSpec {
    pub fn validate(&self) -> Result<(), WorldError> {
        if self.schema_version != MAP_SCHEMA_VERSION {
            return Err(WorldError::Schema(format!(
                "map schema version {} (expected {MAP_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        for (i, lane) in self.lanes.iter().enumerate() {
            if lane.centerline.len() < 2 {
                return Err(WorldError::InvalidMap(format!("lane {i} has fewer than 2 points")));
            }
            if !(lane.width > 0.0) {
                return Err(WorldError::InvalidMap(format!("lane {i} has non-positive width")));
            }
        }
        for r in &self.routes {
            if r.points.len() < 2 {
                return Err(WorldError::InvalidMap(format!("route {} has fewer than 2 points", r.name)));
            }
        }
        Ok(())
    }

    /// True if the point lies on some lane surface.
    pub fn on_road(&self, p: Vec2) -> bool {
        self.lanes.iter().any(|l| l.distance_to_centerline(p) <= l.width * 0.5)
    }

    pub fn spawn(&self, name: &str) -> Option<&SpawnPoint> {
        self.spawn_points.iter().find(|s| s.name == name)
    }

    pub fn route(&self, name: &str) -> Option<&Route> {
        self.routes.iter().find(|r| r.name == name)
    }

    pub fn from_json(text: &str) -> Result<Self, WorldError> {
        let m: MapSpec = serde_json::from_str(text).map_err(|e| WorldError::Schema(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("map serializes")
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Resolves a built-in map name.
    pub fn builtin(name: &str) -> Option<MapSpec> {
        match name {
            "straight" => Some(straight()),
            "curve" => Some(curve()),
            "intersection" => Some(intersection()),
            "empty" => Some(empty()),
            _ => None,
        }
    }

    pub fn builtin_names() -> &'static [&'static str] {
        &["straight", "curve", "intersection"]
    }
}

pub const LANE_WIDTH: f64 = 3.5;

fn spawn(name: &str, x: f64, y: f64, heading: f64) -> SpawnPoint {
    SpawnPoint {
        name: name.to_string(),
        pose: Pose { x, y, heading },
    }
}

/// No lanes at all. Used in tests and dataset synthesis.
pub fn empty() -> MapSpec {
    MapSpec {
        schema_version: MAP_SCHEMA_VERSION,
        name: "empty".into(),
        lanes: vec![],
        static_obstacles: vec![],
        spawn_points: vec![spawn("origin", 0.0, 0.0, 0.0)],
        routes: vec![Route {
            name: "main".into(),
            points: vec![Vec2::new(0.0, 0.0), Vec2::new(100.0, 0.0)],
        }],
    }
}

/// Two east-bound lanes at y = 0 and y = LANE_WIDTH.
pub fn straight() -> MapSpec {
    let lane = |y: f64| Lane {
        centerline: vec![Vec2::new(-50.0, y), Vec2::new(350.0, y)],
        width: LANE_WIDTH,
    };
    MapSpec {
        schema_version: MAP_SCHEMA_VERSION,
        name: "straight".into(),
        lanes: vec![lane(0.0), lane(LANE_WIDTH)],
        static_obstacles: vec![],
        spawn_points: vec![
            spawn("ego_start", 0.0, 0.0, 0.0),
            spawn("left_20", 20.0, LANE_WIDTH, 0.0),
            spawn("left_40", 40.0, LANE_WIDTH, 0.0),
            spawn("left_60", 60.0, LANE_WIDTH, 0.0),
            spawn("right_30", 30.0, 0.0, 0.0),
            spawn("right_60", 60.0, 0.0, 0.0),
            spawn("left_back_15", -15.0, LANE_WIDTH, 0.0),
        ],
        routes: vec![Route {
            name: "main".into(),
            points: vec![Vec2::new(0.0, 0.0), Vec2::new(150.0, 0.0)],
        }],
    }
}

/// A straight lead-in followed by a 90° left bend of radius 60 m.
pub fn curve() -> MapSpec {
    let radius = 60.0;
    let mut pts = vec![Vec2::new(-30.0, 0.0), Vec2::new(40.0, 0.0)];
    let n = 24;
    for k in 1..=n {
        let a = FRAC_PI_2 * k as f64 / n as f64;
        pts.push(Vec2::new(40.0 + radius * a.sin(), radius - radius * a.cos()));
    }
    pts.push(Vec2::new(40.0 + radius, radius + 60.0));
    MapSpec {
        schema_version: MAP_SCHEMA_VERSION,
        name: "curve".into(),
        lanes: vec![Lane {
            centerline: pts.clone(),
            width: LANE_WIDTH,
        }],
        static_obstacles: vec![],
        spawn_points: vec![spawn("ego_start", 0.0, 0.0, 0.0), spawn("ahead_30", 30.0, 0.0, 0.0)],
        routes: vec![Route {
            name: "main".into(),
            points: {
                let mut r = vec![Vec2::new(0.0, 0.0)];
                r.extend(pts.into_iter().skip(1).take(n + 1));
                r.push(Vec2::new(40.0 + radius, radius + 40.0));
                r
            },
        }],
    }
}

/// East-west road crossing a north-south road at the origin.
pub fn intersection() -> MapSpec {
    MapSpec {
        schema_version: MAP_SCHEMA_VERSION,
        name: "intersection".into(),
        lanes: vec![
            Lane {
                centerline: vec![Vec2::new(-120.0, 0.0), Vec2::new(120.0, 0.0)],
                width: LANE_WIDTH,
            },
            Lane {
                centerline: vec![Vec2::new(0.0, -120.0), Vec2::new(0.0, 120.0)],
                width: LANE_WIDTH,
            },
        ],
        static_obstacles: vec![],
        spawn_points: vec![
            spawn("ego_start", -60.0, 0.0, 0.0),
            spawn("south_40", 0.0, -40.0, FRAC_PI_2),
            spawn("north_40", 0.0, 40.0, -FRAC_PI_2),
        ],
        routes: vec![Route {
            name: "main".into(),
            points: vec![Vec2::new(-60.0, 0.0), Vec2::new(60.0, 0.0)],
        }],
    }
}
