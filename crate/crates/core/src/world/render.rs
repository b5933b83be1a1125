//! Ego-centric top-down rasterizer with fog and brightness compositing.
//!
//! The frame is anchored on the ego: image "up" is the ego heading and the ego
//! center projects to (`anchor_row`, `anchor_col`). Each pixel takes the color of
//! the topmost shape covering its center (background < lane < marking < obstacle <
//! agent), then is composited with fog by ground distance from the ego and scaled by
//! brightness.

use serde::{Deserialize, Serialize};

use super::geom::Vec2;
use super::state::WorldState;
use super::WorldError;

pub const CHANNELS: usize = 3;

pub const BACKGROUND_COLOR: [f64; 3] = [0.20, 0.42, 0.22];
pub const LANE_COLOR: [f64; 3] = [0.35, 0.35, 0.38];
pub const MARKING_COLOR: [f64; 3] = [0.95, 0.95, 0.95];
pub const OBSTACLE_COLOR: [f64; 3] = [0.55, 0.35, 0.20];
pub const FOG_COLOR: [f64; 3] = [0.78, 0.78, 0.80];

/// Half-thickness of the painted band inside each lane edge, meters.
pub const MARKING_BAND: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub meters_per_pixel: f64,
    pub anchor_col: f64,
    pub anchor_row: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            meters_per_pixel: 0.5,
            anchor_col: 32.0,
            anchor_row: 48.0,
        }
    }
}

impl CameraConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        if self.width == 0 || self.height == 0 || !(self.meters_per_pixel > 0.0) {
            return Err(WorldError::InvalidCamera);
        }
        Ok(())
    }

    /// Ego-frame (forward, left) offset of a pixel center, meters.
    pub fn pixel_offset(&self, row: usize, col: usize) -> (f64, f64) {
        let fwd = (self.anchor_row - (row as f64 + 0.5)) * self.meters_per_pixel;
        let left = (self.anchor_col - (col as f64 + 0.5)) * self.meters_per_pixel;
        (fwd, left)
    }

    /// Continuous image coordinates (col, row) of an ego-frame offset; pixel centers
    /// sit at half-integers.
    pub fn image_coords(&self, fwd: f64, left: f64) -> (f64, f64) {
        (
            self.anchor_col - left / self.meters_per_pixel,
            self.anchor_row - fwd / self.meters_per_pixel,
        )
    }

    pub fn len(&self) -> usize {
        self.width * self.height * CHANNELS
    }
}

/// H×W×3 image with values in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl SensorFrame {
    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * CHANNELS);
        for _ in 0..width * height {
            pixels.extend_from_slice(&color);
        }
        Self { width, height, pixels }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self, WorldError> {
        if pixels.len() != width * height * CHANNELS {
            return Err(WorldError::FrameShape {
                expected: width * height * CHANNELS,
                got: pixels.len(),
            });
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(WorldError::FrameRange);
        }
        Ok(Self { width, height, pixels })
    }

    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * CHANNELS + ch
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = self.index(row, col, 0);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn is_valid(&self) -> bool {
        self.pixels.len() == self.width * self.height * CHANNELS
            && self.pixels.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn max_abs_diff(&self, other: &SensorFrame) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelOwner {
    Background,
    Lane,
    Marking,
    Obstacle(usize),
    Agent(usize),
}

/// Pre-weather rasterization plus the per-pixel fog transmittance.
#[derive(Debug, Clone)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub raw: Vec<f64>,
    pub owner: Vec<PixelOwner>,
    pub transmittance: Vec<f64>,
}

pub fn pixel_world(world: &WorldState, cam: &CameraConfig, row: usize, col: usize) -> Vec2 {
    let (fwd, left) = cam.pixel_offset(row, col);
    let dir = Vec2::from_angle(world.ego.heading);
    world.ego.position + dir * fwd + dir.perp() * left
}

pub fn rasterize(world: &WorldState, cam: &CameraConfig) -> Result<Raster, WorldError> {
    cam.validate()?;
    let n = cam.width * cam.height;
    let mut raw = Vec::with_capacity(n * CHANNELS);
    let mut owner = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n);
    let agents: Vec<_> = world
        .agents
        .iter()
        .map(|a| (a.vehicle.footprint(), a.vehicle.class.color()))
        .collect();
    for row in 0..cam.height {
        for col in 0..cam.width {
            let p = pixel_world(world, cam, row, col);
            let mut who = PixelOwner::Background;
            for lane in &world.map.lanes {
                let d = lane.distance_to_centerline(p);
                let half = lane.width * 0.5;
                if d <= half {
                    if d >= half - MARKING_BAND {
                        who = PixelOwner::Marking;
                    } else if who != PixelOwner::Marking {
                        who = PixelOwner::Lane;
                    }
                }
            }
            for (i, o) in world.map.static_obstacles.iter().enumerate() {
                if o.contains(p) {
                    who = PixelOwner::Obstacle(i);
                }
            }
            for (i, (fp, _)) in agents.iter().enumerate() {
                if fp.contains(p) {
                    who = PixelOwner::Agent(i);
                }
            }
            let color = match who {
                PixelOwner::Background => BACKGROUND_COLOR,
                PixelOwner::Lane => LANE_COLOR,
                PixelOwner::Marking => MARKING_COLOR,
                PixelOwner::Obstacle(_) => OBSTACLE_COLOR,
                PixelOwner::Agent(i) => agents[i].1,
            };
            raw.extend_from_slice(&color);
            owner.push(who);
            let d = p.distance(world.ego.position);
            transmittance.push((-world.weather.fog_beta * d).exp());
        }
    }
    Ok(Raster {
        width: cam.width,
        height: cam.height,
        raw,
        owner,
        transmittance,
    })
}

/// Fog and brightness for one channel value.
#[inline]
pub fn composite(raw: f64, fog: f64, transmittance: f64, brightness: f64) -> f64 {
    ((raw * transmittance + fog * (1.0 - transmittance)) * brightness).clamp(0.0, 1.0)
}

/// Applies weather to a pre-weather image (same layout as [`Raster::raw`]).
pub fn apply_weather(raw: &[f64], raster: &Raster, brightness: f64) -> SensorFrame {
    let mut pixels = Vec::with_capacity(raw.len());
    for (i, chunk) in raw.chunks_exact(CHANNELS).enumerate() {
        let t = raster.transmittance[i];
        for (c, v) in chunk.iter().enumerate() {
            pixels.push(composite(*v, FOG_COLOR[c], t, brightness));
        }
    }
    SensorFrame {
        width: raster.width,
        height: raster.height,
        pixels,
    }
}

pub fn render_sensor(world: &WorldState, cam: &CameraConfig) -> Result<SensorFrame, WorldError> {
    let raster = rasterize(world, cam)?;
    Ok(apply_weather(&raster.raw, &raster, world.weather.brightness))
}
