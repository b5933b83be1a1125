//! Physical patch attack: a texture attached to an agent, fused into the native
//! render and optimized over jittered poses.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::digital::{loss_and_pixel_grad, sign};
use super::AttackError;
use crate::stack::model::Model;
use crate::stack::ObstacleClass;
use crate::world::geom::Vec2;
use crate::world::render::{apply_weather, pixel_world, rasterize, CameraConfig, PixelOwner, Raster, SensorFrame, CHANNELS, FOG_COLOR};
use crate::world::state::WorldState;
use crate::world::ppm;

/// H×W×3 texels in [0, 1], row-major. Columns run along the vehicle, rows across it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub width: usize,
    pub height: usize,
    pub texels: Vec<f64>,
}

impl Texture {
    pub fn uniform(width: usize, height: usize, color: [f64; 3]) -> Self {
        let mut texels = Vec::with_capacity(width * height * CHANNELS);
        for _ in 0..width * height {
            texels.extend_from_slice(&color);
        }
        Self { width, height, texels }
    }

    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * CHANNELS + ch
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if self.width == 0 || self.height == 0 {
            return Err(AttackError::Patch("empty texture".into()));
        }
        if self.texels.len() != self.width * self.height * CHANNELS {
            return Err(AttackError::Patch(format!(
                "texture has {} values, expected {}",
                self.texels.len(),
                self.width * self.height * CHANNELS
            )));
        }
        if self.texels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(AttackError::Patch("texels must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn save_ppm(&self, path: &Path) -> Result<(), AttackError> {
        let mut w = BufWriter::new(File::create(path)?);
        ppm::write(&mut w, self.width, self.height, &self.texels)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_ppm(path: &Path) -> Result<Self, AttackError> {
        let (width, height, texels) = ppm::read(BufReader::new(File::open(path)?))?;
        let t = Self { width, height, texels };
        t.validate()?;
        Ok(t)
    }
}

/// Rectangle on the agent footprint in its local frame (x forward, y left), meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchAttachment {
    pub agent: usize,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub texture: Texture,
    pub attachment: PatchAttachment,
}

impl PatchSpec {
    /// Texture of `texels_per_meter` density covering the central `fill` fraction of the
    /// agent footprint, painted with `color`.
    pub fn centered(world: &WorldState, agent: usize, fill: f64, texels_per_meter: f64, color: [f64; 3]) -> Result<Self, AttackError> {
        let a = world.agents.get(agent).ok_or(AttackError::MissingAgent(agent))?;
        let hl = 0.5 * a.vehicle.length * fill;
        let hw = 0.5 * a.vehicle.width * fill;
        let w = ((2.0 * hl * texels_per_meter).round() as usize).max(1);
        let h = ((2.0 * hw * texels_per_meter).round() as usize).max(1);
        Ok(Self {
            texture: Texture::uniform(w, h, color),
            attachment: PatchAttachment {
                agent,
                x0: -hl,
                y0: -hw,
                x1: hl,
                y1: hw,
            },
        })
    }

    pub fn validate(&self, world: &WorldState) -> Result<(), AttackError> {
        self.texture.validate()?;
        let at = &self.attachment;
        let agent = world.agents.get(at.agent).ok_or(AttackError::MissingAgent(at.agent))?;
        let (hl, hw) = (agent.vehicle.length * 0.5, agent.vehicle.width * 0.5);
        let ok = at.x0 < at.x1
            && at.y0 < at.y1
            && at.x0 >= -hl
            && at.x1 <= hl
            && at.y0 >= -hw
            && at.y1 <= hw;
        if !ok {
            return Err(AttackError::Patch("rectangle must lie inside the vehicle footprint".into()));
        }
        Ok(())
    }
}

/// One masked pixel: its index and the four bilinear taps (texel index, weight).
#[derive(Debug, Clone, Copy)]
struct Sample {
    pixel: usize,
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    fu: f64,
    fv: f64,
}

impl Sample {
    fn color(&self, tex: &Texture, ch: usize) -> f64 {
        let t = &tex.texels;
        let top = lerp(t[self.i00 + ch], t[self.i01 + ch], self.fu);
        let bot = lerp(t[self.i10 + ch], t[self.i11 + ch], self.fu);
        lerp(top, bot, self.fv)
    }

    fn taps(&self) -> [(usize, f64); 4] {
        let (u, v) = (self.fu, self.fv);
        [
            (self.i00, (1.0 - u) * (1.0 - v)),
            (self.i01, u * (1.0 - v)),
            (self.i10, (1.0 - u) * v),
            (self.i11, u * v),
        ]
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Integer tap pair and fraction for a continuous texel coordinate (centers at integers).
fn axis_taps(c: f64, n: usize) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    if c <= 0.0 {
        (0, 0, 0.0)
    } else if c >= max {
        (n - 1, n - 1, 0.0)
    } else {
        let f = c.floor();
        let i = f as usize;
        (i, i + 1, c - f)
    }
}

struct Fused {
    raster: Raster,
    raw: Vec<f64>,
    mask: Vec<bool>,
    samples: Vec<Sample>,
}

fn fuse(world: &WorldState, patch: &PatchSpec, cam: &CameraConfig) -> Result<Fused, AttackError> {
    patch.validate(world)?;
    let raster = rasterize(world, cam)?;
    let at = &patch.attachment;
    let fp = world.agents[at.agent].vehicle.footprint();
    let tex = &patch.texture;
    let mut raw = raster.raw.clone();
    let mut mask = vec![false; raster.owner.len()];
    let mut samples = Vec::new();
    for row in 0..cam.height {
        for col in 0..cam.width {
            let pixel = row * cam.width + col;
            if raster.owner[pixel] != PixelOwner::Agent(at.agent) {
                continue;
            }
            let q = fp.to_local(pixel_world(world, cam, row, col));
            if q.x < at.x0 || q.x > at.x1 || q.y < at.y0 || q.y > at.y1 {
                continue;
            }
            let u = (q.x - at.x0) / (at.x1 - at.x0) * tex.width as f64 - 0.5;
            let v = (q.y - at.y0) / (at.y1 - at.y0) * tex.height as f64 - 0.5;
            let (c0, c1, fu) = axis_taps(u, tex.width);
            let (r0, r1, fv) = axis_taps(v, tex.height);
            let s = Sample {
                pixel,
                i00: tex.index(r0, c0, 0),
                i01: tex.index(r0, c1, 0),
                i10: tex.index(r1, c0, 0),
                i11: tex.index(r1, c1, 0),
                fu,
                fv,
            };
            for ch in 0..CHANNELS {
                raw[pixel * CHANNELS + ch] = s.color(tex, ch);
            }
            mask[pixel] = true;
            samples.push(s);
        }
    }
    Ok(Fused {
        raster,
        raw,
        mask,
        samples,
    })
}

/// Fused frame and its per-pixel patch mask (row-major, one entry per pixel).
pub fn render_fused(world: &WorldState, patch: &PatchSpec, cam: &CameraConfig) -> Result<(SensorFrame, Vec<bool>), AttackError> {
    let f = fuse(world, patch, cam)?;
    let frame = apply_weather(&f.raw, &f.raster, world.weather.brightness);
    Ok((frame, f.mask))
}

/// Cross-entropy toward `class` on the fused frame and its gradient with respect to
/// every texel value.
pub fn patch_gradient(
    model: &Model,
    world: &WorldState,
    patch: &PatchSpec,
    class: usize,
    cam: &CameraConfig,
) -> Result<(f64, Vec<f64>), AttackError> {
    let f = fuse(world, patch, cam)?;
    let brightness = world.weather.brightness;
    let frame = apply_weather(&f.raw, &f.raster, brightness);
    let (loss, pixel_grad) = loss_and_pixel_grad(model, &frame.pixels, &frame, class)?;
    let mut grad = vec![0.0; patch.texture.texels.len()];
    for s in &f.samples {
        let t = f.raster.transmittance[s.pixel];
        for ch in 0..CHANNELS {
            let pre = (f.raw[s.pixel * CHANNELS + ch] * t + FOG_COLOR[ch] * (1.0 - t)) * brightness;
            if !(0.0..=1.0).contains(&pre) {
                continue;
            }
            let g = pixel_grad[s.pixel * CHANNELS + ch] * t * brightness;
            for (idx, w) in s.taps() {
                grad[idx + ch] += g * w;
            }
        }
    }
    Ok((loss, grad))
}

/// Expectation-over-transformation settings for patch optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EotConfig {
    pub n_samples: usize,
    /// Range of the ego–agent distance change, meters.
    pub d_distance: f64,
    /// Range of the rotation of the agent about the ego, radians.
    pub d_bearing: f64,
    /// Range of the agent heading change, radians.
    pub d_heading: f64,
    pub seed: u64,
    /// When set, descend the loss toward this class instead of ascending on the true one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_class: Option<usize>,
}

impl Default for EotConfig {
    fn default() -> Self {
        Self {
            n_samples: 8,
            d_distance: 2.0,
            d_bearing: 0.1,
            d_heading: 0.2,
            seed: 0,
            target_class: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseJitter {
    pub distance: f64,
    pub bearing: f64,
    pub heading: f64,
}

impl EotConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if self.n_samples == 0 {
            return Err(AttackError::Config("n_samples must be at least 1".into()));
        }
        let ranges = [self.d_distance, self.d_bearing, self.d_heading];
        if ranges.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(AttackError::Config("jitter ranges must be non-negative".into()));
        }
        Ok(())
    }

    /// The pose draws used at optimization step `step`.
    pub fn poses(&self, step: u64) -> Vec<PoseJitter> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        let mut draw = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        (0..self.n_samples)
            .map(|_| PoseJitter {
                distance: draw(self.d_distance),
                bearing: draw(self.d_bearing),
                heading: draw(self.d_heading),
            })
            .collect()
    }
}

/// Moves the agent radially and around the ego, then turns it.
pub fn jitter_world(world: &WorldState, agent: usize, j: &PoseJitter) -> Result<WorldState, AttackError> {
    let mut w = world.clone();
    let a = w.agents.get_mut(agent).ok_or(AttackError::MissingAgent(agent))?;
    let rel = a.vehicle.position - world.ego.position;
    let d = (rel.norm() + j.distance).max(1.0);
    let b = rel.y.atan2(rel.x) + j.bearing;
    a.vehicle.position = world.ego.position + Vec2::from_angle(b) * d;
    a.vehicle.heading += j.heading;
    Ok(w)
}

fn objective(world: &WorldState, patch: &PatchSpec, eot: &EotConfig) -> Result<(usize, f64), AttackError> {
    if let Some(t) = eot.target_class {
        return Ok((t, -1.0));
    }
    let agent = world
        .agents
        .get(patch.attachment.agent)
        .ok_or(AttackError::MissingAgent(patch.attachment.agent))?;
    Ok((ObstacleClass::from(agent.vehicle.class) as usize, 1.0))
}

/// Mean loss and mean texel gradient over the given poses, reduced in pose order.
fn mean_over_poses(
    model: &Model,
    world: &WorldState,
    patch: &PatchSpec,
    class: usize,
    poses: &[PoseJitter],
    cam: &CameraConfig,
) -> Result<(f64, Vec<f64>), AttackError> {
    let per: Vec<Result<(f64, Vec<f64>), AttackError>> = poses
        .par_iter()
        .map(|j| {
            let w = jitter_world(world, patch.attachment.agent, j)?;
            patch_gradient(model, &w, patch, class, cam)
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; patch.texture.texels.len()];
    for r in per {
        let (l, g) = r?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let n = poses.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// Mean objective loss of `patch` over a fixed pose set.
pub fn eot_loss(model: &Model, world: &WorldState, patch: &PatchSpec, eot: &EotConfig, poses: &[PoseJitter], cam: &CameraConfig) -> Result<f64, AttackError> {
    let (class, _) = objective(world, patch, eot)?;
    Ok(mean_over_poses(model, world, patch, class, poses, cam)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchResult {
    pub patch: PatchSpec,
    /// Mean EOT loss before each step.
    pub loss_curve: Vec<f64>,
}

impl PatchResult {
    pub fn loss_curve_jsonl(&self) -> String {
        self.loss_curve
            .iter()
            .enumerate()
            .map(|(step, loss)| format!("{}\n", serde_json::json!({ "step": step, "loss": loss })))
            .collect()
    }
}

/// Signed-gradient ascent on the mean EOT loss, texels clamped to [0, 1] after each step.
pub fn optimize_patch(
    model: &Model,
    world: &WorldState,
    patch_init: &PatchSpec,
    eot: &EotConfig,
    steps: usize,
    lr: f64,
    cam: &CameraConfig,
) -> Result<PatchResult, AttackError> {
    eot.validate()?;
    patch_init.validate(world)?;
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(AttackError::Config("lr must be non-negative".into()));
    }
    let (class, dir) = objective(world, patch_init, eot)?;
    let mut patch = patch_init.clone();
    let mut loss_curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let poses = eot.poses(step as u64);
        let (loss, grad) = mean_over_poses(model, world, &patch, class, &poses, cam)?;
        loss_curve.push(loss);
        for (t, g) in patch.texture.texels.iter_mut().zip(&grad) {
            *t = (*t + lr * (dir * sign(*g))).clamp(0.0, 1.0);
        }
    }
    Ok(PatchResult { patch, loss_curve })
}
