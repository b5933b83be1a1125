//! Small layered perception networks with an activation cache and reverse-mode
//! gradients with respect to both parameters and the input.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::ModelError;
use crate::world::render::{SensorFrame, CHANNELS};

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        kernel: usize,
        stride: usize,
        out_channels: usize,
    },
    Relu,
    #[serde(rename = "maxpool2")]
    MaxPool2,
    Flatten,
    Dense {
        out: usize,
    },
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ObstacleClassifier,
    LaneRegressor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub task: Task,
    /// (channels, height, width)
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Shape after each layer; element 0 is the input shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>, ModelError> {
        let mut shapes = vec![self.input_shape.to_vec()];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = shapes.last().unwrap().clone();
            let bad = |why: &str| ModelError::Incompatible(format!("layer {i} ({layer:?}): {why}"));
            let next = match *layer {
                LayerSpec::Conv2d {
                    kernel,
                    stride,
                    out_channels,
                } => {
                    if cur.len() != 3 {
                        return Err(bad("expects a 3-d input"));
                    }
                    if kernel == 0 || stride == 0 || out_channels == 0 || kernel > cur[1] || kernel > cur[2] {
                        return Err(bad("kernel does not fit"));
                    }
                    vec![out_channels, (cur[1] - kernel) / stride + 1, (cur[2] - kernel) / stride + 1]
                }
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool2 => {
                    if cur.len() != 3 || cur[1] < 2 || cur[2] < 2 {
                        return Err(bad("expects a 3-d input of at least 2x2"));
                    }
                    vec![cur[0], cur[1] / 2, cur[2] / 2]
                }
                LayerSpec::Flatten => vec![cur.iter().product()],
                LayerSpec::Dense { out } => {
                    if cur.len() != 1 || out == 0 {
                        return Err(bad("expects a flat input"));
                    }
                    vec![out]
                }
                LayerSpec::Softmax => {
                    if cur.len() != 1 {
                        return Err(bad("expects a flat input"));
                    }
                    cur
                }
            };
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<Vec<Vec<usize>>, ModelError> {
        let shapes = self.shapes()?;
        let softmaxes = self.layers.iter().filter(|l| matches!(l, LayerSpec::Softmax)).count();
        let last = self.layers.last();
        let out = shapes.last().unwrap();
        match self.task {
            Task::ObstacleClassifier => {
                if softmaxes != 1 || last != Some(&LayerSpec::Softmax) {
                    return Err(ModelError::Incompatible("classifier must end in a single softmax".into()));
                }
                if out != &vec![super::NUM_CLASSES] {
                    return Err(ModelError::Incompatible(format!(
                        "classifier head must have {} outputs",
                        super::NUM_CLASSES
                    )));
                }
            }
            Task::LaneRegressor => {
                if softmaxes != 0 || !matches!(last, Some(LayerSpec::Dense { out: 1 })) {
                    return Err(ModelError::Incompatible("regressor must end in a linear scalar".into()));
                }
            }
        }
        Ok(shapes)
    }
}

/// Parameter shapes in file order, with their names.
pub fn param_layout(spec: &ModelSpec) -> Result<Vec<(String, Vec<usize>)>, ModelError> {
    let shapes = spec.shapes()?;
    let mut out = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        let inp = &shapes[i];
        match *layer {
            LayerSpec::Conv2d {
                kernel, out_channels, ..
            } => {
                out.push((format!("conv{i}.weight"), vec![out_channels, inp[0], kernel, kernel]));
                out.push((format!("conv{i}.bias"), vec![out_channels]));
            }
            LayerSpec::Dense { out: o } => {
                out.push((format!("dense{i}.weight"), vec![o, inp[0]]));
                out.push((format!("dense{i}.bias"), vec![o]));
            }
            _ => {}
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum PerceptionOutput {
    /// Probabilities over (none, car, truck, pedestrian).
    Classes(Vec<f64>),
    /// Lateral lane offset in meters, positive to the left.
    Offset(f64),
}

impl PerceptionOutput {
    pub fn argmax(&self) -> Option<usize> {
        match self {
            PerceptionOutput::Classes(p) => Some(argmax(p)),
            PerceptionOutput::Offset(_) => None,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            PerceptionOutput::Classes(p) => p.clone(),
            PerceptionOutput::Offset(v) => vec![*v],
        }
    }
}

/// First index of the maximum; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Everything backward needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    model_version: u64,
    activations: Vec<Tensor>,
    pool_argmax: Vec<Vec<usize>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        self.activations.last().unwrap()
    }

    pub fn input(&self) -> &Tensor {
        &self.activations[0]
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    shapes: Vec<Vec<usize>>,
    /// Flat list in [`param_layout`] order.
    params: Vec<Tensor>,
    /// Index into `params` of each layer's weight, if it has one.
    param_index: Vec<Option<usize>>,
    version: u64,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

impl Model {
    pub fn zeros(spec: ModelSpec) -> Result<Self, ModelError> {
        let shapes = spec.validate()?;
        let layout = param_layout(&spec)?;
        let params = layout.iter().map(|(_, s)| Tensor::zeros(s)).collect();
        let mut param_index = Vec::with_capacity(spec.layers.len());
        let mut next = 0;
        for layer in &spec.layers {
            if matches!(layer, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. }) {
                param_index.push(Some(next));
                next += 2;
            } else {
                param_index.push(None);
            }
        }
        Ok(Self {
            spec,
            shapes,
            params,
            param_index,
            version: fresh_version(),
        })
    }

    /// Uniform ±sqrt(6 / (fan_in + fan_out)) weights, zero biases, rounded to f32.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        let mut m = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in m.params.iter_mut() {
            if p.shape.len() < 2 {
                continue;
            }
            let (fan_in, fan_out) = if p.shape.len() == 4 {
                let rf = p.shape[2] * p.shape[3];
                (p.shape[1] * rf, p.shape[0] * rf)
            } else {
                (p.shape[1], p.shape[0])
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut p.data {
                *v = rng.random_range(-limit..limit);
            }
            p.round_to_f32();
        }
        Ok(m)
    }

    pub fn from_params(spec: ModelSpec, params: Vec<Tensor>) -> Result<Self, ModelError> {
        let mut m = Self::zeros(spec)?;
        if params.len() != m.params.len() {
            return Err(ModelError::Incompatible("parameter count mismatch".into()));
        }
        for (i, (dst, src)) in m.params.iter_mut().zip(params).enumerate() {
            if dst.shape != src.shape {
                return Err(ModelError::Incompatible(format!("parameter {i} shape mismatch")));
            }
            *dst = src;
        }
        Ok(m)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn task(&self) -> Task {
        self.spec.task
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Mutable access; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut [Tensor] {
        self.version = fresh_version();
        &mut self.params
    }

    pub fn input_len(&self) -> usize {
        self.spec.input_shape.iter().product()
    }

    pub fn forward_tensor(&self, input: &Tensor) -> Result<(PerceptionOutput, ForwardCache), ModelError> {
        if input.shape != self.shapes[0] {
            return Err(ModelError::ShapeMismatch {
                expected: self.shapes[0].clone(),
                got: input.shape.clone(),
            });
        }
        let mut acts = Vec::with_capacity(self.spec.layers.len() + 1);
        let mut pools = Vec::new();
        acts.push(input.clone());
        for (i, layer) in self.spec.layers.iter().enumerate() {
            let x = acts.last().unwrap();
            let out_shape = &self.shapes[i + 1];
            let y = match *layer {
                LayerSpec::Conv2d { kernel, stride, .. } => {
                    let pi = self.param_index[i].unwrap();
                    conv_forward(x, &self.params[pi], &self.params[pi + 1], kernel, stride, out_shape)
                }
                LayerSpec::Relu => Tensor {
                    shape: x.shape.clone(),
                    data: x.data.iter().map(|v| v.max(0.0)).collect(),
                },
                LayerSpec::MaxPool2 => {
                    let (y, idx) = maxpool_forward(x, out_shape);
                    pools.push(idx);
                    y
                }
                LayerSpec::Flatten => Tensor {
                    shape: out_shape.clone(),
                    data: x.data.clone(),
                },
                LayerSpec::Dense { .. } => {
                    let pi = self.param_index[i].unwrap();
                    dense_forward(x, &self.params[pi], &self.params[pi + 1])
                }
                LayerSpec::Softmax => Tensor {
                    shape: x.shape.clone(),
                    data: softmax(&x.data),
                },
            };
            acts.push(y);
        }
        let out = acts.last().unwrap();
        if !out.all_finite() {
            return Err(ModelError::NonFinite);
        }
        let perception = match self.spec.task {
            Task::ObstacleClassifier => PerceptionOutput::Classes(out.data.clone()),
            Task::LaneRegressor => PerceptionOutput::Offset(out.data[0]),
        };
        Ok((
            perception,
            ForwardCache {
                model_version: self.version,
                activations: acts,
                pool_argmax: pools,
            },
        ))
    }

    pub fn forward(&self, frame: &SensorFrame) -> Result<(PerceptionOutput, ForwardCache), ModelError> {
        self.forward_tensor(&self.frame_to_input(frame)?)
    }

    pub fn predict(&self, frame: &SensorFrame) -> Result<PerceptionOutput, ModelError> {
        Ok(self.forward(frame)?.0)
    }

    /// HWC frame → CHW input tensor.
    pub fn frame_to_input(&self, frame: &SensorFrame) -> Result<Tensor, ModelError> {
        let [c, h, w] = self.spec.input_shape;
        if c != CHANNELS || frame.height != h || frame.width != w || frame.pixels.len() != c * h * w {
            return Err(ModelError::ShapeMismatch {
                expected: vec![h, w, c],
                got: vec![frame.height, frame.width, CHANNELS],
            });
        }
        Ok(Tensor {
            shape: vec![c, h, w],
            data: hwc_to_chw(&frame.pixels, h, w),
        })
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<(), ModelError> {
        if cache.model_version != self.version || cache.activations.len() != self.spec.layers.len() + 1 {
            return Err(ModelError::StaleCache);
        }
        Ok(())
    }

    /// Reverse pass from a gradient on the model output. Returns the input gradient and,
    /// when `want_params` is set, the parameter gradients in [`Model::params`] order.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_output: &Tensor,
        want_params: bool,
    ) -> Result<(Tensor, Option<Vec<Tensor>>), ModelError> {
        self.check_cache(cache)?;
        if grad_output.shape != *self.shapes.last().unwrap() {
            return Err(ModelError::ShapeMismatch {
                expected: self.shapes.last().unwrap().clone(),
                got: grad_output.shape.clone(),
            });
        }
        let mut pgrads = want_params.then(|| self.params.iter().map(|p| Tensor::zeros(&p.shape)).collect::<Vec<_>>());
        let mut g = grad_output.clone();
        let mut pool_k = cache.pool_argmax.len();
        for (i, layer) in self.spec.layers.iter().enumerate().rev() {
            let x = &cache.activations[i];
            let y = &cache.activations[i + 1];
            g = match *layer {
                LayerSpec::Conv2d { kernel, stride, .. } => {
                    let pi = self.param_index[i].unwrap();
                    let (gx, gw, gb) = conv_backward(x, &self.params[pi], &g, kernel, stride, want_params);
                    if let Some(pg) = pgrads.as_mut() {
                        pg[pi] = gw.unwrap();
                        pg[pi + 1] = gb.unwrap();
                    }
                    gx
                }
                LayerSpec::Relu => Tensor {
                    shape: x.shape.clone(),
                    data: x
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(xv, gv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                },
                LayerSpec::MaxPool2 => {
                    pool_k -= 1;
                    let mut gx = Tensor::zeros(&x.shape);
                    for (o, &src) in cache.pool_argmax[pool_k].iter().enumerate() {
                        gx.data[src] += g.data[o];
                    }
                    gx
                }
                LayerSpec::Flatten => Tensor {
                    shape: x.shape.clone(),
                    data: g.data,
                },
                LayerSpec::Dense { .. } => {
                    let pi = self.param_index[i].unwrap();
                    let w = &self.params[pi];
                    let (n_out, n_in) = (w.shape[0], w.shape[1]);
                    let mut gx = Tensor::zeros(&x.shape);
                    for o in 0..n_out {
                        let go = g.data[o];
                        let row = &w.data[o * n_in..(o + 1) * n_in];
                        for (gxv, wv) in gx.data.iter_mut().zip(row) {
                            *gxv += wv * go;
                        }
                    }
                    if let Some(pg) = pgrads.as_mut() {
                        let gw = &mut pg[pi];
                        for o in 0..n_out {
                            let go = g.data[o];
                            for (k, xv) in x.data.iter().enumerate() {
                                gw.data[o * n_in + k] = go * xv;
                            }
                        }
                        pg[pi + 1].data.copy_from_slice(&g.data);
                    }
                    gx
                }
                LayerSpec::Softmax => {
                    let dot: f64 = y.data.iter().zip(&g.data).map(|(p, gp)| p * gp).sum();
                    Tensor {
                        shape: x.shape.clone(),
                        data: y.data.iter().zip(&g.data).map(|(p, gp)| p * (gp - dot)).collect(),
                    }
                }
            };
        }
        Ok((g, pgrads))
    }
}

pub fn hwc_to_chw(pixels: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; pixels.len()];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..CHANNELS {
                out[(ch * h + r) * w + c] = pixels[(r * w + c) * CHANNELS + ch];
            }
        }
    }
    out
}

pub fn chw_to_hwc(data: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..CHANNELS {
                out[(r * w + c) * CHANNELS + ch] = data[(ch * h + r) * w + c];
            }
        }
    }
    out
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, k: usize, s: usize, out_shape: &[usize]) -> Tensor {
    let (cin, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let (cout, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let mut y = Tensor::zeros(out_shape);
    for o in 0..cout {
        let plane = &mut y.data[o * oh * ow..(o + 1) * oh * ow];
        plane.fill(b.data[o]);
        for c in 0..cin {
            let xin = &x.data[c * h * wd..(c + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w.data[((o * cin + c) * k + ky) * k + kx];
                    for oy in 0..oh {
                        let row = &xin[(oy * s + ky) * wd..];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            *ov += wv * row[ox * s + kx];
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    k: usize,
    s: usize,
    want_params: bool,
) -> (Tensor, Option<Tensor>, Option<Tensor>) {
    let (cin, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let (cout, oh, ow) = (g.shape[0], g.shape[1], g.shape[2]);
    let mut gx = Tensor::zeros(&x.shape);
    let mut gw = want_params.then(|| Tensor::zeros(&w.shape));
    let mut gb = want_params.then(|| Tensor::zeros(&[cout]));
    for o in 0..cout {
        let gplane = &g.data[o * oh * ow..(o + 1) * oh * ow];
        if let Some(gb) = gb.as_mut() {
            gb.data[o] = gplane.iter().sum();
        }
        for c in 0..cin {
            let base = c * h * wd;
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * cin + c) * k + ky) * k + kx;
                    let wv = w.data[widx];
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let roff = base + (oy * s + ky) * wd + kx;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        for (ox, gv) in grow.iter().enumerate() {
                            let xi = roff + ox * s;
                            gx.data[xi] += wv * gv;
                            acc += x.data[xi] * gv;
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        gw.data[widx] = acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

fn maxpool_forward(x: &Tensor, out_shape: &[usize]) -> (Tensor, Vec<usize>) {
    let (h, w) = (x.shape[1], x.shape[2]);
    let (c, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let mut y = Tensor::zeros(out_shape);
    let mut idx = vec![0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ch * h * w + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                    if x.data[j] > x.data[best] {
                        best = j;
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                y.data[o] = x.data[best];
                idx[o] = best;
            }
        }
    }
    (y, idx)
}

fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (n_out, n_in) = (w.shape[0], w.shape[1]);
    let data = (0..n_out)
        .map(|o| {
            let row = &w.data[o * n_in..(o + 1) * n_in];
            b.data[o] + row.iter().zip(&x.data).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    Tensor { shape: vec![n_out], data }
}
