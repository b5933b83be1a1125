//! L∞ perturbation attacks on sensor frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AttackError;
use crate::stack::loss::{backward_input, loss, LossKind, Target};
use crate::stack::model::{chw_to_hwc, Model, Task};
use crate::world::render::SensorFrame;

/// Below this L1 norm the normalized momentum term is taken as zero.
pub const ZERO_GRAD_L1: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Fgsm,
    Bim,
    Pgd,
    MiFgsm,
    Random,
}

impl AttackMethod {
    pub const ALL: [AttackMethod; 5] = [
        AttackMethod::Fgsm,
        AttackMethod::Bim,
        AttackMethod::Pgd,
        AttackMethod::MiFgsm,
        AttackMethod::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Bim => "bim",
            AttackMethod::Pgd => "pgd",
            AttackMethod::MiFgsm => "mi_fgsm",
            AttackMethod::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub epsilon: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default)]
    pub targeted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_class: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_alpha() -> f64 {
    0.01
}

fn default_steps() -> usize {
    10
}

fn default_mu() -> f64 {
    1.0
}

impl AttackConfig {
    pub fn new(method: AttackMethod, epsilon: f64) -> Self {
        Self {
            method,
            epsilon,
            alpha: default_alpha(),
            steps: default_steps(),
            mu: default_mu(),
            random_start: method == AttackMethod::Pgd,
            targeted: false,
            target_class: None,
            seed: 0,
        }
    }

    pub fn pgd(epsilon: f64, alpha: f64, steps: usize) -> Self {
        Self {
            alpha,
            steps,
            ..Self::new(AttackMethod::Pgd, epsilon)
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(AttackError::Config(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        let iterative = matches!(self.method, AttackMethod::Bim | AttackMethod::Pgd | AttackMethod::MiFgsm);
        if iterative && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(AttackError::Config("alpha must be positive".into()));
        }
        if iterative && self.steps == 0 {
            return Err(AttackError::Config("steps must be at least 1".into()));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(AttackError::Config("mu must be non-negative".into()));
        }
        if self.targeted && self.target_class.is_none() {
            return Err(AttackError::Config("targeted attack needs target_class".into()));
        }
        Ok(())
    }
}

/// One interface for every perturbation method.
pub trait Attack {
    fn name(&self) -> &str;
    fn perturb(&self, model: &Model, frame: &SensorFrame, label: usize) -> Result<SensorFrame, AttackError>;
}

impl Attack for AttackConfig {
    fn name(&self) -> &str {
        self.method.name()
    }

    fn perturb(&self, model: &Model, frame: &SensorFrame, label: usize) -> Result<SensorFrame, AttackError> {
        run_attack(model, frame, label, self)
    }
}

/// Sign with sign(0) = 0 (including −0).
#[inline]
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_classifier(model: &Model, frame: &SensorFrame) -> Result<(), AttackError> {
    if model.task() != Task::ObstacleClassifier {
        return Err(AttackError::Config("digital attacks need a classifier".into()));
    }
    model.frame_to_input(frame)?;
    Ok(())
}

/// Loss and its gradient with respect to frame pixels (HWC layout).
pub fn loss_and_pixel_grad(model: &Model, pixels: &[f64], frame: &SensorFrame, class: usize) -> Result<(f64, Vec<f64>), AttackError> {
    let tmp = SensorFrame {
        width: frame.width,
        height: frame.height,
        pixels: pixels.to_vec(),
    };
    let (out, cache) = model.forward(&tmp)?;
    let l = loss(&out, Target::Class(class), LossKind::CrossEntropy)?;
    let g = backward_input(model, &cache, Target::Class(class), LossKind::CrossEntropy)?;
    Ok((l, chw_to_hwc(&g.data, frame.height, frame.width)))
}

/// Class whose loss is followed and the step direction (+1 ascent, −1 descent).
fn objective(cfg: &AttackConfig, label: usize) -> (usize, f64) {
    match (cfg.targeted, cfg.target_class) {
        (true, Some(t)) => (t, -1.0),
        _ => (label, 1.0),
    }
}

fn project(x: &mut [f64], orig: &[f64], eps: f64) {
    for (v, o) in x.iter_mut().zip(orig) {
        *v = v.clamp(o - eps, o + eps).clamp(0.0, 1.0);
    }
}

fn with_pixels(frame: &SensorFrame, pixels: Vec<f64>) -> SensorFrame {
    SensorFrame {
        width: frame.width,
        height: frame.height,
        pixels,
    }
}

/// Single signed-gradient step of size ε, clipped to [0, 1].
pub fn fgsm(model: &Model, frame: &SensorFrame, label: usize, epsilon: f64) -> Result<SensorFrame, AttackError> {
    fgsm_with(model, frame, label, &AttackConfig::new(AttackMethod::Fgsm, epsilon))
}

pub fn fgsm_with(model: &Model, frame: &SensorFrame, label: usize, cfg: &AttackConfig) -> Result<SensorFrame, AttackError> {
    cfg.validate()?;
    check_classifier(model, frame)?;
    if cfg.epsilon == 0.0 {
        return Ok(frame.clone());
    }
    let (class, dir) = objective(cfg, label);
    let (_, g) = loss_and_pixel_grad(model, &frame.pixels, frame, class)?;
    let pixels = frame
        .pixels
        .iter()
        .zip(&g)
        .map(|(x, gv)| (x + cfg.epsilon * (dir * sign(*gv))).clamp(0.0, 1.0))
        .collect();
    Ok(with_pixels(frame, pixels))
}

/// Iterated signed steps projected onto the ε-ball ∩ [0, 1], with optional
/// uniform random start and (for MI-FGSM) L1-normalized gradient momentum.
fn iterate(model: &Model, frame: &SensorFrame, label: usize, cfg: &AttackConfig, random_start: bool, mu: Option<f64>) -> Result<SensorFrame, AttackError> {
    cfg.validate()?;
    check_classifier(model, frame)?;
    if cfg.epsilon == 0.0 {
        return Ok(frame.clone());
    }
    let (class, dir) = objective(cfg, label);
    let orig = &frame.pixels;
    let mut x = orig.clone();
    if random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for v in x.iter_mut() {
            *v += rng.random_range(-cfg.epsilon..=cfg.epsilon);
        }
        project(&mut x, orig, cfg.epsilon);
    }
    let mut momentum = vec![0.0; x.len()];
    for _ in 0..cfg.steps {
        let (_, g) = loss_and_pixel_grad(model, &x, frame, class)?;
        let step_dir: Vec<f64> = match mu {
            Some(mu) => {
                let l1: f64 = g.iter().map(|v| v.abs()).sum();
                for (m, gv) in momentum.iter_mut().zip(&g) {
                    let normalized = if l1 < ZERO_GRAD_L1 { 0.0 } else { gv / l1 };
                    *m = mu * *m + normalized;
                }
                momentum.iter().map(|m| sign(*m)).collect()
            }
            None => g.iter().map(|v| sign(*v)).collect(),
        };
        for (v, s) in x.iter_mut().zip(&step_dir) {
            *v += cfg.alpha * (dir * s);
        }
        project(&mut x, orig, cfg.epsilon);
    }
    Ok(with_pixels(frame, x))
}

pub fn pgd(model: &Model, frame: &SensorFrame, label: usize, cfg: &AttackConfig) -> Result<SensorFrame, AttackError> {
    iterate(model, frame, label, cfg, cfg.random_start, None)
}

/// PGD without random start.
pub fn bim(model: &Model, frame: &SensorFrame, label: usize, cfg: &AttackConfig) -> Result<SensorFrame, AttackError> {
    iterate(model, frame, label, cfg, false, None)
}

pub fn mi_fgsm(model: &Model, frame: &SensorFrame, label: usize, cfg: &AttackConfig) -> Result<SensorFrame, AttackError> {
    iterate(model, frame, label, cfg, false, Some(cfg.mu))
}

/// Uniform noise in [−ε, ε] per value, clipped to [0, 1].
pub fn random_noise(frame: &SensorFrame, epsilon: f64, seed: u64) -> Result<SensorFrame, AttackError> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(AttackError::Config(format!("epsilon {epsilon} outside [0, 1]")));
    }
    if epsilon == 0.0 {
        return Ok(frame.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = frame
        .pixels
        .iter()
        .map(|x| (x + rng.random_range(-epsilon..=epsilon)).clamp(0.0, 1.0))
        .collect();
    Ok(with_pixels(frame, pixels))
}

pub fn run_attack(model: &Model, frame: &SensorFrame, label: usize, cfg: &AttackConfig) -> Result<SensorFrame, AttackError> {
    match cfg.method {
        AttackMethod::Fgsm => fgsm_with(model, frame, label, cfg),
        AttackMethod::Bim => bim(model, frame, label, cfg),
        AttackMethod::Pgd => pgd(model, frame, label, cfg),
        AttackMethod::MiFgsm => mi_fgsm(model, frame, label, cfg),
        AttackMethod::Random => random_noise(frame, cfg.epsilon, cfg.seed),
    }
}

/// Success rate from predicted classes. Untargeted success: clean prediction correct
/// and adversarial prediction wrong. Targeted success: adversarial prediction equals the
/// target. The denominator is the number of clean-correct samples in both cases.
pub fn success_rate_from_predictions(clean: &[usize], adv: &[usize], labels: &[usize], target: Option<usize>) -> f64 {
    let mut base = 0usize;
    let mut hits = 0usize;
    for ((c, a), y) in clean.iter().zip(adv).zip(labels) {
        if c != y {
            continue;
        }
        base += 1;
        let success = match target {
            Some(t) => *a == t,
            None => a != y,
        };
        hits += success as usize;
    }
    if base == 0 {
        0.0
    } else {
        hits as f64 / base as f64
    }
}

pub fn attack_success_rate(
    model: &Model,
    pairs: &[(SensorFrame, SensorFrame, usize)],
    target: Option<usize>,
) -> Result<f64, AttackError> {
    let mut clean = Vec::with_capacity(pairs.len());
    let mut adv = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for (c, a, y) in pairs {
        clean.push(model.predict(c)?.argmax().unwrap_or(0));
        adv.push(model.predict(a)?.argmax().unwrap_or(0));
        labels.push(*y);
    }
    Ok(success_rate_from_predictions(&clean, &adv, &labels, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stack::model::{LayerSpec, ModelSpec};
    use crate::stack::tensor::Tensor;

    /// Logit of class 1 is 3·Σx; the others are 0.
    pub(crate) fn linear_logit_model(h: usize, w: usize) -> Model {
        let spec = ModelSpec {
            task: Task::ObstacleClassifier,
            input_shape: [3, h, w],
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { out: 4 }, LayerSpec::Softmax],
        };
        let n = 3 * h * w;
        let mut wdata = vec![0.0; 4 * n];
        wdata[n..2 * n].fill(3.0);
        Model::from_params(
            spec,
            vec![Tensor::from_vec(&[4, n], wdata).unwrap(), Tensor::zeros(&[4])],
        )
        .unwrap()
    }

    fn frame(h: usize, w: usize, v: f64) -> SensorFrame {
        SensorFrame::filled(w, h, [v, v, v])
    }

    #[test]
    fn epsilon_zero_is_identity() {
        let m = linear_logit_model(4, 4);
        let f = frame(4, 4, 0.3);
        assert_eq!(fgsm(&m, &f, 0, 0.0).unwrap(), f);
        for method in AttackMethod::ALL {
            let cfg = AttackConfig::new(method, 0.0);
            assert_eq!(run_attack(&m, &f, 0, &cfg).unwrap(), f);
        }
    }

    #[test]
    fn linear_model_moves_every_pixel_up() {
        let m = linear_logit_model(2, 2);
        let f = frame(2, 2, 0.05);
        let adv = fgsm(&m, &f, 0, 0.05).unwrap();
        for (a, x) in adv.pixels.iter().zip(&f.pixels) {
            assert_eq!(*a, x + 0.05);
        }
    }

    #[test]
    fn saturated_pixel_stays_put() {
        let m = linear_logit_model(2, 2);
        let f = frame(2, 2, 1.0);
        let adv = fgsm(&m, &f, 0, 0.1).unwrap();
        assert!(adv.pixels.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn targeted_descends() {
        let m = linear_logit_model(2, 2);
        let f = frame(2, 2, 0.5);
        let cfg = AttackConfig {
            targeted: true,
            target_class: Some(1),
            ..AttackConfig::new(AttackMethod::Fgsm, 0.1)
        };
        // Descending CE toward class 1 raises its logit, so pixels go up.
        let adv = fgsm_with(&m, &f, 0, &cfg).unwrap();
        assert!(adv.pixels.iter().all(|v| (*v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn zero_gradient_fixed_point() {
        let spec = crate::stack::zoo::classifier_spec();
        let m = Model::zeros(spec).unwrap();
        let f = frame(64, 64, 0.4);
        let mut cfg = AttackConfig::new(AttackMethod::MiFgsm, 0.1);
        cfg.steps = 3;
        assert_eq!(mi_fgsm(&m, &f, 2, &cfg).unwrap(), f);
        assert_eq!(bim(&m, &f, 2, &cfg).unwrap(), f);
    }

    #[test]
    fn rejects_bad_configs() {
        let m = linear_logit_model(2, 2);
        let f = frame(2, 2, 0.5);
        let mut cfg = AttackConfig::new(AttackMethod::Pgd, 1.5);
        assert!(pgd(&m, &f, 0, &cfg).is_err());
        cfg.epsilon = 0.1;
        cfg.steps = 0;
        assert!(pgd(&m, &f, 0, &cfg).is_err());
        cfg.steps = 1;
        cfg.alpha = 0.0;
        assert!(pgd(&m, &f, 0, &cfg).is_err());
        assert!(fgsm(&m, &frame(3, 2, 0.5), 0, 0.1).is_err());
    }

    #[test]
    fn noise_is_seeded_and_bounded() {
        let f = frame(8, 8, 0.5);
        let a = random_noise(&f, 0.1, 3).unwrap();
        assert_eq!(a, random_noise(&f, 0.1, 3).unwrap());
        assert_ne!(a, random_noise(&f, 0.1, 4).unwrap());
        assert!(a.max_abs_diff(&f) <= 0.1 + 1e-9);
    }

    #[test]
    fn success_rate_cases() {
        assert_eq!(success_rate_from_predictions(&[1, 2], &[1, 2], &[1, 2], None), 0.0);
        assert_eq!(success_rate_from_predictions(&[1, 2], &[0, 0], &[1, 2], None), 1.0);
        // Enumeration oracle for a 4-sample case.
        let clean = [1, 2, 0, 3];
        let adv = [0, 2, 3, 3];
        let labels = [1, 2, 1, 0];
        let mut base = 0;
        let mut hits = 0;
        for i in 0..4 {
            if clean[i] == labels[i] {
                base += 1;
                if adv[i] != labels[i] {
                    hits += 1;
                }
            }
        }
        assert_eq!(hits as f64 / base as f64, 0.5);
        assert_eq!(success_rate_from_predictions(&clean, &adv, &labels, None), 0.5);
        assert_eq!(success_rate_from_predictions(&clean, &adv, &labels, Some(0)), 0.5);
    }
}
