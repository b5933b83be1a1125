mod common;

use adsandbox::attacks::{bim, fgsm, fgsm_with, mi_fgsm, pgd, random_noise, run_attack, AttackConfig, AttackMethod};
use adsandbox::stack::loss::{LossKind, Target};
use adsandbox::stack::model::Model;
use adsandbox::stack::zoo::{classifier_spec, regressor_spec};
use adsandbox::world::render::SensorFrame;
use common::{input_gradient_check, scene_frame, texel_gradient_check};
use proptest::prelude::*;

fn model() -> Model {
    Model::init(classifier_spec(), 11).unwrap()
}

fn linf(a: &SensorFrame, b: &SensorFrame) -> f64 {
    a.max_abs_diff(b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn budget_and_range_hold(
        seed in 0u64..1_000_000,
        method_ix in 0usize..5,
        eps in 0.0..0.3f64,
        alpha in 0.001..0.1f64,
        steps in 1usize..6,
        mu in 0.0..2.0f64,
        label in 0usize..4,
        random_start in any::<bool>(),
    ) {
        let m = model();
        let x = scene_frame(seed);
        let cfg = AttackConfig {
            alpha,
            steps,
            mu,
            random_start,
            seed,
            ..AttackConfig::new(AttackMethod::ALL[method_ix], eps)
        };
        let adv = run_attack(&m, &x, label, &cfg).unwrap();
        prop_assert!(linf(&adv, &x) <= eps + 1e-9);
        prop_assert!(adv.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        let zero = run_attack(&m, &x, label, &AttackConfig { epsilon: 0.0, ..cfg }).unwrap();
        prop_assert!(zero.pixels.iter().zip(&x.pixels).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn reductions_are_exact(seed in 0u64..1_000_000, eps in 0.001..0.3f64, label in 0usize..4, steps in 1usize..5) {
        let m = model();
        let x = scene_frame(seed);
        let one_step = AttackConfig { alpha: eps, steps: 1, random_start: false, ..AttackConfig::new(AttackMethod::Pgd, eps) };
        prop_assert_eq!(pgd(&m, &x, label, &one_step).unwrap(), fgsm(&m, &x, label, eps).unwrap());

        let momentum_free = AttackConfig { alpha: eps / 4.0, steps, mu: 0.0, ..AttackConfig::new(AttackMethod::MiFgsm, eps) };
        let plain = AttackConfig { method: AttackMethod::Bim, ..momentum_free.clone() };
        prop_assert_eq!(mi_fgsm(&m, &x, label, &momentum_free).unwrap(), bim(&m, &x, label, &plain).unwrap());
    }
}

#[test]
fn fgsm_with_matches_fgsm_untargeted() {
    let m = model();
    let x = scene_frame(5);
    let cfg = AttackConfig::new(AttackMethod::Fgsm, 0.05);
    assert_eq!(fgsm_with(&m, &x, 2, &cfg).unwrap(), fgsm(&m, &x, 2, 0.05).unwrap());
}

#[test]
fn noise_is_budgeted_and_seeded() {
    let x = scene_frame(9);
    let a = random_noise(&x, 0.1, 4).unwrap();
    assert!(linf(&a, &x) <= 0.1 + 1e-12);
    assert_eq!(a, random_noise(&x, 0.1, 4).unwrap());
    assert_ne!(a, random_noise(&x, 0.1, 5).unwrap());
}

#[test]
fn classifier_input_gradient_matches_finite_differences() {
    let m = model();
    let (n, worst) = input_gradient_check(&m, Target::Class(1), LossKind::CrossEntropy, 21);
    assert!(n >= 20 && worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn regressor_input_gradient_matches_finite_differences() {
    let m = Model::init(regressor_spec(), 12).unwrap();
    let (n, worst) = input_gradient_check(&m, Target::Value(0.7), LossKind::SquaredError, 22);
    assert!(n >= 20 && worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn texel_gradient_matches_finite_differences() {
    let (live, worst) = texel_gradient_check(&model());
    assert!(live >= 20, "only {live} texels influence the frame");
    assert!(worst < 1e-2, "worst relative error {worst}");
}
