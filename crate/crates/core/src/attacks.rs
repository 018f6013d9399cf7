//! Standard adversarial attacks, used for contrast with the level set
//! traversal and for adversarial training.
//!
//! All attacks operate in the l-infinity threat model: outputs stay within
//! `radius` of the clean input per coordinate and inside the [0,1] pixel box.

use crate::models::{ConfidenceModel, Model, ModelError};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape mismatch: model expects input length {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Budget and schedule of an iterated attack. The attack flavor (untargeted,
/// targeted, feature-targeted) is picked by the function called.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    /// l-infinity budget in pixel units.
    pub radius: f64,
    /// Per-step signed step size.
    pub step_size: f64,
    pub steps: usize,
    /// Start from a uniform point inside the budget box.
    pub random_start: bool,
    /// Seed for the random start; ignored when `random_start` is off.
    pub seed: u64,
}

impl AttackConfig {
    /// Common defaults: 20 steps of radius/4 with a random start.
    pub fn pgd_default(radius: f64, seed: u64) -> Self {
        AttackConfig {
            radius,
            step_size: radius / 4.0,
            steps: 20,
            random_start: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.radius >= 0.0) {
            return Err(AttackError::Config("radius must be non-negative".into()));
        }
        if !(self.step_size > 0.0) && self.steps > 0 {
            return Err(AttackError::Config("step size must be positive".into()));
        }
        Ok(())
    }
}

fn check_input<M: ConfidenceModel>(model: &M, x: &Tensor) -> Result<(), AttackError> {
    if x.numel() != model.input_len() {
        return Err(AttackError::Shape {
            expected: model.input_len(),
            got: x.numel(),
        });
    }
    Ok(())
}

fn check_class<M: ConfidenceModel>(model: &M, class: usize) -> Result<(), AttackError> {
    if class >= model.num_classes() {
        return Err(AttackError::ClassOutOfRange {
            class,
            classes: model.num_classes(),
        });
    }
    Ok(())
}

/// Projects onto the budget box around `origin` intersected with [0,1].
fn project(x: &mut [f64], origin: &[f64], radius: f64) {
    for (v, &o) in x.iter_mut().zip(origin) {
        *v = v.clamp(o - radius, o + radius).clamp(0.0, 1.0);
    }
}

fn random_start(x: &mut [f64], origin: &[f64], radius: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (v, &o) in x.iter_mut().zip(origin) {
        *v = (o + rng.random_range(-radius..=radius)).clamp(0.0, 1.0);
    }
}

/// Single-step ascent along the sign of the loss gradient.
pub fn fgsm<M: ConfidenceModel>(
    model: &M,
    x: &Tensor,
    class: usize,
    radius: f64,
) -> Result<Tensor, AttackError> {
    check_input(model, x)?;
    check_class(model, class)?;
    let (_, gradient) = model.confidence_and_loss_gradient(x.data(), class);
    let mut adv: Vec<f64> = x
        .data()
        .iter()
        .zip(&gradient)
        .map(|(&v, &g)| v + radius * g.signum())
        .collect();
    project(&mut adv, x.data(), radius);
    Ok(Tensor::new(x.shape().to_vec(), adv).expect("clamped values are finite"))
}

/// Iterated signed gradient ascent on the cross entropy of `class`, projected
/// to the budget box and the pixel box after every step.
pub fn pgd<M: ConfidenceModel>(
    model: &M,
    x: &Tensor,
    class: usize,
    config: &AttackConfig,
) -> Result<Tensor, AttackError> {
    run_signed_steps(model, x, config, |model, point| {
        let (_, g) = model.confidence_and_loss_gradient(point, class);
        g // ascend the loss
    }, Some(class))
}

/// Targeted attack: descend the cross entropy against `target_class` so its
/// confidence rises. Returns the perturbed input and the achieved confidence.
pub fn targeted_attack<M: ConfidenceModel>(
    model: &M,
    x: &Tensor,
    target_class: usize,
    config: &AttackConfig,
) -> Result<(Tensor, f64), AttackError> {
    let adv = run_signed_steps(model, x, config, |model, point| {
        let (_, g) = model.confidence_and_loss_gradient(point, target_class);
        g.into_iter().map(|v| -v).collect() // descend the loss
    }, Some(target_class))?;
    let confidence = model.confidence(adv.data(), target_class);
    Ok((adv, confidence))
}

/// Feature-level targeted attack: descend the squared distance between the
/// features of the iterate and those of `reference` at `layer`. Returns the
/// perturbed input and the final (euclidean) feature distance.
pub fn feature_targeted_attack(
    model: &Model,
    x: &Tensor,
    reference: &Tensor,
    layer: &str,
    config: &AttackConfig,
) -> Result<(Tensor, f64), AttackError> {
    check_input(model, x)?;
    check_input(model, reference)?;
    config.validate()?;
    let target_features = model.features(reference, layer)?;

    let mut point = x.data().to_vec();
    if config.random_start && config.radius > 0.0 {
        random_start(&mut point, x.data(), config.radius, config.seed);
    }
    for _ in 0..config.steps {
        let t = Tensor::new(x.shape().to_vec(), point.clone()).expect("finite iterate");
        let (_, gradient) = model.feature_gap_and_input_gradient(&t, layer, &target_features)?;
        for (v, g) in point.iter_mut().zip(&gradient) {
            *v -= config.step_size * g.signum();
        }
        project(&mut point, x.data(), config.radius);
    }
    let adv = Tensor::new(x.shape().to_vec(), point).expect("clamped values are finite");
    let (gap_sq, _) = model.feature_gap_and_input_gradient(&adv, layer, &target_features)?;
    Ok((adv, gap_sq.max(0.0).sqrt()))
}

fn run_signed_steps<M, F>(
    model: &M,
    x: &Tensor,
    config: &AttackConfig,
    direction: F,
    class: Option<usize>,
) -> Result<Tensor, AttackError>
where
    M: ConfidenceModel,
    F: Fn(&M, &[f64]) -> Vec<f64>,
{
    check_input(model, x)?;
    if let Some(c) = class {
        check_class(model, c)?;
    }
    config.validate()?;

    let mut point = x.data().to_vec();
    if config.random_start && config.radius > 0.0 {
        random_start(&mut point, x.data(), config.radius, config.seed);
    }
    for _ in 0..config.steps {
        let step = direction(model, &point);
        for (v, g) in point.iter_mut().zip(&step) {
            *v += config.step_size * g.signum();
        }
        project(&mut point, x.data(), config.radius);
    }
    Ok(Tensor::new(x.shape().to_vec(), point).expect("clamped values are finite"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::accuracy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trained_blobs() -> (&'static Model, &'static [crate::data::LabeledImage]) {
        let (model, ds) = crate::test_fixtures::trained_blobs();
        (model, &ds.test)
    }

    #[test]
    fn fgsm_zero_budget_is_identity() {
        let (model, test) = trained_blobs();
        let x = &test[0];
        let adv = fgsm(model, &x.pixels, x.label, 0.0).unwrap();
        assert_eq!(adv.data(), x.pixels.data());
    }

    #[test]
    fn fgsm_moves_each_coordinate_by_radius() {
        let (model, test) = trained_blobs();
        // pick an interior point so the pixel clamp stays inactive
        let x = test
            .iter()
            .find(|s| {
                s.pixels.data().iter().all(|&v| v > 0.2 && v < 0.8)
            })
            .unwrap();
        let radius = 0.05;
        let adv = fgsm(model, &x.pixels, x.label, radius).unwrap();
        let (_, gradient) = model.confidence_and_loss_gradient(x.pixels.data(), x.label);
        for ((&a, &b), &g) in adv.data().iter().zip(x.pixels.data()).zip(&gradient) {
            assert!(((a - b) - radius * g.signum()).abs() < 1e-12);
        }
        // the loss strictly increases for a first-order step this small
        let before = model.confidence(x.pixels.data(), x.label);
        let after = model.confidence(adv.data(), x.label);
        assert!(after <= before);
    }

    #[test]
    fn fgsm_lowers_accuracy_on_test_points() {
        let (model, test) = trained_blobs();
        let subset = &test[..200.min(test.len())];
        let clean = accuracy(model, subset);
        let attacked: Vec<_> = subset
            .iter()
            .map(|s| crate::data::LabeledImage {
                label: s.label,
                pixels: fgsm(model, &s.pixels, s.label, 0.1).unwrap(),
            })
            .collect();
        let adv_acc = accuracy(model, &attacked);
        assert!(
            adv_acc < clean,
            "fgsm(0.1) did not lower accuracy: {clean} -> {adv_acc}"
        );
    }

    #[test]
    fn pgd_zero_steps_without_random_start_is_identity() {
        let (model, test) = trained_blobs();
        let x = &test[0];
        let config = AttackConfig {
            radius: 0.1,
            step_size: 0.02,
            steps: 0,
            random_start: false,
            seed: 0,
        };
        let adv = pgd(model, &x.pixels, x.label, &config).unwrap();
        assert_eq!(adv.data(), x.pixels.data());
    }

    #[test]
    fn pgd_respects_both_boxes_under_fuzz() {
        let (model, test) = trained_blobs();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for run in 0..1000 {
            let s = &test[run % test.len()];
            let radius = rng.random_range(0.0..0.3);
            let config = AttackConfig {
                radius,
                step_size: rng.random_range(0.005..0.1),
                steps: rng.random_range(0..8),
                random_start: rng.random(),
                seed: rng.random(),
            };
            let adv = pgd(model, &s.pixels, s.label, &config).unwrap();
            for (&a, &c) in adv.data().iter().zip(s.pixels.data()) {
                assert!((a - c).abs() <= radius + 1e-12, "budget box violated");
                assert!((0.0..=1.0).contains(&a), "pixel box violated");
            }
        }
    }

    #[test]
    fn pgd_20_steps_at_least_as_strong_as_fgsm() {
        let (model, test) = trained_blobs();
        let subset = &test[..200.min(test.len())];
        let radius = 0.1;
        let fgsm_acc = {
            let attacked: Vec<_> = subset
                .iter()
                .map(|s| crate::data::LabeledImage {
                    label: s.label,
                    pixels: fgsm(model, &s.pixels, s.label, radius).unwrap(),
                })
                .collect();
            accuracy(model, &attacked)
        };
        let pgd_acc = {
            let attacked: Vec<_> = subset
                .iter()
                .enumerate()
                .map(|(i, s)| crate::data::LabeledImage {
                    label: s.label,
                    pixels: pgd(
                        model,
                        &s.pixels,
                        s.label,
                        &AttackConfig {
                            radius,
                            step_size: 0.02,
                            steps: 20,
                            random_start: true,
                            seed: i as u64,
                        },
                    )
                    .unwrap(),
                })
                .collect();
            accuracy(model, &attacked)
        };
        assert!(
            pgd_acc <= fgsm_acc,
            "pgd accuracy {pgd_acc} above fgsm accuracy {fgsm_acc}"
        );
    }

    #[test]
    fn targeted_attack_zero_budget_is_identity() {
        let (model, test) = trained_blobs();
        let x = &test[0];
        let target = (x.label + 1) % 4;
        let config = AttackConfig {
            radius: 0.0,
            step_size: 0.01,
            steps: 10,
            random_start: false,
            seed: 0,
        };
        let (adv, _) = targeted_attack(model, &x.pixels, target, &config).unwrap();
        assert_eq!(adv.data(), x.pixels.data());
    }

    #[test]
    fn targeted_attack_toward_current_class_keeps_confidence() {
        let (model, test) = trained_blobs();
        let x = &test[1];
        let current = model.predicted_class(&x.pixels).unwrap();
        let before = model.confidence(x.pixels.data(), current);
        let config = AttackConfig {
            radius: 0.1,
            step_size: 0.02,
            steps: 20,
            random_start: false,
            seed: 0,
        };
        let (_, after) = targeted_attack(model, &x.pixels, current, &config).unwrap();
        assert!(after >= before - 1e-9);
    }

    #[test]
    fn targeted_attack_reaches_adjacent_classes() {
        let (model, test) = trained_blobs();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut hits = 0;
        let total = 100;
        for i in 0..total {
            let s = &test[rng.random_range(0..test.len())];
            let mut target = rng.random_range(0..4);
            while target == s.label {
                target = rng.random_range(0..4);
            }
            let config = AttackConfig {
                radius: 0.3,
                step_size: 0.02,
                steps: 40,
                random_start: true,
                seed: i,
            };
            let (_, conf) = targeted_attack(model, &s.pixels, target, &config).unwrap();
            if conf > 0.5 {
                hits += 1;
            }
        }
        assert!(hits >= 70, "only {hits}/{total} targeted attacks reached 0.5");
    }

    #[test]
    fn feature_attack_identical_reference_keeps_input() {
        let (model, test) = trained_blobs();
        let x = &test[2];
        let config = AttackConfig {
            radius: 0.2,
            step_size: 0.02,
            steps: 0,
            random_start: false,
            seed: 0,
        };
        let (adv, dist) =
            feature_targeted_attack(model, &x.pixels, &x.pixels, "hidden2", &config).unwrap();
        assert_eq!(adv.data(), x.pixels.data());
        assert!(dist < 1e-12);
    }

    #[test]
    fn feature_attack_unknown_layer_rejected() {
        let (model, test) = trained_blobs();
        let x = &test[0];
        let config = AttackConfig::pgd_default(0.1, 0);
        assert!(matches!(
            feature_targeted_attack(model, &x.pixels, &x.pixels, "nope", &config),
            Err(AttackError::Model(ModelError::UnknownLayer(_)))
        ));
    }

    #[test]
    fn feature_attack_shrinks_feature_distance() {
        let (model, test) = trained_blobs();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut improved = 0;
        let total = 100;
        for i in 0..total {
            let a = &test[rng.random_range(0..test.len())];
            let b = &test[rng.random_range(0..test.len())];
            let before = {
                let fa = model.features(&a.pixels, "hidden2").unwrap();
                let fb = model.features(&b.pixels, "hidden2").unwrap();
                fa.data()
                    .iter()
                    .zip(fb.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            };
            let config = AttackConfig {
                radius: 0.3,
                step_size: 0.015,
                steps: 40,
                random_start: false,
                seed: i,
            };
            let (_, after) =
                feature_targeted_attack(model, &a.pixels, &b.pixels, "hidden2", &config).unwrap();
            if after < before || before == 0.0 {
                improved += 1;
            }
        }
        assert!(improved >= 95, "feature distance shrank on {improved}/{total}");
    }

    #[test]
    fn fgsm_on_affine_surface_raises_loss_exactly() {
        use crate::analytic::LinearFunctional;
        use crate::tensor::Tensor;
        // loss of the functional is -f, so fgsm moves along -sign(w) and
        // lowers f by exactly radius * |w|_1 while the clamp stays inactive
        let w = vec![0.5, -1.25, 2.0];
        let lf = LinearFunctional::new(Tensor::new(vec![3], w.clone()).unwrap(), 0.1).unwrap();
        let x = Tensor::new(vec![3], vec![0.5, 0.5, 0.5]).unwrap();
        let radius = 0.05;
        let adv = fgsm(&lf, &x, 0, radius).unwrap();
        let drop = lf.evaluate(x.data()) - lf.evaluate(adv.data());
        let expected = radius * w.iter().map(|v| v.abs()).sum::<f64>();
        assert!((drop - expected).abs() < 1e-12, "drop {drop} vs {expected}");
    }

    #[test]
    fn adversarial_twin_trades_clean_accuracy_for_robustness() {
        use crate::data::BlobDatasetSpec;
        use crate::models::AdversarialTraining;
        // close classes force the robust model to give up boundary points
        let spec = BlobDatasetSpec {
            centers: vec![vec![0.4, 0.5], vec![0.6, 0.5]],
            center_labels: vec![0, 1],
            std_dev: 0.05,
            samples_per_class: 150,
            seed: 0,
        };
        let ds = crate::data::generate_blobs(&spec).unwrap();
        let arch = crate::models::Arch::Mlp {
            input_dim: 2,
            classes: 2,
        };
        let base = crate::models::TrainConfig {
            epochs: 25,
            seed: 0,
            ..Default::default()
        };
        let robust_cfg = crate::models::TrainConfig {
            adversarial: Some(AdversarialTraining {
                radius: 0.12,
                steps: 8,
            }),
            ..base.clone()
        };
        let (normal, _) = crate::models::train(arch.clone(), &base, &ds.train, &ds.id).unwrap();
        let (robust, _) = crate::models::train(arch, &robust_cfg, &ds.train, &ds.id).unwrap();

        let clean_normal = accuracy(&normal, &ds.train);
        let clean_robust = accuracy(&robust, &ds.train);
        let pgd_accuracy = |model: &Model| {
            let attacked: Vec<_> = ds
                .train
                .iter()
                .enumerate()
                .map(|(i, s)| crate::data::LabeledImage {
                    label: s.label,
                    pixels: pgd(
                        model,
                        &s.pixels,
                        s.label,
                        &AttackConfig {
                            radius: 0.12,
                            step_size: 0.03,
                            steps: 10,
                            random_start: true,
                            seed: i as u64,
                        },
                    )
                    .unwrap(),
                })
                .collect();
            accuracy(model, &attacked)
        };
        let pgd_normal = pgd_accuracy(&normal);
        let pgd_robust = pgd_accuracy(&robust);
        assert!(
            clean_robust < clean_normal,
            "clean accuracy: robust {clean_robust} vs normal {clean_normal}"
        );
        assert!(
            pgd_robust > pgd_normal,
            "pgd accuracy: robust {pgd_robust} vs normal {pgd_normal}"
        );
    }

    #[test]
    fn attacks_are_deterministic_without_random_start() {
        let (model, test) = trained_blobs();
        let x = &test[4];
        let config = AttackConfig {
            radius: 0.15,
            step_size: 0.03,
            steps: 15,
            random_start: false,
            seed: 42,
        };
        let a = pgd(model, &x.pixels, x.label, &config).unwrap();
        let b = pgd(model, &x.pixels, x.label, &config).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
