//! Projection and transfer on small scenes.

use matx_core::engine::{per_pixel_transfer, Engine, OptimSettings, Target, TransferRule};
use matx_core::featnet::FeatureExtractor;
use matx_core::labels::LabelMap;
use matx_core::optim::{Adam, AdamConfig};
use matx_core::prior::{GeneratorConfig, GeneratorWeights, LatentTheta};
use matx_core::render::{render, MaterialMaps};
use matx_core::{Error, Tensor};

const N: usize = 32;

fn scene() -> (
    FeatureExtractor<f32>,
    GeneratorWeights<f32>,
    LatentTheta<f32>,
) {
    let ex = FeatureExtractor::init_random_with([8, 16, 16, 16], 3);
    let config = GeneratorConfig::with_width(N, 16, 4).unwrap();
    let gen = GeneratorWeights::init(config.clone()).unwrap();
    let theta = LatentTheta::sample(&config, 8, 0.3);
    (ex, gen, theta)
}

fn settings(iters: usize) -> OptimSettings {
    OptimSettings {
        projection_iters: iters,
        transfer_iters: iters,
        seed: 12,
        ..OptimSettings::default()
    }
}

fn constant(rgb: [f32; 3]) -> Tensor<f32> {
    Tensor::from_fn(&[3, N, N], |i| rgb[i / (N * N)])
}

#[test]
fn adam_matches_scalar_oracle() {
    // three steps on f(x) = x² from x = 1
    let cfg = AdamConfig::default();
    let (mut x, mut m, mut v) = (1.0f64, 0.0, 0.0);
    let mut p = Tensor::from_vec(&[1], vec![1.0f64]).unwrap();
    let mut adam = Adam::new(cfg, [1]);
    for t in 1..=3 {
        let g = 2.0 * x;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let m_hat = m / (1.0 - 0.9f64.powi(t));
        let v_hat = v / (1.0 - 0.999f64.powi(t));
        x -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);

        let grad = [2.0 * p.data()[0]];
        adam.step(&mut [&mut p], &[&grad], 0.1);
        assert!(
            (p.data()[0] - x).abs() <= 1e-12,
            "step {t}: {} vs {x}",
            p.data()[0]
        );
    }
    assert_eq!(adam.steps(), 3);
}

#[test]
fn adam_ignores_zero_gradients() {
    let mut p = Tensor::from_vec(&[2, 2], vec![0.3f32, -1.0, 2.0, 0.0]).unwrap();
    let before = p.clone();
    let mut adam = Adam::new(AdamConfig::default(), [4]);
    for _ in 0..5 {
        adam.step(&mut [&mut p], &[&[0.0; 4]], 0.5);
    }
    assert_eq!(p, before);
}

#[test]
fn projection_of_an_own_sample_is_a_fixed_point() {
    let (ex, gen, theta) = scene();
    let maps = gen.synthesize(&theta).unwrap();
    let s = settings(5);
    let p = Engine::new(&ex, &gen, &s)
        .project(&maps, Some(theta.clone()))
        .unwrap();
    assert!(p.report.losses.total[0].abs() < 1e-6);
    assert_eq!(p.report.best_iteration, 0);
    for (a, b) in p.theta.tensors().iter().zip(theta.tensors()) {
        assert!(a.max_abs_diff(b) < 1e-6);
    }
}

#[test]
fn projection_reduces_the_loss() {
    let (ex, gen, _) = scene();
    let config = gen.config().clone();
    let target = gen
        .synthesize(&LatentTheta::sample(&config, 99, 0.3))
        .unwrap();
    let s = settings(30);
    let p = Engine::new(&ex, &gen, &s).project(&target, None).unwrap();
    let t = &p.report.losses.total;
    assert_eq!(t.len(), 30);
    assert!(
        p.report.best_loss < 0.7 * t[0],
        "{} -> {}",
        t[0],
        p.report.best_loss
    );
    // the best-so-far trace never rises
    assert!(p.report.losses.best.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn self_target_transfer_is_a_no_op() {
    let (ex, gen, theta) = scene();
    let maps = gen.synthesize(&theta).unwrap();
    let s = settings(10);
    let target = Target::new(render(&maps, &s.render).unwrap(), None);
    let rules = [TransferRule::new(0, 0, 0)];
    let r = Engine::new(&ex, &gen, &s)
        .transfer(&theta, &maps, None, &[target], &rules)
        .unwrap();
    assert!(
        r.report.losses.style[0] < 1e-6,
        "style starts at {}",
        r.report.losses.style[0]
    );
    assert!(r.maps.mean_abs_diff(&maps) < 0.02);
}

#[test]
fn duplicated_rules_average_to_the_same_loss() {
    let (ex, gen, theta) = scene();
    let maps = gen.synthesize(&theta).unwrap();
    let s = settings(1);
    let targets = [Target::new(constant([0.8, 0.1, 0.1]), None)];
    let engine = Engine::new(&ex, &gen, &s);
    let one = engine
        .transfer(&theta, &maps, None, &targets, &[TransferRule::new(0, 0, 0)])
        .unwrap();
    let two = engine
        .transfer(
            &theta,
            &maps,
            None,
            &targets,
            &[TransferRule::new(0, 0, 0), TransferRule::new(0, 0, 0)],
        )
        .unwrap();
    let (a, b) = (one.report.losses.style[0], two.report.losses.style[0]);
    assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
}

#[test]
fn small_regions_skip_deep_taps_without_nan() {
    let (ex, gen, theta) = scene();
    let maps = gen.synthesize(&theta).unwrap();
    // a 10×10 region survives erosion at stride 1 but not at stride 8
    let labels = LabelMap::from_fn(N, N, |y, x| (y >= 4 && y < 14 && x >= 4 && x < 14) as u8);
    let s = settings(3);
    let targets = [Target::new(constant([0.2, 0.6, 0.2]), None)];
    let r = Engine::new(&ex, &gen, &s)
        .transfer(
            &theta,
            &maps,
            Some(&labels),
            &targets,
            &[TransferRule::new(1, 0, 0)],
        )
        .unwrap();
    assert!(r.report.losses.total.iter().all(|v| v.is_finite()));
    r.maps.validate().unwrap();
}

#[test]
fn rule_empty_at_every_tap_is_an_error() {
    let (ex, gen, theta) = scene();
    let maps = gen.synthesize(&theta).unwrap();
    let labels = LabelMap::from_fn(N, N, |y, x| (y < 2 && x < 2) as u8);
    let s = settings(2);
    let targets = [Target::new(constant([0.2, 0.6, 0.2]), None)];
    let err = Engine::new(&ex, &gen, &s)
        .transfer(
            &theta,
            &maps,
            Some(&labels),
            &targets,
            &[TransferRule::new(1, 0, 0)],
        )
        .unwrap_err();
    assert!(matches!(err, Error::EmptyRule { .. }), "{err}");
    assert!(err.to_string().contains("1:0:0"), "{err}");
}

#[test]
fn rule_naming_a_missing_label_is_rejected() {
    let (ex, gen, theta) = scene();
    let maps = gen.synthesize(&theta).unwrap();
    let s = settings(2);
    let halves = LabelMap::from_fn(N, N, |_, x| (x >= N / 2) as u8);
    let targets = [Target::new(constant([0.2, 0.6, 0.2]), Some(halves))];
    let err = Engine::new(&ex, &gen, &s)
        .transfer(&theta, &maps, None, &targets, &[TransferRule::new(0, 0, 2)])
        .unwrap_err();
    assert!(err.to_string().contains("label 2"), "{err}");
    let err = Engine::new(&ex, &gen, &s)
        .transfer(&theta, &maps, None, &targets, &[TransferRule::new(0, 1, 0)])
        .unwrap_err();
    assert!(err.to_string().contains("target 1"), "{err}");
}

#[test]
fn fixed_seed_runs_are_identical() {
    let (ex, gen, theta) = scene();
    let maps = gen.synthesize(&theta).unwrap();
    let s = settings(4);
    let targets = [Target::new(constant([0.8, 0.1, 0.1]), None)];
    let rules = [TransferRule::new(0, 0, 0)];
    let engine = Engine::new(&ex, &gen, &s);
    let a = engine
        .transfer(&theta, &maps, None, &targets, &rules)
        .unwrap();
    let b = engine
        .transfer(&theta, &maps, None, &targets, &rules)
        .unwrap();
    assert_eq!(a.maps, b.maps);
    assert_eq!(
        a.report.without_timings().to_json(),
        b.report.without_timings().to_json()
    );

    let c = per_pixel_transfer(&ex, &maps, None, &targets, &rules, &s).unwrap();
    let d = per_pixel_transfer(&ex, &maps, None, &targets, &rules, &s).unwrap();
    assert_eq!(c.maps, d.maps);
    assert_eq!(
        c.report.without_timings().to_json(),
        d.report.without_timings().to_json()
    );
}

#[test]
fn per_pixel_self_target_stays_put() {
    let (ex, gen, theta) = scene();
    let maps: MaterialMaps<f32> = gen.synthesize(&theta).unwrap();
    let s = settings(10);
    let target = Target::new(render(&maps, &s.render).unwrap(), None);
    let r = per_pixel_transfer(
        &ex,
        &maps,
        None,
        &[target],
        &[TransferRule::new(0, 0, 0)],
        &s,
    )
    .unwrap();
    assert!(r.theta.is_none());
    assert!(r.maps.mean_abs_diff(&maps) < 0.02);
}

#[test]
fn settings_reject_non_positive_rates() {
    let s = OptimSettings {
        transfer_lr: 0.0,
        ..OptimSettings::default()
    };
    assert!(s.validate().is_err());
    let s = OptimSettings {
        projection_iters: 0,
        ..OptimSettings::default()
    };
    assert!(s.validate().is_err());
}
