//! Property tests for invariants that hold over whole input spaces.

use matx_core::container::{Container, Kind};
use matx_core::engine::TransferRule;
use matx_core::labels::Mask;
use matx_core::prior::{crop, tile};
use matx_core::render::{render, MaterialMaps, RenderConfig};
use matx_core::rng::{self, Stream};
use matx_core::statloss::{cramer_loss, erode, sw_loss, ProjectionSet, SampleSet};
use matx_core::Tensor;
use proptest::prelude::*;

fn mask_strategy() -> impl Strategy<Value = Mask> {
    (1usize..20, 1usize..20).prop_flat_map(|(h, w)| {
        prop::collection::vec(prop::bool::weighted(0.8), h * w)
            .prop_map(move |d| Mask::new(h, w, d).unwrap())
    })
}

fn subset(a: &Mask, b: &Mask) -> bool {
    a.data().iter().zip(b.data()).all(|(&x, &y)| !x || y)
}

fn samples(n: usize, dim: usize) -> impl Strategy<Value = SampleSet<f64>> {
    prop::collection::vec(-2.0f64..2.0, n * dim)
        .prop_map(move |v| SampleSet::new(Tensor::from_vec(&[n, dim], v).unwrap()).unwrap())
}

fn maps_strategy(size: usize) -> impl Strategy<Value = MaterialMaps<f64>> {
    let hw = size * size;
    (
        prop::collection::vec(0.0f64..1.0, 3 * hw),
        prop::collection::vec(-0.7f64..0.7, 2 * hw),
        prop::collection::vec(0.0f64..1.0, hw),
        prop::collection::vec(0.0f64..1.0, 3 * hw),
    )
        .prop_map(move |(a, n, r, s)| {
            MaterialMaps::new(
                Tensor::from_vec(&[3, size, size], a).unwrap(),
                Tensor::from_vec(&[2, size, size], n).unwrap(),
                Tensor::from_vec(&[1, size, size], r).unwrap(),
                Tensor::from_vec(&[3, size, size], s).unwrap(),
            )
            .unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rules_roundtrip_through_text(a in 0u8..255, t in 0usize..100, b in 0u8..255) {
        let rule = TransferRule::new(a, t, b);
        prop_assert_eq!(rule.to_string().parse::<TransferRule>().unwrap(), rule);
    }

    #[test]
    fn containers_roundtrip(
        shapes in prop::collection::vec(prop::collection::vec(1usize..5, 0..4), 0..4),
        meta in "[a-z{}\":0-9 ]{0,40}",
        seed in any::<u64>(),
    ) {
        let mut r = rng::stream(seed, Stream::Init, 0);
        let tensors: Vec<Tensor<f32>> = shapes.iter().map(|s| Tensor::uniform(s, -1e3, 1e3, &mut r)).collect();
        let refs: Vec<&Tensor<f32>> = tensors.iter().collect();
        let c = Container::new(Kind::Latent, meta, &refs);
        prop_assert_eq!(Container::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn erosion_shrinks(m in mask_strategy(), r in 0usize..4) {
        prop_assert!(subset(&erode(&m, r), &m));
    }

    #[test]
    fn erosion_composes(m in mask_strategy(), a in 0usize..3, b in 0usize..3) {
        prop_assert_eq!(erode(&erode(&m, a), b), erode(&m, a + b));
    }

    #[test]
    fn erosion_is_monotone(m in mask_strategy(), r in 0usize..4, seed in any::<u64>()) {
        // drop a pseudo-random part of m to get a subset
        let mut state = seed | 1;
        let smaller = Mask::from_fn(m.height(), m.width(), |y, x| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            m.get(y, x) && state >> 63 == 1
        });
        prop_assert!(subset(&erode(&smaller, r), &erode(&m, r)));
    }

    #[test]
    fn losses_are_nonnegative_and_vanish_on_equal_sets(
        (a, b) in (1usize..12, 1usize..4).prop_flat_map(|(n, d)| (samples(n, d), samples(n, d))),
        seed in any::<u64>(),
    ) {
        let dim = a.values.shape()[1];
        let mut r = rng::stream(seed, Stream::Directions, 0);
        let proj = ProjectionSet::random(4, dim, &mut r);
        prop_assert!(sw_loss(&a, &b, &proj, &mut r).unwrap().unwrap() >= 0.0);
        prop_assert!(cramer_loss(&a, &b, &proj).unwrap().unwrap() >= -1e-12);
        prop_assert_eq!(sw_loss(&a, &a, &proj, &mut r).unwrap().unwrap(), 0.0);
        prop_assert!(cramer_loss(&a, &a, &proj).unwrap().unwrap().abs() <= 1e-12);
    }

    #[test]
    fn cropping_a_tiling_is_a_toroidal_crop(
        m in maps_strategy(4), k in prop::sample::select(vec![1usize, 2, 4]), oy in 0usize..12, ox in 0usize..12, size in prop::sample::select(vec![1usize, 2, 4, 8]),
    ) {
        let tiled = tile(&m, k).unwrap();
        let a = crop(&tiled, oy % (4 * k), ox % (4 * k), size).unwrap();
        let b = crop(&m, oy % 4, ox % 4, size).unwrap();
        prop_assert_eq!(a.to_stack(), b.to_stack());
    }

    #[test]
    fn brighter_albedo_never_darkens(m in maps_strategy(4), texel in 0usize..16, channel in 0usize..3, bump in 0.0f64..0.5) {
        let cfg = RenderConfig::default();
        let before = render(&m, &cfg).unwrap();
        let mut brighter = m.clone();
        let i = channel * 16 + texel;
        let v = &mut brighter.albedo.data_mut()[i];
        *v = (*v + bump).min(1.0);
        let after = render(&brighter, &cfg).unwrap();
        prop_assert!(after.data()[i] >= before.data()[i]);
    }

    #[test]
    fn radiance_is_linear_in_intensity(m in maps_strategy(4), scale in 0.1f64..4.0) {
        // dim enough that neither render reaches the display clamp
        let dim = RenderConfig { light_intensity: 0.02, gamma: 1.0, ..RenderConfig::default() };
        let bright = RenderConfig { light_intensity: 0.02 * scale, ..dim };
        let a = render(&m, &dim).unwrap();
        let b = render(&m, &bright).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assume!(*y < 1.0);
            prop_assert!((y - x * scale).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }
}
