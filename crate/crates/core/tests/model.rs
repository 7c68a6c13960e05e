//! Backbone + attention-module integration behavior.

mod common;

use common::*;
use loupe_core::backbone::{self, BackboneConfig};
use loupe_core::graph::{Graph, Shape};
use loupe_core::loupe::{self, LoupeParams};

fn desk_images(n: usize, s: usize, seed: u64) -> Vec<f64> {
    let mut rng = test_rng(seed);
    random_vec_in(&mut rng, n * 3 * s * s, 0.0, 1.0)
}

#[test]
fn desk_forward_shapes() {
    let cfg = BackboneConfig::desk_default();
    let state = backbone::build::<f64>(&cfg).unwrap();
    let mut g = Graph::new();
    let img = g
        .leaf(desk_images(2, 64, 1), Shape::nchw(2, 3, 64, 64), false)
        .unwrap();
    let fwd = backbone::forward(&mut g, &state, img, false).unwrap();
    assert_eq!(g.shape(fwd.logits), Shape::matrix(2, 10));
    let map = fwd.map.expect("attention map present");
    assert_eq!(g.shape(map), Shape::nchw(2, 1, 8, 8));
}

#[test]
fn baseline_forward_has_no_map() {
    let mut cfg = BackboneConfig::desk_default();
    cfg.loupe_enabled = false;
    let state = backbone::build::<f64>(&cfg).unwrap();
    let mut g = Graph::new();
    let img = g
        .leaf(desk_images(1, 64, 2), Shape::nchw(1, 3, 64, 64), false)
        .unwrap();
    let fwd = backbone::forward(&mut g, &state, img, false).unwrap();
    assert!(fwd.map.is_none());
    assert!(state.params.by_name("loupe.conv1.weight").is_none());
}

#[test]
fn neutral_loupe_equals_baseline_with_halved_merge() {
    // With the zero-initialized projection the map is exactly 0.5, so the
    // model must match a baseline whose post-insertion merge weights absorb
    // the 0.5 (exact in floating point: scaling by a power of two).
    let cfg = BackboneConfig::desk_default();
    assert!(cfg.loupe_enabled);
    let with_loupe = backbone::build::<f32>(&cfg).unwrap();

    let mut baseline_cfg = cfg.clone();
    baseline_cfg.loupe_enabled = false;
    let mut baseline = backbone::build::<f32>(&baseline_cfg).unwrap();
    let w = baseline
        .params
        .by_name_mut(&format!("merge{}.weight", cfg.insertion_stage))
        .unwrap();
    for v in w.data.iter_mut() {
        *v *= 0.5;
    }

    let images = desk_images(2, 64, 3)
        .into_iter()
        .map(|v| v as f32)
        .collect::<Vec<_>>();
    let logits_of = |state: &backbone::ModelState<f32>| {
        let mut g = Graph::new();
        let img = g
            .leaf(images.clone(), Shape::nchw(2, 3, 64, 64), false)
            .unwrap();
        let fwd = backbone::forward(&mut g, state, img, false).unwrap();
        g.data(fwd.logits).to_vec()
    };
    let a = logits_of(&with_loupe);
    let b = logits_of(&baseline);
    assert!(
        a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()),
        "neutral-start model does not reduce to the 0.5-scaled baseline"
    );
}

#[test]
fn forward_is_bit_deterministic() {
    let cfg = BackboneConfig::desk_default();
    let state = backbone::build::<f32>(&cfg).unwrap();
    let images: Vec<f32> = desk_images(2, 64, 4).into_iter().map(|v| v as f32).collect();
    let run = || {
        let mut g = Graph::new();
        let img = g
            .leaf(images.clone(), Shape::nchw(2, 3, 64, 64), false)
            .unwrap();
        let fwd = backbone::forward(&mut g, &state, img, false).unwrap();
        g.data(fwd.logits).to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn geometry_invariant_across_configs() {
    for (s, c1) in [(32usize, 8usize), (64, 16), (96, 8)] {
        let cfg = BackboneConfig {
            input_size: s,
            in_channels: 3,
            patch_size: 4,
            base_channels: c1,
            blocks_per_stage: [1, 1, 1, 1],
            num_classes: 4,
            loupe_enabled: true,
            insertion_stage: 2,
            seed: 0,
        };
        for stage in 1..=4 {
            assert_eq!(cfg.stage_size(stage), s / (4 * (1 << (stage - 1))));
            assert_eq!(cfg.stage_channels(stage), c1 << (stage - 1));
        }
    }
}

#[test]
fn paper_scale_attention_shape() {
    // 2 x 256 x 28 x 28 features -> 2 x 1 x 28 x 28 map
    let c = 256;
    let params = LoupeParams::<f32>::init(c, 3, 0).unwrap();
    let mut rng = test_rng(50);
    let feats: Vec<f32> = random_vec(&mut rng, 2 * c * 28 * 28)
        .into_iter()
        .map(|v| v as f32)
        .collect();
    let mut g = Graph::new();
    let fv = g.leaf(feats, Shape::nchw(2, c, 28, 28), false).unwrap();
    let map = loupe::attention_map(&mut g, fv, &params).unwrap();
    assert_eq!(g.shape(map), Shape::nchw(2, 1, 28, 28));
    assert!(g.data(map).iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn loupe_param_count_scales() {
    // insertion channels 32 at desk scale
    let cfg = BackboneConfig::desk_default();
    assert_eq!(cfg.insertion_channels(), 32);
    assert_eq!(loupe::param_count(32).unwrap(), 2321);
}
