mod common;

use common::wired::vanilla_forward_gt;
use common::*;
use ragnet::model::{
    build_network, count_params, forward_gr, forward_gt, partial_conv, Generator, ModelConfig, NetworkKind, RagVariant,
    Width, MASK_EPS,
};
use ragnet::tensor::conv2d;
use ragnet::Tensor;

const ORACLE_TOL: f64 = 1e-10;

/// Masks with whole zero neighbourhoods so both branches are exercised.
fn holey_mask(s: [usize; 4], seed: u64) -> Vec<f64> {
    seeded(s, seed, -0.6, 1.0).into_iter().map(|v| v.max(0.0)).collect()
}

const SHAPES: [([usize; 4], usize); 6] = [
    ([1, 2, 5, 5], 3),
    ([2, 3, 4, 6], 2),
    ([1, 1, 1, 1], 4),
    ([1, 4, 7, 3], 1),
    ([3, 2, 6, 6], 5),
    ([1, 3, 8, 2], 3),
];

#[test]
fn partial_conv_matches_per_pixel_oracle() {
    for (i, &(s, cout)) in SHAPES.iter().enumerate() {
        let seed = 100 + i as u64;
        let f = seeded(s, seed, -1.0, 1.0);
        let mut m = holey_mask(s, seed + 1);
        // One image keeps an all-zero window to hit the suppressed branch.
        if s[2] * s[3] > 4 {
            for c in 0..s[1] {
                for y in 0..2 {
                    for x in 0..2 {
                        m[idx(s, 0, c, y, x)] = 0.0;
                    }
                }
            }
        }
        let ws = [cout, s[1], 3, 3];
        let w = seeded(ws, seed + 2, -1.0, 1.0);
        let b = seeded([1, cout, 1, 1], seed + 3, -1.0, 1.0);
        let got = partial_conv(
            &Tensor::from_vec(s, f.clone()).unwrap(),
            &Tensor::from_vec(s, m.clone()).unwrap(),
            &Tensor::from_vec(ws, w.clone()).unwrap(),
            &Tensor::from_vec([1, cout, 1, 1], b.clone()).unwrap(),
            true,
        )
        .unwrap();
        let want = partial_conv_ref(&f, &m, s, &w, ws, &b, MASK_EPS);
        assert!(max_abs_diff(got.data(), &want) < ORACLE_TOL, "shape {s:?}");
    }
}

#[test]
fn partial_conv_without_renorm_is_masked_conv() {
    let s = [2, 3, 6, 5];
    let f = tensor(s, 1);
    let m = Tensor::from_vec(s, holey_mask(s, 2)).unwrap();
    let w = tensor([4, 3, 3, 3], 3);
    let b = tensor([1, 4, 1, 1], 4);
    let got = partial_conv(&f, &m, &w, &b, false).unwrap();
    let want = conv2d(&f.mul(&m).unwrap(), &w, Some(&b), 1, 1).unwrap();
    assert_eq!(got.to_vec(), want.to_vec());
}

#[test]
fn zero_mask_gives_exact_zero_even_with_bias() {
    for (i, &(s, cout)) in SHAPES.iter().enumerate() {
        let out = partial_conv(
            &tensor(s, i as u64),
            &Tensor::zeros(s),
            &tensor([cout, s[1], 3, 3], 50 + i as u64),
            &Tensor::full([1, cout, 1, 1], 0.75),
            true,
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0), "shape {s:?}");
    }
}

#[test]
fn all_ones_mask_in_the_interior_is_plain_conv() {
    let s = [1, 2, 6, 6];
    let f = tensor(s, 9);
    let w = tensor([3, 2, 3, 3], 10);
    let b = tensor([1, 3, 1, 1], 11);
    let pc = partial_conv(&f, &Tensor::ones(s), &w, &b, true).unwrap();
    let plain = conv2d(&f, &w, Some(&b), 1, 1).unwrap();
    for c in 0..3 {
        for y in 1..5 {
            for x in 1..5 {
                assert!((pc.at(0, c, y, x) - plain.at(0, c, y, x)).abs() < 1e-12);
            }
        }
    }
}

fn config(variant: RagVariant, seed: u64) -> ModelConfig {
    ModelConfig {
        width: Width::new(1, 16).unwrap(),
        variant,
        use_adversarial: false,
        seed,
    }
}

fn image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let s = [1, 3, h, w];
    Tensor::from_vec(s, seeded(s, seed, 0.0, 1.0).into_iter().map(|v| v as f32).collect()).unwrap()
}

#[test]
fn no_mask_variant_equals_hand_wired_decoder_bit_exactly() {
    for (seed, (h, w)) in [(1u64, (16, 16)), (2, (32, 16)), (3, (16, 48))] {
        let net = build_network::<f32>(NetworkKind::GT, &config(RagVariant::NoMask, seed)).unwrap();
        let (obs, refl) = (image(seed, h, w), image(seed + 10, h, w));
        let (t_hat, masks) = forward_gt(&net, &obs, &refl).unwrap();
        assert!(masks.is_empty());
        let want = vanilla_forward_gt(&net, &obs, &refl);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&t_hat), bits(&want), "seed {seed}");
    }
}

#[test]
fn mask_variants_differ_from_the_vanilla_decoder() {
    let net = build_network::<f32>(NetworkKind::GT, &config(RagVariant::Full, 4)).unwrap();
    let (obs, refl) = (image(4, 16, 16), image(5, 16, 16));
    let (t_hat, masks) = forward_gt(&net, &obs, &refl).unwrap();
    assert_ne!(t_hat.to_vec(), vanilla_forward_gt(&net, &obs, &refl).to_vec());
    assert_eq!(masks.len(), 4);
    for (k, level) in masks.levels().iter().enumerate() {
        assert_eq!(level.diff.shape().h, 16 >> k);
        assert!(level.diff.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
    assert!(t_hat.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn two_channel_mask_broadcasts_one_channel_per_group() {
    let net = build_network::<f32>(NetworkKind::GT, &config(RagVariant::TwoChannelMask, 6)).unwrap();
    let (_, masks) = forward_gt(&net, &image(6, 16, 16), &image(7, 16, 16)).unwrap();
    for level in masks.levels() {
        assert_eq!(level.diff.shape().c, 1);
        assert_eq!(level.dec.shape().c, 1);
    }
}

#[test]
fn generator_outputs_are_deterministic_per_seed() {
    let run = |seed| {
        let g = Generator::<f32>::build(&config(RagVariant::Full, seed)).unwrap();
        let p = g.forward(&image(1, 16, 16)).unwrap();
        p.transmission.to_vec()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
}

#[test]
fn reflection_network_accepts_non_square_inputs() {
    let net = build_network::<f32>(NetworkKind::GR, &config(RagVariant::Full, 2)).unwrap();
    let r = forward_gr(&net, &image(3, 32, 16)).unwrap();
    assert_eq!(r.shape().dims(), [1, 3, 32, 16]);
    assert!(forward_gr(&net, &image(3, 20, 16)).is_err());
}

#[test]
fn parameter_counts_grow_with_width_and_one_stage_is_smaller() {
    let count = |variant, den| {
        let cfg = ModelConfig {
            width: Width::new(1, den).unwrap(),
            ..config(variant, 0)
        };
        Generator::<f32>::build(&cfg).unwrap().count_params()
    };
    assert!(count(RagVariant::Full, 8) > count(RagVariant::Full, 16));
    let ratio = count(RagVariant::OneStage, 8) as f64 / count(RagVariant::Full, 8) as f64;
    assert!(ratio > 0.4 && ratio < 0.6, "{ratio}");
    // The mask heads are the only parameters the no-mask variant lacks.
    let cfg = config(RagVariant::Full, 0);
    let full = build_network::<f32>(NetworkKind::GT, &cfg).unwrap();
    let heads: usize = full
        .params()
        .iter()
        .filter(|p| p.name.contains(".mask."))
        .map(|p| p.tensor.shape().numel())
        .sum();
    let plain = build_network::<f32>(NetworkKind::GT, &config(RagVariant::NoMask, 0)).unwrap();
    assert_eq!(count_params(&full) - count_params(&plain), heads);
}
