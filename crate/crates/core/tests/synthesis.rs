use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use proptest::prelude::*;
use ragnet::image::read_rgb;
use ragnet::synthesis::{
    blend, generate_base_pair, load_dataset, make_dataset, synthesize_reflection, synthesize_triple, BlendMode,
    Manifest, SceneSource, SynthesisParams, MANIFEST_FILE,
};
use ragnet::Tensor;

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn variance(t: &Tensor<f32>) -> f64 {
    let n = t.data().len() as f64;
    let m = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    t.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n
}

#[test]
fn base_pairs_are_deterministic_and_diverse() {
    let (t1, r1) = generate_base_pair(5, 32);
    let (t2, r2) = generate_base_pair(5, 32);
    assert_eq!(t1.to_vec(), t2.to_vec());
    assert_eq!(r1.to_vec(), r2.to_vec());
    for seed in 0..100u64 {
        let (a, _) = generate_base_pair(seed, 32);
        let (b, _) = generate_base_pair(seed + 1000, 32);
        assert!(a.data().iter().chain(b.data()).all(|v| (0.0..=1.0).contains(v)));
        let differing = a
            .data()
            .iter()
            .zip(b.data())
            .filter(|(x, y)| (*x - *y).abs() > 0.05)
            .count();
        assert!(
            differing * 10 >= a.data().len(),
            "seed {seed}: only {differing} pixels differ"
        );
    }
}

#[test]
fn reflection_synthesis_examples() {
    let (_, src) = generate_base_pair(3, 32);
    let near_identity = SynthesisParams {
        blur_sigma: (0.01, 0.01),
        decay: (1.0, 1.0),
        ..SynthesisParams::default()
    };
    let r = synthesize_reflection(&src, &near_identity, 1).unwrap();
    assert!(r.data().iter().zip(src.data()).all(|(a, b)| (a - b).abs() < 1e-3));

    let decay = SynthesisParams {
        decay: (0.7, 0.7),
        ..SynthesisParams::default()
    };
    let flat = synthesize_reflection(&Tensor::full([1, 3, 32, 32], 0.6f32), &decay, 2).unwrap();
    assert!(flat.data().iter().all(|&v| (v as f64 - 0.42).abs() < 1e-5));

    let noise = synthesize_reflection(&src, &SynthesisParams::default(), 4).unwrap();
    assert!(variance(&noise) < variance(&src));
}

#[test]
fn blend_examples() {
    let s = [1, 3, 4, 4];
    let grid = |k: u32| Tensor::from_vec(s, (0..48).map(|i| ((i * k) % 128) as f32 / 256.0).collect()).unwrap();
    let (t, r) = (grid(7), grid(11));
    for mode in [BlendMode::LinearClip, BlendMode::Overexpose] {
        let (i, sat) = blend(&t, &Tensor::zeros(s), mode, 0.5, 1.3).unwrap();
        assert_eq!(i.to_vec(), t.to_vec());
        assert!(!sat);
        // Everything stays below 1, so the linear relation is exact.
        let (i, _) = blend(&t, &r, mode, 0.5, 1.3).unwrap();
        assert_eq!(i.sub(&r).unwrap().to_vec(), t.to_vec());
    }
    let (t, r) = (Tensor::full(s, 0.8f32), Tensor::full(s, 0.7f32));
    let (lin, sat) = blend(&t, &r, BlendMode::LinearClip, 0.5, 1.3).unwrap();
    assert!(lin.data().iter().all(|&v| v == 1.0) && !sat);
    let (over, sat) = blend(&t, &r, BlendMode::Overexpose, 0.5, 1.3).unwrap();
    assert!(over.data().iter().all(|&v| v == 1.0) && sat);
    assert!(blend(&Tensor::full(s, 1.5f32), &r, BlendMode::LinearClip, 0.5, 1.3).is_err());
}

#[test]
fn overexposure_violates_the_linear_model_on_enough_pixels() {
    let params = SynthesisParams {
        mode: BlendMode::Overexpose,
        decay: (0.9, 1.0),
        ..SynthesisParams::default()
    };
    let mut fraction = 0.0;
    for seed in 0..100 {
        let tr = synthesize_triple(&params, &SceneSource::Procedural, seed).unwrap();
        let (i, t, r) = (tr.observed.data(), tr.transmission.data(), tr.reflection.data());
        let bad = (0..i.len()).filter(|&k| (i[k] - r[k] - t[k]).abs() > 0.05).count();
        fraction += bad as f64 / i.len() as f64;
    }
    assert!(fraction / 100.0 >= 0.01, "mean violating fraction {}", fraction / 100.0);
}

#[test]
fn empty_dataset_has_only_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_dataset(0, &SynthesisParams::default(), &SceneSource::Procedural, dir.path(), 1).unwrap();
    assert!(m.entries.is_empty());
    assert_eq!(tree(dir.path()).keys().collect::<Vec<_>>(), [MANIFEST_FILE]);
}

#[test]
fn datasets_are_byte_identical_across_runs_and_thread_counts() {
    let params = SynthesisParams {
        seed: 7,
        mode: BlendMode::Overexpose,
        ..SynthesisParams::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    make_dataset(5, &params, &SceneSource::Procedural, a.path(), 1).unwrap();
    make_dataset(5, &params, &SceneSource::Procedural, b.path(), 3).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), 5 * 3 + 1);
    assert_eq!(ta, tb);
    let other = tempfile::tempdir().unwrap();
    make_dataset(
        5,
        &SynthesisParams { seed: 8, ..params },
        &SceneSource::Procedural,
        other.path(),
        1,
    )
    .unwrap();
    assert_ne!(tree(other.path()), ta);
}

#[test]
fn written_linear_triples_satisfy_the_blend_after_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let params = SynthesisParams {
        seed: 11,
        ..SynthesisParams::default()
    };
    make_dataset(6, &params, &SceneSource::Procedural, dir.path(), 1).unwrap();
    let samples = load_dataset(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(samples.len(), 6);
    let mut worst = 0.0f64;
    for s in &samples {
        for ((i, t), r) in s
            .observed
            .data()
            .iter()
            .zip(s.transmission.data())
            .zip(s.reflection.data())
        {
            worst = worst.max((*i as f64 - (*t as f64 + *r as f64).min(1.0)).abs());
        }
        assert_eq!(s.observed.shape().h, 32);
    }
    // One 8-bit step, plus the f32 storage of the decoded values.
    assert!(worst <= 1.0 / 255.0 + 1e-6, "{worst}");
}

#[test]
fn manifest_records_every_triple() {
    let dir = tempfile::tempdir().unwrap();
    let params = SynthesisParams {
        seed: 3,
        mode: BlendMode::Overexpose,
        ..SynthesisParams::default()
    };
    make_dataset(3, &params, &SceneSource::Procedural, dir.path(), 2).unwrap();
    let m = Manifest::read(&dir.path().join(MANIFEST_FILE)).unwrap();
    for (k, e) in m.entries.iter().enumerate() {
        assert_eq!(e.index, k);
        assert_eq!(e.mode, BlendMode::Overexpose);
        assert!(e.has_reflection);
        let i = read_rgb::<f32>(&dir.path().join(&e.observed)).unwrap();
        let tr = synthesize_triple(&params, &SceneSource::Procedural, e.seed).unwrap();
        assert_eq!(i.shape(), tr.observed.shape());
    }
}

#[test]
fn image_directories_are_a_scene_source() {
    let scenes = tempfile::tempdir().unwrap();
    for seed in 0..3 {
        let (t, _) = generate_base_pair(seed, 40);
        ragnet::image::write_pnm(&scenes.path().join(format!("s{seed}.ppm")), &t).unwrap();
    }
    let source = SceneSource::from_dir(scenes.path()).unwrap();
    let tr = synthesize_triple(&SynthesisParams::default(), &source, 4).unwrap();
    assert_eq!(tr.observed.shape().dims(), [1, 3, 32, 32]);
    let empty = tempfile::tempdir().unwrap();
    assert!(SceneSource::from_dir(empty.path()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn triples_stay_in_range_and_keep_the_linear_region(seed in 0u64..100_000, over in any::<bool>()) {
        let params = SynthesisParams {
            mode: if over { BlendMode::Overexpose } else { BlendMode::LinearClip },
            ..SynthesisParams::default()
        };
        let tr = synthesize_triple(&params, &SceneSource::Procedural, seed).unwrap();
        let (i, t, r) = (tr.observed.data(), tr.transmission.data(), tr.reflection.data());
        for k in 0..i.len() {
            prop_assert!((0.0..=1.0).contains(&i[k]));
            prop_assert!((0.0..=1.0).contains(&t[k]) && (0.0..=1.0).contains(&r[k]));
            let plane = i.len() / 3;
            let p = k % plane;
            let linear = (0..3).all(|c| t[c * plane + p] + r[c * plane + p] <= 1.0);
            if linear {
                prop_assert_eq!(i[k] - r[k], t[k]);
            }
        }
    }
}
