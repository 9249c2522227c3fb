mod common;

use common::{all_builtins, builtin};
use ofa_core::synth::gen_field;
use ofa_core::{Key, SynthGenerator, Tensor};
use proptest::prelude::*;

/// Mean absolute lag-1 autocorrelation over horizontal and vertical pairs.
fn lag1_autocorrelation(field: &Tensor<f32>) -> f64 {
    let (h, w) = (field.shape()[0], field.shape()[1]);
    let v = |r: usize, c: usize| field.data()[r * w + c] as f64;
    let n = (h * w) as f64;
    let mean = field.data().iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = field.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let mut horiz = 0.0;
    let mut vert = 0.0;
    for r in 0..h {
        for c in 0..w {
            if c + 1 < w {
                horiz += (v(r, c) - mean) * (v(r, c + 1) - mean);
            }
            if r + 1 < h {
                vert += (v(r, c) - mean) * (v(r + 1, c) - mean);
            }
        }
    }
    let rh = horiz / ((h * (w - 1)) as f64 * var);
    let rv = vert / (((h - 1) * w) as f64 * var);
    (rh.abs() + rv.abs()) / 2.0
}

fn channel_means(image: &Tensor<f32>) -> Vec<f64> {
    let c = image.shape()[2];
    let pixels = image.numel() / c;
    let mut m = vec![0.0; c];
    for px in image.data().chunks_exact(c) {
        m.iter_mut().zip(px).for_each(|(a, &b)| *a += b as f64);
    }
    m.iter_mut().for_each(|a| *a /= pixels as f64);
    m
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn centroids(means: &[Vec<f64>], labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = means[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (m, &l) in means.iter().zip(labels) {
        sums[l].iter_mut().zip(m).for_each(|(s, v)| *s += v);
        counts[l] += 1;
    }
    sums.into_iter().zip(counts).map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect()).collect()
}

#[test]
fn smoothing_raises_autocorrelation() {
    for i in 0..8 {
        let key = Key::new(i).str("field");
        let rough = lag1_autocorrelation(&gen_field(64, 64, 0, key).unwrap());
        let smooth = lag1_autocorrelation(&gen_field(64, 64, 8, key).unwrap());
        assert!(smooth > rough, "key {i}: {smooth} <= {rough}");
        assert!(rough < 0.1);
    }
}

#[test]
fn class_centroids_are_separated_for_every_modality() {
    let gen = SynthGenerator::new(32);
    for spec in all_builtins() {
        let set = gen.cls_dataset(&spec, 100, 4, 42).unwrap();
        let means: Vec<_> = set.iter().map(|s| channel_means(&s.image)).collect();
        let labels: Vec<_> = set.iter().map(|s| s.label.unwrap()).collect();
        let cents = centroids(&means, &labels, 4);
        for a in 0..4 {
            for b in a + 1..4 {
                let d = l2(&cents[a], &cents[b]);
                assert!(d >= 0.3, "{}: classes {a},{b} at {d}", spec.id);
            }
        }
    }
}

#[test]
fn channel_means_are_linearly_separable() {
    // nearest centroid is a linear rule: the decision between two classes
    // is a hyperplane
    let gen = SynthGenerator::new(32);
    for spec in all_builtins() {
        let set = gen.cls_dataset(&spec, 400, 4, 7).unwrap();
        let means: Vec<_> = set.iter().map(|s| channel_means(&s.image)).collect();
        let labels: Vec<_> = set.iter().map(|s| s.label.unwrap()).collect();
        let cents = centroids(&means[..300], &labels[..300], 4);
        let correct = (300..400)
            .filter(|&i| {
                let pred = (0..4).min_by(|&a, &b| l2(&means[i], &cents[a]).total_cmp(&l2(&means[i], &cents[b]))).unwrap();
                pred == labels[i]
            })
            .count();
        assert!(correct >= 80, "{}: {correct}/100", spec.id);
    }
}

#[test]
fn binary_masks_almost_always_contain_both_classes() {
    let gen = SynthGenerator::new(32);
    for spec in all_builtins() {
        let set = gen.seg_dataset(&spec, 1000, 2, 42).unwrap();
        let both = set
            .iter()
            .filter(|s| {
                let m = s.mask.as_ref().unwrap();
                m.data.contains(&0) && m.data.contains(&1)
            })
            .count();
        assert!(both >= 950, "{}: {both}/1000", spec.id);
    }
}

#[test]
fn samples_are_random_access() {
    let gen = SynthGenerator::new(32);
    let spec = builtin("enmap");
    let batch = gen.pretrain_batch(&spec, 9, &[4, 0, 2]);
    assert_eq!(batch[0], gen.pretrain_sample(&spec, 9, 4));
    assert_eq!(batch[2], gen.pretrain_sample(&spec, 9, 2));
    assert_ne!(gen.pretrain_sample(&spec, 9, 0).image, gen.pretrain_sample(&spec, 9, 1).image);
    assert_ne!(gen.pretrain_sample(&spec, 9, 0).image, gen.pretrain_sample(&builtin("sentinel2"), 9, 0).image);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pixels_stay_clamped_and_channels_match(m in 0usize..5, seed in 0u64..1000, index in 0u64..1000) {
        let spec = all_builtins()[m].clone();
        let s = SynthGenerator::new(16).pretrain_sample(&spec, seed, index);
        prop_assert_eq!(s.image.shape(), &[16, 16, spec.channels][..]);
        prop_assert!(s.image.data().iter().all(|v| (-3.0..=3.0).contains(v)));
    }

    #[test]
    fn mask_values_stay_below_class_count(k in 2usize..6, seed in 0u64..1000) {
        let set = SynthGenerator::new(16).seg_dataset(&builtin("gaofen"), k, k, seed).unwrap();
        for s in set {
            prop_assert!(s.mask.unwrap().data.iter().all(|&v| (v as usize) < k));
            prop_assert!(s.image.data().iter().all(|v| (-3.0..=3.0).contains(v)));
        }
    }
}
