//! Deterministic synthetic imagery standing in for the sensor corpora and
//! the downstream classification / segmentation tasks.
//!
//! A pixel is `spectrum[c] + 0.5 * texture[c] + 0.1 * noise`, clamped to
//! `[-3, 3]`. The spectrum comes from a [`ClassSignature`]; texture is a
//! mix of a few smoothed random fields shared across channels, so bands are
//! correlated the way real multispectral bands are. Every draw is keyed by
//! `(seed, modality id, stream, index)`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::modality::ModalitySpec;
use crate::rng::{par_map, Key};
use crate::tensor::Tensor;

pub const SPECTRUM_AMPLITUDE: f32 = 1.0;
pub const TEXTURE_AMPLITUDE: f32 = 0.5;
pub const NOISE_AMPLITUDE: f32 = 0.1;
pub const PIXEL_CLAMP: f32 = 3.0;
/// Minimum L2 distance between spectra of distinct classes.
pub const MIN_SIGNATURE_DISTANCE: f32 = 0.5;
/// Signatures drawn from for unlabeled pretraining imagery.
pub const PRETRAIN_PALETTE: usize = 16;
/// Smoothing applied to the label fields whose arg-max forms a segmentation mask.
pub const SEG_REGION_PASSES: u32 = 16;
pub const MAX_CLASSES: usize = 255;

const MAX_TEXTURE_BASES: usize = 3;
const MAX_TEXTURE_PASSES: u32 = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("field must be at least 4x4, got {h}x{w}")]
    FieldTooSmall { h: usize, w: usize },
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("at most {MAX_CLASSES} classes are supported, got {0}")]
    TooManyClasses(usize),
    #[error("{n} samples cannot cover {k} classes")]
    TooFewSamples { n: usize, k: usize },
    #[error("cannot place {k} spectra {MIN_SIGNATURE_DISTANCE} apart in {channels} channels")]
    SignaturesUnsatisfiable { k: usize, channels: usize },
}

/// Per-pixel class indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl SegMask {
    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// `[h, w, c]`, channel-fastest.
    pub image: Tensor<f32>,
    pub label: Option<usize>,
    pub mask: Option<SegMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSignature {
    pub class: usize,
    /// One value per channel in `[-1, 1]`.
    pub spectrum: Vec<f32>,
    pub smooth_passes: u32,
}

/// White noise smoothed by `smooth_passes` 3x3 binomial passes (edges
/// clamped), standardized to zero mean and unit variance.
pub fn gen_field(h: usize, w: usize, smooth_passes: u32, key: Key) -> Result<Tensor<f32>, SynthError> {
    if h < 4 || w < 4 {
        return Err(SynthError::FieldTooSmall { h, w });
    }
    let mut rng = key.rng();
    let mut field: Vec<f64> = (0..h * w).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut tmp = vec![0.0f64; h * w];
    for _ in 0..smooth_passes {
        for r in 0..h {
            for c in 0..w {
                let l = field[r * w + c.saturating_sub(1)];
                let rr = field[r * w + (c + 1).min(w - 1)];
                tmp[r * w + c] = 0.25 * l + 0.5 * field[r * w + c] + 0.25 * rr;
            }
        }
        for r in 0..h {
            for c in 0..w {
                let u = tmp[r.saturating_sub(1) * w + c];
                let d = tmp[(r + 1).min(h - 1) * w + c];
                field[r * w + c] = 0.25 * u + 0.5 * tmp[r * w + c] + 0.25 * d;
            }
        }
    }
    let n = (h * w) as f64;
    let mean = field.iter().sum::<f64>() / n;
    let var = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
    let data = field.iter().map(|v| ((v - mean) * inv) as f32).collect();
    Ok(Tensor::new(vec![h, w], data).expect("field shape"))
}

/// `k` class signatures for one task, pairwise at least
/// [`MIN_SIGNATURE_DISTANCE`] apart.
pub fn class_signatures(spec: &ModalitySpec, k: usize, key: Key) -> Result<Vec<ClassSignature>, SynthError> {
    let c = spec.channels;
    for restart in 0..100u64 {
        let mut rng = key.str("signatures").u64(restart).rng();
        let mut out: Vec<ClassSignature> = Vec::with_capacity(k);
        'class: for class in 0..k {
            for _ in 0..10_000 {
                let spectrum: Vec<f32> = (0..c).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
                let far = out.iter().all(|o| l2(&o.spectrum, &spectrum) >= MIN_SIGNATURE_DISTANCE);
                if far {
                    let smooth_passes = rng.random_range(1..=MAX_TEXTURE_PASSES);
                    out.push(ClassSignature { class, spectrum, smooth_passes });
                    continue 'class;
                }
            }
            break;
        }
        if out.len() == k {
            return Ok(out);
        }
    }
    Err(SynthError::SignaturesUnsatisfiable { k, channels: c })
}

fn l2(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

/// Unit-norm weights that mix the texture bases into each channel. A fixed
/// property of the sensor, independent of any seed.
fn channel_mixing(spec: &ModalitySpec) -> Vec<Vec<f32>> {
    let bases = spec.channels.min(MAX_TEXTURE_BASES);
    let mut rng = Key::new(0).str("mixing").str(&spec.id).rng();
    (0..spec.channels)
        .map(|_| {
            let w: Vec<f32> = (0..bases).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            let norm = w.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-6);
            w.into_iter().map(|v| v / norm).collect()
        })
        .collect()
}

/// Texture fields for one image, `channels x (size*size)`.
fn texture(spec: &ModalitySpec, size: usize, passes: u32, key: Key) -> Vec<Vec<f32>> {
    let mixing = channel_mixing(spec);
    let bases: Vec<Tensor<f32>> = (0..mixing[0].len())
        .map(|b| gen_field(size, size, passes, key.str("texture").u64(b as u64)).expect("size >= 4"))
        .collect();
    mixing
        .iter()
        .map(|w| {
            let mut ch = vec![0.0f32; size * size];
            for (wb, base) in w.iter().zip(&bases) {
                ch.iter_mut().zip(base.data()).for_each(|(v, &b)| *v += wb * b);
            }
            ch
        })
        .collect()
}

fn compose(spectrum_at: impl Fn(usize) -> usize, signatures: &[ClassSignature], tex: &[Vec<Vec<f32>>], channels: usize, size: usize, key: Key) -> Tensor<f32> {
    let mut rng = key.str("noise").rng();
    let mut data = Vec::with_capacity(size * size * channels);
    for p in 0..size * size {
        let class = spectrum_at(p);
        let sig = &signatures[class];
        for c in 0..channels {
            let noise: f32 = rng.sample(StandardNormal);
            let v = SPECTRUM_AMPLITUDE * sig.spectrum[c] + TEXTURE_AMPLITUDE * tex[class][c][p] + NOISE_AMPLITUDE * noise;
            data.push(v.clamp(-PIXEL_CLAMP, PIXEL_CLAMP));
        }
    }
    Tensor::new(vec![size, size, channels], data).expect("image shape")
}

/// Generates images at a fixed desk-scale size (the configured model input
/// size) regardless of a modality's native size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthGenerator {
    pub size: usize,
    pub threads: usize,
}

impl SynthGenerator {
    pub fn new(size: usize) -> Self {
        Self { size, threads: 1 }
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    fn single_class_image(&self, spec: &ModalitySpec, sig: &ClassSignature, palette: &[ClassSignature], key: Key) -> Tensor<f32> {
        let tex = texture(spec, self.size, sig.smooth_passes, key);
        let mut texs = vec![Vec::new(); palette.len()];
        texs[sig.class] = tex;
        compose(|_| sig.class, palette, &texs, spec.channels, self.size, key)
    }

    /// Unlabeled image `index` of a modality's pretraining stream.
    pub fn pretrain_sample(&self, spec: &ModalitySpec, seed: u64, index: u64) -> SynthSample {
        let base = Key::new(seed).str(&spec.id);
        let palette = class_signatures(spec, PRETRAIN_PALETTE.min(pretrain_palette_cap(spec.channels)), base.str("pretrain"))
            .expect("pretrain palette is always satisfiable");
        let key = base.str("pretrain-sample").u64(index);
        let class = key.str("class").rng().random_range(0..palette.len());
        let image = self.single_class_image(spec, &palette[class], &palette, key);
        SynthSample { image, label: None, mask: None }
    }

    pub fn pretrain_batch(&self, spec: &ModalitySpec, seed: u64, indices: &[u64]) -> Vec<SynthSample> {
        par_map(indices.len(), self.threads, |i| self.pretrain_sample(spec, seed, indices[i]))
    }

    /// Balanced labelled set: every class appears `n / k` or `n / k + 1` times.
    pub fn cls_dataset(&self, spec: &ModalitySpec, n: usize, k: usize, seed: u64) -> Result<Vec<SynthSample>, SynthError> {
        check_task(n, k)?;
        let base = Key::new(seed).str(&spec.id).str("cls").u64(k as u64);
        let signatures = class_signatures(spec, k, base)?;
        let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        labels.shuffle(&mut base.str("labels").rng());
        Ok(par_map(n, self.threads, |i| {
            let key = base.str("sample").u64(i as u64);
            let sig = &signatures[labels[i]];
            let image = self.single_class_image(spec, sig, &signatures, key);
            SynthSample { image, label: Some(labels[i]), mask: None }
        }))
    }

    /// Masks are the per-pixel arg-max over `k` smoothed random fields; each
    /// pixel takes its class's spectrum and texture.
    pub fn seg_dataset(&self, spec: &ModalitySpec, n: usize, k: usize, seed: u64) -> Result<Vec<SynthSample>, SynthError> {
        check_task(n, k)?;
        let base = Key::new(seed).str(&spec.id).str("seg").u64(k as u64);
        let signatures = class_signatures(spec, k, base)?;
        let size = self.size;
        Ok(par_map(n, self.threads, |i| {
            let key = base.str("sample").u64(i as u64);
            let regions: Vec<Tensor<f32>> = (0..k)
                .map(|c| gen_field(size, size, SEG_REGION_PASSES, key.str("region").u64(c as u64)).expect("size >= 4"))
                .collect();
            let mask: Vec<u8> = (0..size * size)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if regions[c].data()[p] > regions[best].data()[p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            let texs: Vec<Vec<Vec<f32>>> = signatures
                .iter()
                .map(|s| texture(spec, size, s.smooth_passes, key.str("class-texture").u64(s.class as u64)))
                .collect();
            let image = compose(|p| mask[p] as usize, &signatures, &texs, spec.channels, size, key);
            SynthSample { image, label: None, mask: Some(SegMask { height: size, width: size, data: mask }) }
        }))
    }
}

/// Very low channel counts cannot host a large well-separated palette.
fn pretrain_palette_cap(channels: usize) -> usize {
    match channels {
        1 => 4,
        2 => 8,
        _ => PRETRAIN_PALETTE,
    }
}

fn check_task(n: usize, k: usize) -> Result<(), SynthError> {
    if k < 2 {
        return Err(SynthError::TooFewClasses(k));
    }
    if k > MAX_CLASSES {
        return Err(SynthError::TooManyClasses(k));
    }
    if n < k {
        return Err(SynthError::TooFewSamples { n, k });
    }
    Ok(())
}

/// Nearest-neighbour resize of an `[h, w, c]` image.
pub fn resize_nearest(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>, crate::tensor::TensorError> {
    let (h, w, c) = match image.shape() {
        &[h, w, c] => (h, w, c),
        other => {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "resize_nearest",
                lhs: other.to_vec(),
                rhs: vec![out_h, out_w],
            })
        }
    };
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for r in 0..out_h {
        let sr = r * h / out_h;
        for col in 0..out_w {
            let sc = col * w / out_w;
            let at = (sr * w + sc) * c;
            out.extend_from_slice(&image.data()[at..at + c]);
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

pub fn resize_mask_nearest(mask: &SegMask, out_h: usize, out_w: usize) -> SegMask {
    let mut data = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        for c in 0..out_w {
            data.push(mask.at(r * mask.height / out_h, c * mask.width / out_w));
        }
    }
    SegMask { height: out_h, width: out_w, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::ModalityRegistry;

    fn spec(id: &str) -> ModalitySpec {
        ModalityRegistry::with_builtins().lookup(id).unwrap().clone()
    }

    #[test]
    fn white_field_is_standardized() {
        let f = gen_field(64, 64, 0, Key::new(9)).unwrap();
        let n = f.numel() as f64;
        let mean = f.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = f.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 0.1);
    }

    #[test]
    fn field_is_deterministic_and_validates_size() {
        assert_eq!(gen_field(8, 8, 2, Key::new(1)).unwrap(), gen_field(8, 8, 2, Key::new(1)).unwrap());
        assert_ne!(gen_field(8, 8, 2, Key::new(1)).unwrap(), gen_field(8, 8, 2, Key::new(2)).unwrap());
        assert!(gen_field(3, 8, 0, Key::new(1)).is_err());
    }

    #[test]
    fn pretrain_sample_shape_and_determinism() {
        let gen = SynthGenerator::new(32);
        let s1 = gen.pretrain_sample(&spec("sentinel1"), 42, 0);
        assert_eq!(s1.image.shape(), &[32, 32, 2]);
        assert_eq!(s1, gen.pretrain_sample(&spec("sentinel1"), 42, 0));
        let e0 = gen.pretrain_sample(&spec("enmap"), 42, 0);
        let e1 = gen.pretrain_sample(&spec("enmap"), 42, 1);
        assert_eq!(e0.image.shape(), &[32, 32, 224]);
        assert_ne!(e0.image, e1.image);
        assert!(e0.image.data().iter().all(|v| v.abs() <= PIXEL_CLAMP));
    }

    #[test]
    fn every_builtin_gets_its_channel_count() {
        let gen = SynthGenerator::new(16);
        for s in ModalityRegistry::with_builtins().iter() {
            assert_eq!(gen.pretrain_sample(s, 1, 3).image.shape()[2], s.channels);
        }
    }

    #[test]
    fn cls_labels_balanced_and_reproducible() {
        let gen = SynthGenerator::new(16);
        let set = gen.cls_dataset(&spec("naip"), 100, 4, 5).unwrap();
        let mut counts = [0; 4];
        set.iter().for_each(|s| counts[s.label.unwrap()] += 1);
        assert_eq!(counts, [25; 4]);
        let again = gen.cls_dataset(&spec("naip"), 100, 4, 5).unwrap();
        let labels = |v: &[SynthSample]| v.iter().map(|s| s.label).collect::<Vec<_>>();
        assert_eq!(labels(&set), labels(&again));
        let odd = gen.cls_dataset(&spec("naip"), 10, 3, 5).unwrap();
        let mut c3 = [0; 3];
        odd.iter().for_each(|s| c3[s.label.unwrap()] += 1);
        assert!(c3.iter().all(|&c| c == 3 || c == 4));
    }

    #[test]
    fn task_preconditions() {
        let gen = SynthGenerator::new(16);
        let s = spec("naip");
        assert_eq!(gen.cls_dataset(&s, 300, 256, 1).unwrap_err(), SynthError::TooManyClasses(256));
        assert_eq!(gen.cls_dataset(&s, 3, 4, 1).unwrap_err(), SynthError::TooFewSamples { n: 3, k: 4 });
        assert_eq!(gen.seg_dataset(&s, 3, 1, 1).unwrap_err(), SynthError::TooFewClasses(1));
    }

    #[test]
    fn signatures_are_separated() {
        for s in ModalityRegistry::with_builtins().iter() {
            let sigs = class_signatures(s, 4, Key::new(3)).unwrap();
            for i in 0..4 {
                assert!(sigs[i].spectrum.iter().all(|v| v.abs() <= 1.0));
                for j in 0..i {
                    assert!(l2(&sigs[i].spectrum, &sigs[j].spectrum) >= MIN_SIGNATURE_DISTANCE);
                }
            }
        }
    }

    #[test]
    fn seg_masks_in_range_and_reproducible() {
        let gen = SynthGenerator::new(32);
        let set = gen.seg_dataset(&spec("gaofen"), 20, 2, 8).unwrap();
        for s in &set {
            assert!(s.mask.as_ref().unwrap().data.iter().all(|&v| v < 2));
        }
        assert_eq!(set, gen.seg_dataset(&spec("gaofen"), 20, 2, 8).unwrap());
    }

    #[test]
    fn threads_do_not_change_output() {
        let s = spec("sentinel2");
        let a = SynthGenerator::new(16).cls_dataset(&s, 12, 3, 4).unwrap();
        let b = SynthGenerator::new(16).with_threads(3).cls_dataset(&s, 12, 3, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resize_nearest_upsamples_blocks() {
        let img = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = resize_nearest(&img, 4, 4).unwrap();
        assert_eq!(up.data()[..4], [1.0, 1.0, 2.0, 2.0]);
        assert_eq!(up.data()[12..], [3.0, 3.0, 4.0, 4.0]);
        let down = resize_nearest(&up, 2, 2).unwrap();
        assert_eq!(down, img);
        let m = SegMask { height: 2, width: 2, data: vec![0, 1, 1, 0] };
        assert_eq!(resize_mask_nearest(&resize_mask_nearest(&m, 6, 6), 2, 2), m);
    }
}
