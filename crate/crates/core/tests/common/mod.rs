#![allow(dead_code)]

pub mod grad;

use ofa_core::{Key, ModalityRegistry, ModalitySpec, ModelConfig, Scalar, Tensor};
use rand::Rng;

/// Uniform values in [-1, 1), keyed by `seed`.
pub fn rand_tensor<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = Key::new(seed).str("test-tensor").rng();
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64(rng.random_range(-1.0..1.0))).unwrap()
}

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_grad<T: Scalar>(x: &Tensor<T>, eps: f64, mut f: impl FnMut(&Tensor<T>) -> f64) -> Vec<f64> {
    (0..x.numel())
        .map(|i| {
            let mut plus = x.clone();
            plus.data_mut()[i] = plus.data()[i] + T::from_f64(eps);
            let mut minus = x.clone();
            minus.data_mut()[i] = minus.data()[i] - T::from_f64(eps);
            (f(&plus) - f(&minus)) / (2.0 * eps)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    rel_err_floor(a, b, 0.0)
}

/// As [`rel_err`], but the denominator never drops below `floor`, so tensors
/// whose true gradient is zero are compared absolutely.
pub fn rel_err_floor(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b)).max(floor);
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn as_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

pub fn builtin(id: &str) -> ModalitySpec {
    ModalityRegistry::with_builtins().lookup(id).unwrap().clone()
}

pub fn all_builtins() -> Vec<ModalitySpec> {
    ModalityRegistry::with_builtins().iter().cloned().collect()
}

/// 2 blocks of width 16 over 16x16 inputs.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_size: 16,
        patch_size: 4,
        embed_dim: 16,
        depth: 2,
        heads: 2,
        decoder_dim: 8,
        decoder_depth: 2,
        decoder_heads: 2,
        ..ModelConfig::default()
    }
}

/// Independent count: embedders and decoders per modality plus the backbone,
/// tallied layer by layer.
pub fn expected_param_count(cfg: &ModelConfig, channels: &[usize]) -> usize {
    let linear = |i: usize, o: usize| i * o + o;
    let norm = |d: usize| 2 * d;
    let block = |d: usize| {
        let h = cfg.mlp_ratio * d;
        norm(d) + 4 * linear(d, d) + norm(d) + linear(d, h) + linear(h, d)
    };
    let (d, dd, pp) = (cfg.embed_dim, cfg.decoder_dim, cfg.patch_size * cfg.patch_size);
    let backbone = cfg.depth * block(d) + norm(d);
    let per_modality: usize = channels
        .iter()
        .map(|&c| linear(pp * c, d) + linear(d, dd) + dd + cfg.decoder_depth * block(dd) + norm(dd) + linear(dd, pp * c))
        .sum();
    backbone + per_modality
}
