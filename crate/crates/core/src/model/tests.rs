use super::*;
use crate::modality::ModalityRegistry;
use crate::synth::SynthGenerator;

fn tiny() -> ModelConfig {
    ModelConfig { input_size: 16, patch_size: 4, embed_dim: 16, depth: 2, heads: 2, decoder_dim: 8, decoder_depth: 1, decoder_heads: 2, ..ModelConfig::default() }
}

fn specs(ids: &[&str]) -> Vec<ModalitySpec> {
    let reg = ModalityRegistry::with_builtins();
    ids.iter().map(|id| reg.lookup(id).unwrap().clone()).collect()
}

fn image(id: &str, size: usize, index: u64) -> Tensor<f32> {
    let spec = specs(&[id]).remove(0);
    SynthGenerator::new(size).pretrain_sample(&spec, 3, index).image
}

#[test]
fn param_count_matches_closed_form() {
    let cfg = tiny();
    let s = specs(&["sentinel1", "naip", "enmap"]);
    let net = OfaNet::<f32>::new(cfg.clone(), &s, 0).unwrap();
    assert_eq!(net.param_count(), cfg.param_count(&[2, 3, 224]));
}

#[test]
fn init_ignores_registration_order() {
    let a = OfaNet::<f32>::new(tiny(), &specs(&["naip", "sentinel2"]), 5).unwrap();
    let b = OfaNet::<f32>::new(tiny(), &specs(&["sentinel2", "naip"]), 5).unwrap();
    assert_eq!(a, b);
    let c = OfaNet::<f32>::new(tiny(), &specs(&["naip"]), 5).unwrap();
    assert_eq!(a.backbone_hash(), c.backbone_hash());
    assert_eq!(a.embedder("naip"), c.embedder("naip"));
}

#[test]
fn embed_shapes_per_modality() {
    let net = OfaNet::<f32>::new(tiny(), &specs(&["sentinel1", "enmap"]), 0).unwrap();
    let tape = Tape::new();
    for (id, _) in [("sentinel1", 2), ("enmap", 224)] {
        let seq = net.embed(&tape, &[image(id, 16, 0), image(id, 16, 1)], id).unwrap();
        assert_eq!(seq.tokens.shape(), vec![32, 16]);
        assert_eq!(seq.num_visible(), 16);
    }
}

#[test]
fn wrong_channels_and_unknown_modality() {
    let net = OfaNet::<f32>::new(tiny(), &specs(&["sentinel1"]), 0).unwrap();
    let tape = Tape::new();
    let err = net.embed(&tape, &[image("naip", 16, 0)], "sentinel1").unwrap_err();
    assert!(matches!(err, ModelError::ChannelMismatch { expected: 2, got: 3, .. }));
    assert!(matches!(net.embed(&tape, &[image("naip", 16, 0)], "naip"), Err(ModelError::UnknownModality(_))));
    assert!(matches!(net.embed(&tape, &[image("sentinel1", 8, 0)], "sentinel1"), Err(ModelError::ImageSize { .. })));
}

#[test]
fn mask_partitions_tokens() {
    let net = OfaNet::<f32>::new(tiny(), &specs(&["naip"]), 0).unwrap();
    let tape = Tape::new();
    let seq = net.embed(&tape, &[image("naip", 16, 0), image("naip", 16, 1)], "naip").unwrap();
    let seq = random_mask(seq, 0.75, Key::new(1)).unwrap();
    for b in 0..2 {
        assert_eq!(seq.masked_idx[b].len(), 12);
        assert_eq!(seq.visible_idx[b].len(), 4);
        let mut all: Vec<_> = seq.masked_idx[b].iter().chain(&seq.visible_idx[b]).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
    }
    assert_ne!(seq.masked_idx[0], seq.masked_idx[1]);
}

#[test]
fn degenerate_mask_ratios_rejected() {
    let net = OfaNet::<f32>::new(tiny(), &specs(&["naip"]), 0).unwrap();
    let tape = Tape::new();
    let mk = || net.embed(&tape, &[image("naip", 16, 0)], "naip").unwrap();
    assert!(matches!(random_mask(mk(), 0.0, Key::new(0)), Err(ModelError::MaskRatio(_))));
    assert!(matches!(random_mask(mk(), 1.0, Key::new(0)), Err(ModelError::MaskRatio(_))));
    assert!(matches!(random_mask(mk(), 0.01, Key::new(0)), Err(ModelError::DegenerateMask { .. })));
    assert!(matches!(random_mask(mk(), 0.99, Key::new(0)), Err(ModelError::DegenerateMask { .. })));
}

#[test]
fn encode_and_decode_shapes() {
    let net = OfaNet::<f32>::new(tiny(), &specs(&["sentinel2"]), 0).unwrap();
    let tape = Tape::new();
    let imgs = [image("sentinel2", 16, 0), image("sentinel2", 16, 1), image("sentinel2", 16, 2)];
    let seq = random_mask(net.embed(&tape, &imgs, "sentinel2").unwrap(), 0.75, Key::new(0)).unwrap();
    let latent = net.encode(&tape, &seq).unwrap();
    assert_eq!(latent.shape(), vec![12, 16]);
    let pred = net.decode(&tape, &latent, &seq, "sentinel2").unwrap();
    assert_eq!(pred.shape(), vec![48, 4 * 4 * 9]);
}

#[test]
fn mim_loss_ignores_visible_rows() {
    let tape = Tape::<f64>::new();
    let pred = tape.constant(Tensor::new(vec![3, 2], vec![1.0, 1.0, 5.0, 5.0, 2.0, 0.0]).unwrap());
    let target = tape.constant(Tensor::zeros(vec![3, 2]).unwrap());
    let loss = mim_loss(&pred, &target, &[0, 2]).unwrap().value().item().unwrap();
    assert!((loss - 1.5).abs() < 1e-12);
    assert!(matches!(mim_loss(&pred, &target, &[]), Err(ModelError::EmptyMask)));
}

#[test]
fn features_are_mean_of_tokens() {
    let net = OfaNet::<f32>::new(tiny(), &specs(&["gaofen"]), 0).unwrap();
    let img = image("gaofen", 16, 0);
    let tokens = net.forward_tokens(&img, "gaofen").unwrap();
    assert_eq!(tokens.shape(), &[16, 16]);
    let f = net.forward_features(&img, "gaofen").unwrap();
    assert_eq!(f.shape(), &[16]);
    let batch = net.forward_features_batch(&[img.clone(), img], "gaofen").unwrap();
    for b in batch {
        for (x, y) in b.data().iter().zip(f.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}

#[test]
fn load_params_checks_names_and_shapes() {
    let mut net = OfaNet::<f32>::new(tiny(), &specs(&["naip"]), 0).unwrap();
    let other = OfaNet::<f32>::new(tiny(), &specs(&["naip"]), 1).unwrap();
    net.load_params(other.named_params()).unwrap();
    assert_eq!(net.backbone_hash(), other.backbone_hash());
    let mut params = other.named_params();
    params.pop();
    assert!(matches!(net.load_params(params), Err(ModelError::MissingParam(_))));
    let mut params = other.named_params();
    params.push(("extra".into(), Tensor::scalar(0.0)));
    assert!(matches!(net.load_params(params), Err(ModelError::UnexpectedParam(_))));
}

#[test]
fn cast_round_trip_preserves_weights() {
    let net = OfaNet::<f32>::new(tiny(), &specs(&["naip"]), 0).unwrap();
    let back: OfaNet<f32> = net.cast::<f64>().cast();
    assert_eq!(back, net);
}

#[test]
fn config_validation() {
    assert!(ModelConfig { patch_size: 5, ..tiny() }.validate().is_err());
    assert!(ModelConfig { heads: 3, ..tiny() }.validate().is_err());
    assert!(ModelConfig { embed_dim: 18, heads: 2, ..tiny() }.validate().is_err());
    assert!(ModelConfig::default().validate().is_ok());
}
