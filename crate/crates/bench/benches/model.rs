use criterion::{criterion_group, criterion_main, Criterion};
use ofa_core::{Key, ModalityRegistry, ModelConfig, OfaNet, SynthGenerator, Tape, Tensor};

fn setup() -> (OfaNet<f32>, Vec<Tensor<f32>>, SynthGenerator) {
    let registry = ModalityRegistry::with_builtins();
    let spec = registry.get("sentinel2").unwrap().clone();
    let cfg = ModelConfig::default();
    let net = OfaNet::new(cfg.clone(), &[spec.clone()], 0).unwrap();
    let synth = SynthGenerator::new(cfg.input_size);
    let images = synth.pretrain_batch(&spec, 0, &(0..8).collect::<Vec<_>>()).into_iter().map(|s| s.image).collect();
    (net, images, synth)
}

fn model(c: &mut Criterion) {
    let (net, images, synth) = setup();
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("features_single", |b| b.iter(|| net.forward_features(&images[0], "sentinel2").unwrap()));
    group.bench_function("features_batch8", |b| b.iter(|| net.forward_features_batch(&images, "sentinel2").unwrap()));
    group.bench_function("mim_step_batch8", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let loss = net.mim_forward(&tape, &images, "sentinel2", 0.75, Key::new(1)).unwrap();
            tape.backward(loss).unwrap()
        })
    });
    let spec = ModalityRegistry::with_builtins().get("sentinel2").unwrap().clone();
    group.bench_function("synth_pretrain_batch8", |b| b.iter(|| synth.pretrain_batch(&spec, 3, &(0..8).collect::<Vec<_>>())));
    group.finish();
}

criterion_group!(benches, model);
criterion_main!(benches);
