use criterion::{criterion_group, criterion_main, Criterion};
use scanet_core::data::{synth_study, GeneratorConfig, PatientStudy};
use scanet_core::model::{stack_studies, ModelConfig, ScaNet};
use scanet_core::training::cross_entropy_loss;

fn toy_model(c: &mut Criterion) {
    let cfg = ModelConfig::toy();
    let net = ScaNet::new(&cfg, 0).unwrap();
    let g = GeneratorConfig::toy();
    let studies: Vec<PatientStudy> = (0..8).map(|i| synth_study(i, 0, &g).unwrap()).collect();
    let x = stack_studies(&studies.iter().collect::<Vec<_>>()).unwrap();
    let labels: Vec<u8> = studies.iter().map(|s| s.label).collect();

    let mut group = c.benchmark_group("toy_batch8");
    group.sample_size(20);
    group.bench_function("forward", |b| b.iter(|| net.forward(&x, None, false).unwrap()));
    group.bench_function("forward_backward", |b| {
        b.iter(|| {
            net.params().zero_grad();
            let out = net.forward(&x, None, false).unwrap();
            cross_entropy_loss(&out.probabilities, &labels).unwrap().backward().unwrap();
        })
    });
    group.finish();
}

criterion_group!(benches, toy_model);
criterion_main!(benches);
