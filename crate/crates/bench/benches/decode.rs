use biolm_core::decode::{generate, DecodeConfig};
use biolm_core::model::token_items;
use biolm_core::{ModelConfig, ModelParams, Vocabulary, Weights};
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

fn decode(c: &mut Criterion) {
    let weights: Weights<f32> = Weights::new(ModelParams::init(ModelConfig::desk(512), 0).unwrap());
    let prefix = token_items(&(0..48u32).map(|i| 4 + i * 11 % 500).collect::<Vec<_>>());
    let mut group = c.benchmark_group("decode");
    for beam in [1usize, 5] {
        let config = if beam == 1 {
            DecodeConfig::greedy(16, Vocabulary::EOS_ID)
        } else {
            DecodeConfig::beam(beam, 16, Vocabulary::EOS_ID)
        };
        group.bench_with_input(BenchmarkId::new("beam", beam), &config, |b, config| {
            b.iter(|| generate(&weights, black_box(&prefix), config).unwrap())
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = decode
}
criterion_main!(benches);
