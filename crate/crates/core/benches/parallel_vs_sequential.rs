use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tabsynth::discriminator::{DiscHyper, Discriminator};
use tabsynth::exec::{self, Mode};
use tabsynth::metrics::jaccard_nearest;
use tabsynth::pipeline::{generate_table, GenerateConfig};
use tabsynth::policy::{PolicyHyper, PolicyModel, SamplerConfig, TokenId, Vocabulary};
use tabsynth::toy::{make_toy_table, ToySpec};

const MODES: [(&str, Mode); 2] = [("sequential", Mode::Sequential), ("parallel", Mode::Parallel)];

fn toy(n: usize, seed: u64) -> tabsynth::codec::Table {
    make_toy_table(&ToySpec {
        n_rows: n,
        seed,
        ..ToySpec::default()
    })
    .unwrap()
}

fn bench_discriminator(c: &mut Criterion) {
    let table = toy(256, 1);
    let sentences = table.sentences();
    let vocab = Vocabulary::build(sentences.iter().map(String::as_str));
    let seqs: Vec<Vec<TokenId>> = sentences.iter().map(|s| vocab.tokenize(s)).collect();
    let disc = Discriminator::new(vocab, DiscHyper::small(), 7).unwrap();
    let mut g = c.benchmark_group("discriminator_score_256");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec::with_mode(mode, || disc.score_batch(&seqs)))
        });
    }
    g.finish();
}

fn bench_jaccard(c: &mut Criterion) {
    let original = toy(1000, 2);
    let synthetic = toy(300, 3);
    let mut g = c.benchmark_group("jaccard_nearest_300x1000");
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec::with_mode(mode, || jaccard_nearest(&synthetic, &original, None).unwrap()))
        });
    }
    g.finish();
}

fn bench_generate(c: &mut Criterion) {
    let table = toy(200, 4);
    let sentences = table.sentences();
    let vocab = Vocabulary::build(sentences.iter().map(String::as_str));
    let hyper = PolicyHyper {
        layers: 1,
        heads: 2,
        model_dim: 32,
        context_length: 40,
    };
    let policy = PolicyModel::new(vocab, hyper, 5).unwrap();
    let sampler = SamplerConfig::default();
    let cfg = GenerateConfig {
        k: 64,
        budget_factor: 1,
        dedup: false,
    };
    let mut g = c.benchmark_group("generate_64_attempts");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            // An untrained policy rarely emits a full row, so the budget runs out; the work is the same.
            b.iter(|| exec::with_mode(mode, || generate_table(&policy, &sampler, &table.schema, &cfg).is_ok()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_discriminator, bench_jaccard, bench_generate);
criterion_main!(benches);
