//! Parallel-vs-sequential comparison of the three data-parallel hot
//! loops: frame encoding, per-example batch gradients, corpus scoring.
//! Both paths share one code path via `par::force_sequential`, so the
//! numbers isolate pool overhead and scaling rather than implementation
//! differences.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use cadenza::audio::sine_clip;
use cadenza::data::FeatureLabelSet;
use cadenza::encoder::{encode, EncoderConfig};
use cadenza::lm::{LanguageModel, QueryText, ToyLm, ToyLmConfig};
use cadenza::metrics::{score_corpus, TrigramHashEmbedder};
use cadenza::par;
use cadenza::projector::{HeadConfig, MultiTaskProjector, ProjectorConfig};
use cadenza::training::{example_grad, LossWeights, TrainExample};

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn bench_encode(c: &mut Criterion) {
    let clip = sine_clip(220.0, 24_000, 10.0, 0.7);
    let config = EncoderConfig { layers: 6, dim: 64, bands: 32, frames_per_second: 75, seed: 5 };
    let mut group = c.benchmark_group("toy_encode_10s");
    group.sample_size(20);
    for (label, seq) in MODES {
        group.bench_function(label, |b| {
            par::force_sequential(seq);
            b.iter(|| black_box(encode(&clip, &config).unwrap()));
        });
    }
    par::force_sequential(false);
    group.finish();
}

fn batch_fixture() -> (MultiTaskProjector, ToyLm, Vec<TrainExample>, LossWeights) {
    let projector = MultiTaskProjector::new(ProjectorConfig {
        encoder_layers: 3,
        encoder_dim: 8,
        lm_dim: 16,
        hidden: 16,
        content_tokens: 4,
        heads: vec![
            HeadConfig { name: "key".into(), classes: 4, n_tokens: 2 },
            HeadConfig { name: "vocals".into(), classes: 3, n_tokens: 1 },
        ],
        seed: 11,
    })
    .unwrap();
    let lm = ToyLm::new(ToyLmConfig::default()).unwrap();
    let enc = EncoderConfig { layers: 3, dim: 8, bands: 16, frames_per_second: 75, seed: 5 };
    let captions =
        ["calm piano melody", "fast loud drums", "soft ambient synth", "dark heavy bass"];
    let examples = captions
        .iter()
        .enumerate()
        .map(|(i, caption)| {
            let mut key = vec![0.0; 4];
            key[i % 4] = 1.0;
            let mut vocals = vec![0.0; 3];
            vocals[i % 3] = 1.0;
            TrainExample {
                embedding: encode(&sine_clip(220.0 * (i + 1) as f64, 2400, 0.5, 0.7), &enc)
                    .unwrap(),
                caption: (*caption).to_owned(),
                labels: FeatureLabelSet {
                    targets: vec![("key".into(), key), ("vocals".into(), vocals)],
                },
            }
        })
        .collect();
    let weights = LossWeights {
        lambda_cap: 1.0,
        lambda_tasks: [("key".to_owned(), 0.1), ("vocals".to_owned(), 0.1)].into(),
    };
    (projector, lm, examples, weights)
}

fn bench_batch_gradients(c: &mut Criterion) {
    let (projector, lm, examples, weights) = batch_fixture();
    let query = lm.embed_query(&QueryText::new("describe this piece of music").unwrap()).unwrap();
    let targets: Vec<_> = examples.iter().map(|e| lm.caption_target(&e.caption).unwrap()).collect();

    let mut group = c.benchmark_group("batch_gradients_4_examples");
    group.sample_size(20);
    for (label, seq) in MODES {
        group.bench_function(label, |b| {
            par::force_sequential(seq);
            b.iter(|| {
                let grads = par::map_range(examples.len(), |i| {
                    example_grad(
                        &projector,
                        &lm,
                        Some(&query.vectors),
                        &examples[i],
                        Some(&targets[i]),
                        &weights,
                    )
                    .unwrap()
                });
                black_box(grads)
            });
        });
    }
    par::force_sequential(false);
    group.finish();
}

fn bench_corpus_metrics(c: &mut Criterion) {
    let words = ["piano", "guitar", "drums", "soft", "loud", "melody", "rhythm", "slow"];
    let sentence = |seed: usize, len: usize| -> String {
        (0..len).map(|i| words[(seed * 7 + i * 3) % words.len()]).collect::<Vec<_>>().join(" ")
    };
    let predictions: Vec<String> = (0..64).map(|i| sentence(i, 12)).collect();
    let references: Vec<String> = (0..64).map(|i| sentence(i + 1, 14)).collect();
    let embedder = TrigramHashEmbedder::default();

    let mut group = c.benchmark_group("score_corpus_64_pairs");
    group.sample_size(20);
    for (label, seq) in MODES {
        group.bench_function(label, |b| {
            par::force_sequential(seq);
            b.iter(|| black_box(score_corpus(&predictions, &references, &embedder).unwrap()));
        });
    }
    par::force_sequential(false);
    group.finish();
}

criterion_group!(benches, bench_encode, bench_batch_gradients, bench_corpus_metrics);
criterion_main!(benches);
