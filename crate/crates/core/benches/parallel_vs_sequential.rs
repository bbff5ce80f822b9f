use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fedunlearn::harness::scenario::Federation;
use fedunlearn::harness::{generate_corpus, ScenarioConfig};
use fedunlearn::par::Exec;
use fedunlearn::tinylm::{DropoutMode, LoraAdapter, LoraConfig, Model, ModelConfig, Trainable, Weights};
use fedunlearn::unlearner::UnlearnConfig;

const MODES: [(&str, Exec); 2] = [("parallel", Exec::Parallel), ("sequential", Exec::Sequential)];

fn batch_gradients(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let ad = LoraAdapter::init(LoraConfig::new(8, 4.0, 0.3), cfg.d_model, 1).unwrap();
    let model = Model::new(Weights::init(cfg).unwrap(), Some(ad)).unwrap();
    let batch: Vec<_> = generate_corpus(3, 64, 0.5).iter().map(|s| s.to_example(cfg.max_len)).collect();
    let mut g = c.benchmark_group("loss_and_grad_64");
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| {
                model
                    .loss_and_grad(&batch, Trainable::AdaptersOnly, DropoutMode::Train { seed: 0, step: 0 }, exec)
                    .unwrap()
            })
        });
    }
    g.finish();
}

fn federated_round(c: &mut Criterion) {
    let cfg = ScenarioConfig {
        samples_per_client: 100,
        validation_samples: 100,
        ..ScenarioConfig::default()
    };
    let round = cfg.round_for(0);
    let mut g = c.benchmark_group("federated_round");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter_batched(
                || Federation::setup(&cfg, 0).unwrap(),
                |mut fed| fed.train(&round, 1, exec).unwrap(),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

fn unlearning(c: &mut Criterion) {
    let cfg = ScenarioConfig {
        samples_per_client: 100,
        validation_samples: 100,
        rounds: 3,
        ..ScenarioConfig::default()
    };
    let mut fed = Federation::setup(&cfg, 0).unwrap();
    fed.train(&cfg.round_for(0), cfg.rounds, Exec::Parallel).unwrap();
    let u = UnlearnConfig {
        epochs: 5,
        ..UnlearnConfig::default()
    };
    let mut g = c.benchmark_group("unlearn_5_epochs");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| fed.unlearn(&u, 0, 1.0, exec).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, batch_gradients, federated_round, unlearning);
criterion_main!(benches);
