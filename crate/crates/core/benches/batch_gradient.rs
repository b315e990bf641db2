use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use milrep::encoders::{init_model, ModelDims};
use milrep::exec::Execution;
use milrep::objective::{ObjectiveConfig, DEFAULT_GAMMA_INIT};
use milrep::scoring::FeatureBag;
use milrep::trainer::{batch_loss_with_grad, BatchInputs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_bag(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> FeatureBag {
    FeatureBag::new(dim, (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn inputs(batch: usize, regions: usize, sentences: usize, dim: usize) -> BatchInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    BatchInputs {
        ids: (0..batch).map(|i| format!("doc{i}")).collect(),
        images: (0..batch).map(|_| random_bag(&mut rng, regions, dim)).collect(),
        sentences: (0..batch).map(|_| random_bag(&mut rng, sentences, dim)).collect(),
    }
}

fn bench(c: &mut Criterion) {
    let objective = ObjectiveConfig::default();
    let dims = ModelDims {
        region_input: 32,
        sentence_input: 32,
        hidden: 32,
        embed: 16,
    };
    let model = init_model(&dims, &objective, DEFAULT_GAMMA_INIT, 0).unwrap();
    let mut group = c.benchmark_group("batch_loss_with_grad");
    for batch in [8, 32] {
        let data = inputs(batch, 12, 3, 32);
        for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
            group.bench_with_input(BenchmarkId::new(name, batch), &data, |b, data| {
                b.iter(|| batch_loss_with_grad(black_box(&model), &objective, data, exec).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
