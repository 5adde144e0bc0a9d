//! Sequential vs parallel execution of the data-parallel kernels.
//!
//! Build with `--no-default-features` to see the sequential fallback for both arms.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ogflow::datagen::{gen_scene, ScenePair, SceneSpec};
use ogflow::geometry::knn_search_with;
use ogflow::network::{ModelConfig, ModelParams};
use ogflow::trainer::{average_grads, evaluate, supervised_sample_grad};
use ogflow::Exec;

const ARMS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn cloud(n: usize, seed: u64) -> Vec<[f32; 3]> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [0; 3].map(|_| r.gen_range(-1.0f32..1.0))).collect()
}

fn scenes(n: usize) -> Vec<ScenePair> {
    (0..n as u64)
        .map(|i| gen_scene(&SceneSpec::default(), i).unwrap())
        .collect()
}

fn knn(c: &mut Criterion) {
    let mut group = c.benchmark_group("knn_search");
    for n in [1024, 4096] {
        let (q, r) = (cloud(n, 1), cloud(n, 2));
        for (name, exec) in ARMS {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| knn_search_with(exec, black_box(&q), black_box(&r), 16).unwrap())
            });
        }
    }
    group.finish();
}

fn batch_gradient(c: &mut Criterion) {
    let model = ModelConfig::desk();
    let params = ModelParams::<f32>::init(&model, 0).unwrap();
    let batch = scenes(4);
    let alpha = [0.02, 0.04];
    let mut group = c.benchmark_group("batch_gradient");
    group.sample_size(10);
    for (name, exec) in ARMS {
        group.bench_function(name, |b| {
            b.iter(|| {
                let grads = exec
                    .map_slice(&batch, |p| supervised_sample_grad(&params, &model, p, &alpha))
                    .into_iter()
                    .collect::<ogflow::Result<Vec<_>>>()
                    .unwrap();
                average_grads(&grads).unwrap()
            })
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let model = ModelConfig::desk();
    let params = ModelParams::<f32>::init(&model, 0).unwrap();
    let pairs = scenes(16);
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, exec) in ARMS {
        group.bench_function(name, |b| {
            b.iter(|| evaluate(&params, &model, black_box(&pairs), exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, knn, batch_gradient, evaluation);
criterion_main!(benches);
