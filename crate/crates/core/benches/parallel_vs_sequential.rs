use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mlfed_core::baselines::{brute_force_oracle, OracleOptions};
use mlfed_core::env::{Action, Dataset, EnvConfig, RewardConfig};
use mlfed_core::ensemble::EnsembleConfig;
use mlfed_core::eval::dataset_metrics;
use mlfed_core::grouping::GroupingTable;
use mlfed_core::synth::{scalability_trace, SceneParams};
use mlfed_core::Execution;

fn dataset(images: usize) -> Dataset {
    let scene = SceneParams { images, ..SceneParams::default() };
    let trace = scalability_trace(&scene, 7).unwrap();
    let table = GroupingTable::identity(trace.header.categories.as_ref().unwrap()).unwrap();
    Dataset::prepare(&trace, &table, &RewardConfig::default(), &EnsembleConfig::default())
}

fn modes() -> [(&'static str, Execution); 2] {
    [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
}

fn oracle(c: &mut Criterion) {
    let data = dataset(40);
    let cfg = EnvConfig::new(data.n_providers());
    let mut group = c.benchmark_group("oracle_10_providers");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| brute_force_oracle(&data, &cfg, OracleOptions::default(), exec).unwrap())
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let data = dataset(2000);
    let cfg = EnsembleConfig::default();
    let all = Action::all(data.n_providers());
    let preds: Vec<_> = (0..data.len()).map(|i| data.ensemble_action(i, &all, &cfg)).collect();
    let gt: Vec<_> = (0..data.len()).map(|i| data.eval_reference(i).to_vec()).collect();
    let mut group = c.benchmark_group("dataset_metrics_2000_images");
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| dataset_metrics(&preds, &gt, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, oracle, metrics);
criterion_main!(benches);
