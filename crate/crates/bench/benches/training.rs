use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use gaitadapt_bench::{desk_config, first_step, labels, uniform};
use gaitadapt_core::backbone::extract_features;
use gaitadapt_core::baselines::MethodConfig;
use gaitadapt_core::eval::retrieve;
use gaitadapt_core::gpak::{build_transfer_graph, cross_adjacency, transfer_convolve};
use gaitadapt_core::model::GaitModel;
use gaitadapt_core::trainer::{run_step, TrainState};

fn training(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_10_iterations");
    g.sample_size(10);
    for m in [MethodConfig::sft(), MethodConfig::gait_adapter()] {
        let config = desk_config(10).with_method(&m);
        let step = first_step(&config);
        g.bench_function(m.label(), |b| {
            b.iter_batched(
                || TrainState::new(&config).unwrap(),
                |state| run_step(state, &step, &config).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    g.finish();
}

fn extraction(c: &mut Criterion) {
    let config = desk_config(1);
    let step = first_step(&config);
    let model = GaitModel::new(config.model_config(), 0).unwrap();
    let batch: Vec<_> = step.train.iter().take(16).collect();
    c.bench_function("extract_16_sequences", |b| {
        b.iter(|| extract_features(black_box(&batch), model.params(), &model.config().extractor).unwrap())
    });
}

fn graph(c: &mut Criterion) {
    // 16 samples x 16 parts against a 16-entry repository, 32 channels
    let (f, k, w) = (uniform(256, 32, 1), uniform(16, 32, 2), uniform(32, 32, 3));
    c.bench_function("transfer_graph_256x16", |b| {
        b.iter(|| {
            let a_t = build_transfer_graph(&cross_adjacency(black_box(&f), &k).unwrap());
            transfer_convolve(&a_t, &f, &k, &w).unwrap()
        })
    });
}

fn retrieval(c: &mut Criterion) {
    let (p, g) = (uniform(100, 512, 4), uniform(200, 512, 5));
    let (pl, gl) = (labels(100, 1), labels(100, 2));
    c.bench_function("retrieve_100x200x512", |b| b.iter(|| retrieve(black_box(&p), &pl, &g, &gl).unwrap()));
}

criterion_group!(benches, training, extraction, graph, retrieval);
criterion_main!(benches);
