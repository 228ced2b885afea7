use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use graphlift::layers::{normalize_adjacency, Activation, AdaptiveGraphConv, AdjacencyInit, AdjacencyMatrix, GraphPool};
use graphlift::keypoints::{skeleton_adjacency, NUM_NODES};
use graphlift::{ParamStore, Tape, Tensor};
use graphlift_bench::BATCH;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for k in [64, 256, 512] {
        let a = Tensor::uniform(BATCH * NUM_NODES, k, 1.0, &mut rng);
        let b = Tensor::uniform(k, k, 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |bch, _| {
            bch.iter(|| black_box(a.matmul(&b).unwrap()))
        });
    }
    group.finish();
}

fn graph_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let conv = AdaptiveGraphConv::new(&mut store, "c", NUM_NODES, 64, 64, Activation::Relu, AdjacencyInit::Identity, &mut rng);
    let pool = GraphPool::new(&mut store, "p", NUM_NODES, 15, &mut rng).unwrap();
    let x = Tensor::uniform(BATCH * NUM_NODES, 64, 1.0, &mut rng);

    c.bench_function("agc_forward_backward", |b| {
        b.iter(|| {
            let mut t = Tape::new(&store);
            let xv = t.constant(x.clone());
            let y = conv.forward(&mut t, xv).unwrap();
            let z = t.constant(Tensor::zeros(BATCH * NUM_NODES, 64));
            let loss = t.mse(y, z).unwrap();
            black_box(t.backward(loss).unwrap())
        })
    });
    c.bench_function("pool_forward_backward", |b| {
        b.iter(|| {
            let mut t = Tape::new(&store);
            let xv = t.constant(x.clone());
            let y = pool.forward(&mut t, xv).unwrap();
            let z = t.constant(Tensor::zeros(BATCH * 15, 64));
            let loss = t.mse(y, z).unwrap();
            black_box(t.backward(loss).unwrap())
        })
    });
    let skeleton = AdjacencyMatrix::new(skeleton_adjacency(), false).unwrap();
    c.bench_function("normalize_skeleton", |b| b.iter(|| black_box(normalize_adjacency(&skeleton).unwrap())));
}

criterion_group!(benches, matmul, graph_conv);
criterion_main!(benches);
