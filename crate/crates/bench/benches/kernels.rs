use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use strm_core::autodiff::{ConvGeom, Graph, Mode};
use strm_core::config::Config;
use strm_core::nn::{Ctx, ParamStore};
use strm_core::rru::{GateModel, RruConfig};
use strm_core::trainer::Trainer;
use strm_core::Tensor;

fn conv3d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn([2, 16, 4, 8, 4], 1.0, &mut rng);
    let w = Tensor::randn([64, 16, 3, 3, 3], 0.1, &mut rng);
    c.bench_function("conv3d_fwd_bwd_16to64_t4_8x4", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), true);
            let wv = g.leaf(w.clone(), true);
            let y = g.conv3d_geom(xv, wv, None, ConvGeom::uniform3d(1, 1)).unwrap();
            let l = g.mean_all(y).unwrap();
            g.backward(l).unwrap();
            black_box(g.grad(wv).map(|t| t.data()[0]))
        })
    });
}

fn rru_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let gate = GateModel::new(&mut store, RruConfig::new(16, 8, 4), &mut rng).unwrap();
    let frames: Vec<Tensor> = (0..4).map(|_| Tensor::randn([8, 16, 8, 4], 1.0, &mut rng)).collect();
    c.bench_function("rru_refine_b8_t4_c16_8x4", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let xs: Vec<_> = frames.iter().map(|f| g.constant(f.clone())).collect();
            let mut ctx = Ctx {
                g: &mut g,
                bound: &bound,
                store: &mut store,
                mode: Mode::Train,
            };
            black_box(gate.refine(&mut ctx, &xs).unwrap().steps.len())
        })
    });
}

fn triplet(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn([32, 256], 1.0, &mut rng);
    let labels: Vec<usize> = (0..32).map(|i| i / 4).collect();
    c.bench_function("batch_hard_triplet_32x256", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let v = g.leaf(x.clone(), true);
            let l = g.batch_hard_triplet(v, &labels, 0.4).unwrap();
            g.backward(l).unwrap();
            black_box(g.value(l).data()[0])
        })
    });
}

fn train_step(c: &mut Criterion) {
    let mut cfg = Config::default();
    cfg.model.backbone.widths = [16, 32, 16];
    let mut trainer = Trainer::new(cfg).unwrap();
    let batch = trainer.batch(0).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("train_step_n4_k2_t4_64x32", |b| b.iter(|| black_box(trainer.step(&batch).unwrap().total)));
    group.finish();
}

criterion_group!(benches, conv3d, rru_step, triplet, train_step);
criterion_main!(benches);
