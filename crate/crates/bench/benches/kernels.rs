use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dvlta_core::harness::{synth_dataset, Checkpoint, Dataset, ModelShapes, RunConfig, SynthConfig};
use dvlta_core::numerics::{ops, ConvGeometry, Session, Tensor};
use dvlta_core::scoring::plcc_loss_graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn conv3d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv3d");
    // (channels in, channels out, frames, side, kernel)
    for (ci, co, t, side, k) in [(3, 16, 8, 16, [1, 3, 3]), (16, 32, 8, 8, [3, 3, 3]), (32, 32, 16, 8, [3, 1, 1])] {
        let x = uniform(&[ci, t, side, side], &mut rng);
        let w = uniform(&[co, ci, k[0], k[1], k[2]], &mut rng);
        let geom = ConvGeometry::new([1, 1, 1], [k[0] / 2, k[1] / 2, k[2] / 2]);
        let id = format!("{ci}->{co} {t}x{side}x{side} k{}{}{}", k[0], k[1], k[2]);
        group.bench_function(BenchmarkId::from_parameter(id), |b| b.iter(|| ops::conv3d(&x, &w, geom).unwrap()));
    }
    group.finish();
}

fn model_step(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        n_videos: 16,
        dim: 32,
        ..SynthConfig::default()
    };
    let out = synth_dataset(&synth, dir.path()).unwrap();
    let cfg = RunConfig {
        dim: 32,
        ..RunConfig::default()
    };
    let data = Dataset::load(&out.manifest, &cfg.active_branches()).unwrap();
    let shapes = ModelShapes {
        dim: data.dim(),
        local_channels: data.local_channels(),
        clip_channels: data.clip_channels(),
    };
    let ckpt = Checkpoint::init(&cfg, shapes, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let idx: Vec<usize> = (0..cfg.batch).collect();
    let batch = data.batch::<f32>(&idx, cfg.num_frames, None).unwrap();

    let mut group = c.benchmark_group("model");
    group.bench_function("forward_eval_batch8", |b| {
        b.iter(|| {
            let mut s = Session::new(&ckpt.store, false);
            ckpt.model.forward(&mut s, &batch, &data.text).unwrap().scores.q_pre
        })
    });
    group.bench_function("forward_backward_batch8", |b| {
        b.iter(|| {
            let mut s = Session::new(&ckpt.store, true);
            let out = ckpt.model.forward(&mut s, &batch, &data.text).unwrap();
            let loss = plcc_loss_graph(&mut s, out.scores.q_pre, &batch.gt).unwrap();
            s.backward(loss).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, conv3d, model_step);
criterion_main!(benches);
