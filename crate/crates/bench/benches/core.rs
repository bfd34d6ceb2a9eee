use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use synctalk_bench::{cond, field, points, rays, samples};
use synctalk_core::volume_renderer::{render_backward, render_rays};
use synctalk_core::{FieldConfig, FieldGradients, RenderOptions, TrainConfig, Trainer};

fn hash_encode(c: &mut Criterion) {
    let f = field(1);
    let pts = points(1024, 2);
    let mut g = c.benchmark_group("hash_encode");
    g.throughput(Throughput::Elements(pts.len() as u64));
    g.bench_function("tri_plane_1024", |b| {
        b.iter(|| pts.iter().map(|p| f.encoder.encode(p)[0]).sum::<f64>())
    });
    g.finish();
}

fn render(c: &mut Criterion) {
    let f = field(3);
    let rs = rays(256, 4);
    let opts = RenderOptions::default();
    let mut g = c.benchmark_group("render");
    g.throughput(Throughput::Elements(rs.len() as u64));
    g.bench_function("forward_256_rays", |b| b.iter(|| render_rays(&f, &rs, &cond(), &opts, 0).unwrap()));
    let tape = render_rays(&f, &rs, &cond(), &opts, 0).unwrap();
    let dc = vec![[1.0, -0.5, 0.25]; rs.len()];
    let da = vec![0.0; rs.len()];
    g.bench_function("backward_256_rays", |b| {
        b.iter_batched(
            || FieldGradients::zeros_like(&f),
            |mut grads| render_backward(&f, &tape, &dc, &da, &mut grads),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let data = samples();
    let cfg = TrainConfig {
        occupancy: None,
        ..TrainConfig::default()
    };
    let spec = synctalk_core::synth_scene::SceneSpec::default();
    let mut t = Trainer::new(FieldConfig::default(), cfg, spec.background).unwrap();
    c.bench_function("train_step_1024_rays", |b| b.iter(|| t.step(&data).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = hash_encode, render, train_step
}
criterion_main!(benches);
