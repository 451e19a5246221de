use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use pad_core::blockworld::{render_rgb, reset, TaskSpec};
use pad_core::datastore::{generate, mixed_batch, GenSpec};
use pad_core::numcore::{Graph, Tensor};
use pad_core::padnet::probe::{random_bundle, random_items};
use pad_core::padnet::{PadConfig, PadNet};
use pad_core::runtime::{PadPolicy, Policy};
use pad_core::trainkit::{schedule_for, step_rng, train_step, AdamWConfig, OptimizerState, Phase};
use pad_core::diffusion::LossWeights;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Tensor::<f32>::randn(&[16 * 65, 128], 1.0, &mut rng);
    let b = Tensor::<f32>::randn(&[128, 384], 1.0, &mut rng);
    c.bench_function("matmul 1040x128x384", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.constant(a.clone());
            let y = g.constant(b.clone());
            g.matmul(x, y).unwrap()
        })
    });
}

fn render(c: &mut Criterion) {
    let state = reset(3, &TaskSpec::from_instruction(0).unwrap(), 1).unwrap();
    c.bench_function("render_rgb", |bench| bench.iter(|| render_rgb(&state)));
}

fn train(c: &mut Criterion) {
    let cfg = PadConfig::mini();
    let spec = GenSpec {
        robot_episodes: 8,
        video_episodes: 8,
        with_depth: false,
        ..GenSpec::default()
    };
    let (robot, video) = generate(&spec).unwrap();
    let sched = schedule_for(&cfg).unwrap();
    let adam = AdamWConfig::default();
    let w = LossWeights::new(1.0, 1.0, 0.0);
    let mut rng = step_rng(0, Phase::Adapt, 0);
    let batch = mixed_batch(&robot, &video, 16, 0.25, cfg.k, cfg.frame_interval, &mut rng).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("train_step mini b16", |bench| {
        bench.iter_batched(
            || {
                let net = PadNet::<f32>::init(&cfg, 0).unwrap();
                let opt = OptimizerState::new(net.params());
                (net, opt)
            },
            |(mut net, mut opt)| {
                let mut rng = step_rng(0, Phase::Adapt, 1);
                train_step(&mut net, &mut opt, &adam, &batch, &sched, &w, &mut rng, 0).unwrap()
            },
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

fn predict(c: &mut Criterion) {
    let cfg = PadConfig::mini();
    let net = PadNet::<f32>::init(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let bundles: Vec<_> = (0..16).map(|_| random_bundle::<f32, _>(&cfg, true, false, &mut rng)).collect();
    let items = random_items(&bundles, &mut rng);
    let mut group = c.benchmark_group("predict");
    group.sample_size(20);
    group.bench_function("predict mini b16", |bench| bench.iter(|| net.predict(&items).unwrap()));
    group.finish();
}

fn plan(c: &mut Criterion) {
    let cfg = PadConfig::mini();
    let net = PadNet::<f32>::init(&cfg, 0).unwrap();
    let state = reset(5, &TaskSpec::from_instruction(1).unwrap(), 1).unwrap();
    let policy = PadPolicy { net: &net, noise_base: 7 };
    let mut group = c.benchmark_group("plan");
    group.sample_size(10);
    group.bench_function("plan mini 75 ddim steps", |bench| bench.iter(|| policy.act(&state, 0).unwrap()));
    group.finish();
}

criterion_group!(benches, matmul, render, predict, train, plan);
criterion_main!(benches);
