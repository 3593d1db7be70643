use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use tracksim::autodiff::{loss_gradient, GradientOptions, LeafSet, RolloutArgs, TrajectoryLoss};
use tracksim::batch::{rollout_batch, BatchRequest, Precision};
use tracksim::dynamics::rollout;
use tracksim::liftsplat::{pointcloud_to_heightmap, splat, Aggregator, LiftedFeatureCloud};
use tracksim::losses::LossConfig;
use tracksim::terrain::GridSpec;
use tracksim_bench::fixture;

fn single_rollout(c: &mut Criterion) {
    let mut g = c.benchmark_group("rollout");
    for horizon in [1.0, 2.0, 4.0] {
        let f = fixture(128, 1, horizon);
        g.throughput(Throughput::Elements((horizon / f.cfg.dt) as u64));
        g.bench_with_input(BenchmarkId::new("f64", horizon), &f, |b, f| {
            b.iter(|| rollout(&f.states[0], &f.schedules[0], &f.grid, &f.robot, &f.cfg).unwrap())
        });
    }
    g.finish();
}

fn batched(c: &mut Criterion) {
    let mut g = c.benchmark_group("batch");
    g.sample_size(10);
    let f = fixture(128, 64, 1.0);
    for precision in [Precision::F32, Precision::F64] {
        let req = BatchRequest {
            grid: &f.grid,
            robot: &f.robot,
            states: f.states.clone(),
            schedules: f.schedules.clone(),
            cfg: f.cfg.clone(),
            precision,
            workers: None,
        };
        g.throughput(Throughput::Elements(req.len() as u64));
        g.bench_function(BenchmarkId::new("64x1s", precision), |b| {
            b.iter(|| rollout_batch(black_box(&req)).unwrap())
        });
    }
    g.finish();
}

fn gradient(c: &mut Criterion) {
    let mut g = c.benchmark_group("gradient");
    g.sample_size(10);
    let f = fixture(64, 2, 1.0);
    let args = RolloutArgs {
        state0: f.states[0],
        schedule: &f.schedules[0],
        grid: &f.grid,
        robot: &f.robot,
        cfg: &f.cfg,
    };
    let reference = rollout(&f.states[1], &f.schedules[1], &f.grid, &f.robot, &f.cfg).unwrap();
    let nominal = args.rollout().unwrap();
    let loss = TrajectoryLoss::new(&nominal.times, &reference, LossConfig::default()).unwrap();
    for (name, checkpoint) in [("retained", None), ("checkpointed", Some(50))] {
        let opts = GradientOptions {
            checkpoint,
            ..GradientOptions::default()
        };
        g.bench_function(name, |b| {
            b.iter(|| loss_gradient(&args, LeafSet::all(), &loss, &opts).unwrap())
        });
    }
    g.finish();
}

fn rasterise(c: &mut Criterion) {
    let mut g = c.benchmark_group("liftsplat");
    let spec = GridSpec::centered(128, 0.1).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let n = 100_000;
    let points: Vec<[f64; 3]> = (0..n)
        .map(|_| [rng.random_range(-7.0..7.0), rng.random_range(-7.0..7.0), rng.random_range(-0.5..0.5)])
        .collect();
    let mut cloud = LiftedFeatureCloud::new(8);
    for p in &points {
        let feat: Vec<f64> = (0..8).map(|_| rng.random()).collect();
        cloud.push(*p, rng.random(), &feat).unwrap();
    }
    g.throughput(Throughput::Elements(n));
    g.bench_function("splat_8ch", |b| b.iter(|| splat(black_box(&cloud), &spec).unwrap()));
    g.bench_function("heightmap_p90", |b| {
        b.iter(|| pointcloud_to_heightmap(black_box(&points), &spec, Aggregator::default()).unwrap())
    });
    g.finish();
}

criterion_group!(benches, single_rollout, batched, gradient, rasterise);
criterion_main!(benches);
