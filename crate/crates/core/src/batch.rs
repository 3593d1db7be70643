//! Many rollouts over shared terrain and robot, in parallel, plus the
//! horizon/batch throughput benchmark.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{rollout_in, ControlSchedule, ControlStep, EngineConfig};
use crate::error::{Error, Result};
use crate::robot::RobotModel;
use crate::scenario::{generate_world, touchdown_height, Shape, WorldSpec};
use crate::terrain::{ContactField, TerrainGrid};
use crate::trajectory::{RigidState, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("precision must be f32 or f64, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Rollouts sharing one grid, robot and engine configuration. `states` and
/// `schedules` hold either one entry (broadcast) or one per trajectory.
#[derive(Debug, Clone)]
pub struct BatchRequest<'a> {
    pub grid: &'a TerrainGrid,
    pub robot: &'a RobotModel,
    pub states: Vec<RigidState<f64>>,
    pub schedules: Vec<ControlSchedule>,
    pub cfg: EngineConfig,
    pub precision: Precision,
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl BatchRequest<'_> {
    pub fn len(&self) -> usize {
        self.states.len().max(self.schedules.len())
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty() || self.schedules.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.len();
        if self.is_empty() {
            return Err(Error::Config("batch needs at least one state and one schedule".into()));
        }
        for (name, n) in [("states", self.states.len()), ("schedules", self.schedules.len())] {
            if n != 1 && n != b {
                return Err(Error::Shape(format!("{name} has {n} entries, batch has {b}")));
            }
        }
        if self.workers == Some(0) {
            return Err(Error::Config("worker count must be positive".into()));
        }
        self.cfg.validate()?;
        self.schedules.iter().try_for_each(|s| s.validate(&self.cfg))
    }

    fn run_with<R: crate::real::Real + Sync>(&self, field: &ContactField<R>) -> Vec<Result<Trajectory>> {
        let one = |i: usize| {
            let s0 = &self.states[i.min(self.states.len() - 1)];
            let sched = &self.schedules[i.min(self.schedules.len() - 1)];
            rollout_in(s0, sched, field, self.robot, &self.cfg)
        };
        (0..self.len()).into_par_iter().map(one).collect()
    }
}

/// Runs every trajectory of the batch. Each slot holds that trajectory's own
/// result, so one failing rollout does not affect the others. Results do not
/// depend on the worker count.
pub fn rollout_batch(req: &BatchRequest<'_>) -> Result<Vec<Result<Trajectory>>> {
    req.validate()?;
    let run = || match req.precision {
        Precision::F32 => req.run_with(&req.grid.contact_field::<f32>()),
        Precision::F64 => req.run_with(&req.grid.contact_field::<f64>()),
    };
    match req.workers {
        None => Ok(run()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
            Ok(pool.install(run))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub horizons: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub repetitions: usize,
    pub dt: f64,
    pub grid_size: usize,
    pub resolution: f64,
    pub precision: Precision,
    pub workers: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            horizons: vec![2.5, 5.0],
            batch_sizes: vec![512],
            repetitions: 3,
            dt: 0.01,
            grid_size: 128,
            resolution: 0.1,
            precision: Precision::F32,
            workers: None,
            seed: 0,
        }
    }
}

/// Allowed range of the runtime ratio when the horizon doubles.
pub const SCALING_BAND: [f64; 2] = [1.6, 2.6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub horizon_s: f64,
    pub batch: usize,
    pub precision: Precision,
    pub workers: usize,
    pub median_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub rollouts_per_s: f64,
    pub failed: usize,
}

/// Runtime ratio between two horizons at one batch size, normalised to a
/// doubling (`ratio^(1/log2(h1/h0))`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingCheck {
    pub batch: usize,
    pub from_horizon_s: f64,
    pub to_horizon_s: f64,
    pub ratio: f64,
    pub per_doubling: f64,
    pub linear: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub points: usize,
    pub records: Vec<BenchRecord>,
    pub scaling: Vec<ScalingCheck>,
}

impl BenchReport {
    pub fn scaling_ok(&self) -> bool {
        self.scaling.iter().all(|s| s.linear)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "horizon_s,batch,precision,workers,median_s,min_s,max_s,rollouts_per_s,failed\n",
        );
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6},{:.1},{}\n",
                r.horizon_s, r.batch, r.precision, r.workers, r.median_s, r.min_s, r.max_s, r.rollouts_per_s, r.failed
            ));
        }
        out
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// The benchmark world: a seeded bump field.
pub fn bench_world(cfg: &BenchConfig) -> Result<TerrainGrid> {
    generate_world(&WorldSpec {
        size: cfg.grid_size,
        resolution: cfg.resolution,
        seed: cfg.seed,
        shape: Shape::BumpField {
            count: 40,
            max_height: 0.15,
            radius: [0.3, 0.8],
        },
        material: Default::default(),
    })
}

/// Seeded start states near the grid centre and constant track commands.
pub fn bench_inputs(
    grid: &TerrainGrid,
    robot: &RobotModel,
    batch: usize,
    horizon: f64,
    seed: u64,
) -> Result<(Vec<RigidState<f64>>, Vec<ControlSchedule>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(batch);
    let mut schedules = Vec::with_capacity(batch);
    for _ in 0..batch {
        let mut s = RigidState::at_rest(
            [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0],
            rng.random_range(-3.1..3.1),
        );
        s.pos.z = touchdown_height(&s, grid, robot, &Default::default())?;
        states.push(s);
        let cmd = ControlStep::tracks(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        schedules.push(ControlSchedule::constant(cmd, horizon));
    }
    Ok((states, schedules))
}

pub fn benchmark(cfg: &BenchConfig, robot: &RobotModel) -> Result<BenchReport> {
    if cfg.horizons.is_empty() || cfg.batch_sizes.is_empty() || cfg.repetitions == 0 {
        return Err(Error::Config("benchmark sweeps and repetitions must be non-empty".into()));
    }
    if let Some(h) = cfg.horizons.iter().find(|&&h| !(h > 0.0)) {
        return Err(Error::Config(format!("horizon must be positive, got {h}")));
    }
    if cfg.batch_sizes.contains(&0) {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let grid = bench_world(cfg)?;
    let workers = cfg.workers.unwrap_or_else(rayon::current_num_threads);
    let mut records = Vec::new();
    for &batch in &cfg.batch_sizes {
        for &horizon in &cfg.horizons {
            let engine = EngineConfig {
                dt: cfg.dt,
                horizon,
                ..EngineConfig::default()
            };
            let (states, schedules) = bench_inputs(&grid, robot, batch, horizon, cfg.seed)?;
            let req = BatchRequest {
                grid: &grid,
                robot,
                states,
                schedules,
                cfg: engine,
                precision: cfg.precision,
                workers: Some(workers),
            };
            let mut times = Vec::with_capacity(cfg.repetitions);
            let mut failed = 0;
            for _ in 0..cfg.repetitions {
                let t = Instant::now();
                let out = rollout_batch(&req)?;
                times.push(t.elapsed().as_secs_f64());
                failed = out.iter().filter(|r| r.is_err()).count();
            }
            let med = median(&mut times);
            records.push(BenchRecord {
                horizon_s: horizon,
                batch,
                precision: cfg.precision,
                workers,
                median_s: med,
                min_s: times[0],
                max_s: times[times.len() - 1],
                rollouts_per_s: batch as f64 / med,
                failed,
            });
        }
    }
    let mut scaling = Vec::new();
    for &batch in &cfg.batch_sizes {
        let mut rows: Vec<&BenchRecord> = records.iter().filter(|r| r.batch == batch).collect();
        rows.sort_by(|a, b| a.horizon_s.total_cmp(&b.horizon_s));
        for w in rows.windows(2) {
            let ratio = w[1].median_s / w[0].median_s;
            let doublings = (w[1].horizon_s / w[0].horizon_s).log2();
            if doublings <= 0.0 {
                continue;
            }
            let per_doubling = ratio.powf(1.0 / doublings);
            scaling.push(ScalingCheck {
                batch,
                from_horizon_s: w[0].horizon_s,
                to_horizon_s: w[1].horizon_s,
                ratio,
                per_doubling,
                linear: (SCALING_BAND[0]..=SCALING_BAND[1]).contains(&per_doubling),
            });
        }
    }
    Ok(BenchReport {
        config: cfg.clone(),
        points: robot.len(),
        records,
        scaling,
    })
}
