//! Shared fixtures for the benchmarks.

use tracksim::batch::{bench_inputs, bench_world, BenchConfig};
use tracksim::dynamics::{ControlSchedule, EngineConfig};
use tracksim::robot::{build_tracked_robot, RobotModel, TrackedRobotConfig};
use tracksim::terrain::TerrainGrid;
use tracksim::RigidState;

pub struct Fixture {
    pub grid: TerrainGrid,
    pub robot: RobotModel,
    pub states: Vec<RigidState<f64>>,
    pub schedules: Vec<ControlSchedule>,
    pub cfg: EngineConfig,
}

/// The throughput world and robot with `batch` seeded starts.
pub fn fixture(grid_size: usize, batch: usize, horizon: f64) -> Fixture {
    let bc = BenchConfig {
        grid_size,
        ..BenchConfig::default()
    };
    let grid = bench_world(&bc).expect("bench world");
    let robot = build_tracked_robot(&TrackedRobotConfig::default()).expect("default robot");
    let (states, schedules) = bench_inputs(&grid, &robot, batch, horizon, bc.seed).expect("bench inputs");
    let cfg = EngineConfig {
        dt: bc.dt,
        horizon,
        ..EngineConfig::default()
    };
    Fixture {
        grid,
        robot,
        states,
        schedules,
        cfg,
    }
}
