//! Trajectory shooting: sample control candidates, roll them out in a batch,
//! score them by reaction-force dispersion and waypoint distance, and run a
//! receding-horizon waypoint-following loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::batch::{rollout_batch, BatchRequest, Precision};
use crate::dynamics::{rollout, ControlSchedule, ControlStep, EngineConfig};
use crate::error::{Error, Result};
use crate::robot::RobotModel;
use crate::terrain::TerrainGrid;
use crate::trajectory::{RigidState, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShootingConfig {
    pub candidates: usize,
    /// Standard deviation of the per-command track-speed noise [m/s].
    pub spread: f64,
    /// Planning horizon [s].
    pub horizon: f64,
    /// Hold time of each sampled command [s].
    pub command_period: f64,
    /// Time executed between re-plans [s].
    pub replan: f64,
    /// Weight of the reaction-force dispersion cost.
    pub alpha: f64,
    /// Weight of the waypoint distance cost.
    pub beta: f64,
    /// Horizontal distance at which a waypoint counts as reached [m].
    pub waypoint_radius: f64,
    /// Forward speed of the initial base command [m/s].
    pub base_speed: f64,
    pub seed: u64,
    /// Replace argmin selection by a softmin-weighted average of the
    /// candidates with this temperature.
    pub softmin_temperature: Option<f64>,
    /// Simulated time budget of a navigation run [s].
    pub time_budget: f64,
    /// Stuck when the body moves less than `stuck_distance` over
    /// `stuck_window` seconds.
    pub stuck_window: f64,
    pub stuck_distance: f64,
    pub precision: Precision,
    pub workers: Option<usize>,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        ShootingConfig {
            candidates: 64,
            spread: 0.3,
            horizon: 5.0,
            command_period: 0.5,
            replan: 0.5,
            alpha: 1.0,
            beta: 1.0,
            waypoint_radius: 0.5,
            base_speed: 0.8,
            seed: 0,
            softmin_temperature: None,
            time_budget: 60.0,
            stuck_window: 5.0,
            stuck_distance: 0.05,
            precision: Precision::F64,
            workers: None,
        }
    }
}

impl ShootingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates == 0 {
            return Err(Error::Config("need at least one candidate".into()));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(Error::Config("spread must be non-negative".into()));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        for (name, v) in [
            ("horizon", self.horizon),
            ("command_period", self.command_period),
            ("replan", self.replan),
            ("waypoint_radius", self.waypoint_radius),
            ("time_budget", self.time_budget),
            ("stuck_window", self.stuck_window),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.replan > self.horizon + 1e-9 {
            return Err(Error::Config("replan interval exceeds the planning horizon".into()));
        }
        if self.softmin_temperature.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::Config("softmin temperature must be positive".into()));
        }
        Ok(())
    }

    fn planning_engine(&self, engine: &EngineConfig) -> EngineConfig {
        EngineConfig {
            horizon: self.horizon,
            record_point_forces: false,
            ..engine.clone()
        }
    }
}

/// `k` schedules of `horizon / period` commands. Candidate 0 is `base`
/// unperturbed; the others add independent Gaussian noise of std `spread`
/// to each track speed of each command, clamped to `±max_speed`.
pub fn sample_controls(
    base: &ControlSchedule,
    k: usize,
    spread: f64,
    horizon: f64,
    max_speed: f64,
    seed: u64,
) -> Result<Vec<ControlSchedule>> {
    if k == 0 || !(spread >= 0.0) {
        return Err(Error::Config("need k ≥ 1 and spread ≥ 0".into()));
    }
    let n = (horizon / base.period).ceil().max(1.0) as usize;
    let mut base_cmds: Vec<ControlStep> = (0..n)
        .map(|i| base.commands[i.min(base.commands.len() - 1)])
        .collect();
    let clamp = |u: f64| u.clamp(-max_speed, max_speed);
    for c in &mut base_cmds {
        c.u_left = clamp(c.u_left);
        c.u_right = clamp(c.u_right);
    }
    let noise = Normal::new(0.0, spread).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(k);
    out.push(ControlSchedule {
        period: base.period,
        commands: base_cmds.clone(),
    });
    for _ in 1..k {
        let commands = base_cmds
            .iter()
            .map(|c| {
                let mut c = *c;
                if spread > 0.0 {
                    c.u_left = clamp(c.u_left + noise.sample(&mut rng));
                    c.u_right = clamp(c.u_right + noise.sample(&mut rng));
                }
                c
            })
            .collect();
        out.push(ControlSchedule {
            period: base.period,
            commands,
        });
    }
    Ok(out)
}

/// `base` re-expressed with commands every `period` seconds over `horizon`.
pub fn resample(base: &ControlSchedule, period: f64, horizon: f64) -> ControlSchedule {
    let n = (horizon / period - 1e-9).ceil().max(1.0) as usize;
    ControlSchedule {
        period,
        commands: (0..n).map(|i| *base.command_at((i as f64 + 0.5) * period)).collect(),
    }
}

/// Mean deviation of the per-step total normal force from its time mean.
pub fn trajectory_cost(normal_totals: &[[f64; 3]]) -> f64 {
    let n = normal_totals.len();
    if n == 0 {
        return 0.0;
    }
    // A component that never changes has its mean taken verbatim, so
    // constant forces cost exactly zero.
    let mean: [f64; 3] = std::array::from_fn(|k| {
        let first = normal_totals[0][k];
        if normal_totals.iter().all(|f| f[k] == first) {
            first
        } else {
            normal_totals.iter().map(|f| f[k]).sum::<f64>() / n as f64
        }
    });
    normal_totals
        .iter()
        .map(|f| ((f[0] - mean[0]).powi(2) + (f[1] - mean[1]).powi(2) + (f[2] - mean[2]).powi(2)).sqrt())
        .sum::<f64>()
        / n as f64
}

/// Closest approach of the trajectory's positions to `wp`.
pub fn waypoint_cost(traj: &Trajectory, wp: [f64; 3]) -> f64 {
    traj.positions()
        .map(|p| ((p[0] - wp[0]).powi(2) + (p[1] - wp[1]).powi(2) + (p[2] - wp[2]).powi(2)).sqrt())
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Costs {
    pub force: f64,
    pub waypoint: f64,
    /// `alpha·force + beta·waypoint`; infinite when the rollout failed.
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub schedules: Vec<ControlSchedule>,
    /// `None` where the rollout failed numerically.
    pub trajectories: Vec<Option<Trajectory>>,
    pub costs: Vec<Costs>,
}

impl CandidateSet {
    /// Candidate indices by increasing total cost, ties by index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.costs.len()).collect();
        idx.sort_by(|&a, &b| self.costs[a].total.total_cmp(&self.costs[b].total).then(a.cmp(&b)));
        idx
    }
}

#[derive(Debug, Clone)]
pub struct Selection {
    /// The chosen schedule (a softmin blend when enabled).
    pub schedule: ControlSchedule,
    /// Argmin candidate index.
    pub index: usize,
    pub candidates: CandidateSet,
}

/// Index of the smallest total cost; the lowest index wins ties.
pub fn argmin_cost(costs: &[Costs]) -> usize {
    let mut best = 0;
    for (i, c) in costs.iter().enumerate() {
        if c.total < costs[best].total {
            best = i;
        }
    }
    best
}

/// Scores pre-computed candidates.
pub fn score(trajectories: &[Option<Trajectory>], wp: [f64; 3], alpha: f64, beta: f64) -> Vec<Costs> {
    trajectories
        .iter()
        .map(|t| match t {
            Some(t) => {
                let force = trajectory_cost(&t.normal_totals);
                let waypoint = waypoint_cost(t, wp);
                Costs {
                    force,
                    waypoint,
                    total: alpha * force + beta * waypoint,
                }
            }
            None => Costs {
                force: f64::INFINITY,
                waypoint: f64::INFINITY,
                total: f64::INFINITY,
            },
        })
        .collect()
}

fn softmin_blend(set: &CandidateSet, temperature: f64) -> ControlSchedule {
    let best = set.costs[argmin_cost(&set.costs)].total;
    let w: Vec<f64> = set
        .costs
        .iter()
        .map(|c| if c.total.is_finite() { (-(c.total - best) / temperature).exp() } else { 0.0 })
        .collect();
    let sum: f64 = w.iter().sum();
    let mut out = set.schedules[0].clone();
    for (j, cmd) in out.commands.iter_mut().enumerate() {
        cmd.u_left = 0.0;
        cmd.u_right = 0.0;
        for (s, wk) in set.schedules.iter().zip(&w) {
            cmd.u_left += wk / sum * s.commands[j].u_left;
            cmd.u_right += wk / sum * s.commands[j].u_right;
        }
    }
    out
}

/// Samples candidates around `base`, rolls them out and picks the cheapest.
pub fn select_control(
    state: &RigidState<f64>,
    grid: &TerrainGrid,
    robot: &RobotModel,
    wp: [f64; 3],
    base: &ControlSchedule,
    engine: &EngineConfig,
    cfg: &ShootingConfig,
) -> Result<Selection> {
    cfg.validate()?;
    let plan_cfg = cfg.planning_engine(engine);
    let base = resample(base, cfg.command_period, cfg.horizon);
    let schedules = sample_controls(
        &base,
        cfg.candidates,
        cfg.spread,
        cfg.horizon,
        engine.max_track_speed,
        cfg.seed,
    )?;
    let req = BatchRequest {
        grid,
        robot,
        states: vec![*state],
        schedules,
        cfg: plan_cfg,
        precision: cfg.precision,
        workers: cfg.workers,
    };
    let trajectories: Vec<Option<Trajectory>> = rollout_batch(&req)?.into_iter().map(|r| r.ok()).collect();
    let costs = score(&trajectories, wp, cfg.alpha, cfg.beta);
    let candidates = CandidateSet {
        schedules: req.schedules,
        trajectories,
        costs,
    };
    let index = argmin_cost(&candidates.costs);
    if !candidates.costs[index].total.is_finite() {
        return Err(Error::NonFinite { step: 0 });
    }
    let schedule = match cfg.softmin_temperature {
        Some(t) => softmin_blend(&candidates, t),
        None => candidates.schedules[index].clone(),
    };
    Ok(Selection {
        schedule,
        index,
        candidates,
    })
}

/// One re-plan of a navigation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplanRecord {
    pub time_s: f64,
    pub position: [f64; 3],
    pub waypoint: usize,
    pub selected: usize,
    pub costs: Vec<Costs>,
    pub command: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StuckReport {
    pub time_s: f64,
    pub displacement_m: f64,
}

#[derive(Debug, Clone)]
pub struct NavigationLog {
    pub replans: Vec<ReplanRecord>,
    /// The executed path.
    pub trajectory: Trajectory,
    pub reached: usize,
    pub success: bool,
    pub stuck: Option<StuckReport>,
}

fn horizontal(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Receding-horizon waypoint following: plan, execute `replan` seconds of
/// the chosen schedule, shift it forward as the next base, repeat.
pub fn navigate(
    start: &RigidState<f64>,
    waypoints: &[[f64; 3]],
    grid: &TerrainGrid,
    robot: &RobotModel,
    engine: &EngineConfig,
    cfg: &ShootingConfig,
) -> Result<NavigationLog> {
    cfg.validate()?;
    engine.validate()?;
    if waypoints.is_empty() {
        return Err(Error::Config("navigation needs at least one waypoint".into()));
    }
    let exec_cfg = EngineConfig {
        horizon: cfg.replan,
        ..engine.clone()
    };
    exec_cfg.steps()?;
    let forward = ControlStep::tracks(cfg.base_speed, cfg.base_speed);
    let mut base = ControlSchedule {
        period: cfg.command_period,
        commands: vec![forward],
    };
    let mut traj = Trajectory::default();
    traj.times.push(0.0);
    traj.states.push(*start);
    let mut state = *start;
    let mut t = 0.0;
    let mut wp = 0;
    let mut replans = Vec::new();
    let mut stuck = None;
    let shift = (cfg.replan / cfg.command_period).round() as usize;

    let advance = |wp: &mut usize, p: [f64; 3]| {
        while *wp < waypoints.len() && horizontal(p, waypoints[*wp]) <= cfg.waypoint_radius {
            *wp += 1;
        }
    };
    advance(&mut wp, state.pos.to_array());

    while wp < waypoints.len() && t + 1e-9 < cfg.time_budget {
        let plan_cfg = ShootingConfig {
            seed: cfg.seed.wrapping_add(replans.len() as u64),
            ..cfg.clone()
        };
        let sel = select_control(&state, grid, robot, waypoints[wp], &base, engine, &plan_cfg)?;
        let first = sel.schedule.commands[0];
        replans.push(ReplanRecord {
            time_s: t,
            position: state.pos.to_array(),
            waypoint: wp,
            selected: sel.index,
            costs: sel.candidates.costs.clone(),
            command: [first.u_left, first.u_right],
        });
        let seg = rollout(&state, &sel.schedule, grid, robot, &exec_cfg)?;
        for (k, s) in seg.states.iter().enumerate().skip(1) {
            traj.times.push(t + seg.times[k]);
            traj.states.push(*s);
            traj.normal_totals.push(seg.normal_totals[k - 1]);
            advance(&mut wp, s.pos.to_array());
            if wp == waypoints.len() {
                break;
            }
        }
        traj.degenerate_tangents += seg.degenerate_tangents;
        t = *traj.times.last().unwrap_or(&t);
        if let Some(s) = traj.states.last() {
            state = *s;
        }
        // Warm start: drop the executed commands, hold the last one.
        let mut cmds: Vec<ControlStep> = sel.schedule.commands.iter().skip(shift).copied().collect();
        if cmds.is_empty() {
            cmds.push(*sel.schedule.commands.last().unwrap_or(&forward));
        }
        base.commands = cmds;

        if t >= cfg.stuck_window - 1e-9 {
            let back = traj.position_at(t - cfg.stuck_window).unwrap_or(start.pos.to_array());
            let d = horizontal(state.pos.to_array(), back);
            if d < cfg.stuck_distance {
                stuck = Some(StuckReport {
                    time_s: t,
                    displacement_m: d,
                });
                break;
            }
        }
    }
    Ok(NavigationLog {
        replans,
        success: wp == waypoints.len(),
        reached: wp,
        trajectory: traj,
        stuck,
    })
}
