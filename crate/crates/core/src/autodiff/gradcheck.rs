//! Central finite-difference verification of tape gradients.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::record::{loss_gradient, GradientBundle, GradientOptions, LeafSet, RolloutArgs, StateLoss};
use crate::dynamics::ControlSchedule;
use crate::error::{Error, Result};
use crate::geom::{Mat3, Vec3};
use crate::robot::RobotModel;
use crate::terrain::{Layer, TerrainGrid};
use crate::trajectory::RigidState;

pub const MIN_EPS: f64 = 1e-8;
pub const MAX_EPS: f64 = 1e-3;

/// One scalar input of a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "group", rename_all = "snake_case")]
pub enum Coord {
    Height { cell: usize },
    Friction { cell: usize },
    Stiffness { cell: usize },
    Damping { cell: usize },
    /// `side` 0 is the left track, 1 the right.
    Control { command: usize, side: usize },
    /// Index into `[x, v, rotation tangent, ω]`.
    State0 { index: usize },
    Mass,
    /// Index into `[Jxx, Jyy, Jzz, Jxy, Jxz, Jyz]`.
    Inertia { index: usize },
}

impl Coord {
    pub fn leaf_group(&self) -> LeafSet {
        let mut s = LeafSet::none();
        match self {
            Coord::Height { .. } => s.heights = true,
            Coord::Friction { .. } => s.friction = true,
            Coord::Stiffness { .. } => s.stiffness = true,
            Coord::Damping { .. } => s.damping = true,
            Coord::Control { .. } => s.controls = true,
            Coord::State0 { .. } => s.state0 = true,
            Coord::Mass => s.mass = true,
            Coord::Inertia { .. } => s.inertia = true,
        }
        s
    }

    pub fn read(&self, g: &GradientBundle) -> Option<f64> {
        match *self {
            Coord::Height { cell } => g.heights.as_ref()?.get(cell).copied(),
            Coord::Friction { cell } => g.friction.as_ref()?.get(cell).copied(),
            Coord::Stiffness { cell } => g.stiffness.as_ref()?.get(cell).copied(),
            Coord::Damping { cell } => g.damping.as_ref()?.get(cell).copied(),
            Coord::Control { command, side } => g.controls.as_ref()?.get(command).map(|c| c[side]),
            Coord::State0 { index } => g.state0.map(|s| s[index]),
            Coord::Mass => g.mass,
            Coord::Inertia { index } => g.inertia.map(|s| s[index]),
        }
    }
}

fn union(a: LeafSet, b: LeafSet) -> LeafSet {
    LeafSet {
        heights: a.heights || b.heights,
        friction: a.friction || b.friction,
        stiffness: a.stiffness || b.stiffness,
        damping: a.damping || b.damping,
        controls: a.controls || b.controls,
        state0: a.state0 || b.state0,
        mass: a.mass || b.mass,
        inertia: a.inertia || b.inertia,
    }
}

/// Owned copies of the inputs, perturbed in one coordinate.
struct Perturbed {
    state0: RigidState<f64>,
    schedule: ControlSchedule,
    grid: TerrainGrid,
    robot: RobotModel,
}

fn perturb(args: &RolloutArgs<'_>, c: Coord, h: f64) -> Result<Perturbed> {
    let mut p = Perturbed {
        state0: args.state0,
        schedule: args.schedule.clone(),
        grid: args.grid.clone(),
        robot: args.robot.clone(),
    };
    let mut bump_layer = |layer: Layer, cell: usize| -> Result<()> {
        let mut v = p.grid.layer(layer).to_vec();
        let x = v
            .get_mut(cell)
            .ok_or_else(|| Error::Shape(format!("cell {cell} is outside the grid")))?;
        *x += h;
        p.grid.set_layer(layer, v)
    };
    match c {
        Coord::Height { cell } => bump_layer(Layer::Support, cell)?,
        Coord::Friction { cell } => bump_layer(Layer::Friction, cell)?,
        Coord::Stiffness { cell } => bump_layer(Layer::Stiffness, cell)?,
        Coord::Damping { cell } => bump_layer(Layer::Damping, cell)?,
        Coord::Control { command, side } => {
            let cmd = p
                .schedule
                .commands
                .get_mut(command)
                .ok_or_else(|| Error::Shape(format!("command {command} is outside the schedule")))?;
            if side == 0 {
                cmd.u_left += h;
            } else {
                cmd.u_right += h;
            }
        }
        Coord::State0 { index } => {
            let s = &mut p.state0;
            match index {
                0..=2 => s.pos = bump(s.pos, index, h),
                3..=5 => s.vel = bump(s.vel, index - 3, h),
                6..=8 => {
                    let mut w = [0.0; 3];
                    w[index - 6] = h;
                    s.rot = s.rot.mul_mat(&Mat3::exp_map(w));
                }
                9..=11 => s.omega = bump(s.omega, index - 9, h),
                _ => return Err(Error::Shape(format!("state index {index} out of range"))),
            }
        }
        Coord::Mass => {
            let m = p.robot.mass();
            let j = *p.robot.inertia();
            let scaled = p.robot.scaled_masses((m + h) / m)?;
            // Keep the inertia consistent with the leaf definition: J scales exactly.
            let f = (m + h) / m;
            p.robot = scaled.with_inertia(Mat3 {
                m: j.m.map(|row| row.map(|x| x * f)),
            })?;
        }
        Coord::Inertia { index } => {
            const SLOTS: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];
            let (r, col) = *SLOTS
                .get(index)
                .ok_or_else(|| Error::Shape(format!("inertia index {index} out of range")))?;
            let mut j = *p.robot.inertia();
            j.m[r][col] += h;
            if r != col {
                j.m[col][r] += h;
            }
            p.robot = p.robot.with_inertia(j)?;
        }
    }
    Ok(p)
}

fn bump(v: Vec3<f64>, k: usize, h: f64) -> Vec3<f64> {
    let mut a = v.to_array();
    a[k] += h;
    Vec3::from_f64(a)
}

fn eval_at<L: StateLoss>(args: &RolloutArgs<'_>, loss: &L, c: Coord, h: f64) -> Result<f64> {
    let p = perturb(args, c, h)?;
    let tr = crate::dynamics::rollout(&p.state0, &p.schedule, &p.grid, &p.robot, args.cfg)?;
    Ok(loss.eval(&tr.states))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub coord: Coord,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic − numeric| / max(1, |analytic|)`.
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub eps: f64,
    pub loss: f64,
    pub entries: Vec<GradcheckEntry>,
    pub max_rel_error: f64,
    pub warnings: Vec<String>,
}

/// Warnings for step sizes outside the useful range.
pub fn eps_warnings(eps: f64) -> Vec<String> {
    let mut w = Vec::new();
    if eps < MIN_EPS {
        w.push(format!("eps {eps:e} below roundoff floor {MIN_EPS:e}"));
    }
    if eps > MAX_EPS {
        w.push(format!("eps {eps:e} above truncation ceiling {MAX_EPS:e}"));
    }
    w
}

/// Compares tape gradients with central differences `(L(θ+ε) − L(θ−ε)) / 2ε`
/// at each coordinate.
pub fn finite_difference_check<L: StateLoss>(
    args: &RolloutArgs<'_>,
    loss: &L,
    coords: &[Coord],
    eps: f64,
    opts: &GradientOptions,
) -> Result<GradcheckReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let set = coords.iter().fold(LeafSet::none(), |s, c| union(s, c.leaf_group()));
    let lg = loss_gradient(args, set, loss, opts)?;
    let mut entries = Vec::with_capacity(coords.len());
    for &c in coords {
        let analytic = c
            .read(&lg.gradient)
            .ok_or_else(|| Error::Shape(format!("coordinate {c:?} does not exist")))?;
        let numeric = (eval_at(args, loss, c, eps)? - eval_at(args, loss, c, -eps)?) / (2.0 * eps);
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(1.0);
        entries.push(GradcheckEntry {
            coord: c,
            analytic,
            numeric,
            rel_error,
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        eps,
        loss: lg.loss,
        entries,
        max_rel_error,
        warnings: eps_warnings(eps),
    })
}

/// How many coordinates of each group [`sample_coords`] draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoordSampling {
    pub heights: usize,
    pub friction: usize,
    pub controls: usize,
    pub state0: usize,
    pub mass: bool,
    pub inertia: usize,
}

impl Default for CoordSampling {
    fn default() -> Self {
        CoordSampling {
            heights: 12,
            friction: 10,
            controls: 10,
            state0: 8,
            mass: false,
            inertia: 0,
        }
    }
}

impl CoordSampling {
    pub fn total(&self) -> usize {
        self.heights + self.friction + self.controls + self.state0 + self.mass as usize + self.inertia
    }
}

/// Draws coordinates. Grid cells come from the footprint of the nominal
/// trajectory (cells within `radius` of a state), since cells the robot
/// never reaches have zero gradient on both sides.
pub fn sample_coords<G: Rng>(
    args: &RolloutArgs<'_>,
    sampling: &CoordSampling,
    radius: f64,
    rng: &mut G,
) -> Result<Vec<Coord>> {
    let tr = args.rollout()?;
    let spec = args.grid.spec();
    let mut footprint = Vec::new();
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            let [x, y] = spec.cell_center(r, c);
            if tr.positions().any(|p| (p[0] - x).hypot(p[1] - y) <= radius) {
                footprint.push(spec.index(r, c));
            }
        }
    }
    if footprint.is_empty() && sampling.heights + sampling.friction > 0 {
        return Err(Error::Config("trajectory footprint covers no grid cells".into()));
    }
    let mut out = Vec::with_capacity(sampling.total());
    for _ in 0..sampling.heights {
        out.push(Coord::Height {
            cell: *footprint.choose(rng).unwrap(),
        });
    }
    for _ in 0..sampling.friction {
        out.push(Coord::Friction {
            cell: *footprint.choose(rng).unwrap(),
        });
    }
    let steps = tr.len() - 1;
    let spc = args.schedule.steps_per_command(args.cfg.dt)?;
    let used = steps.div_ceil(spc).min(args.schedule.commands.len());
    for _ in 0..sampling.controls {
        out.push(Coord::Control {
            command: rng.random_range(0..used),
            side: rng.random_range(0..2),
        });
    }
    let mut idx: Vec<usize> = (0..12).collect();
    for k in 0..sampling.state0 {
        if k % 12 == 0 {
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), rng);
        }
        out.push(Coord::State0 { index: idx[k % 12] });
    }
    if sampling.mass {
        out.push(Coord::Mass);
    }
    for k in 0..sampling.inertia {
        out.push(Coord::Inertia { index: k % 6 });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::record::TrajectoryLoss;
    use super::super::tape::Tape;
    use super::*;
    use crate::dynamics::{ControlStep, EngineConfig};
    use crate::losses::LossConfig;
    use crate::real::Real;
    use crate::robot::{build_tracked_robot, TrackedRobotConfig};
    use crate::terrain::GridSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_through_tape_is_exact() {
        let tape = Tape::new();
        let x = [tape.var(0.3), tape.var(-1.2), tape.var(2.0)];
        let f = |v: [f64; 3]| 3.0 * v[0] * v[0] + v[0] * v[1] - 0.5 * v[2] * v[2] + v[1];
        let y = x[0] * x[0] * Real::from_f64(3.0) + x[0] * x[1] - (x[2] * x[2]).scale(0.5) + x[1];
        let g = tape.backward(y).unwrap();
        let p = x.map(|v| v.value());
        for k in 0..3 {
            let h = 1e-4;
            let mut a = p;
            let mut b = p;
            a[k] += h;
            b[k] -= h;
            let num = (f(a) - f(b)) / (2.0 * h);
            let ana = g.wrt(x[k]);
            assert!((ana - num).abs() / ana.abs().max(1.0) <= 1e-10, "{k}: {ana} {num}");
        }
    }

    #[test]
    fn eps_range_warnings() {
        assert!(eps_warnings(1e-5).is_empty());
        assert!(eps_warnings(1e-12)[0].contains("below roundoff floor"));
        assert!(eps_warnings(0.1)[0].contains("above truncation ceiling"));
    }

    fn slope_args_fixture() -> (TerrainGrid, RobotModel, ControlSchedule, EngineConfig) {
        let spec = GridSpec::centered(40, 0.1).unwrap();
        let mut h = vec![0.0; spec.len()];
        for r in 0..spec.rows {
            for c in 0..spec.cols {
                let [x, y] = spec.cell_center(r, c);
                h[spec.index(r, c)] = 0.1 * x + 0.05 * (3.0 * y).sin();
            }
        }
        let grid = TerrainGrid::from_support_heights(spec, h)
            .unwrap()
            .with_uniform(Layer::Friction, 0.7)
            .unwrap();
        let robot = build_tracked_robot(&TrackedRobotConfig::default()).unwrap();
        let cfg = EngineConfig {
            horizon: 0.6,
            ..Default::default()
        };
        let schedule = ControlSchedule {
            period: 0.2,
            commands: vec![ControlStep::tracks(0.5, 0.3), ControlStep::tracks(0.2, 0.6), ControlStep::tracks(0.7, 0.7)],
        };
        (grid, robot, schedule, cfg)
    }

    #[test]
    fn matches_central_differences_on_slope() {
        let (grid, robot, schedule, cfg) = slope_args_fixture();
        let low = robot.points().iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
        let mut state0 = RigidState::at_rest([-0.3, 0.1, 0.02 - low - 0.03], 0.2);
        state0.vel = Vec3::new(0.2, 0.0, 0.0);
        let args = RolloutArgs {
            state0,
            schedule: &schedule,
            grid: &grid,
            robot: &robot,
            cfg: &cfg,
        };
        let mut moved = state0;
        moved.pos.y += 0.05;
        moved.vel.x += 0.1;
        let reference = crate::dynamics::rollout(&moved, &schedule, &grid, &robot, &cfg).unwrap();
        let loss = TrajectoryLoss::new(&reference.times, &reference, LossConfig { orientation_weight: 0.3 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sampling = CoordSampling {
            mass: true,
            inertia: 3,
            ..Default::default()
        };
        let coords = sample_coords(&args, &sampling, 0.6, &mut rng).unwrap();
        assert_eq!(coords.len(), sampling.total());
        let report = finite_difference_check(&args, &loss, &coords, 1e-5, &GradientOptions::default()).unwrap();
        assert!(report.warnings.is_empty());
        let worst = report
            .entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
            .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{worst:?}");
        assert!(report.entries.iter().any(|e| e.analytic.abs() > 1e-6));
    }
}
