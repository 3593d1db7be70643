//! Recording rollouts on the tape and turning adjoints into gradients with
//! respect to terrain, controls, initial state and mass parameters.

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use crate::dynamics::{integrate, run_trajectory, Body, ControlSchedule, Dynamics, EngineConfig, Plan};
use crate::error::{Error, Result};
use crate::geom::{Mat3, Vec3};
use crate::losses::{match_reference, sequence_loss, LossConfig, Matched};
use crate::real::Real;
use crate::robot::RobotModel;
use crate::terrain::{ContactField, Layer, TerrainGrid};
use crate::trajectory::{RigidState, Trajectory};

/// Default number of steps between checkpoints.
pub const DEFAULT_CHECKPOINT: usize = 50;

/// The non-differentiable description of one rollout.
#[derive(Debug, Clone, Copy)]
pub struct RolloutArgs<'a> {
    pub state0: RigidState<f64>,
    pub schedule: &'a ControlSchedule,
    pub grid: &'a TerrainGrid,
    pub robot: &'a RobotModel,
    pub cfg: &'a EngineConfig,
}

impl RolloutArgs<'_> {
    pub fn rollout(&self) -> Result<Trajectory> {
        crate::dynamics::rollout(&self.state0, self.schedule, self.grid, self.robot, self.cfg)
    }
}

/// Which inputs are registered as differentiable leaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LeafSet {
    /// Supporting heights.
    pub heights: bool,
    pub friction: bool,
    pub stiffness: bool,
    pub damping: bool,
    pub controls: bool,
    pub state0: bool,
    /// Total mass; point masses and inertia scale with it.
    pub mass: bool,
    /// The six independent entries of the inertia matrix.
    pub inertia: bool,
}

impl LeafSet {
    pub const NAMES: [&'static str; 8] = [
        "heights", "friction", "stiffness", "damping", "controls", "state0", "mass", "inertia",
    ];

    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        LeafSet {
            heights: true,
            friction: true,
            stiffness: true,
            damping: true,
            controls: true,
            state0: true,
            mass: true,
            inertia: true,
        }
    }

    pub fn parse<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut set = LeafSet::none();
        for n in names {
            let flag = match n.as_ref() {
                "heights" => &mut set.heights,
                "friction" => &mut set.friction,
                "stiffness" => &mut set.stiffness,
                "damping" => &mut set.damping,
                "controls" => &mut set.controls,
                "state0" => &mut set.state0,
                "mass" => &mut set.mass,
                "inertia" => &mut set.inertia,
                other => {
                    return Err(Error::Config(format!(
                        "unknown leaf {other:?}; valid leaves: {}",
                        Self::NAMES.join(", ")
                    )))
                }
            };
            *flag = true;
        }
        Ok(set)
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::none()
    }
}

/// Gradients of a scalar loss, one field per leaf group. Groups that were
/// not registered are `None`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GradientBundle {
    pub heights: Option<Vec<f64>>,
    pub friction: Option<Vec<f64>>,
    pub stiffness: Option<Vec<f64>>,
    pub damping: Option<Vec<f64>>,
    /// Per schedule command, `[left, right]`.
    pub controls: Option<Vec<[f64; 2]>>,
    /// `[x(3), v(3), rotation tangent(3), ω(3)]`. The rotation tangent `δ`
    /// perturbs the initial rotation as `R0 (I + [δ]×)`.
    pub state0: Option<[f64; 12]>,
    pub mass: Option<f64>,
    /// `[Jxx, Jyy, Jzz, Jxy, Jxz, Jyz]`; off-diagonal entries perturb both
    /// symmetric slots.
    pub inertia: Option<[f64; 6]>,
}

impl GradientBundle {
    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    /// All entries in group order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        let grid = [&self.heights, &self.friction, &self.stiffness, &self.damping];
        grid.into_iter()
            .flat_map(|g| g.iter().flatten().copied())
            .chain(self.controls.iter().flatten().flatten().copied())
            .chain(self.state0.iter().flatten().copied())
            .chain(self.mass)
            .chain(self.inertia.iter().flatten().copied())
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn accumulate(&mut self, o: &GradientBundle) {
        fn add(a: &mut Option<Vec<f64>>, b: &Option<Vec<f64>>) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            } else if a.is_none() {
                a.clone_from(b);
            }
        }
        add(&mut self.heights, &o.heights);
        add(&mut self.friction, &o.friction);
        add(&mut self.stiffness, &o.stiffness);
        add(&mut self.damping, &o.damping);
        match (self.controls.as_mut(), &o.controls) {
            (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| {
                x[0] += y[0];
                x[1] += y[1];
            }),
            (None, b) => self.controls.clone_from(b),
            _ => {}
        }
        match (self.state0.as_mut(), &o.state0) {
            (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
            (None, b) => self.state0 = *b,
            _ => {}
        }
        if let Some(b) = o.mass {
            *self.mass.get_or_insert(0.0) += b;
        }
        match (self.inertia.as_mut(), &o.inertia) {
            (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
            (None, b) => self.inertia = *b,
            _ => {}
        }
    }
}

const INERTIA_SLOTS: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];

/// Leaf variables for one recording, plus the differentiable inputs built
/// from them.
pub struct Leaves<'t> {
    set: LeafSet,
    field: ContactField<Var<'t>>,
    speeds: Vec<[Var<'t>; 2]>,
    state0: [Var<'t>; 12],
    mass: Var<'t>,
    inertia: [Var<'t>; 6],
}

impl<'t> Leaves<'t> {
    pub fn register(tape: &'t Tape, set: LeafSet, args: &RolloutArgs<'_>) -> Self {
        let make = |on: bool, v: f64| if on { tape.var(v) } else { Var::constant(v) };
        let layer = |on: bool, l: Layer| -> Vec<Var<'t>> {
            args.grid.layer(l).iter().map(|&v| make(on, v)).collect()
        };
        let field = ContactField {
            spec: *args.grid.spec(),
            policy: args.grid.policy(),
            support: layer(set.heights, Layer::Support),
            stiffness: layer(set.stiffness, Layer::Stiffness),
            damping: layer(set.damping, Layer::Damping),
            friction: layer(set.friction, Layer::Friction),
        };
        let speeds = args
            .schedule
            .commands
            .iter()
            .map(|c| [make(set.controls, c.u_left), make(set.controls, c.u_right)])
            .collect();
        let s = &args.state0;
        let flat = [
            s.pos.x, s.pos.y, s.pos.z, s.vel.x, s.vel.y, s.vel.z, 0.0, 0.0, 0.0, s.omega.x, s.omega.y, s.omega.z,
        ];
        let state0 = flat.map(|v| make(set.state0, v));
        let j = args.robot.inertia();
        Leaves {
            set,
            field,
            speeds,
            state0,
            mass: make(set.mass, args.robot.mass()),
            inertia: INERTIA_SLOTS.map(|(r, c)| make(set.inertia, j.m[r][c])),
        }
    }

    pub fn set(&self) -> LeafSet {
        self.set
    }

    pub fn field(&self) -> &ContactField<Var<'t>> {
        &self.field
    }

    pub fn initial_state(&self, s0: &RigidState<f64>) -> RigidState<Var<'t>> {
        let v = &self.state0;
        let r0 = Mat3::<Var<'t>>::from_f64(s0.rot.m);
        let rot = if self.set.state0 {
            let delta = Mat3::skew(&Vec3::new(v[6], v[7], v[8]));
            r0 + r0.mul_mat(&delta)
        } else {
            r0
        };
        RigidState {
            pos: Vec3::new(v[0], v[1], v[2]),
            vel: Vec3::new(v[3], v[4], v[5]),
            rot,
            omega: Vec3::new(v[9], v[10], v[11]),
        }
    }

    pub fn body(&self, robot: &RobotModel) -> Result<Body<Var<'t>>> {
        let mut j = Mat3::<Var<'t>>::zeros();
        for (&(r, c), &v) in INERTIA_SLOTS.iter().zip(&self.inertia) {
            j.m[r][c] = v;
            j.m[c][r] = v;
        }
        if !self.set.mass {
            let masses = robot.masses().iter().map(|&m| Var::constant(m)).collect();
            return Body::new(masses, self.mass, j);
        }
        // Exactly one in value, so the primal matches the plain rollout.
        let ratio = self.mass / Var::constant(robot.mass());
        let masses = robot.masses().iter().map(|&m| ratio.scale(m)).collect();
        let j = Mat3 {
            m: j.m.map(|row| row.map(|x| x * ratio)),
        };
        Body::new(masses, self.mass, j)
    }

    pub fn plan(&self, schedule: &ControlSchedule, cfg: &EngineConfig) -> Result<Plan<Var<'t>>> {
        let mut plan = Plan::<Var<'t>>::new(schedule, cfg)?;
        plan.speeds.clone_from(&self.speeds);
        Ok(plan)
    }

    pub fn gradients(&self, g: &Gradients) -> GradientBundle {
        let grid = |on: bool, vars: &[Var<'t>]| on.then(|| vars.iter().map(|&v| g.wrt(v)).collect());
        GradientBundle {
            heights: grid(self.set.heights, &self.field.support),
            friction: grid(self.set.friction, &self.field.friction),
            stiffness: grid(self.set.stiffness, &self.field.stiffness),
            damping: grid(self.set.damping, &self.field.damping),
            controls: self
                .set
                .controls
                .then(|| self.speeds.iter().map(|s| [g.wrt(s[0]), g.wrt(s[1])]).collect()),
            state0: self.set.state0.then(|| self.state0.map(|v| g.wrt(v))),
            mass: self.set.mass.then(|| g.wrt(self.mass)),
            inertia: self.set.inertia.then(|| self.inertia.map(|v| g.wrt(v))),
        }
    }
}

/// A scalar objective over the state sequence of a rollout.
pub trait StateLoss {
    fn eval<R: Real>(&self, states: &[RigidState<R>]) -> R;
}

/// Position (and optionally orientation) tracking loss against a
/// reference trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryLoss {
    matched: Vec<Matched>,
    cfg: LossConfig,
}

impl TrajectoryLoss {
    pub fn new(times: &[f64], reference: &Trajectory, cfg: LossConfig) -> Result<Self> {
        Ok(TrajectoryLoss {
            matched: match_reference(times, reference)?,
            cfg,
        })
    }
}

impl StateLoss for TrajectoryLoss {
    fn eval<R: Real>(&self, states: &[RigidState<R>]) -> R {
        let pos: Vec<Vec3<R>> = states.iter().map(|s| s.pos).collect();
        let rot: Vec<Mat3<R>> = if self.cfg.orientation_weight != 0.0 {
            states.iter().map(|s| s.rot).collect()
        } else {
            Vec::new()
        };
        let rots = (self.cfg.orientation_weight != 0.0).then_some(rot.as_slice());
        sequence_loss(&pos, rots, &self.matched, &self.cfg)
    }
}

/// A rollout recorded on a tape.
pub struct Recording<'t> {
    /// States as tape variables, `steps + 1` of them.
    pub states: Vec<RigidState<Var<'t>>>,
    /// Primal trajectory, identical to the plain rollout.
    pub trajectory: Trajectory,
    pub leaves: Leaves<'t>,
}

impl<'t> Recording<'t> {
    pub fn backward(&self, tape: &'t Tape, loss: Var<'t>) -> Result<GradientBundle> {
        check_budget(tape)?;
        let g = tape.backward(loss)?;
        Ok(self.leaves.gradients(&g))
    }
}

fn check_budget(tape: &Tape) -> Result<()> {
    if tape.overflowed() {
        return Err(Error::TapeOverflow {
            budget_bytes: tape.budget_bytes(),
        });
    }
    Ok(())
}

/// Records a full rollout, retaining the whole graph.
pub fn record_rollout<'t>(tape: &'t Tape, set: LeafSet, args: &RolloutArgs<'_>) -> Result<Recording<'t>> {
    args.state0.validate()?;
    args.cfg.validate()?;
    let leaves = Leaves::register(tape, set, args);
    let plan = leaves.plan(args.schedule, args.cfg)?;
    let dynamics = Dynamics::new(&leaves.field, args.robot, leaves.body(args.robot)?, args.cfg);
    let mut states = Vec::with_capacity(plan.steps + 1);
    let trajectory = run_trajectory(&dynamics, &plan, leaves.initial_state(&args.state0), |s| states.push(*s))?;
    check_budget(tape)?;
    drop(dynamics);
    Ok(Recording {
        states,
        trajectory,
        leaves,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientOptions {
    /// Steps per re-recorded segment; `None` retains the whole graph.
    pub checkpoint: Option<usize>,
    pub tape_budget: usize,
}

impl Default for GradientOptions {
    fn default() -> Self {
        GradientOptions {
            checkpoint: Some(DEFAULT_CHECKPOINT),
            tape_budget: super::DEFAULT_TAPE_BUDGET,
        }
    }
}

/// Loss value, gradient and primal trajectory of one rollout.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub loss: f64,
    pub gradient: GradientBundle,
    pub trajectory: Trajectory,
}

/// Gradient of `loss` with respect to the leaves in `set`.
pub fn loss_gradient<L: StateLoss>(
    args: &RolloutArgs<'_>,
    set: LeafSet,
    loss: &L,
    opts: &GradientOptions,
) -> Result<LossGradient> {
    match opts.checkpoint {
        None => {
            let tape = Tape::with_budget(opts.tape_budget);
            let rec = record_rollout(&tape, set, args)?;
            let l = loss.eval(&rec.states);
            let gradient = rec.backward(&tape, l)?;
            Ok(LossGradient {
                loss: l.value(),
                gradient,
                trajectory: rec.trajectory,
            })
        }
        Some(seg) => checkpointed(args, set, loss, seg.max(1), opts.tape_budget),
    }
}

fn state_leaves<'t>(tape: &'t Tape, s: &RigidState<f64>) -> RigidState<Var<'t>> {
    let v = |x: Vec3<f64>| Vec3::new(tape.var(x.x), tape.var(x.y), tape.var(x.z));
    RigidState {
        pos: v(s.pos),
        vel: v(s.vel),
        rot: Mat3 {
            m: s.rot.m.map(|row| row.map(|x| tape.var(x))),
        },
        omega: v(s.omega),
    }
}

fn components<'t>(s: &RigidState<Var<'t>>) -> [Var<'t>; 18] {
    let mut out = [Var::constant(0.0); 18];
    out[0..3].copy_from_slice(&[s.pos.x, s.pos.y, s.pos.z]);
    out[3..6].copy_from_slice(&[s.vel.x, s.vel.y, s.vel.z]);
    for i in 0..3 {
        out[6 + 3 * i..9 + 3 * i].copy_from_slice(&s.rot.m[i]);
    }
    out[15..18].copy_from_slice(&[s.omega.x, s.omega.y, s.omega.z]);
    out
}

/// Re-records the rollout segment by segment from stored states, carrying
/// the state adjoint backwards, so only one segment's graph is alive.
fn checkpointed<L: StateLoss>(
    args: &RolloutArgs<'_>,
    set: LeafSet,
    loss: &L,
    seg: usize,
    budget: usize,
) -> Result<LossGradient> {
    let trajectory = args.rollout()?;
    let steps = trajectory.len() - 1;

    // Adjoint of the loss with respect to every stored state.
    let (value, state_adj) = {
        let tape = Tape::with_budget(budget);
        let vars: Vec<RigidState<Var<'_>>> = trajectory.states.iter().map(|s| state_leaves(&tape, s)).collect();
        let l = loss.eval(&vars);
        check_budget(&tape)?;
        let g = tape.backward(l)?;
        let adj: Vec<[f64; 18]> = vars.iter().map(|s| components(s).map(|v| g.wrt(v))).collect();
        (l.value(), adj)
    };

    let mut gradient = GradientBundle::default();
    let mut carry = [0.0f64; 18];
    let mut end = steps;
    // One tape for all segments keeps its buffers allocated between them.
    let mut scratch = Tape::with_budget(budget);
    while end > 0 {
        let start = end.saturating_sub(seg);
        scratch.reset();
        let tape = &scratch;
        let leaves = Leaves::register(tape, set, args);
        let plan = leaves.plan(args.schedule, args.cfg)?;
        let dynamics = Dynamics::new(&leaves.field, args.robot, leaves.body(args.robot)?, args.cfg);
        let s_start = if start == 0 {
            leaves.initial_state(&args.state0)
        } else {
            state_leaves(tape, &trajectory.states[start])
        };
        let mut states = Vec::with_capacity(end - start + 1);
        let last = integrate(&dynamics, &plan, s_start, start, end - start, false, |_, s, _| states.push(*s))?;
        states.push(last);
        check_budget(tape)?;

        let mut seeds = Vec::with_capacity(18 * states.len());
        let first = if start == 0 { 0 } else { 1 };
        for (offset, s) in states.iter().enumerate().skip(first) {
            let k = start + offset;
            let mut a = state_adj[k];
            if k == end {
                a.iter_mut().zip(&carry).for_each(|(x, c)| *x += c);
            }
            seeds.extend(components(s).into_iter().zip(a).filter(|(_, w)| *w != 0.0));
        }
        let g = tape.backward_seeded(&seeds)?;
        gradient.accumulate(&leaves.gradients(&g));
        if start > 0 {
            carry = components(&s_start).map(|v| g.wrt(v));
        }
        end = start;
    }
    if steps == 0 {
        return Err(Error::Config("rollout has no steps".into()));
    }
    Ok(LossGradient {
        loss: value,
        gradient,
        trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ControlStep;
    use crate::robot::{build_tracked_robot, TrackedRobotConfig};
    use crate::terrain::GridSpec;

    struct FinalZ;
    impl StateLoss for FinalZ {
        fn eval<R: Real>(&self, states: &[RigidState<R>]) -> R {
            states.last().unwrap().pos.z
        }
    }

    fn bumpy_grid(n: usize) -> TerrainGrid {
        let spec = GridSpec::centered(n, 0.1).unwrap();
        let mut h = vec![0.0; spec.len()];
        for r in 0..spec.rows {
            for c in 0..spec.cols {
                let [x, y] = spec.cell_center(r, c);
                h[spec.index(r, c)] = 0.08 * (2.1 * x).sin() * (1.7 * y + 0.3).cos();
            }
        }
        TerrainGrid::from_support_heights(spec, h).unwrap()
    }

    struct Fixture {
        grid: TerrainGrid,
        robot: RobotModel,
        schedule: ControlSchedule,
        cfg: EngineConfig,
        state0: RigidState<f64>,
    }

    impl Fixture {
        fn new(horizon: f64) -> Self {
            let robot = build_tracked_robot(&TrackedRobotConfig::default()).unwrap();
            let cfg = EngineConfig {
                horizon,
                ..Default::default()
            };
            let schedule = ControlSchedule {
                period: 0.1,
                commands: (0..(horizon / 0.1).round() as usize)
                    .map(|k| ControlStep::tracks(0.6 + 0.02 * k as f64, 0.4))
                    .collect(),
            };
            let low = robot.points().iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
            let mut state0 = RigidState::at_rest([0.1, -0.2, 0.1 - low], 0.3);
            state0.vel = Vec3::new(0.2, 0.05, -0.1);
            state0.omega = Vec3::new(0.01, -0.02, 0.1);
            Fixture {
                grid: bumpy_grid(48),
                robot,
                schedule,
                cfg,
                state0,
            }
        }

        fn args(&self) -> RolloutArgs<'_> {
            RolloutArgs {
                state0: self.state0,
                schedule: &self.schedule,
                grid: &self.grid,
                robot: &self.robot,
                cfg: &self.cfg,
            }
        }
    }

    #[test]
    fn recording_is_transparent() {
        let fx = Fixture::new(0.5);
        let plain = fx.args().rollout().unwrap();
        let tape = Tape::new();
        let rec = record_rollout(&tape, LeafSet::all(), &fx.args()).unwrap();
        assert_eq!(rec.trajectory, plain);
        for (v, s) in rec.states.iter().zip(&plain.states) {
            assert_eq!(v.value(), *s);
        }
    }

    #[test]
    fn no_leaves_no_tape() {
        let fx = Fixture::new(0.3);
        let tape = Tape::new();
        let rec = record_rollout(&tape, LeafSet::none(), &fx.args()).unwrap();
        assert_eq!(tape.len(), 0);
        assert_eq!(rec.trajectory, fx.args().rollout().unwrap());
    }

    #[test]
    fn free_fall_gradients() {
        let mut fx = Fixture::new(1.0);
        fx.state0 = RigidState::at_rest([0.0, 0.0, 20.0], 0.0);
        let set = LeafSet::parse(&["state0"]).unwrap();
        let g = loss_gradient(&fx.args(), set, &FinalZ, &GradientOptions::default()).unwrap();
        let s = g.gradient.state0.unwrap();
        assert!((s[2] - 1.0).abs() < 1e-12);
        assert!((s[5] - 1.0).abs() < 1e-12);
        assert!(s[0].abs() < 1e-12 && s[3].abs() < 1e-12);
    }

    #[test]
    fn self_reference_gives_zero_gradient() {
        let fx = Fixture::new(0.5);
        let tr = fx.args().rollout().unwrap();
        let loss = TrajectoryLoss::new(&tr.times, &tr, LossConfig::default()).unwrap();
        let g = loss_gradient(&fx.args(), LeafSet::all(), &loss, &GradientOptions::default()).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.gradient.values().all(|v| v == 0.0));
    }

    #[test]
    fn checkpointing_matches_full_graph() {
        let fx = Fixture::new(1.0);
        let reference = {
            let mut s = fx.state0;
            s.pos.x += 0.1;
            crate::dynamics::rollout(&s, &fx.schedule, &fx.grid, &fx.robot, &fx.cfg).unwrap()
        };
        let loss = TrajectoryLoss::new(&reference.times, &reference, LossConfig { orientation_weight: 0.5 }).unwrap();
        let full = loss_gradient(
            &fx.args(),
            LeafSet::all(),
            &loss,
            &GradientOptions {
                checkpoint: None,
                ..Default::default()
            },
        )
        .unwrap();
        for seg in [1, 7, 50, 1000] {
            let ck = loss_gradient(
                &fx.args(),
                LeafSet::all(),
                &loss,
                &GradientOptions {
                    checkpoint: Some(seg),
                    ..Default::default()
                },
            )
            .unwrap();
            assert_eq!(ck.loss, full.loss);
            let scale = full.gradient.norm();
            assert!(scale > 0.0);
            for (a, b) in ck.gradient.values().zip(full.gradient.values()) {
                assert!((a - b).abs() <= 1e-10 * scale.max(1.0), "seg {seg}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_is_deterministic_and_linear() {
        let fx = Fixture::new(0.4);
        let tape = Tape::new();
        let rec = record_rollout(&tape, LeafSet::all(), &fx.args()).unwrap();
        let last = rec.states.last().unwrap();
        let l1 = last.pos.x;
        let l2 = last.pos.z * last.vel.y;
        let g1 = rec.backward(&tape, l1).unwrap();
        let g1b = rec.backward(&tape, l1).unwrap();
        assert_eq!(g1, g1b);
        let g2 = rec.backward(&tape, l2).unwrap();
        let combo = l1.scale(2.0) - l2.scale(0.5);
        let gc = rec.backward(&tape, combo).unwrap();
        for ((c, a), b) in gc.values().zip(g1.values()).zip(g2.values()) {
            assert!((c - (2.0 * a - 0.5 * b)).abs() <= 1e-12 * (1.0 + c.abs()));
        }
    }

    #[test]
    fn untouched_cells_have_zero_gradient() {
        let fx = Fixture::new(0.5);
        let tape = Tape::new();
        let rec = record_rollout(&tape, LeafSet::parse(&["heights"]).unwrap(), &fx.args()).unwrap();
        let last = rec.states.last().unwrap();
        let g = rec.backward(&tape, last.pos.x + last.pos.z).unwrap();
        let gh = g.heights.unwrap();
        let spec = fx.grid.spec();
        // Cells well away from any point of the trajectory footprint.
        let far = |r: usize, c: usize| {
            let [x, y] = spec.cell_center(r, c);
            rec.trajectory.positions().all(|p| (p[0] - x).hypot(p[1] - y) > 1.5)
        };
        let mut checked = 0;
        for r in 0..spec.rows {
            for c in 0..spec.cols {
                if far(r, c) {
                    assert_eq!(gh[spec.index(r, c)], 0.0);
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
        assert!(gh.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn overflow_is_reported() {
        let fx = Fixture::new(0.5);
        let tape = Tape::with_budget(1 << 16);
        let err = record_rollout(&tape, LeafSet::all(), &fx.args()).err().unwrap();
        assert!(matches!(err, Error::TapeOverflow { budget_bytes } if budget_bytes == 1 << 16));
    }

    #[test]
    fn tape_size_is_linear_in_work() {
        // Regression guard on the recorded graph size per point-step.
        let fx = Fixture::new(0.5);
        let tape = Tape::new();
        record_rollout(&tape, LeafSet::all(), &fx.args()).unwrap();
        let point_steps = 50 * fx.robot.len();
        let per = tape.len() as f64 / point_steps as f64;
        assert!(per < 160.0, "{per} nodes per point-step");
    }

    #[test]
    fn unknown_leaf_lists_valid_names() {
        let err = LeafSet::parse(&["heights", "wheels"]).unwrap_err().to_string();
        assert!(err.contains("wheels") && err.contains("friction"));
    }
}
