//! Contact forces, the rigid-body state derivative and explicit Euler
//! integration. Everything numerical is generic over [`Real`] so the same
//! code drives the f64 reference path, the f32 batch path and the recording
//! tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Mat3, Vec3};
use crate::real::Real;
use crate::robot::{Drive, FlipperState, RobotModel};
use crate::terrain::{ContactField, SurfaceSample, TerrainGrid};
use crate::trajectory::{PointForces, RigidState, Trajectory};

pub const GRAVITY: f64 = 9.81;
pub const DEFAULT_STEEPNESS: f64 = 100.0;
pub const DEFAULT_DT: f64 = 0.01;
pub const DEFAULT_HORIZON: f64 = 5.0;
pub const DEFAULT_MAX_TRACK_SPEED: f64 = 2.0;

/// Below this length the projected forward axis is treated as degenerate.
const TANGENT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub dt: f64,
    pub horizon: f64,
    /// Steepness `k` of the contact gate [1/m].
    pub steepness: f64,
    pub gravity: f64,
    /// Adds `ω × Jω` to the angular equation.
    pub gyroscopic: bool,
    /// Adds a sideways friction term of the same form as the longitudinal one.
    pub lateral_friction: bool,
    pub max_track_speed: f64,
    /// Keep per-point forces in the trajectory (memory heavy).
    pub record_point_forces: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            dt: DEFAULT_DT,
            horizon: DEFAULT_HORIZON,
            steepness: DEFAULT_STEEPNESS,
            gravity: GRAVITY,
            gyroscopic: false,
            lateral_friction: false,
            max_track_speed: DEFAULT_MAX_TRACK_SPEED,
            record_point_forces: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.steepness > 0.0 && self.steepness.is_finite()) {
            return Err(Error::Config("steepness must be positive".into()));
        }
        if !self.gravity.is_finite() {
            return Err(Error::Config("gravity must be finite".into()));
        }
        if !(self.max_track_speed >= 0.0) {
            return Err(Error::Config("max_track_speed must be non-negative".into()));
        }
        self.steps().map(|_| ())
    }

    /// Number of integration steps covering the horizon.
    pub fn steps(&self) -> Result<usize> {
        whole_multiple(self.horizon, self.dt)
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                Error::Config(format!(
                    "horizon {} must be a positive multiple of dt {}",
                    self.horizon, self.dt
                ))
            })
    }
}

fn whole_multiple(span: f64, dt: f64) -> Option<usize> {
    if !(span.is_finite() && span >= 0.0) {
        return None;
    }
    let n = (span / dt).round();
    ((n * dt - span).abs() <= 1e-9 * span.max(1.0)).then_some(n as usize)
}

/// One held command: track surface speeds and flipper angles.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlStep {
    pub u_left: f64,
    pub u_right: f64,
    pub flippers: FlipperState,
}

impl ControlStep {
    pub fn tracks(u_left: f64, u_right: f64) -> Self {
        ControlStep {
            u_left,
            u_right,
            flippers: FlipperState::default(),
        }
    }
}

/// Piecewise-constant commands, each held for `period` seconds. A schedule
/// must cover the engine horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSchedule {
    pub period: f64,
    pub commands: Vec<ControlStep>,
}

impl ControlSchedule {
    pub fn constant(cmd: ControlStep, horizon: f64) -> Self {
        ControlSchedule {
            period: horizon,
            commands: vec![cmd],
        }
    }

    pub fn validate(&self, cfg: &EngineConfig) -> Result<()> {
        if self.commands.is_empty() {
            return Err(Error::Config("control schedule is empty".into()));
        }
        self.steps_per_command(cfg.dt)?;
        let covered = self.period * self.commands.len() as f64;
        if covered + 1e-9 * cfg.horizon.max(1.0) < cfg.horizon {
            return Err(Error::Config(format!(
                "schedule covers {covered} s, horizon is {} s",
                cfg.horizon
            )));
        }
        for (i, c) in self.commands.iter().enumerate() {
            if !(c.u_left.is_finite() && c.u_right.is_finite() && c.flippers.is_finite()) {
                return Err(Error::Config(format!("command {i} is not finite")));
            }
            if c.u_left.abs() > cfg.max_track_speed || c.u_right.abs() > cfg.max_track_speed {
                return Err(Error::Config(format!(
                    "command {i} exceeds the track speed limit {}",
                    cfg.max_track_speed
                )));
            }
        }
        Ok(())
    }

    pub fn steps_per_command(&self, dt: f64) -> Result<usize> {
        whole_multiple(self.period, dt).filter(|&n| n > 0).ok_or_else(|| {
            Error::Config(format!("command period {} must be a positive multiple of dt {dt}", self.period))
        })
    }

    pub fn command_at(&self, t: f64) -> &ControlStep {
        let k = (t / self.period).floor().max(0.0) as usize;
        &self.commands[k.min(self.commands.len() - 1)]
    }
}

/// Gated spring-damper reaction at one contact point. `pos` and `vel` are the
/// point's world position and velocity. The magnitude is clamped at zero so
/// damping never pulls the body into the ground.
#[inline(always)]
pub fn normal_force<R: Real>(pos: &Vec3<R>, vel: &Vec3<R>, s: &SurfaceSample<R>, steepness: f64) -> Vec3<R> {
    let n = s.normal;
    n * normal_magnitude(pos.z, vel, s, steepness)
}

#[inline(always)]
fn normal_magnitude<R: Real>(z: R, vel: &Vec3<R>, s: &SurfaceSample<R>, steepness: f64) -> R {
    let depth = s.height - z;
    let spring = s.stiffness * depth * s.normal.z;
    let mag = (spring - s.damping * vel.dot(&s.normal)).relu();
    if mag.value() == 0.0 {
        return mag;
    }
    mag * depth.scale(steepness).sigmoid()
}

/// Track friction along the forward axis projected onto the tangent plane.
/// Returns the force and whether the projection was degenerate (in which
/// case the force is zero).
#[inline(always)]
pub fn friction_force<R: Real>(
    vel: &Vec3<R>,
    normal_mag: R,
    track_speed: R,
    s: &SurfaceSample<R>,
    forward: &Vec3<R>,
    lateral: bool,
) -> (Vec3<R>, bool) {
    let n = s.normal;
    let t = *forward - n * forward.dot(&n);
    let len = t.norm();
    if len.value() < TANGENT_EPS {
        return (Vec3::zeros(), true);
    }
    let tau = t * (R::one() / len);
    let grip = s.friction * normal_mag;
    let slip = track_speed * forward.dot(&tau) - vel.dot(&tau);
    let mut f = tau * (grip * slip);
    if lateral {
        let side = n.cross(&tau);
        f -= side * (grip * vel.dot(&side));
    }
    (f, false)
}

/// Time derivative of a [`RigidState`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDerivative<R> {
    pub dpos: Vec3<R>,
    pub dvel: Vec3<R>,
    /// World-frame angular velocity `Rω`; `Ṙ = [ω_w]× R`.
    pub omega_world: Vec3<R>,
    pub domega: Vec3<R>,
}

/// Per-step force bookkeeping.
#[derive(Debug, Clone, Default)]
pub struct StepForces {
    pub normal_total: [f64; 3],
    pub degenerate_tangents: usize,
    pub points: Option<PointForces>,
}

impl StepForces {
    fn new(points: Option<usize>) -> Self {
        StepForces {
            normal_total: [0.0; 3],
            degenerate_tangents: 0,
            points: points.map(|n| PointForces {
                normal: Vec::with_capacity(n),
                friction: Vec::with_capacity(n),
                total: Vec::with_capacity(n),
                contact: Vec::with_capacity(n),
            }),
        }
    }
}

/// Mass parameters in the engine's scalar type.
#[derive(Debug, Clone)]
pub struct Body<R> {
    pub masses: Vec<R>,
    pub mass: R,
    pub inertia: Mat3<R>,
    pub inertia_inv: Mat3<R>,
}

impl<R: Real> Body<R> {
    pub fn from_robot(robot: &RobotModel) -> Self {
        let masses = robot.masses().iter().map(|&m| R::from_f64(m)).collect();
        Self::new(masses, R::from_f64(robot.mass()), Mat3::from_f64(robot.inertia().m))
            .expect("robot inertia is validated on construction")
    }

    pub fn new(masses: Vec<R>, mass: R, inertia: Mat3<R>) -> Result<Self> {
        let inertia_inv = inertia
            .inverse()
            .ok_or_else(|| Error::Config("inertia matrix is singular".into()))?;
        Ok(Body {
            masses,
            mass,
            inertia,
            inertia_inv,
        })
    }
}

/// Body-frame points for one flipper configuration plus their first mass
/// moment `Σ m_i p_i`.
#[derive(Debug, Clone)]
pub struct Pose<R> {
    pub points: Vec<Vec3<R>>,
    pub moment: Vec3<R>,
    flippers: FlipperState,
}

impl<R: Real> Pose<R> {
    pub fn new(robot: &RobotModel, body: &Body<R>, flippers: &FlipperState) -> Self {
        let points: Vec<Vec3<R>> = robot
            .apply_flipper_angles(flippers)
            .into_iter()
            .map(Vec3::from_f64)
            .collect();
        let mut moment = Vec3::zeros();
        for (p, &m) in points.iter().zip(&body.masses) {
            moment += *p * m;
        }
        Pose {
            points,
            moment,
            flippers: *flippers,
        }
    }
}

/// Everything a step needs besides the state: terrain, robot, mass
/// parameters and configuration.
pub struct Dynamics<'a, R> {
    pub field: &'a ContactField<R>,
    pub robot: &'a RobotModel,
    pub body: Body<R>,
    pub cfg: &'a EngineConfig,
    drives: Vec<Drive>,
}

impl<'a, R: Real> Dynamics<'a, R> {
    pub fn new(field: &'a ContactField<R>, robot: &'a RobotModel, body: Body<R>, cfg: &'a EngineConfig) -> Self {
        Dynamics {
            field,
            robot,
            body,
            cfg,
            drives: robot.drives(),
        }
    }

    pub fn pose(&self, flippers: &FlipperState) -> Pose<R> {
        Pose::new(self.robot, &self.body, flippers)
    }

    /// Evaluates the state derivative. `speeds` are the left and right track
    /// speeds. Forces are accumulated into `rec`.
    pub fn derivative(
        &self,
        s: &RigidState<R>,
        pose: &Pose<R>,
        speeds: [R; 2],
        rec: &mut StepForces,
    ) -> Result<StateDerivative<R>> {
        let rot = &s.rot;
        let omega_world = rot.mul_vec(&s.omega);
        let forward = rot.col(0);
        let k = self.cfg.steepness;
        let mut force = Vec3::<R>::zeros();
        let mut torque_world = Vec3::<R>::zeros();
        let mut ntot = [0.0f64; 3];

        for (i, p) in pose.points.iter().enumerate() {
            let r = rot.mul_vec(p);
            let q = s.pos + r;
            let geom = self.field.geometry(q.x, q.y)?;
            let pv = s.vel + omega_world.cross(&r);
            let sample = (!geom.separating(q.z, &pv)).then(|| self.field.complete(geom));
            let mag = sample.as_ref().map_or(R::zero(), |sm| normal_magnitude(q.z, &pv, sm, k));
            let Some(sample) = sample.filter(|_| mag.value() != 0.0) else {
                if let Some(pf) = rec.points.as_mut() {
                    let g = -self.body.masses[i].value() * self.cfg.gravity;
                    pf.normal.push([0.0; 3]);
                    pf.friction.push([0.0; 3]);
                    pf.total.push([0.0, 0.0, g]);
                    pf.contact.push(false);
                }
                continue;
            };
            let normal = sample.normal * mag;
            let u = match self.drives[i] {
                Drive::Left => speeds[0],
                Drive::Right => speeds[1],
                Drive::Passive => R::zero(),
            };
            let (fric, degenerate) =
                friction_force(&pv, mag, u, &sample, &forward, self.cfg.lateral_friction);
            rec.degenerate_tangents += degenerate as usize;
            let contact = normal + fric;
            force += contact;
            torque_world += r.cross(&contact);
            let nv = normal.value();
            for (a, b) in ntot.iter_mut().zip(nv) {
                *a += b;
            }
            if let Some(pf) = rec.points.as_mut() {
                let mg = self.body.masses[i].value() * self.cfg.gravity;
                let fv = fric.value();
                pf.normal.push(nv);
                pf.friction.push(fv);
                pf.total.push([nv[0] + fv[0], nv[1] + fv[1], nv[2] + fv[2] - mg]);
                pf.contact.push(true);
            }
        }
        rec.normal_total = ntot;

        let g = Vec3::new(R::zero(), R::zero(), R::from_f64(-self.cfg.gravity));
        let dvel = force * (R::one() / self.body.mass) + g;
        // Gravity acts at every point; its body-frame moment is (Σ m_i p_i) × Rᵀg.
        let mut torque = rot.tr_mul_vec(&torque_world) + pose.moment.cross(&rot.tr_mul_vec(&g));
        if self.cfg.gyroscopic {
            torque -= s.omega.cross(&self.body.inertia.mul_vec(&s.omega));
        }
        Ok(StateDerivative {
            dpos: s.vel,
            dvel,
            omega_world,
            domega: self.body.inertia_inv.mul_vec(&torque),
        })
    }
}

/// Explicit Euler update followed by re-orthonormalisation of the rotation.
pub fn euler_step<R: Real>(s: &RigidState<R>, d: &StateDerivative<R>, dt: f64) -> RigidState<R> {
    let h = |v: Vec3<R>| v.map(|c| c.scale(dt));
    let w = Mat3::skew(&h(d.omega_world));
    let rot = (s.rot + w.mul_mat(&s.rot)).orthonormalized();
    RigidState {
        pos: s.pos + h(d.dpos),
        vel: s.vel + h(d.dvel),
        rot,
        omega: s.omega + h(d.domega),
    }
}

/// Commands resolved per step in the engine's scalar type.
pub struct Plan<R> {
    pub speeds: Vec<[R; 2]>,
    pub flippers: Vec<FlipperState>,
    pub steps_per_command: usize,
    pub steps: usize,
    pub dt: f64,
}

impl<R: Real> Plan<R> {
    pub fn new(schedule: &ControlSchedule, cfg: &EngineConfig) -> Result<Self> {
        schedule.validate(cfg)?;
        Ok(Plan {
            speeds: schedule
                .commands
                .iter()
                .map(|c| [R::from_f64(c.u_left), R::from_f64(c.u_right)])
                .collect(),
            flippers: schedule.commands.iter().map(|c| c.flippers).collect(),
            steps_per_command: schedule.steps_per_command(cfg.dt)?,
            steps: cfg.steps()?,
            dt: cfg.dt,
        })
    }

    pub fn command_index(&self, step: usize) -> usize {
        (step / self.steps_per_command).min(self.speeds.len() - 1)
    }
}

/// Integrates steps `first..first + count` from `s`. `on_step` sees the
/// state a step starts from and the forces evaluated there; the returned
/// state is the one reached after the last step.
pub fn integrate<R: Real>(
    dynamics: &Dynamics<'_, R>,
    plan: &Plan<R>,
    s: RigidState<R>,
    first: usize,
    count: usize,
    record_points: bool,
    mut on_step: impl FnMut(usize, &RigidState<R>, StepForces),
) -> Result<RigidState<R>> {
    let mut state = s;
    let mut pose: Option<Pose<R>> = None;
    let n = dynamics.robot.len();
    for step in first..first + count {
        let c = plan.command_index(step);
        if pose.as_ref().is_none_or(|p| p.flippers != plan.flippers[c]) {
            pose = Some(dynamics.pose(&plan.flippers[c]));
        }
        let mut rec = StepForces::new(record_points.then_some(n));
        let d = dynamics.derivative(&state, pose.as_ref().unwrap(), plan.speeds[c], &mut rec)?;
        let next = euler_step(&state, &d, plan.dt);
        on_step(step, &state, rec);
        if !next.is_finite() {
            return Err(Error::NonFinite { step: step + 1 });
        }
        state = next;
    }
    Ok(state)
}

/// Derivative of an f64 state under one command, with its forces.
pub fn state_derivative(
    s: &RigidState<f64>,
    c: &ControlStep,
    grid: &TerrainGrid,
    robot: &RobotModel,
    cfg: &EngineConfig,
) -> Result<(StateDerivative<f64>, StepForces)> {
    let field = grid.contact_field::<f64>();
    let dynamics = Dynamics::new(&field, robot, Body::from_robot(robot), cfg);
    let pose = dynamics.pose(&c.flippers);
    let mut rec = StepForces::new(Some(robot.len()));
    let d = dynamics.derivative(s, &pose, [c.u_left, c.u_right], &mut rec)?;
    Ok((d, rec))
}

/// Runs a full rollout and assembles the f64 trajectory. `keep` sees every
/// state in scalar type `R`, including the last.
pub fn run_trajectory<R: Real>(
    dynamics: &Dynamics<'_, R>,
    plan: &Plan<R>,
    s0: RigidState<R>,
    mut keep: impl FnMut(&RigidState<R>),
) -> Result<Trajectory> {
    let cfg = dynamics.cfg;
    let mut tr = Trajectory {
        times: Vec::with_capacity(plan.steps + 1),
        states: Vec::with_capacity(plan.steps + 1),
        normal_totals: Vec::with_capacity(plan.steps),
        point_forces: cfg.record_point_forces.then(|| Vec::with_capacity(plan.steps)),
        degenerate_tangents: 0,
    };
    let last = integrate(dynamics, plan, s0, 0, plan.steps, cfg.record_point_forces, |k, s, f| {
        keep(s);
        tr.times.push(k as f64 * plan.dt);
        tr.states.push(s.value());
        tr.normal_totals.push(f.normal_total);
        tr.degenerate_tangents += f.degenerate_tangents;
        if let (Some(all), Some(p)) = (tr.point_forces.as_mut(), f.points) {
            all.push(p);
        }
    })?;
    keep(&last);
    tr.times.push(plan.steps as f64 * plan.dt);
    tr.states.push(last.value());
    Ok(tr)
}

/// Rolls out in scalar type `R` over a prepared contact field and returns
/// the trajectory with states converted to f64.
pub fn rollout_in<R: Real>(
    s0: &RigidState<f64>,
    schedule: &ControlSchedule,
    field: &ContactField<R>,
    robot: &RobotModel,
    cfg: &EngineConfig,
) -> Result<Trajectory> {
    s0.validate()?;
    cfg.validate()?;
    let plan = Plan::<R>::new(schedule, cfg)?;
    let dynamics = Dynamics::new(field, robot, Body::from_robot(robot), cfg);
    run_trajectory(&dynamics, &plan, s0.cast(), |_| {})
}

/// Reference f64 rollout: `horizon / dt + 1` states.
pub fn rollout(
    s0: &RigidState<f64>,
    schedule: &ControlSchedule,
    grid: &TerrainGrid,
    robot: &RobotModel,
    cfg: &EngineConfig,
) -> Result<Trajectory> {
    rollout_in(s0, schedule, &grid.contact_field::<f64>(), robot, cfg)
}

/// Mechanical energy with the terrain modelled as per-point springs:
/// kinetic + gravitational + `Σ ½ e Δh²` over penetrating points.
pub fn mechanical_energy(s: &RigidState<f64>, grid: &TerrainGrid, robot: &RobotModel, cfg: &EngineConfig) -> Result<f64> {
    let field = grid.contact_field::<f64>();
    let m = robot.mass();
    let w = s.omega;
    let kinetic = 0.5 * m * s.vel.norm_squared() + 0.5 * w.dot(&robot.inertia().mul_vec(&w));
    let mut potential = m * cfg.gravity * s.pos.z;
    for p in robot.points() {
        let q = s.pos + s.rot.mul_vec(&Vec3::from_f64(*p));
        let sample = field.surface(q.x, q.y)?;
        let dh = (sample.height - q.z) * sample.normal.z;
        if dh > 0.0 {
            potential += 0.5 * sample.stiffness * dh * dh;
        }
    }
    Ok(kinetic + potential)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robot::{build_tracked_robot, TrackedRobotConfig};
    use crate::terrain::{GridSpec, Layer};
    use proptest::prelude::*;

    fn flat_sample(e: f64, d: f64, mu: f64) -> SurfaceSample<f64> {
        SurfaceSample {
            height: 0.0,
            normal: Vec3::new(0.0, 0.0, 1.0),
            stiffness: e,
            damping: d,
            friction: mu,
        }
    }

    fn flat_grid() -> TerrainGrid {
        TerrainGrid::flat(GridSpec::centered(64, 0.1).unwrap()).unwrap()
    }

    fn robot() -> RobotModel {
        build_tracked_robot(&TrackedRobotConfig::default()).unwrap()
    }

    fn lowest_point(robot: &RobotModel) -> f64 {
        robot.points().iter().map(|p| p[2]).fold(f64::INFINITY, f64::min)
    }

    /// Drops the robot from just above flat ground and lets it settle.
    fn settled(robot: &RobotModel, grid: &TerrainGrid) -> RigidState<f64> {
        let cfg = EngineConfig::default();
        let s0 = RigidState::at_rest([0.0, 0.0, -lowest_point(robot)], 0.0);
        let sched = ControlSchedule::constant(ControlStep::default(), cfg.horizon);
        let tr = rollout(&s0, &sched, grid, robot, &cfg).unwrap();
        let mut s = *tr.last().unwrap();
        s.vel = Vec3::ZERO;
        s.omega = Vec3::ZERO;
        s
    }

    #[test]
    fn normal_force_vanishes_far_above() {
        let s = flat_sample(1000.0, 50.0, 1.0);
        let n = normal_force(&Vec3::new(0.0, 0.0, 1.0), &Vec3::ZERO, &s, 100.0);
        assert_eq!(n.norm(), 0.0);
        // Falling fast enough that the damper alone would push: the gate still kills it.
        let n = normal_force(&Vec3::new(0.0, 0.0, 1.0), &Vec3::new(0.0, 0.0, -30.0), &s, 100.0);
        assert!(n.norm() < 1500.0 * 1e-40);
    }

    #[test]
    fn normal_force_zero_at_surface() {
        let s = flat_sample(1000.0, 50.0, 1.0);
        let n = normal_force(&Vec3::ZERO, &Vec3::ZERO, &s, 100.0);
        assert_eq!(n.norm(), 0.0);
    }

    #[test]
    fn normal_force_worked_value() {
        let s = flat_sample(1000.0, 0.0, 1.0);
        let n = normal_force(&Vec3::new(0.0, 0.0, -0.01), &Vec3::ZERO, &s, 1000.0);
        let expected = 10.0 / (1.0 + (-10.0f64).exp());
        assert!((n.z - expected).abs() < 1e-12);
        assert!((n.z - 9.99955).abs() < 1e-5);
        assert_eq!((n.x, n.y), (0.0, 0.0));
    }

    #[test]
    fn normal_force_never_adhesive() {
        let s = flat_sample(1000.0, 50.0, 1.0);
        // Shallow penetration, separating quickly.
        let n = normal_force(&Vec3::new(0.0, 0.0, -0.001), &Vec3::new(0.0, 0.0, 5.0), &s, 100.0);
        assert_eq!(n.norm(), 0.0);
    }

    #[test]
    fn friction_worked_value() {
        let s = flat_sample(1000.0, 50.0, 1.0);
        let fwd = Vec3::new(1.0, 0.0, 0.0);
        let (f, degenerate) = friction_force(&Vec3::ZERO, 10.0, 1.0, &s, &fwd, false);
        assert!(!degenerate);
        assert_eq!(f.to_array(), [10.0, 0.0, 0.0]);
    }

    #[test]
    fn friction_zero_without_slip_or_load() {
        let s = flat_sample(1000.0, 50.0, 0.8);
        let fwd = Vec3::new(1.0, 0.0, 0.0);
        let (f, _) = friction_force(&Vec3::new(0.7, 0.0, 0.0), 10.0, 0.7, &s, &fwd, false);
        assert_eq!(f.norm(), 0.0);
        let (f, _) = friction_force(&Vec3::ZERO, 0.0, 1.0, &s, &fwd, false);
        assert_eq!(f.norm(), 0.0);
    }

    #[test]
    fn friction_flags_vertical_forward_axis() {
        let s = flat_sample(1000.0, 50.0, 1.0);
        let (f, degenerate) =
            friction_force(&Vec3::ZERO, 10.0, 1.0, &s, &Vec3::new(0.0, 0.0, 1.0), false);
        assert!(degenerate);
        assert_eq!(f.norm(), 0.0);
    }

    #[test]
    fn lateral_friction_opposes_sideways_slip() {
        let s = flat_sample(1000.0, 50.0, 1.0);
        let fwd = Vec3::new(1.0, 0.0, 0.0);
        let v = Vec3::new(0.0, 0.5, 0.0);
        let (f, _) = friction_force(&v, 10.0, 0.0, &s, &fwd, false);
        assert_eq!(f.norm(), 0.0);
        let (f, _) = friction_force(&v, 10.0, 0.0, &s, &fwd, true);
        assert!((f.y + 5.0).abs() < 1e-12 && f.x.abs() < 1e-12);
    }

    fn unit(v: [f64; 3]) -> Vec3<f64> {
        let v = Vec3::from_f64(v);
        v.scale(1.0 / v.norm())
    }

    proptest! {
        #[test]
        fn friction_is_tangent(
            nx in -0.8f64..0.8, ny in -0.8f64..0.8,
            fx in -1.0f64..1.0, fy in -1.0f64..1.0, fz in -0.5f64..0.5,
            vx in -2.0f64..2.0, vy in -2.0f64..2.0, vz in -2.0f64..2.0,
            u in -2.0f64..2.0, lateral: bool,
        ) {
            prop_assume!(fx.abs() + fy.abs() > 0.1);
            let mut s = flat_sample(1000.0, 50.0, 0.9);
            s.normal = unit([nx, ny, 1.0]);
            let fwd = unit([fx, fy, fz]);
            let (f, degenerate) = friction_force(&Vec3::new(vx, vy, vz), 37.0, u, &s, &fwd, lateral);
            prop_assert!(!degenerate);
            prop_assert!(f.dot(&s.normal).abs() <= 1e-9 * f.norm().max(1e-300));
        }

        #[test]
        fn normal_force_monotone_in_depth(
            d1 in -0.2f64..0.3, d2 in -0.2f64..0.3, vz in -1.0f64..1.0, nx in -0.5f64..0.5,
        ) {
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            let mut s = flat_sample(1000.0, 50.0, 1.0);
            s.normal = unit([nx, 0.0, 1.0]);
            let v = Vec3::new(0.0, 0.0, vz);
            let a = normal_force(&Vec3::new(0.0, 0.0, -lo), &v, &s, 100.0).norm();
            let b = normal_force(&Vec3::new(0.0, 0.0, -hi), &v, &s, 100.0).norm();
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn airborne_derivative_is_free_fall() {
        let grid = flat_grid();
        let robot = robot();
        let mut s = RigidState::at_rest([0.3, -0.2, 0.9], 0.4);
        s.rot = Mat3::from_rpy(0.2, -0.1, 0.4);
        s.pos.z = 30.0;
        let cfg = EngineConfig::default();
        let (d, f) = state_derivative(&s, &ControlStep::tracks(1.0, -1.0), &grid, &robot, &cfg).unwrap();
        assert!((d.dvel - Vec3::new(0.0, 0.0, -GRAVITY)).norm() < 1e-12);
        assert!(d.domega.norm() < 1e-12);
        assert_eq!(f.normal_total, [0.0; 3]);
        assert!(f.points.unwrap().contact.iter().all(|c| !c));
    }

    #[test]
    fn symmetric_robot_has_no_angular_acceleration() {
        let grid = flat_grid();
        let robot = robot();
        let cfg = EngineConfig::default();
        let mut s = RigidState::at_rest([0.0, 0.0, -lowest_point(&robot) - 0.02], 0.0);
        s.vel = Vec3::new(0.3, 0.0, 0.0);
        let (d, f) = state_derivative(&s, &ControlStep::tracks(0.8, 0.8), &grid, &robot, &cfg).unwrap();
        assert!(f.normal_total[2] > 0.0);
        assert!(d.domega.x.abs() < 1e-9 && d.domega.z.abs() < 1e-9, "{:?}", d.domega);
        assert!(d.dvel.y.abs() < 1e-9);
    }

    #[test]
    fn per_point_forces_sum_to_total() {
        let grid = flat_grid();
        let robot = robot();
        let cfg = EngineConfig::default();
        let s = RigidState::at_rest([0.0, 0.0, -lowest_point(&robot) - 0.02], 0.1);
        let (d, f) = state_derivative(&s, &ControlStep::tracks(0.5, 0.2), &grid, &robot, &cfg).unwrap();
        let pf = f.points.unwrap();
        assert_eq!(pf.total.len(), robot.len());
        let mut sum = [0.0; 3];
        for t in &pf.total {
            for k in 0..3 {
                sum[k] += t[k];
            }
        }
        let acc = d.dvel.to_array();
        for k in 0..3 {
            assert!((sum[k] / robot.mass() - acc[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_derivative_leaves_state_unchanged() {
        let s = RigidState::at_rest([1.0, 2.0, 0.3], 0.7);
        let d = StateDerivative {
            dpos: Vec3::ZERO,
            dvel: Vec3::ZERO,
            omega_world: Vec3::ZERO,
            domega: Vec3::ZERO,
        };
        let next = euler_step(&s, &d, 0.01);
        assert_eq!(next.pos, s.pos);
        assert_eq!(next.vel, s.vel);
        assert!(next.rot.angle_to(&s.rot) < 1e-15);
    }

    #[test]
    fn constant_spin_turns_heading_by_quarter() {
        let grid = flat_grid();
        let robot = robot();
        let cfg = EngineConfig {
            dt: 1e-4,
            horizon: 1.0,
            gravity: 0.0,
            ..Default::default()
        };
        let mut s0 = RigidState::at_rest([0.0, 0.0, 5.0], 0.0);
        s0.omega = Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let sched = ControlSchedule::constant(ControlStep::default(), cfg.horizon);
        let tr = rollout(&s0, &sched, &grid, &robot, &cfg).unwrap();
        let yaw = tr.last().unwrap().yaw().to_degrees();
        assert!((yaw - 90.0).abs() < 0.1, "yaw {yaw}");
        for s in &tr.states {
            assert!(s.rot.orthonormality_error() <= 1e-6);
        }
    }

    #[test]
    fn free_fall_matches_kinematics() {
        let grid = flat_grid();
        let robot = robot();
        let cfg = EngineConfig {
            dt: 1e-3,
            horizon: 1.0,
            ..Default::default()
        };
        let s0 = RigidState::at_rest([0.0, 0.0, 20.0], 0.0);
        let sched = ControlSchedule::constant(ControlStep::default(), cfg.horizon);
        let tr = rollout(&s0, &sched, &grid, &robot, &cfg).unwrap();
        assert_eq!(tr.len(), 1001);
        let drop = tr.last().unwrap().pos.z - 20.0;
        assert!((drop + 4.905).abs() <= 5e-3, "drop {drop}");
    }

    #[test]
    fn rollout_shape_and_determinism() {
        let grid = flat_grid();
        let robot = robot();
        let cfg = EngineConfig {
            horizon: 0.5,
            record_point_forces: true,
            ..Default::default()
        };
        let s0 = RigidState::at_rest([0.0, 0.0, -lowest_point(&robot) + 0.05], 0.0);
        let sched = ControlSchedule {
            period: 0.1,
            commands: (0..5).map(|k| ControlStep::tracks(0.2 * k as f64, 0.1)).collect(),
        };
        let a = rollout(&s0, &sched, &grid, &robot, &cfg).unwrap();
        let b = rollout(&s0, &sched, &grid, &robot, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 51);
        assert_eq!(a.normal_totals.len(), 50);
        assert!(a.times.windows(2).all(|w| w[1] > w[0]));
        let pf = a.point_forces.as_ref().unwrap();
        assert_eq!(pf.len(), 50);
        assert!(pf.iter().all(|f| f.normal.len() == robot.len() && f.contact.len() == robot.len()));
    }

    #[test]
    fn invalid_inputs_rejected() {
        let grid = flat_grid();
        let robot = robot();
        let s0 = RigidState::at_rest([0.0, 0.0, 1.0], 0.0);
        let sched = ControlSchedule::constant(ControlStep::tracks(0.5, 0.5), 5.0);
        let bad_horizon = EngineConfig {
            horizon: 0.005,
            ..Default::default()
        };
        assert!(matches!(rollout(&s0, &sched, &grid, &robot, &bad_horizon), Err(Error::Config(_))));
        let short = ControlSchedule::constant(ControlStep::tracks(0.5, 0.5), 1.0);
        assert!(rollout(&s0, &short, &grid, &robot, &EngineConfig::default()).is_err());
        let fast = ControlSchedule::constant(ControlStep::tracks(5.0, 0.5), 5.0);
        assert!(rollout(&s0, &fast, &grid, &robot, &EngineConfig::default()).is_err());
        let mut skew = s0;
        skew.rot.m[0][1] = 0.3;
        assert!(rollout(&skew, &sched, &grid, &robot, &EngineConfig::default()).is_err());
    }

    #[test]
    fn overflow_reports_non_finite() {
        let grid = flat_grid();
        let robot = robot();
        let cfg = EngineConfig::default();
        let mut s0 = RigidState::at_rest([0.0, 0.0, -lowest_point(&robot)], 0.0);
        s0.vel.z = -1e306;
        let sched = ControlSchedule::constant(ControlStep::default(), cfg.horizon);
        let err = rollout(&s0, &sched, &grid, &robot, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 1 }), "{err}");
        assert!(err.is_numerical());
    }

    #[test]
    fn resting_robot_stays_put() {
        let grid = flat_grid();
        let robot = robot();
        let s0 = settled(&robot, &grid);
        let cfg = EngineConfig::default();
        let sched = ControlSchedule::constant(ControlStep::default(), cfg.horizon);
        let tr = rollout(&s0, &sched, &grid, &robot, &cfg).unwrap();
        let moved = (tr.last().unwrap().pos - s0.pos).norm();
        assert!(moved <= 1e-3, "moved {moved}");
    }

    #[test]
    fn equal_tracks_approach_commanded_speed() {
        let grid = flat_grid().with_uniform(Layer::Friction, 1.0).unwrap();
        let robot = robot();
        let s0 = settled(&robot, &grid);
        let cfg = EngineConfig::default();
        let u = 0.5;
        let sched = ControlSchedule::constant(ControlStep::tracks(u, u), cfg.horizon);
        let tr = rollout(&s0, &sched, &grid, &robot, &cfg).unwrap();
        let last = tr.last().unwrap();
        let fwd = last.rot.col(0).dot(&last.vel);
        assert!((fwd - u).abs() <= 0.02 * u, "speed {fwd}");
        assert!(last.yaw().abs() <= 0.02);
    }

    #[test]
    fn opposite_tracks_turn_in_place() {
        let grid = flat_grid();
        let robot = robot();
        let s0 = settled(&robot, &grid);
        let cfg = EngineConfig::default();
        // Right track forward, left backward: counter-clockwise, yaw increases.
        let sched = ControlSchedule::constant(ControlStep::tracks(-0.5, 0.5), cfg.horizon);
        let tr = rollout(&s0, &sched, &grid, &robot, &cfg).unwrap();
        let disp = tr.last().unwrap().pos - s0.pos;
        assert!((disp.x * disp.x + disp.y * disp.y).sqrt() <= 0.05, "{disp:?}");
        let mut unwrapped = 0.0;
        let mut prev = s0.yaw();
        for s in &tr.states[1..] {
            let mut d = s.yaw() - prev;
            d -= (d / std::f64::consts::TAU).round() * std::f64::consts::TAU;
            assert!(d >= -1e-9);
            unwrapped += d;
            prev = s.yaw();
        }
        assert!(unwrapped > 0.1, "yaw change {unwrapped}");
    }

    #[test]
    fn energy_drift_is_first_order() {
        let grid = flat_grid()
            .with_uniform(Layer::Damping, 0.0)
            .unwrap()
            .with_uniform(Layer::Friction, 0.0)
            .unwrap();
        let robot = robot();
        let drift = |dt: f64| {
            let cfg = EngineConfig {
                dt,
                horizon: 1.0,
                ..Default::default()
            };
            let s0 = RigidState::at_rest([0.0, 0.0, -lowest_point(&robot) + 0.05], 0.0);
            let sched = ControlSchedule::constant(ControlStep::default(), cfg.horizon);
            let tr = rollout(&s0, &sched, &grid, &robot, &cfg).unwrap();
            let e0 = mechanical_energy(&s0, &grid, &robot, &cfg).unwrap();
            tr.states
                .iter()
                .map(|s| (mechanical_energy(s, &grid, &robot, &cfg).unwrap() - e0).abs())
                .fold(0.0, f64::max)
        };
        let a = drift(0.002);
        let b = drift(0.001);
        let ratio = a / b;
        assert!((1.6..2.5).contains(&ratio), "drift {a} {b} ratio {ratio}");
    }
}
