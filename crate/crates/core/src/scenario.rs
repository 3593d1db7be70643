//! Scenario files and seeded synthetic worlds.
//!
//! A scenario names a terrain (file, CSV or generator), a robot, the initial
//! placement, controls and engine settings. Relative paths inside a scenario
//! file resolve against the file's directory.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_difference_check, sample_coords, CoordSampling, GradcheckReport, GradientOptions, TrajectoryLoss};
use crate::dynamics::{rollout, ControlSchedule, ControlStep, EngineConfig};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::identify::IdentifyConfig;
use crate::io::read_json;
use crate::losses::LossConfig;
use crate::robot::{build_tracked_robot, FlipperState, RobotModel, TrackedRobotConfig};
use crate::shooting::ShootingConfig;
use crate::terrain::{GridSpec, Layer, TerrainGrid, DEFAULT_DAMPING, DEFAULT_FRICTION, DEFAULT_STIFFNESS};
use crate::trajectory::{RigidState, Trajectory};

/// Height profile of a generated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Flat,
    /// Plane rising along `heading_deg` (0 = world +x).
    Slope {
        angle_deg: f64,
        #[serde(default)]
        heading_deg: f64,
    },
    /// Sum of Gaussian bumps with seeded centres, heights and radii.
    BumpField {
        #[serde(default = "default_bumps")]
        count: usize,
        #[serde(default = "default_bump_height")]
        max_height: f64,
        #[serde(default = "default_bump_radii")]
        radius: [f64; 2],
    },
    /// Gaussian ridge across x at `center`, extending `length` along y with
    /// rounded ends. `length: null` spans the whole grid.
    Ridge {
        center: [f64; 2],
        height: f64,
        width: f64,
        #[serde(default)]
        length: Option<f64>,
    },
    /// Steps rising along +x starting at `start_x`.
    Stairs {
        start_x: f64,
        step_depth: f64,
        step_height: f64,
        steps: usize,
    },
}

fn default_bumps() -> usize {
    12
}
fn default_bump_height() -> f64 {
    0.15
}
fn default_bump_radii() -> [f64; 2] {
    [0.3, 0.8]
}
fn default_size() -> usize {
    64
}
fn default_resolution() -> f64 {
    0.1
}

/// Uniform material layers of a generated world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Material {
    pub stiffness: f64,
    pub damping: f64,
    pub friction: f64,
    /// Soft-layer thickness on top of the supporting surface [m].
    pub soft_depth: f64,
}

impl Default for Material {
    fn default() -> Self {
        Material {
            stiffness: DEFAULT_STIFFNESS,
            damping: DEFAULT_DAMPING,
            friction: DEFAULT_FRICTION,
            soft_depth: 0.0,
        }
    }
}

/// Generator spec: a square grid centred on the world origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default = "default_resolution")]
    pub resolution: f64,
    #[serde(default)]
    pub seed: u64,
    pub shape: Shape,
    #[serde(default)]
    pub material: Material,
}

impl WorldSpec {
    pub fn new(shape: Shape) -> Self {
        WorldSpec {
            size: default_size(),
            resolution: default_resolution(),
            seed: 0,
            shape,
            material: Material::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

/// Builds the supporting-height function of a shape. Bump parameters are
/// drawn here so the closure itself is pure.
fn height_fn(shape: &Shape, spec: &GridSpec, seed: u64) -> Result<Box<dyn Fn(f64, f64) -> f64>> {
    Ok(match *shape {
        Shape::Flat => Box::new(|_, _| 0.0),
        Shape::Slope { angle_deg, heading_deg } => {
            if !(angle_deg.abs() < 90.0) {
                return Err(Error::Config(format!("slope angle {angle_deg}° out of range")));
            }
            let g = angle_deg.to_radians().tan();
            let (s, c) = heading_deg.to_radians().sin_cos();
            Box::new(move |x, y| g * (c * x + s * y))
        }
        Shape::BumpField { count, max_height, radius } => {
            positive("bump radius", radius[0])?;
            if radius[1] < radius[0] || !max_height.is_finite() {
                return Err(Error::Config("bump radii must be ordered and heights finite".into()));
            }
            let (lo, hi) = spec.extent();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bumps: Vec<[f64; 4]> = (0..count)
                .map(|_| {
                    [
                        rng.random_range(lo[0]..hi[0]),
                        rng.random_range(lo[1]..hi[1]),
                        rng.random_range(-max_height..=max_height),
                        rng.random_range(radius[0]..=radius[1]),
                    ]
                })
                .collect();
            Box::new(move |x, y| {
                bumps
                    .iter()
                    .map(|&[cx, cy, a, r]| {
                        let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                        a * (-0.5 * d2 / (r * r)).exp()
                    })
                    .sum()
            })
        }
        Shape::Ridge {
            center,
            height,
            width,
            length,
        } => {
            positive("ridge width", width)?;
            let half = length.map(|l| 0.5 * l.max(0.0));
            Box::new(move |x, y| {
                let across = (-0.5 * ((x - center[0]) / width).powi(2)).exp();
                let along = match half {
                    None => 1.0,
                    Some(h) => {
                        let out = ((y - center[1]).abs() - h).max(0.0);
                        (-0.5 * (out / width).powi(2)).exp()
                    }
                };
                height * across * along
            })
        }
        Shape::Stairs {
            start_x,
            step_depth,
            step_height,
            steps,
        } => {
            positive("step depth", step_depth)?;
            Box::new(move |x, _| {
                if x < start_x {
                    return 0.0;
                }
                let k = ((x - start_x) / step_depth).floor() as usize + 1;
                step_height * k.min(steps) as f64
            })
        }
    })
}

/// Generates a world. Heights are clamped into the admissible range.
pub fn generate_world(w: &WorldSpec) -> Result<TerrainGrid> {
    positive("resolution", w.resolution)?;
    let spec = GridSpec::centered(w.size, w.resolution)?;
    let h = height_fn(&w.shape, &spec, w.seed)?;
    let mut support = Vec::with_capacity(spec.len());
    for row in 0..spec.rows {
        for col in 0..spec.cols {
            let [x, y] = spec.cell_center(row, col);
            support.push(h(x, y));
        }
    }
    let m = w.material;
    let n = spec.len();
    if m.soft_depth < 0.0 {
        return Err(Error::Config("soft_depth must be non-negative".into()));
    }
    let geom = support.iter().map(|s| s + m.soft_depth).collect();
    TerrainGrid::from_layers(
        spec,
        geom,
        vec![m.soft_depth; n],
        vec![m.stiffness; n],
        vec![m.damping; n],
        vec![m.friction; n],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum WorldSource {
    /// Grid header written by [`TerrainGrid::save`].
    File(PathBuf),
    Csv {
        path: PathBuf,
        origin_xy: [f64; 2],
        resolution: f64,
    },
    Generate(WorldSpec),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RobotSource {
    /// The default tracked robot.
    #[default]
    Default,
    File(PathBuf),
    Config(TrackedRobotConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Use `z` as given.
    Explicit,
    /// Lowest point just touching the supporting surface.
    #[default]
    Touchdown,
    /// Touchdown, then a zero-command rollout of `settle_time`; the final
    /// pose is kept and velocities zeroed.
    Settled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialState {
    pub xy: [f64; 2],
    pub z: f64,
    pub yaw: f64,
    pub velocity: [f64; 3],
    /// Body-frame angular velocity.
    pub omega: [f64; 3],
    pub placement: Placement,
    pub settle_time: f64,
}

impl Default for InitialState {
    fn default() -> Self {
        InitialState {
            xy: [0.0; 2],
            z: 0.0,
            yaw: 0.0,
            velocity: [0.0; 3],
            omega: [0.0; 3],
            placement: Placement::Touchdown,
            settle_time: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub world: WorldSource,
    #[serde(default)]
    pub robot: RobotSource,
    #[serde(default)]
    pub initial: InitialState,
    /// Defaults to zero track speeds over the horizon.
    #[serde(default)]
    pub controls: Option<ControlSchedule>,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub waypoints: Vec<[f64; 3]>,
    #[serde(default)]
    pub shooting: ShootingConfig,
    #[serde(default)]
    pub identify: IdentifyConfig,
    /// Reference trajectory CSV for identification and evaluation.
    #[serde(default)]
    pub reference: Option<PathBuf>,
    /// Ground-truth grid for identification and evaluation.
    #[serde(default)]
    pub truth_world: Option<WorldSource>,
    /// Output directory used when none is given on the command line.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// A scenario with everything loaded and validated.
#[derive(Debug, Clone)]
pub struct Setup {
    pub grid: TerrainGrid,
    pub robot: RobotModel,
    pub state0: RigidState<f64>,
    pub schedule: ControlSchedule,
    pub cfg: EngineConfig,
    pub waypoints: Vec<[f64; 3]>,
    pub reference: Option<Trajectory>,
    pub truth: Option<TerrainGrid>,
}

impl Setup {
    pub fn rollout(&self) -> Result<Trajectory> {
        rollout(&self.state0, &self.schedule, &self.grid, &self.robot, &self.cfg)
    }

    /// Gradient/rollout arguments borrowing this setup.
    pub fn args(&self) -> crate::autodiff::RolloutArgs<'_> {
        crate::autodiff::RolloutArgs {
            state0: self.state0,
            schedule: &self.schedule,
            grid: &self.grid,
            robot: &self.robot,
            cfg: &self.cfg,
        }
    }

    /// Compares tape gradients of the trajectory loss with central
    /// differences at seeded coordinates. The start is lifted slightly so no
    /// contact begins exactly at zero depth, where the force has a kink.
    /// Without a loaded reference, the reference is a rollout from a shifted
    /// and pushed initial state.
    pub fn gradcheck(&self, sampling: &CoordSampling, eps: f64, seed: u64) -> Result<GradcheckReport> {
        let mut start = self.state0;
        start.pos.z += GRADCHECK_LIFT;
        let args = crate::autodiff::RolloutArgs {
            state0: start,
            ..self.args()
        };
        let nominal = args.rollout()?;
        let reference = match &self.reference {
            Some(r) => r.clone(),
            None => {
                let mut moved = start;
                moved.pos.y += 0.05;
                moved.vel.x += 0.1;
                rollout(&moved, &self.schedule, &self.grid, &self.robot, &self.cfg)?
            }
        };
        let loss = TrajectoryLoss::new(
            &nominal.times,
            &reference,
            LossConfig {
                orientation_weight: GRADCHECK_ORIENTATION_WEIGHT,
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = sample_coords(&args, sampling, GRADCHECK_FOOTPRINT, &mut rng)?;
        finite_difference_check(&args, &loss, &coords, eps, &GradientOptions::default())
    }
}

const GRADCHECK_LIFT: f64 = 0.005;
const GRADCHECK_ORIENTATION_WEIGHT: f64 = 0.3;
/// Radius [m] around the nominal path from which grid coordinates are drawn.
const GRADCHECK_FOOTPRINT: f64 = 0.5;
/// Default central-difference step.
pub const GRADCHECK_EPS: f64 = 1e-6;

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Scenario> {
        let path = path.as_ref();
        let mut s: Scenario = read_json(path)?;
        s.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(s)
    }

    /// Built-in scenarios: `flat-rest`, `flat`, `slope`, `bump-field`,
    /// `ridge` and `stairs`, each on a 64×64 grid at 0.1 m, plus the task
    /// scenarios `identify` and `navigate`.
    pub fn preset(name: &str) -> Result<Scenario> {
        match name {
            "identify" => return Ok(Self::identify_preset()),
            "navigate" => return Ok(Self::navigate_preset()),
            _ => {}
        }
        let (shape, initial, controls) = match name {
            "flat-rest" => (
                Shape::Flat,
                InitialState {
                    placement: Placement::Settled,
                    ..Default::default()
                },
                None,
            ),
            "flat" => (Shape::Flat, InitialState::default(), Some(0.8)),
            "slope" => (
                Shape::Slope {
                    angle_deg: 10.0,
                    heading_deg: 0.0,
                },
                InitialState {
                    xy: [-1.0, 0.0],
                    ..Default::default()
                },
                Some(0.8),
            ),
            "bump-field" => (
                Shape::BumpField {
                    count: default_bumps(),
                    max_height: default_bump_height(),
                    radius: default_bump_radii(),
                },
                InitialState {
                    xy: [-1.5, 0.0],
                    ..Default::default()
                },
                Some(0.8),
            ),
            "ridge" => (
                Shape::Ridge {
                    center: [0.0, 0.0],
                    height: 0.3,
                    width: 0.25,
                    length: Some(2.0),
                },
                InitialState {
                    xy: [-2.0, 0.0],
                    ..Default::default()
                },
                Some(0.8),
            ),
            "stairs" => (
                Shape::Stairs {
                    start_x: 0.0,
                    step_depth: 0.4,
                    step_height: 0.08,
                    steps: 5,
                },
                InitialState {
                    xy: [-1.5, 0.0],
                    ..Default::default()
                },
                Some(0.8),
            ),
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset {name:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        let engine = EngineConfig::default();
        Ok(Scenario {
            name: name.into(),
            world: WorldSource::Generate(WorldSpec {
                seed: 7,
                ..WorldSpec::new(shape)
            }),
            robot: RobotSource::Default,
            initial,
            controls: controls.map(|u| ControlSchedule::constant(ControlStep::tracks(u, u), engine.horizon)),
            engine,
            waypoints: vec![],
            shooting: ShootingConfig::default(),
            identify: IdentifyConfig::default(),
            reference: None,
            truth_world: None,
            out: None,
            base_dir: PathBuf::new(),
        })
    }

    /// Self-consistent identification: the robot drives 2 s over a gentle
    /// bump field (the truth world); the learnable grid starts flat.
    fn identify_preset() -> Scenario {
        let horizon = 2.0;
        let mut s = Scenario::preset("flat").expect("flat preset exists");
        s.name = "identify".into();
        s.engine.horizon = horizon;
        s.initial.xy = [-1.5, 0.0];
        s.controls = Some(ControlSchedule::constant(ControlStep::tracks(0.8, 0.8), horizon));
        s.truth_world = Some(WorldSource::Generate(WorldSpec {
            seed: 7,
            ..WorldSpec::new(Shape::BumpField {
                count: default_bumps(),
                max_height: 0.05,
                radius: default_bump_radii(),
            })
        }));
        s.identify = IdentifyConfig {
            optimizer: crate::identify::Optimizer::Adam,
            step_size: 0.02,
            ..IdentifyConfig::default()
        };
        s
    }

    /// Flat world with one waypoint 5 m straight ahead.
    fn navigate_preset() -> Scenario {
        let mut s = Scenario::preset("flat").expect("flat preset exists");
        s.name = "navigate".into();
        s.initial.xy = [-2.5, 0.0];
        s.waypoints = vec![[2.5, 0.0, 0.0]];
        s
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn load_world(&self, w: &WorldSource) -> Result<TerrainGrid> {
        match w {
            WorldSource::File(p) => TerrainGrid::load(self.resolve(p)),
            WorldSource::Csv {
                path,
                origin_xy,
                resolution,
            } => TerrainGrid::from_csv(self.resolve(path), *origin_xy, *resolution),
            WorldSource::Generate(spec) => generate_world(spec),
        }
    }

    pub fn build(&self) -> Result<Setup> {
        self.engine.validate()?;
        let grid = self.load_world(&self.world)?;
        let robot = match &self.robot {
            RobotSource::Default => build_tracked_robot(&TrackedRobotConfig::default())?,
            RobotSource::File(p) => RobotModel::load(self.resolve(p))?,
            RobotSource::Config(c) => build_tracked_robot(c)?,
        };
        let schedule = match &self.controls {
            Some(s) => s.clone(),
            None => ControlSchedule::constant(ControlStep::default(), self.engine.horizon),
        };
        schedule.validate(&self.engine)?;
        let state0 = place(&self.initial, &grid, &robot, &self.engine, &schedule.commands[0].flippers)?;
        let reference = self
            .reference
            .as_ref()
            .map(|p| Trajectory::load_csv(self.resolve(p)))
            .transpose()?;
        let truth = self.truth_world.as_ref().map(|w| self.load_world(w)).transpose()?;
        Ok(Setup {
            grid,
            robot,
            state0,
            schedule,
            cfg: self.engine.clone(),
            waypoints: self.waypoints.clone(),
            reference,
            truth,
        })
    }
}

pub const PRESETS: [&str; 8] = [
    "flat-rest",
    "flat",
    "slope",
    "bump-field",
    "ridge",
    "stairs",
    "identify",
    "navigate",
];

/// Resolves an initial-state spec against the terrain.
pub fn place(
    init: &InitialState,
    grid: &TerrainGrid,
    robot: &RobotModel,
    cfg: &EngineConfig,
    flippers: &FlipperState,
) -> Result<RigidState<f64>> {
    let mut s = RigidState::at_rest([init.xy[0], init.xy[1], init.z], init.yaw);
    if init.placement != Placement::Explicit {
        s.pos.z = touchdown_height(&s, grid, robot, flippers)?;
    }
    if init.placement == Placement::Settled {
        if !(init.settle_time > 0.0) {
            return Err(Error::Config("settle_time must be positive".into()));
        }
        let settle_cfg = EngineConfig {
            horizon: (init.settle_time / cfg.dt).round() * cfg.dt,
            record_point_forces: false,
            ..cfg.clone()
        };
        let cmd = ControlStep {
            flippers: *flippers,
            ..ControlStep::default()
        };
        let hold = ControlSchedule::constant(cmd, settle_cfg.horizon);
        if let Some(last) = rollout(&s, &hold, grid, robot, &settle_cfg)?.last() {
            s = *last;
        }
        s.vel = Vec3::ZERO;
        s.omega = Vec3::ZERO;
    }
    s.vel += Vec3::from_f64(init.velocity);
    s.omega += Vec3::from_f64(init.omega);
    s.validate()?;
    Ok(s)
}

/// Body height at which the lowest posed point just touches the supporting
/// surface, for the pose's rotation and x, y.
pub fn touchdown_height(
    s: &RigidState<f64>,
    grid: &TerrainGrid,
    robot: &RobotModel,
    flippers: &FlipperState,
) -> Result<f64> {
    let mut z = f64::NEG_INFINITY;
    for p in robot.apply_flipper_angles(flippers) {
        let r = s.rot.mul_vec(&Vec3::from_f64(p));
        let h = grid.sample_at(Layer::Support, s.pos.x + r.x, s.pos.y + r.y)?;
        z = z.max(h - r.z);
    }
    Ok(z)
}

/// Angle wrapped into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r == -PI {
        PI
    } else {
        r
    }
}
