//! Terrain identification: gradient descent on terrain layers through the
//! differentiable rollout so the simulated trajectory follows a reference.

use serde::{Deserialize, Serialize};

use crate::autodiff::{loss_gradient, GradientBundle, GradientOptions, LeafSet, RolloutArgs, TrajectoryLoss};
use crate::dynamics::{ControlSchedule, EngineConfig};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::robot::RobotModel;
use crate::terrain::{GridSpec, Layer, TerrainGrid};
use crate::trajectory::{RigidState, Trajectory};

/// Learnable layers and the parameter scale of each. Updates are taken on
/// `value / scale`, so one step size serves layers of very different
/// magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayerScales {
    pub heights: f64,
    pub friction: f64,
    pub stiffness: f64,
    pub damping: f64,
}

impl Default for LayerScales {
    fn default() -> Self {
        LayerScales {
            heights: 0.1,
            friction: 1.0,
            stiffness: 1000.0,
            damping: 50.0,
        }
    }
}

/// Update rule applied to the clipped gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Fixed-step descent, with optional heavy-ball momentum.
    #[default]
    Descent,
    /// Per-parameter normalized steps (beta1 0.9, beta2 0.999).
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentifyConfig {
    /// Subset of `heights`, `friction`, `stiffness`, `damping`.
    pub learn: Vec<String>,
    pub step_size: f64,
    pub iterations: usize,
    /// Gradient norm clip, measured in scaled parameters.
    pub clip_norm: f64,
    /// Heavy-ball coefficient; 0 is plain gradient descent.
    pub momentum: f64,
    pub optimizer: Optimizer,
    /// Only cells within this distance [m] of the reference path are
    /// updated; `None` updates every cell.
    pub tube_radius: Option<f64>,
    /// Weight of the squared-difference penalty between neighbouring
    /// learnable height cells.
    pub smoothness: f64,
    /// Stops once the trajectory loss falls to this value.
    pub tolerance: f64,
    pub loss: LossConfig,
    pub checkpoint: Option<usize>,
    pub scales: LayerScales,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        IdentifyConfig {
            learn: vec!["heights".into()],
            step_size: 0.05,
            iterations: 500,
            clip_norm: 1.0,
            momentum: 0.0,
            optimizer: Optimizer::Descent,
            tube_radius: Some(1.0),
            smoothness: 0.0,
            tolerance: 1e-12,
            loss: LossConfig::default(),
            checkpoint: GradientOptions::default().checkpoint,
            scales: LayerScales::default(),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-12;

const LEARNABLE: [(&str, Layer); 4] = [
    ("heights", Layer::Support),
    ("friction", Layer::Friction),
    ("stiffness", Layer::Stiffness),
    ("damping", Layer::Damping),
];

impl IdentifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config("step_size must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.smoothness < 0.0 || self.tube_radius.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::Config("smoothness and tube_radius must be positive".into()));
        }
        self.leaves().map(|_| ())
    }

    fn leaves(&self) -> Result<LeafSet> {
        if self.learn.is_empty() {
            return Err(Error::Config("nothing to learn".into()));
        }
        for name in &self.learn {
            if !LEARNABLE.iter().any(|(n, _)| n == name) {
                return Err(Error::Config(format!(
                    "layer {name:?} is not learnable; choose from heights, friction, stiffness, damping"
                )));
            }
        }
        LeafSet::parse(&self.learn)
    }

    fn scale(&self, layer: Layer) -> f64 {
        match layer {
            Layer::Friction => self.scales.friction,
            Layer::Stiffness => self.scales.stiffness,
            Layer::Damping => self.scales.damping,
            _ => self.scales.heights,
        }
    }
}

/// Quadratic prior pulling one layer toward a target on the weighted cells,
/// normalised like [`crate::losses::masked_grid_loss`].
#[derive(Debug, Clone)]
pub struct GridPrior {
    pub layer: Layer,
    pub target: Vec<f64>,
    pub weights: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Trajectory loss of the parameters at the start of the iteration.
    pub loss: f64,
    /// Trajectory loss plus regularisers.
    pub objective: f64,
    pub grad_norm: f64,
    pub best: f64,
}

#[derive(Debug, Clone)]
pub struct IdentifyResult {
    /// Grid with the lowest objective seen.
    pub grid: TerrainGrid,
    pub history: Vec<IterationRecord>,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_iteration: usize,
    pub converged: bool,
}

/// Cells within `radius` of any point of `path` (x, y).
pub fn tube_mask(spec: &GridSpec, path: impl IntoIterator<Item = [f64; 3]>, radius: f64) -> Vec<bool> {
    let mut mask = vec![false; spec.len()];
    let reach = (radius / spec.resolution).ceil() as isize + 1;
    for p in path {
        let c = ((p[0] - spec.origin_xy[0]) / spec.resolution).round() as isize;
        let r = ((p[1] - spec.origin_xy[1]) / spec.resolution).round() as isize;
        for row in (r - reach).max(0)..=(r + reach).min(spec.rows as isize - 1) {
            for col in (c - reach).max(0)..=(c + reach).min(spec.cols as isize - 1) {
                let [x, y] = spec.cell_center(row as usize, col as usize);
                if (x - p[0]).hypot(y - p[1]) <= radius + 1e-9 {
                    mask[spec.index(row as usize, col as usize)] = true;
                }
            }
        }
    }
    mask
}

struct Problem<'a> {
    state0: RigidState<f64>,
    schedule: &'a ControlSchedule,
    robot: &'a RobotModel,
    cfg: &'a EngineConfig,
    loss: TrajectoryLoss,
    set: LeafSet,
    opts: GradientOptions,
}

impl Problem<'_> {
    fn eval(&self, grid: &TerrainGrid) -> Result<(f64, GradientBundle)> {
        let args = RolloutArgs {
            state0: self.state0,
            schedule: self.schedule,
            grid,
            robot: self.robot,
            cfg: self.cfg,
        };
        let g = loss_gradient(&args, self.set, &self.loss, &self.opts)?;
        Ok((g.loss, g.gradient))
    }
}

fn bundle_layer(b: &GradientBundle, layer: Layer) -> Option<&Vec<f64>> {
    match layer {
        Layer::Support => b.heights.as_ref(),
        Layer::Friction => b.friction.as_ref(),
        Layer::Stiffness => b.stiffness.as_ref(),
        Layer::Damping => b.damping.as_ref(),
        _ => None,
    }
}

/// Adds the gradient of the neighbour-difference penalty (mean over pairs
/// touching the mask) to `grad` and returns the penalty.
fn smoothness(spec: &GridSpec, h: &[f64], mask: &[bool], w: f64, grad: &mut [f64]) -> f64 {
    let mut pairs = Vec::new();
    for row in 0..spec.rows {
        for col in 0..spec.cols {
            let i = spec.index(row, col);
            if col + 1 < spec.cols {
                pairs.push((i, i + 1));
            }
            if row + 1 < spec.rows {
                pairs.push((i, i + spec.cols));
            }
        }
    }
    pairs.retain(|&(a, b)| mask[a] || mask[b]);
    if pairs.is_empty() {
        return 0.0;
    }
    let scale = w / pairs.len() as f64;
    let mut value = 0.0;
    for (a, b) in pairs {
        let d = h[a] - h[b];
        value += d * d;
        grad[a] += 2.0 * scale * d;
        grad[b] -= 2.0 * scale * d;
    }
    value * scale
}

/// Runs identification starting from `start.grid`. The reference must cover
/// the rollout horizon.
pub fn identify(
    start: &RolloutArgs<'_>,
    reference: &Trajectory,
    cfg: &IdentifyConfig,
    priors: &[GridPrior],
) -> Result<IdentifyResult> {
    let (grid0, schedule, engine) = (start.grid, start.schedule, start.cfg);
    cfg.validate()?;
    engine.validate()?;
    schedule.validate(engine)?;
    let set = cfg.leaves()?;
    let spec = *grid0.spec();
    for p in priors {
        if p.target.len() != spec.len() || p.weights.len() != spec.len() {
            return Err(Error::Shape("prior arrays must match the grid".into()));
        }
    }
    let steps = engine.steps()?;
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * engine.dt).collect();
    let (Some(&r0), Some(&r1)) = (reference.times.first(), reference.times.last()) else {
        return Err(Error::EmptyOverlap);
    };
    if r0 > 1e-9 || r1 + 1e-9 < engine.horizon {
        return Err(Error::Config(format!(
            "reference covers [{r0}, {r1}] s, rollout needs [0, {}] s",
            engine.horizon
        )));
    }
    let problem = Problem {
        state0: start.state0,
        schedule,
        robot: start.robot,
        cfg: engine,
        loss: TrajectoryLoss::new(&times, reference, cfg.loss)?,
        set,
        opts: GradientOptions {
            checkpoint: cfg.checkpoint,
            ..GradientOptions::default()
        },
    };
    let mask: Vec<bool> = match cfg.tube_radius {
        Some(r) => tube_mask(&spec, reference.positions(), r),
        None => vec![true; spec.len()],
    };
    let layers: Vec<Layer> = LEARNABLE
        .iter()
        .filter(|(n, _)| cfg.learn.iter().any(|l| l == n))
        .map(|&(_, l)| l)
        .collect();

    let mut grid = grid0.clone();
    let mut velocity: Vec<Vec<f64>> = layers.iter().map(|_| vec![0.0; spec.len()]).collect();
    let mut second: Vec<Vec<f64>> = velocity.clone();
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut best = (f64::INFINITY, f64::INFINITY, grid.clone(), 0usize);
    let mut initial = None;
    let mut blown = 0usize;
    let mut converged = false;

    for it in 0..cfg.iterations {
        let (loss, bundle) = problem.eval(&grid)?;
        if !bundle.is_finite() {
            return Err(Error::Diverged { iteration: it, loss });
        }
        // Gradients in scaled parameters, masked to the tube.
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
        let mut objective = loss;
        for &layer in &layers {
            let scale = cfg.scale(layer);
            let mut g = bundle_layer(&bundle, layer).cloned().unwrap_or_else(|| vec![0.0; spec.len()]);
            if layer == Layer::Support && cfg.smoothness > 0.0 {
                objective += smoothness(&spec, grid.layer(layer), &mask, cfg.smoothness, &mut g);
            }
            for p in priors.iter().filter(|p| p.layer == layer) {
                let cur = grid.layer(layer);
                let count = p.weights.iter().filter(|&&w| w > 0.0).count();
                if count == 0 {
                    return Err(Error::AllMasked);
                }
                let inv = p.weight / count as f64;
                for i in 0..spec.len() {
                    let d = p.weights[i] * (cur[i] - p.target[i]);
                    objective += inv * d * d;
                    g[i] += 2.0 * inv * p.weights[i] * d;
                }
            }
            for (gi, &m) in g.iter_mut().zip(&mask) {
                *gi = if m { *gi * scale } else { 0.0 };
            }
            grads.push(g);
        }
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        let initial_objective = *initial.get_or_insert(objective);
        if objective < best.1 {
            best = (loss, objective, grid.clone(), it);
        }
        history.push(IterationRecord {
            iteration: it,
            loss,
            objective,
            grad_norm: norm,
            best: best.1,
        });
        if loss <= cfg.tolerance {
            converged = true;
            break;
        }
        blown = if objective > 10.0 * initial_objective { blown + 1 } else { 0 };
        if blown >= 20 {
            return Err(Error::Diverged { iteration: it, loss });
        }
        let clip = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
        let t = (it + 1) as i32;
        for (((&layer, g), v), s2) in layers.iter().zip(&grads).zip(&mut velocity).zip(&mut second) {
            let scale = cfg.scale(layer);
            let mut values = grid.layer(layer).to_vec();
            for i in 0..spec.len() {
                let gi = clip * g[i];
                let delta = match cfg.optimizer {
                    Optimizer::Descent => {
                        v[i] = cfg.momentum * v[i] + gi;
                        v[i]
                    }
                    Optimizer::Adam => {
                        if gi == 0.0 && v[i] == 0.0 {
                            continue;
                        }
                        v[i] = ADAM_BETA1 * v[i] + (1.0 - ADAM_BETA1) * gi;
                        s2[i] = ADAM_BETA2 * s2[i] + (1.0 - ADAM_BETA2) * gi * gi;
                        let m = v[i] / (1.0 - ADAM_BETA1.powi(t));
                        let r = s2[i] / (1.0 - ADAM_BETA2.powi(t));
                        m / (r.sqrt() + ADAM_EPS)
                    }
                };
                values[i] -= cfg.step_size * scale * delta;
            }
            if layer != Layer::Support {
                values.iter_mut().for_each(|x| *x = x.max(0.0));
            }
            grid.set_layer(layer, values)?;
        }
    }
    let (best_loss, _, best_grid, best_iteration) = best;
    Ok(IdentifyResult {
        grid: best_grid,
        initial_loss: history.first().map_or(best_loss, |h| h.loss),
        history,
        best_loss,
        best_iteration,
        converged,
    })
}

/// Writes the loss history as CSV.
pub fn write_history(path: &std::path::Path, history: &[IterationRecord]) -> Result<()> {
    use std::io::Write;
    crate::io::write_atomic(path, |w| {
        writeln!(w, "iteration,loss_m2,objective,grad_norm,best_objective")?;
        for h in history {
            writeln!(w, "{},{:e},{:e},{:e},{:e}", h.iteration, h.loss, h.objective, h.grad_norm, h.best)?;
        }
        Ok(())
    })
}
