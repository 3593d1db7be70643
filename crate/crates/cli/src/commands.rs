use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::Args;
use serde_json::{json, Value};
use tracksim::autodiff::CoordSampling;
use tracksim::batch::{benchmark, rollout_batch, BatchRequest, BenchConfig, Precision};
use tracksim::identify::{identify as run_identify, write_history};
use tracksim::io::write_string_atomic;
use tracksim::liftsplat::{
    lift, pointcloud_to_heightmap, read_cloud_csv, read_pixels_csv, splat as run_splat, Aggregator, CameraFile,
    CameraIntrinsics, LiftedFeatureCloud,
};
use tracksim::losses::{masked_grid_loss, rotation_error, translation_error, TranslationMetric};
use tracksim::robot::{build_tracked_robot, TrackedRobotConfig};
use tracksim::scenario::{Scenario, Setup, WorldSource, GRADCHECK_EPS, PRESETS};
use tracksim::shooting::{navigate as run_navigate, select_control};
use tracksim::terrain::{GridSpec, Layer, TerrainGrid};
use tracksim::terrain_io::save_layers;
use tracksim::Trajectory;

use crate::{Common, Failure};

type Outcome = Result<(), Failure>;

/// Scenario from a file path or preset name, with flag overrides applied.
fn load_scenario(c: &Common, default: &str) -> Result<Scenario, Failure> {
    let name = c.scenario.as_deref().unwrap_or(default);
    let mut s = if Path::new(name).is_file() {
        Scenario::load(name)?
    } else if PRESETS.contains(&name) {
        Scenario::preset(name)?
    } else {
        return Err(Failure::validation(format!(
            "scenario {name:?} is neither a file nor a preset ({})",
            PRESETS.join(", ")
        )));
    };
    if let Some(dt) = c.dt {
        s.engine.dt = dt;
    }
    if let Some(h) = c.horizon {
        s.engine.horizon = h;
        // A single held command stretches to the new horizon.
        if let Some(ctl) = s.controls.as_mut().filter(|ctl| ctl.commands.len() == 1) {
            ctl.period = h;
        }
    }
    if let Some(seed) = c.seed {
        for w in [Some(&mut s.world), s.truth_world.as_mut()].into_iter().flatten() {
            if let WorldSource::Generate(spec) = w {
                spec.seed = seed;
            }
        }
        s.shooting.seed = seed;
    }
    if let Some(p) = c.precision {
        s.shooting.precision = p;
    }
    if c.threads.is_some() {
        s.shooting.workers = c.threads;
    }
    Ok(s)
}

fn out_dir(c: &Common, s: Option<&Scenario>) -> Result<PathBuf, Failure> {
    let dir = c
        .out
        .clone()
        .or_else(|| s.and_then(|s| s.out.as_ref().map(|o| s.base_dir.join(o))))
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir)
        .map_err(|e| Failure::validation(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Adds run metadata; under `--reproducible` only deterministic fields.
fn stamp(c: &Common, mut v: Value, started: Instant) -> Value {
    if !c.reproducible {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        v["created_unix_s"] = json!(now);
        v["wall_time_s"] = json!(started.elapsed().as_secs_f64());
    }
    v
}

fn write_json(path: &Path, v: &Value) -> Outcome {
    let text = serde_json::to_string_pretty(v).map_err(|e| Failure::validation(e.to_string()))?;
    write_string_atomic(path, &(text + "\n"))?;
    Ok(())
}

fn precision(c: &Common) -> Precision {
    c.precision.unwrap_or(Precision::F64)
}

fn end_position(t: &Trajectory) -> [f64; 3] {
    t.last().map_or([f64::NAN; 3], |s| s.pos.to_array())
}

pub fn simulate(c: &Common, binary: bool) -> Outcome {
    let started = Instant::now();
    let sc = load_scenario(c, "flat")?;
    let setup = sc.build()?;
    let tr = match precision(c) {
        Precision::F64 => setup.rollout()?,
        Precision::F32 => {
            let req = BatchRequest {
                grid: &setup.grid,
                robot: &setup.robot,
                states: vec![setup.state0],
                schedules: vec![setup.schedule.clone()],
                cfg: setup.cfg.clone(),
                precision: Precision::F32,
                workers: c.threads,
            };
            rollout_batch(&req)?.remove(0)?
        }
    };
    let dir = out_dir(c, Some(&sc))?;
    tr.save_csv(dir.join("trajectory.csv"))?;
    if binary {
        tr.save_binary(dir.join("trajectory.bin"))?;
    }
    let x0 = setup.state0.pos.to_array();
    let x1 = end_position(&tr);
    let disp = ((x1[0] - x0[0]).powi(2) + (x1[1] - x0[1]).powi(2) + (x1[2] - x0[2]).powi(2)).sqrt();
    let summary = json!({
        "scenario": sc.name,
        "precision": precision(c).to_string(),
        "dt_s": setup.cfg.dt,
        "horizon_s": setup.cfg.horizon,
        "steps": tr.len() - 1,
        "start_m": x0,
        "end_m": x1,
        "displacement_m": disp,
        "path_length_m": tr.path_length(),
        "degenerate_tangents": tr.degenerate_tangents,
    });
    write_json(&dir.join("summary.json"), &stamp(c, summary, started))?;
    println!("simulated {} steps, displacement {disp:.6} m", tr.len() - 1);
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Central-difference step.
    #[arg(long, default_value_t = GRADCHECK_EPS)]
    pub eps: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Sampled height cells.
    #[arg(long, default_value_t = 12)]
    pub heights: usize,
    /// Sampled friction cells.
    #[arg(long, default_value_t = 10)]
    pub friction: usize,
    /// Sampled control coordinates.
    #[arg(long, default_value_t = 10)]
    pub controls: usize,
    /// Sampled initial-state coordinates.
    #[arg(long, default_value_t = 8)]
    pub state0: usize,
}

/// Gradients are always taken in 64-bit.
pub fn gradcheck(c: &Common, a: &GradcheckArgs) -> Outcome {
    let started = Instant::now();
    let mut c = c.clone();
    if c.scenario.is_none() && c.horizon.is_none() {
        c.horizon = Some(2.0);
    }
    let sc = load_scenario(&c, "bump-field")?;
    let setup = sc.build()?;
    let sampling = CoordSampling {
        heights: a.heights,
        friction: a.friction,
        controls: a.controls,
        state0: a.state0,
        ..CoordSampling::default()
    };
    let report = setup.gradcheck(&sampling, a.eps, c.seed.unwrap_or(0))?;
    let dir = out_dir(&c, Some(&sc))?;
    let mut v = serde_json::to_value(&report).map_err(|e| Failure::validation(e.to_string()))?;
    v["scenario"] = json!(sc.name);
    v["tolerance"] = json!(a.tolerance);
    v["passed"] = json!(report.max_rel_error <= a.tolerance);
    write_json(&dir.join("gradcheck.json"), &stamp(&c, v, started))?;
    println!(
        "{} coordinates, max relative error {:.3e}",
        report.entries.len(),
        report.max_rel_error
    );
    if report.max_rel_error > a.tolerance {
        return Err(Failure::numerical(format!(
            "max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_error, a.tolerance
        )));
    }
    Ok(())
}

/// The reference path: a loaded trajectory, else a rollout on the truth
/// world.
fn reference_of(setup: &Setup) -> Result<Trajectory, Failure> {
    if let Some(r) = &setup.reference {
        return Ok(r.clone());
    }
    let truth = setup
        .truth
        .as_ref()
        .ok_or_else(|| Failure::validation("scenario needs a reference trajectory or a truth_world"))?;
    Ok(tracksim::dynamics::rollout(
        &setup.state0,
        &setup.schedule,
        truth,
        &setup.robot,
        &setup.cfg,
    )?)
}

pub fn identify(c: &Common, iterations: Option<usize>) -> Outcome {
    let started = Instant::now();
    let mut sc = load_scenario(c, "identify")?;
    if let Some(n) = iterations {
        sc.identify.iterations = n;
    }
    let setup = sc.build()?;
    let reference = reference_of(&setup)?;
    let args = setup.args();
    let before = args.rollout()?;
    let res = run_identify(&args, &reference, &sc.identify, &[])?;
    let after = tracksim::dynamics::rollout(&setup.state0, &setup.schedule, &res.grid, &setup.robot, &setup.cfg)?;
    let dx0 = translation_error(&before, &reference, TranslationMetric::SqrtMeanNorm)?;
    let dx1 = translation_error(&after, &reference, TranslationMetric::SqrtMeanNorm)?;
    let dir = out_dir(c, Some(&sc))?;
    res.grid.save(dir.join("grid.json"))?;
    write_history(&dir.join("loss_history.csv"), &res.history)?;
    after.save_csv(dir.join("trajectory.csv"))?;
    let summary = json!({
        "scenario": sc.name,
        "iterations": res.history.len(),
        "initial_loss_m2": res.initial_loss,
        "best_loss_m2": res.best_loss,
        "loss_ratio": res.best_loss / res.initial_loss,
        "best_iteration": res.best_iteration,
        "converged": res.converged,
        "dx_initial_m": dx0,
        "dx_final_m": dx1,
    });
    write_json(&dir.join("identify.json"), &stamp(c, summary, started))?;
    println!(
        "loss {:.3e} -> {:.3e} ({:.1}% reduction), dx {dx0:.4} -> {dx1:.4} m",
        res.initial_loss,
        res.best_loss,
        100.0 * (1.0 - res.best_loss / res.initial_loss)
    );
    Ok(())
}

fn first_waypoint(setup: &Setup) -> Result<[f64; 3], Failure> {
    setup
        .waypoints
        .first()
        .copied()
        .ok_or_else(|| Failure::validation("scenario has no waypoints"))
}

pub fn shoot(c: &Common) -> Outcome {
    let started = Instant::now();
    let sc = load_scenario(c, "navigate")?;
    let setup = sc.build()?;
    let wp = first_waypoint(&setup)?;
    let sel = select_control(
        &setup.state0,
        &setup.grid,
        &setup.robot,
        wp,
        &setup.schedule,
        &setup.cfg,
        &sc.shooting,
    )?;
    let dir = out_dir(c, Some(&sc))?;
    let mut csv = String::from("candidate,force_cost,waypoint_cost_m,total_cost,selected\n");
    for (i, k) in sel.candidates.costs.iter().enumerate() {
        csv += &format!("{i},{:e},{:e},{:e},{}\n", k.force, k.waypoint, k.total, (i == sel.index) as u8);
    }
    write_string_atomic(&dir.join("candidates.csv"), &csv)?;
    let v = json!({
        "scenario": sc.name,
        "waypoint_m": wp,
        "selected": sel.index,
        "costs": sel.candidates.costs[sel.index],
        "schedule": sel.schedule,
    });
    write_json(&dir.join("selection.json"), &stamp(c, v, started))?;
    println!("selected candidate {} of {}", sel.index, sel.candidates.costs.len());
    Ok(())
}

pub fn navigate(c: &Common) -> Outcome {
    let started = Instant::now();
    let sc = load_scenario(c, "navigate")?;
    let setup = sc.build()?;
    first_waypoint(&setup)?;
    let log = run_navigate(
        &setup.state0,
        &setup.waypoints,
        &setup.grid,
        &setup.robot,
        &setup.cfg,
        &sc.shooting,
    )?;
    let dir = out_dir(c, Some(&sc))?;
    let mut lines = String::new();
    for r in &log.replans {
        let mut v = serde_json::to_value(r).map_err(|e| Failure::validation(e.to_string()))?;
        v["event"] = json!("replan");
        lines += &(v.to_string() + "\n");
    }
    let start = setup.state0.pos.to_array();
    let end = json!({
        "event": "end",
        "success": log.success,
        "reached": log.reached,
        "waypoints": setup.waypoints.len(),
        "sim_time_s": log.trajectory.times.last().copied().unwrap_or(0.0),
        "path_length_m": log.trajectory.path_length(),
        "start_m": start,
        "end_m": end_position(&log.trajectory),
        "stuck": log.stuck,
    });
    lines += &(stamp(c, end, started).to_string() + "\n");
    write_string_atomic(&dir.join("navigation.jsonl"), &lines)?;
    log.trajectory.save_csv(dir.join("trajectory.csv"))?;
    println!(
        "reached {}/{} waypoints in {:.2} s, path {:.3} m",
        log.reached,
        setup.waypoints.len(),
        log.trajectory.times.last().copied().unwrap_or(0.0),
        log.trajectory.path_length()
    );
    match &log.stuck {
        Some(s) => Err(Failure::numerical(format!(
            "robot stuck at t = {:.2} s (moved {:.3} m)",
            s.time_s, s.displacement_m
        ))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Horizons [s], comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [2.5, 5.0])]
    pub horizons: Vec<f64>,
    /// Batch sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [512])]
    pub batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub repetitions: usize,
    /// Grid side length in cells.
    #[arg(long, default_value_t = 128)]
    pub grid_size: usize,
}

pub fn bench(c: &Common, a: &BenchArgs) -> Outcome {
    let started = Instant::now();
    let defaults = BenchConfig::default();
    let cfg = BenchConfig {
        horizons: a.horizons.clone(),
        batch_sizes: a.batch_sizes.clone(),
        repetitions: a.repetitions,
        dt: c.dt.unwrap_or(defaults.dt),
        grid_size: a.grid_size,
        precision: c.precision.unwrap_or(defaults.precision),
        workers: c.threads,
        seed: c.seed.unwrap_or(defaults.seed),
        ..defaults
    };
    let robot = build_tracked_robot(&TrackedRobotConfig::default())?;
    let report = benchmark(&cfg, &robot)?;
    let dir = out_dir(c, None)?;
    write_string_atomic(&dir.join("bench.csv"), &report.to_csv())?;
    let mut v = serde_json::to_value(&report).map_err(|e| Failure::validation(e.to_string()))?;
    if c.reproducible {
        // Timings are inherently run-dependent; keep only the configuration.
        v = json!({ "config": v["config"], "points": v["points"] });
    }
    write_json(&dir.join("bench.json"), &stamp(c, v, started))?;
    for r in &report.records {
        println!(
            "horizon {:.2} s batch {} ({} workers, {}): median {:.3} s, {:.0} rollouts/s",
            r.horizon_s, r.batch, r.workers, r.precision, r.median_s, r.rollouts_per_s
        );
    }
    for s in &report.scaling {
        println!(
            "batch {}: time x{:.2} per horizon doubling ({})",
            s.batch,
            s.per_doubling,
            if s.linear { "linear" } else { "not linear" }
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct SplatArgs {
    /// Point cloud CSV (x, y, z and optional p plus feature columns).
    #[arg(long, conflicts_with_all = ["camera", "pixels"])]
    pub cloud: Option<PathBuf>,
    /// Camera JSON with `K` and `pose`.
    #[arg(long, requires = "pixels")]
    pub camera: Option<PathBuf>,
    /// Pixel depth CSV (u, v, d, p and feature columns).
    #[arg(long, requires = "camera")]
    pub pixels: Option<PathBuf>,
    /// Grid side length in cells.
    #[arg(long, default_value_t = 64)]
    pub grid_size: usize,
    /// Cell size [m].
    #[arg(long, default_value_t = 0.1)]
    pub resolution: f64,
    /// Height reduction per cell: max, min, mean or p<0-100>.
    #[arg(long, default_value = "p90")]
    pub aggregate: Aggregator,
}

fn read_camera(path: &Path) -> Result<CameraFile, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))
}

fn save_features(path: &Path, spec: &GridSpec, cloud: &LiftedFeatureCloud) -> Result<usize, Failure> {
    let fg = run_splat(cloud, spec)?;
    let names: Vec<String> = (0..fg.channels).map(|k| format!("feature_{k}")).collect();
    let channels: Vec<Vec<f64>> = (0..fg.channels)
        .map(|k| (0..spec.len()).map(|i| fg.features[i * fg.channels + k]).collect())
        .collect();
    let mut layers: Vec<(&str, &str, &[f64])> = vec![("weight", "probability", &fg.weights)];
    for (n, ch) in names.iter().zip(&channels) {
        layers.push((n, "feature", ch));
    }
    save_layers(path, spec, &layers)?;
    Ok(fg.dropped)
}

pub fn splat(c: &Common, a: &SplatArgs) -> Outcome {
    let started = Instant::now();
    let spec = GridSpec::centered(a.grid_size, a.resolution)?;
    let dir = out_dir(c, None)?;
    let mut summary = json!({ "grid_size": a.grid_size, "resolution_m": a.resolution });
    if let Some(path) = &a.cloud {
        let (points, cloud) = read_cloud_csv(path)?;
        let hm = pointcloud_to_heightmap(&points, &spec, a.aggregate)?;
        let valid: Vec<f64> = hm.valid.iter().map(|&v| v as u8 as f64).collect();
        save_layers(
            dir.join("heightmap.json"),
            &spec,
            &[("geometric", "m", &hm.heights), ("valid", "flag", &valid)],
        )?;
        summary["points"] = json!(points.len());
        summary["valid_cells"] = json!(hm.valid.iter().filter(|&&v| v).count());
        summary["dropped_points"] = json!(hm.dropped);
        if let Some(cloud) = cloud {
            summary["dropped_features"] = json!(save_features(&dir.join("features.json"), &spec, &cloud)?);
        }
    } else if let (Some(cam), Some(px)) = (&a.camera, &a.pixels) {
        let cam = read_camera(cam)?;
        let k = CameraIntrinsics::from_matrix(cam.k)?;
        let pixels = read_pixels_csv(px)?;
        let cloud = lift(&k, &cam.pose, &pixels)?;
        summary["lifted_points"] = json!(cloud.len());
        summary["dropped_features"] = json!(save_features(&dir.join("features.json"), &spec, &cloud)?);
    } else {
        return Err(Failure::validation("splat needs --cloud or --camera with --pixels"));
    }
    write_json(&dir.join("splat.json"), &stamp(c, summary, started))?;
    println!("wrote grids to {}", dir.display());
    Ok(())
}

/// Mean squared difference over all cells.
fn layer_error(pred: &TerrainGrid, truth: &TerrainGrid, layer: Layer) -> Result<f64, Failure> {
    if pred.spec() != truth.spec() {
        return Err(Failure::validation("predicted and truth grids differ in shape"));
    }
    let w = vec![1.0; pred.spec().len()];
    Ok(masked_grid_loss::<f64>(pred.layer(layer), truth.layer(layer), &w)?)
}

/// Metrics of the scenario's world against its reference: `dx` [m], `dR`
/// [rad], and heightmap errors [m²] when a truth world is given.
pub fn evaluate(c: &Common) -> Outcome {
    let started = Instant::now();
    let sc = load_scenario(c, "identify")?;
    let setup = sc.build()?;
    let reference = reference_of(&setup)?;
    let tr = setup.rollout()?;
    let dx = translation_error(&tr, &reference, TranslationMetric::SqrtMeanNorm)?;
    let dr = rotation_error(&tr, &reference)?;
    let (hg, ht) = match &setup.truth {
        Some(t) => (
            Some(layer_error(&setup.grid, t, Layer::Geometric)?),
            Some(layer_error(&setup.grid, t, Layer::Support)?),
        ),
        None => (None, None),
    };
    let v = json!({ "dx": dx, "dR": dr, "H_g_err": hg, "H_t_err": ht });
    let dir = out_dir(c, Some(&sc))?;
    write_json(&dir.join("metrics.json"), &stamp(c, v.clone(), started))?;
    println!("{v}");
    Ok(())
}
