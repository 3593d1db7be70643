//! Mass-point rigid-body model of a tracked robot with kinematic flippers.
//!
//! The body frame has its origin at the centre of mass, x forward, y to the
//! left and z up. Points carry a label that decides which track command
//! drives them; flippers are rigid plates posed by a hinge angle and follow
//! the command of the track on their side.

use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Mat3, Vec3};

pub const FLIPPER_COUNT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackSide {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PointLabel {
    Left,
    Right,
    /// Flipper index in `0..FLIPPER_COUNT`.
    Flipper(u8),
    Hull,
}

impl PointLabel {
    pub fn as_str(&self) -> String {
        match self {
            PointLabel::Left => "left".into(),
            PointLabel::Right => "right".into(),
            PointLabel::Flipper(k) => format!("flipper{}", k + 1),
            PointLabel::Hull => "hull".into(),
        }
    }

    pub fn parse(s: &str) -> Option<PointLabel> {
        match s {
            "left" => Some(PointLabel::Left),
            "right" => Some(PointLabel::Right),
            "hull" => Some(PointLabel::Hull),
            _ => {
                let k: u8 = s.strip_prefix("flipper")?.parse().ok()?;
                (1..=FLIPPER_COUNT as u8).contains(&k).then_some(PointLabel::Flipper(k - 1))
            }
        }
    }
}

impl Serialize for PointLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.as_str())
    }
}

impl<'de> Deserialize<'de> for PointLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        PointLabel::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown point label {s:?}")))
    }
}

/// Which track command moves a point's surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Drive {
    Left,
    Right,
    Passive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipperJoint {
    pub pivot: [f64; 3],
    /// Unit hinge axis; a positive angle rotates the plate right-handedly
    /// about it.
    pub axis: [f64; 3],
    pub side: TrackSide,
    pub indices: Vec<usize>,
}

impl FlipperJoint {
    pub fn rotation(&self, angle: f64) -> Mat3<f64> {
        Mat3::axis_angle(self.axis, angle)
    }

    pub fn rotate_point(&self, rot: &Mat3<f64>, p: [f64; 3]) -> [f64; 3] {
        let pivot = Vec3::from_f64(self.pivot);
        (pivot + rot.mul_vec(&(Vec3::from_f64(p) - pivot))).to_array()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlipperState {
    pub angles: [f64; FLIPPER_COUNT],
}

impl FlipperState {
    pub fn new(angles: [f64; FLIPPER_COUNT]) -> Self {
        FlipperState { angles }
    }

    pub fn is_finite(&self) -> bool {
        self.angles.iter().all(|a| a.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotModel {
    points: Vec<[f64; 3]>,
    masses: Vec<f64>,
    labels: Vec<PointLabel>,
    flippers: Vec<FlipperJoint>,
    mass: f64,
    inertia: Mat3<f64>,
}

impl RobotModel {
    /// Builds a model and moves the body origin to the centre of mass
    /// (points and flipper pivots are shifted alike).
    pub fn new(
        points: Vec<[f64; 3]>,
        masses: Vec<f64>,
        labels: Vec<PointLabel>,
        flippers: Vec<FlipperJoint>,
    ) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::Config("robot needs at least one point".into()));
        }
        if masses.len() != n || labels.len() != n {
            return Err(Error::Shape(format!(
                "{n} points but {} masses and {} labels",
                masses.len(),
                labels.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("robot points must be finite".into()));
        }
        if masses.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(Error::Config("point masses must be positive".into()));
        }
        if flippers.len() > FLIPPER_COUNT {
            return Err(Error::Config(format!("at most {FLIPPER_COUNT} flippers are supported")));
        }
        let mut seen = vec![false; n];
        for (k, f) in flippers.iter().enumerate() {
            let a = f.axis;
            let an = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            if !(an > 0.0) || !an.is_finite() {
                return Err(Error::Config(format!("flipper {} has a zero axis", k + 1)));
            }
            for &i in &f.indices {
                if i >= n {
                    return Err(Error::Config(format!("flipper {} references point {i}", k + 1)));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Config(format!("point {i} belongs to more than one flipper")));
                }
                if labels[i] != PointLabel::Flipper(k as u8) {
                    return Err(Error::Config(format!(
                        "point {i} is listed by flipper {} but labelled {}",
                        k + 1,
                        labels[i].as_str()
                    )));
                }
            }
        }
        for (i, l) in labels.iter().enumerate() {
            if let PointLabel::Flipper(k) = l {
                if !flippers.get(*k as usize).is_some_and(|f| f.indices.contains(&i)) {
                    return Err(Error::Config(format!("point {i} is labelled {} without a hinge", l.as_str())));
                }
            }
        }

        let mass: f64 = masses.iter().sum();
        let mut com = [0.0; 3];
        for (p, m) in points.iter().zip(&masses) {
            for k in 0..3 {
                com[k] += m * p[k];
            }
        }
        let com = com.map(|c| c / mass);
        let shift = |p: [f64; 3]| [p[0] - com[0], p[1] - com[1], p[2] - com[2]];
        let points: Vec<[f64; 3]> = points.into_iter().map(shift).collect();
        let flippers = flippers
            .into_iter()
            .map(|f| FlipperJoint {
                pivot: shift(f.pivot),
                axis: {
                    let an = (f.axis[0] * f.axis[0] + f.axis[1] * f.axis[1] + f.axis[2] * f.axis[2]).sqrt();
                    f.axis.map(|a| a / an)
                },
                ..f
            })
            .collect();

        check_non_coplanar(&points)?;
        let (_, inertia) = mass_properties_of(&points, &masses);
        Ok(RobotModel {
            points,
            masses,
            labels,
            flippers,
            mass,
            inertia,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn labels(&self) -> &[PointLabel] {
        &self.labels
    }

    pub fn flippers(&self) -> &[FlipperJoint] {
        &self.flippers
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn inertia(&self) -> &Mat3<f64> {
        &self.inertia
    }

    pub fn drive(&self, i: usize) -> Drive {
        match self.labels[i] {
            PointLabel::Left => Drive::Left,
            PointLabel::Right => Drive::Right,
            PointLabel::Flipper(k) => match self.flippers[k as usize].side {
                TrackSide::Left => Drive::Left,
                TrackSide::Right => Drive::Right,
            },
            PointLabel::Hull => Drive::Passive,
        }
    }

    pub fn drives(&self) -> Vec<Drive> {
        (0..self.len()).map(|i| self.drive(i)).collect()
    }

    /// Body-frame points with every flipper rotated about its hinge.
    pub fn apply_flipper_angles(&self, f: &FlipperState) -> Vec<[f64; 3]> {
        pose_points(&self.points, &self.flippers, f)
    }

    /// `(m, J)` with `J = Σ m_i (‖p_i‖² I − p_i p_iᵀ)` about the body origin.
    pub fn mass_properties(&self) -> (f64, Mat3<f64>) {
        (self.mass, self.inertia)
    }

    pub fn scaled_masses(&self, factor: f64) -> Result<Self> {
        let mut out = self.clone();
        if !(factor > 0.0) {
            return Err(Error::Config("mass scale must be positive".into()));
        }
        out.masses.iter_mut().for_each(|m| *m *= factor);
        let (m, j) = mass_properties_of(&out.points, &out.masses);
        out.mass = m;
        out.inertia = j;
        Ok(out)
    }

    /// Replaces the inertia matrix, e.g. with a measured one. It must be
    /// symmetric positive definite.
    pub fn with_inertia(mut self, j: Mat3<f64>) -> Result<Self> {
        let sym = (0..3).all(|r| (0..3).all(|c| (j.m[r][c] - j.m[c][r]).abs() <= 1e-12 * (1.0 + j.m[r][c].abs())));
        let minors = [j.m[0][0], j.m[0][0] * j.m[1][1] - j.m[0][1] * j.m[1][0], j.determinant()];
        if !sym || !j.is_finite() || minors.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Config("inertia must be symmetric positive definite".into()));
        }
        self.inertia = j;
        Ok(self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: RobotFile = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        file.into_model()
    }

    pub fn to_file(&self) -> RobotFile {
        RobotFile {
            points: self.points.clone(),
            masses: self.masses.clone(),
            labels: self.labels.clone(),
            flippers: self.flippers.clone(),
        }
    }
}

/// JSON robot description: flattened point list, not a joint tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotFile {
    pub points: Vec<[f64; 3]>,
    pub masses: Vec<f64>,
    pub labels: Vec<PointLabel>,
    #[serde(default)]
    pub flippers: Vec<FlipperJoint>,
}

impl RobotFile {
    pub fn into_model(self) -> Result<RobotModel> {
        RobotModel::new(self.points, self.masses, self.labels, self.flippers)
    }
}

pub fn pose_points(points: &[[f64; 3]], flippers: &[FlipperJoint], f: &FlipperState) -> Vec<[f64; 3]> {
    let mut out = points.to_vec();
    for (joint, &angle) in flippers.iter().zip(&f.angles) {
        if angle == 0.0 {
            continue;
        }
        let rot = joint.rotation(angle);
        for &i in &joint.indices {
            out[i] = joint.rotate_point(&rot, points[i]);
        }
    }
    out
}

pub fn mass_properties_of(points: &[[f64; 3]], masses: &[f64]) -> (f64, Mat3<f64>) {
    let mut j = [[0.0; 3]; 3];
    let mut m = 0.0;
    for (p, &mi) in points.iter().zip(masses) {
        m += mi;
        let r2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
        for a in 0..3 {
            for b in 0..3 {
                let delta = if a == b { r2 } else { 0.0 };
                j[a][b] += mi * (delta - p[a] * p[b]);
            }
        }
    }
    (m, Mat3 { m: j })
}

fn check_non_coplanar(points: &[[f64; 3]]) -> Result<()> {
    if points.len() < 4 {
        return Err(Error::Config(format!(
            "need at least 4 non-coplanar points for a rigid body, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mut mean = [0.0; 3];
    for p in points {
        for k in 0..3 {
            mean[k] += p[k] / n;
        }
    }
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = nalgebra::Vector3::new(p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]);
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov / n);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || min <= 1e-10 * max {
        return Err(Error::Config("robot points are coplanar; inertia would be degenerate".into()));
    }
    Ok(())
}

/// Eigenvalues of a symmetric 3×3 matrix, ascending.
pub fn principal_moments(j: &Mat3<f64>) -> [f64; 3] {
    let m = Matrix3::from_fn(|r, c| j.m[r][c]);
    let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    [ev[0], ev[1], ev[2]]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    /// Points on the part surfaces, lattice vertices included.
    #[default]
    Shell,
    /// Voxel centres filling the part volumes.
    Solid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackConfig {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    /// Lateral gap between hull side and track.
    pub gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipperConfig {
    pub length: f64,
    pub width: f64,
}

/// Generator parameters for [`build_tracked_robot`]. Lengths in metres,
/// dimensions given as (length along x, width along y, height along z).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackedRobotConfig {
    pub hull: [f64; 3],
    /// Height of the hull bottom above the track bottom.
    pub hull_clearance: f64,
    pub track: Option<TrackConfig>,
    pub flipper: Option<FlipperConfig>,
    pub mast_height: f64,
    pub spacing: f64,
    pub mass: f64,
    pub fill: Fill,
}

impl Default for TrackedRobotConfig {
    fn default() -> Self {
        TrackedRobotConfig {
            hull: [0.6, 0.4, 0.1],
            hull_clearance: 0.1,
            track: Some(TrackConfig {
                length: 0.8,
                width: 0.1,
                height: 0.2,
                gap: 0.05,
            }),
            flipper: Some(FlipperConfig {
                length: 0.5,
                width: 0.1,
            }),
            mast_height: 0.5,
            spacing: 0.1,
            mass: 40.0,
            fill: Fill::Shell,
        }
    }
}

impl TrackedRobotConfig {
    /// A bare box sampled at `spacing`, centred on the origin.
    pub fn box_body(size: [f64; 3], spacing: f64, mass: f64, fill: Fill) -> Self {
        TrackedRobotConfig {
            hull: size,
            hull_clearance: 0.0,
            track: None,
            flipper: None,
            mast_height: 0.0,
            spacing,
            mass,
            fill,
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        let non_negative = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be non-negative, got {v}")))
            }
        };
        for (k, v) in self.hull.iter().enumerate() {
            positive(["hull length", "hull width", "hull height"][k], *v)?;
        }
        positive("spacing", self.spacing)?;
        positive("mass", self.mass)?;
        non_negative("hull clearance", self.hull_clearance)?;
        non_negative("mast height", self.mast_height)?;
        if let Some(t) = self.track {
            positive("track length", t.length)?;
            positive("track width", t.width)?;
            positive("track height", t.height)?;
            non_negative("track gap", t.gap)?;
        }
        if let Some(f) = self.flipper {
            if self.track.is_none() {
                return Err(Error::Config("flippers need main tracks to attach to".into()));
            }
            positive("flipper length", f.length)?;
            positive("flipper width", f.width)?;
        }
        Ok(())
    }
}

/// Coordinates along one axis of a part spanning `[lo, lo + len]`.
fn axis_samples(lo: f64, len: f64, spacing: f64, fill: Fill) -> Vec<f64> {
    match fill {
        Fill::Shell => {
            let n = ((len / spacing).round() as usize).max(1) + 1;
            (0..n).map(|i| lo + len * i as f64 / (n - 1) as f64).collect()
        }
        Fill::Solid => {
            let n = ((len / spacing).round() as usize).max(1);
            (0..n).map(|i| lo + len * (i as f64 + 0.5) / n as f64).collect()
        }
    }
}

/// Samples a box part. Shell mode keeps lattice points on the boundary.
fn sample_box(lo: [f64; 3], size: [f64; 3], spacing: f64, fill: Fill) -> Vec<[f64; 3]> {
    let xs = axis_samples(lo[0], size[0], spacing, fill);
    let ys = axis_samples(lo[1], size[1], spacing, fill);
    let zs = axis_samples(lo[2], size[2], spacing, fill);
    let mut out = Vec::new();
    for (k, &z) in zs.iter().enumerate() {
        for (j, &y) in ys.iter().enumerate() {
            for (i, &x) in xs.iter().enumerate() {
                let boundary = i == 0 || j == 0 || k == 0 || i + 1 == xs.len() || j + 1 == ys.len() || k + 1 == zs.len();
                if fill == Fill::Solid || boundary {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

/// Point-sampled tracked robot: hull, two main tracks, four flippers and a
/// sensor mast. Masses are uniform and the inertia comes from the points.
/// The default configuration yields 223 points at 0.1 m spacing.
pub fn build_tracked_robot(cfg: &TrackedRobotConfig) -> Result<RobotModel> {
    cfg.validate()?;
    let s = cfg.spacing;
    let [hl, hw, hh] = cfg.hull;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut push = |pts: Vec<[f64; 3]>, label: PointLabel, points: &mut Vec<[f64; 3]>| -> Vec<usize> {
        let start = points.len();
        points.extend(pts);
        labels.extend(std::iter::repeat_n(label, points.len() - start));
        (start..points.len()).collect()
    };

    // track bottoms sit at z = 0; a bare hull is centred on the origin
    let hull_z = if cfg.track.is_some() { cfg.hull_clearance } else { -hh / 2.0 };
    push(
        sample_box([-hl / 2.0, -hw / 2.0, hull_z], cfg.hull, s, cfg.fill),
        PointLabel::Hull,
        &mut points,
    );

    let mut flippers = Vec::new();
    if let Some(t) = cfg.track {
        let inner = hw / 2.0 + t.gap;
        let left = sample_box([-t.length / 2.0, inner, 0.0], [t.length, t.width, t.height], s, cfg.fill);
        let right: Vec<[f64; 3]> = left.iter().map(|p| [p[0], -p[1], p[2]]).collect();
        push(left, PointLabel::Left, &mut points);
        push(right, PointLabel::Right, &mut points);

        if let Some(f) = cfg.flipper {
            let pivot_z = t.height / 2.0;
            let ys = axis_samples(inner, f.width.min(t.width), s, cfg.fill);
            let xs: Vec<f64> = axis_samples(0.0, f.length, s, cfg.fill)
                .into_iter()
                .filter(|&x| x > 1e-12)
                .collect();
            // front-left, front-right, rear-left, rear-right
            let layout = [
                (1.0, TrackSide::Left),
                (1.0, TrackSide::Right),
                (-1.0, TrackSide::Left),
                (-1.0, TrackSide::Right),
            ];
            for (k, (dir, side)) in layout.into_iter().enumerate() {
                let sign_y = if side == TrackSide::Left { 1.0 } else { -1.0 };
                let pivot_x = dir * t.length / 2.0;
                let mut pts = Vec::new();
                for &y in &ys {
                    for &x in &xs {
                        pts.push([pivot_x + dir * x, sign_y * y, pivot_z]);
                    }
                }
                let indices = push(pts, PointLabel::Flipper(k as u8), &mut points);
                // positive angles lower the flipper tip on both ends
                flippers.push(FlipperJoint {
                    pivot: [pivot_x, sign_y * (inner + t.width / 2.0), pivot_z],
                    axis: [0.0, dir, 0.0],
                    side,
                    indices,
                });
            }
        }
    }

    if cfg.mast_height > 0.0 {
        let top = hull_z + hh;
        let n = (cfg.mast_height / s).round() as usize;
        let mast = (1..=n).map(|k| [0.0, 0.0, top + cfg.mast_height * k as f64 / n as f64]).collect();
        push(mast, PointLabel::Hull, &mut points);
    }

    let n = points.len();
    let masses = vec![cfg.mass / n as f64; n];
    RobotModel::new(points, masses, labels, flippers)
}
