//! Geometric lift-splat: pixel rays to 3-D points, probability-weighted
//! feature splatting into grid cells, and point clouds to heightmaps.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::terrain::GridSpec;

/// Pinhole intrinsics with zero skew.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = CameraIntrinsics { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::Config("principal point must be finite".into()));
        }
        Ok(())
    }

    /// From a 3×3 matrix `[[fx, 0, cx], [0, fy, cy], [0, 0, 1]]`.
    pub fn from_matrix(k: [[f64; 3]; 3]) -> Result<Self> {
        if k[0][1] != 0.0 || k[1][0] != 0.0 || k[2] != [0.0, 0.0, 1.0] {
            return Err(Error::Config("intrinsic matrix must have zero skew and last row [0, 0, 1]".into()));
        }
        Self::new(k[0][0], k[1][1], k[0][2], k[1][2])
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }
}

/// Camera-to-grid transform: `p_grid = rotation · p_cam + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for CameraPose {
    fn default() -> Self {
        CameraPose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }
}

impl CameraPose {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        std::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + self.translation[i])
    }
}

/// Camera description file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraFile {
    #[serde(rename = "K")]
    pub k: [[f64; 3]; 3],
    #[serde(default)]
    pub pose: CameraPose,
}

/// Camera-frame point on the ray through pixel `(u, v)` at depth `d`.
pub fn lift_pixel(k: &CameraIntrinsics, u: f64, v: f64, d: f64) -> Result<[f64; 3]> {
    if !(d > 0.0) {
        return Err(Error::NonPositiveDepth(d));
    }
    Ok([d * (u - k.cx) / k.fx, d * (v - k.cy) / k.fy, d])
}

/// Pixel coordinates and depth of a camera-frame point.
pub fn project(k: &CameraIntrinsics, p: [f64; 3]) -> Result<[f64; 3]> {
    if !(p[2] > 0.0) {
        return Err(Error::NonPositiveDepth(p[2]));
    }
    Ok([k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy, p[2]])
}

/// Depth hypotheses for one pixel with a shared feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelDepths {
    pub u: f64,
    pub v: f64,
    pub depths: Vec<f64>,
    pub probs: Vec<f64>,
    pub feature: Vec<f64>,
}

/// One 3-D point per (pixel, depth) with probability and features; the
/// features of point `i` are `features[i * channels..(i + 1) * channels]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LiftedFeatureCloud {
    pub points: Vec<[f64; 3]>,
    pub probs: Vec<f64>,
    pub channels: usize,
    pub features: Vec<f64>,
}

impl LiftedFeatureCloud {
    pub fn new(channels: usize) -> Self {
        LiftedFeatureCloud {
            channels,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, p: [f64; 3], prob: f64, feature: &[f64]) -> Result<()> {
        if feature.len() != self.channels {
            return Err(Error::Shape(format!(
                "feature has {} channels, cloud has {}",
                feature.len(),
                self.channels
            )));
        }
        if !(prob >= 0.0 && prob.is_finite()) {
            return Err(Error::Config(format!("probability must be non-negative, got {prob}")));
        }
        self.points.push(p);
        self.probs.push(prob);
        self.features.extend_from_slice(feature);
        Ok(())
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }
}

/// Lifts every depth hypothesis of every pixel into the grid frame.
pub fn lift(k: &CameraIntrinsics, pose: &CameraPose, pixels: &[PixelDepths]) -> Result<LiftedFeatureCloud> {
    k.validate()?;
    let channels = pixels.first().map_or(0, |p| p.feature.len());
    let mut cloud = LiftedFeatureCloud::new(channels);
    for px in pixels {
        if px.depths.len() != px.probs.len() {
            return Err(Error::Shape("depths and probabilities differ in length".into()));
        }
        let total: f64 = px.probs.iter().sum();
        if total > 1.0 + 1e-6 {
            return Err(Error::Config(format!(
                "pixel ({}, {}) has depth probabilities summing to {total}",
                px.u, px.v
            )));
        }
        for (&d, &p) in px.depths.iter().zip(&px.probs) {
            let cam = lift_pixel(k, px.u, px.v, d)?;
            cloud.push(pose.apply(cam), p, &px.feature)?;
        }
    }
    Ok(cloud)
}

/// Per-cell weighted feature means.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub spec: GridSpec,
    pub channels: usize,
    /// `cells × channels`; zero where the cell is empty.
    pub features: Vec<f64>,
    pub weights: Vec<f64>,
    pub empty: Vec<bool>,
    pub dropped: usize,
    pub dropped_weight: f64,
}

const SPLAT_CHUNK: usize = 1 << 14;

struct Accum {
    sums: Vec<f64>,
    weights: Vec<f64>,
    dropped: usize,
    dropped_weight: f64,
}

/// Vertical projection of the cloud onto the grid: each cell holds
/// `Σ Φ_i p_i / Σ p_i` over its points. Points outside the grid are dropped
/// and counted. Chunks are reduced in a fixed order, so the result does not
/// depend on the number of workers.
pub fn splat(cloud: &LiftedFeatureCloud, spec: &GridSpec) -> Result<FeatureGrid> {
    spec.validate()?;
    let (n, c) = (spec.len(), cloud.channels);
    if cloud.features.len() != cloud.len() * c || cloud.probs.len() != cloud.len() {
        return Err(Error::Shape("cloud arrays are inconsistent".into()));
    }
    let partial: Vec<Accum> = (0..cloud.len())
        .collect::<Vec<_>>()
        .par_chunks(SPLAT_CHUNK)
        .map(|idx| {
            let mut a = Accum {
                sums: vec![0.0; n * c],
                weights: vec![0.0; n],
                dropped: 0,
                dropped_weight: 0.0,
            };
            for &i in idx {
                let [x, y, _] = cloud.points[i];
                let p = cloud.probs[i];
                match spec.cell_of(x, y) {
                    Some((row, col)) => {
                        let j = spec.index(row, col);
                        a.weights[j] += p;
                        for (s, f) in a.sums[j * c..(j + 1) * c].iter_mut().zip(cloud.feature(i)) {
                            *s += p * f;
                        }
                    }
                    None => {
                        a.dropped += 1;
                        a.dropped_weight += p;
                    }
                }
            }
            a
        })
        .collect();
    let mut total = Accum {
        sums: vec![0.0; n * c],
        weights: vec![0.0; n],
        dropped: 0,
        dropped_weight: 0.0,
    };
    for a in partial {
        total.sums.iter_mut().zip(&a.sums).for_each(|(t, s)| *t += s);
        total.weights.iter_mut().zip(&a.weights).for_each(|(t, s)| *t += s);
        total.dropped += a.dropped;
        total.dropped_weight += a.dropped_weight;
    }
    let empty: Vec<bool> = total.weights.iter().map(|&w| w <= 0.0).collect();
    let mut features = total.sums;
    for j in 0..n {
        for f in &mut features[j * c..(j + 1) * c] {
            *f = if empty[j] { 0.0 } else { *f / total.weights[j] };
        }
    }
    Ok(FeatureGrid {
        spec: *spec,
        channels: c,
        features,
        weights: total.weights,
        empty,
        dropped: total.dropped,
        dropped_weight: total.dropped_weight,
    })
}

/// Reduction of the z values falling into one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    /// Linear-interpolated percentile in `[0, 100]`.
    Percentile(f64),
    Max,
    Min,
    Mean,
}

impl Default for Aggregator {
    fn default() -> Self {
        Aggregator::Percentile(90.0)
    }
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Aggregator::Max),
            "min" => Ok(Aggregator::Min),
            "mean" => Ok(Aggregator::Mean),
            _ => s
                .strip_prefix('p')
                .and_then(|p| p.parse::<f64>().ok())
                .filter(|p| (0.0..=100.0).contains(p))
                .map(Aggregator::Percentile)
                .ok_or_else(|| Error::Config(format!("unknown aggregator {s:?}; use max, min, mean or p<0-100>"))),
        }
    }
}

fn aggregate(z: &mut [f64], agg: Aggregator) -> f64 {
    match agg {
        Aggregator::Max => z.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregator::Min => z.iter().copied().fold(f64::INFINITY, f64::min),
        Aggregator::Mean => z.iter().sum::<f64>() / z.len() as f64,
        Aggregator::Percentile(q) => {
            z.sort_by(f64::total_cmp);
            let pos = q / 100.0 * (z.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            z[lo] + (z[hi] - z[lo]) * (pos - lo as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeightMap {
    pub spec: GridSpec,
    /// Zero where invalid.
    pub heights: Vec<f64>,
    pub valid: Vec<bool>,
    pub dropped: usize,
}

/// Rasterises `points` into per-cell height aggregates; cells without
/// points are invalid.
pub fn pointcloud_to_heightmap(points: &[[f64; 3]], spec: &GridSpec, agg: Aggregator) -> Result<HeightMap> {
    spec.validate()?;
    if points.is_empty() {
        return Err(Error::Config("point cloud is empty".into()));
    }
    if let Aggregator::Percentile(q) = agg {
        if !(0.0..=100.0).contains(&q) {
            return Err(Error::Config(format!("percentile {q} outside [0, 100]")));
        }
    }
    let mut cells: Vec<Vec<f64>> = vec![Vec::new(); spec.len()];
    let mut dropped = 0;
    for &[x, y, z] in points {
        match spec.cell_of(x, y) {
            Some((r, c)) if z.is_finite() => cells[spec.index(r, c)].push(z),
            _ => dropped += 1,
        }
    }
    let valid: Vec<bool> = cells.iter().map(|c| !c.is_empty()).collect();
    let heights = cells
        .par_iter_mut()
        .map(|z| if z.is_empty() { 0.0 } else { aggregate(z, agg) })
        .collect();
    Ok(HeightMap {
        spec: *spec,
        heights,
        valid,
        dropped,
    })
}

/// Reads a cloud CSV with a header. Columns `x`, `y`, `z` are required;
/// `p` (probability) and any further columns (feature channels) are
/// optional. Returns the points and, when `p` is present, the feature cloud.
pub fn read_cloud_csv(path: &Path) -> Result<(Vec<[f64; 3]>, Option<LiftedFeatureCloud>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::parse(path, e))?;
    let headers = rdr.headers().map_err(|e| Error::parse(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(ix), Some(iy), Some(iz)) = (col("x"), col("y"), col("z")) else {
        return Err(Error::parse(path, "cloud CSV needs x, y and z columns"));
    };
    let ip = col("p");
    let feat: Vec<usize> = (0..headers.len())
        .filter(|&i| ![Some(ix), Some(iy), Some(iz), ip].contains(&Some(i)))
        .collect();
    let mut points = Vec::new();
    let mut cloud = ip.map(|_| LiftedFeatureCloud::new(feat.len()));
    let mut row = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, e))?;
        row.clear();
        for f in rec.iter() {
            row.push(
                f.parse::<f64>()
                    .map_err(|e| Error::parse(path, format!("record {}: {e}", line + 1)))?,
            );
        }
        let p = [row[ix], row[iy], row[iz]];
        points.push(p);
        if let (Some(c), Some(ip)) = (cloud.as_mut(), ip) {
            let f: Vec<f64> = feat.iter().map(|&i| row[i]).collect();
            c.push(p, row[ip], &f)?;
        }
    }
    Ok((points, cloud))
}

/// Reads per-pixel depth hypotheses. Columns `u`, `v`, `d` and `p` are
/// required, further columns are feature channels. Consecutive rows with the
/// same pixel are grouped; the first row of a group supplies the features.
pub fn read_pixels_csv(path: &Path) -> Result<Vec<PixelDepths>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::parse(path, e))?;
    let headers = rdr.headers().map_err(|e| Error::parse(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(iu), Some(iv), Some(id), Some(ip)) = (col("u"), col("v"), col("d"), col("p")) else {
        return Err(Error::parse(path, "pixel CSV needs u, v, d and p columns"));
    };
    let feat: Vec<usize> = (0..headers.len()).filter(|i| ![iu, iv, id, ip].contains(i)).collect();
    let mut pixels: Vec<PixelDepths> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, e))?;
        let row: Vec<f64> = rec
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, format!("record {}: {e}", line + 1)))?;
        let (u, v) = (row[iu], row[iv]);
        match pixels.last_mut() {
            Some(px) if px.u == u && px.v == v => {
                px.depths.push(row[id]);
                px.probs.push(row[ip]);
            }
            _ => pixels.push(PixelDepths {
                u,
                v,
                depths: vec![row[id]],
                probs: vec![row[ip]],
                feature: feat.iter().map(|&i| row[i]).collect(),
            }),
        }
    }
    Ok(pixels)
}
