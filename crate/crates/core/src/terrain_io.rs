//! Grid files: a JSON header next to one raw little-endian `f32` blob per
//! layer (row-major, row 0 first), plus a CSV import for small hand-written
//! height grids.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, read_to_string, write_atomic, write_string_atomic};
use crate::terrain::{
    BoundsPolicy, GridSpec, Layer, TerrainGrid, DEFAULT_DAMPING, DEFAULT_FRICTION, DEFAULT_STIFFNESS,
};

pub const GRID_FORMAT: &str = "tracksim-grid";
pub const GRID_DTYPE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    /// Blob path, relative to the header's directory.
    pub file: String,
    /// Unit of the stored values, informational.
    #[serde(default)]
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub format: String,
    pub version: u32,
    #[serde(flatten)]
    pub spec: GridSpec,
    pub dtype: String,
    #[serde(default)]
    pub bounds_policy: BoundsPolicy,
    pub layers: Vec<LayerEntry>,
}

fn unit_of(layer: Layer) -> &'static str {
    match layer {
        Layer::Geometric | Layer::Support | Layer::SoftDepth => "m",
        Layer::Stiffness => "N/m",
        Layer::Damping => "N*s/m",
        Layer::Friction => "1",
    }
}

fn blob_name(header: &Path, layer: &str) -> Result<String> {
    let stem = header
        .file_stem()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", header.display())))?;
    Ok(format!("{}.{layer}.f32", stem.to_string_lossy()))
}

fn sibling(header: &Path, file: &str) -> PathBuf {
    header.parent().map_or_else(|| PathBuf::from(file), |d| d.join(file))
}

/// Writes arbitrary named grid-shaped arrays (e.g. gradients) in the grid
/// format.
pub fn save_layers(path: impl AsRef<Path>, spec: &GridSpec, layers: &[(&str, &str, &[f64])]) -> Result<()> {
    let path = path.as_ref();
    let mut entries = Vec::with_capacity(layers.len());
    for (name, unit, values) in layers {
        if values.len() != spec.len() {
            return Err(Error::Shape(format!(
                "layer {name} has {} values, grid has {} cells",
                values.len(),
                spec.len()
            )));
        }
        let file = blob_name(path, name)?;
        write_atomic(&sibling(path, &file), |w| {
            for v in values.iter() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
            Ok(())
        })?;
        entries.push(LayerEntry {
            name: name.to_string(),
            file,
            unit: unit.to_string(),
        });
    }
    save_header(path, spec, BoundsPolicy::default(), entries)
}

fn save_header(path: &Path, spec: &GridSpec, policy: BoundsPolicy, layers: Vec<LayerEntry>) -> Result<()> {
    let header = GridHeader {
        format: GRID_FORMAT.into(),
        version: 1,
        spec: *spec,
        dtype: GRID_DTYPE.into(),
        bounds_policy: policy,
        layers,
    };
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::parse(path, e))?;
    write_string_atomic(path, &text)
}

impl TerrainGrid {
    /// Saves every layer except the derived supporting height.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let stored = [Layer::Geometric, Layer::SoftDepth, Layer::Stiffness, Layer::Damping, Layer::Friction];
        let layers: Vec<(&str, &str, &[f64])> = stored
            .iter()
            .map(|&l| (l.name(), unit_of(l), self.layer(l)))
            .collect();
        save_layers(path, self.spec(), &layers)?;
        // Rewrite the header with the grid's own bounds policy.
        let header: GridHeader = read_json(path)?;
        save_header(path, self.spec(), self.policy(), header.layers)
    }

    /// Loads a grid header and its blobs. A missing geometric layer is taken
    /// from `support`; missing material layers get the defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<TerrainGrid> {
        let path = path.as_ref();
        let header: GridHeader = read_json(path)?;
        if header.format != GRID_FORMAT {
            return Err(Error::parse(path, format!("unexpected format {:?}", header.format)));
        }
        if header.dtype != GRID_DTYPE {
            return Err(Error::parse(path, format!("unsupported dtype {:?}", header.dtype)));
        }
        header.spec.validate()?;
        let n = header.spec.len();
        let mut found: [Option<Vec<f64>>; 6] = Default::default();
        for entry in &header.layers {
            let layer = Layer::from_name(&entry.name)
                .ok_or_else(|| Error::parse(path, format!("unknown layer {:?}", entry.name)))?;
            let blob_path = sibling(path, &entry.file);
            let bytes = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
            if bytes.len() != 4 * n {
                return Err(Error::parse(
                    &blob_path,
                    format!("expected {} bytes for {n} cells, found {}", 4 * n, bytes.len()),
                ));
            }
            let values = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            found[layer as usize] = Some(values);
        }
        let take = |l: Layer, found: &mut [Option<Vec<f64>>; 6]| found[l as usize].take();
        let support = take(Layer::Support, &mut found);
        let geom = take(Layer::Geometric, &mut found);
        let soft = take(Layer::SoftDepth, &mut found);
        let (geom, soft) = match (geom, support, soft) {
            (Some(g), _, Some(d)) => (g, d),
            (Some(g), Some(s), None) => {
                let d = g.iter().zip(&s).map(|(g, s)| g - s).collect();
                (g, d)
            }
            (Some(g), None, None) => (g, vec![0.0; n]),
            (None, Some(s), d) => {
                let d = d.unwrap_or_else(|| vec![0.0; n]);
                let g = s.iter().zip(&d).map(|(s, d)| s + d).collect();
                (g, d)
            }
            (None, None, _) => return Err(Error::parse(path, "grid has no height layer")),
        };
        let or = |v: Option<Vec<f64>>, d: f64| v.unwrap_or_else(|| vec![d; n]);
        TerrainGrid::from_layers(
            header.spec,
            geom,
            soft,
            or(take(Layer::Stiffness, &mut found), DEFAULT_STIFFNESS),
            or(take(Layer::Damping, &mut found), DEFAULT_DAMPING),
            or(take(Layer::Friction, &mut found), DEFAULT_FRICTION),
        )
        .map(|g| g.with_policy(header.bounds_policy))
    }

    /// Rigid heights from a CSV table: one grid row per line (row 0 first,
    /// i.e. lowest y), comma-separated values in metres. Lines starting with
    /// `#` are skipped.
    pub fn from_csv(path: impl AsRef<Path>, origin_xy: [f64; 2], resolution: f64) -> Result<TerrainGrid> {
        let path = path.as_ref();
        let text = read_to_string(path)?;
        Self::parse_csv(&text, path, origin_xy, resolution)
    }

    pub fn parse_csv(text: &str, origin: &Path, origin_xy: [f64; 2], resolution: f64) -> Result<TerrainGrid> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(origin, format!("line {}: {e}", i + 1)))?;
            if let Some(first) = rows.first() {
                if row.len() != first.len() {
                    return Err(Error::parse(
                        origin,
                        format!("line {}: {} values, expected {}", i + 1, row.len(), first.len()),
                    ));
                }
            }
            rows.push(row);
        }
        let cols = rows.first().map_or(0, Vec::len);
        let spec = GridSpec::new(origin_xy, resolution, rows.len(), cols)?;
        TerrainGrid::from_support_heights(spec, rows.concat())
    }
}
