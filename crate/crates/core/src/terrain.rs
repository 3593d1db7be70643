//! Layered terrain grids and continuous surface queries.
//!
//! Values live at cell centres. Cell `(row, col)` is centred at
//! `origin + (col, row) * resolution`, so columns run along world x and rows
//! along world y; storage is row-major. Queries interpolate bilinearly
//! between the four surrounding centres, which makes every layer continuous
//! and exact at the nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::real::Real;

/// Heights are kept inside `[-HEIGHT_LIMIT, HEIGHT_LIMIT]` metres.
pub const HEIGHT_LIMIT: f64 = 1.0;
pub const DEFAULT_STIFFNESS: f64 = 1000.0;
pub const DEFAULT_DAMPING: f64 = 50.0;
pub const DEFAULT_FRICTION: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// World coordinates of the centre of cell (0, 0).
    pub origin_xy: [f64; 2],
    pub resolution: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn new(origin_xy: [f64; 2], resolution: f64, rows: usize, cols: usize) -> Result<Self> {
        let spec = GridSpec {
            origin_xy,
            resolution,
            rows,
            cols,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Square grid of `n × n` cells centred on the world origin.
    pub fn centered(n: usize, resolution: f64) -> Result<Self> {
        let half = (n as f64 - 1.0) * resolution / 2.0;
        Self::new([-half, -half], resolution, n, n)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::Config(format!("resolution must be positive, got {}", self.resolution)));
        }
        if self.rows < 2 || self.cols < 2 {
            return Err(Error::Config(format!(
                "grid needs at least 2×2 cells, got {}×{}",
                self.rows, self.cols
            )));
        }
        if !(self.origin_xy[0].is_finite() && self.origin_xy[1].is_finite()) {
            return Err(Error::Config("grid origin must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.origin_xy[0] + col as f64 * self.resolution,
            self.origin_xy[1] + row as f64 * self.resolution,
        ]
    }

    /// Interpolation domain: the rectangle spanned by the outer cell centres.
    pub fn extent(&self) -> ([f64; 2], [f64; 2]) {
        (
            self.origin_xy,
            [
                self.origin_xy[0] + (self.cols - 1) as f64 * self.resolution,
                self.origin_xy[1] + (self.rows - 1) as f64 * self.resolution,
            ],
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (lo, hi) = self.extent();
        x >= lo[0] && x <= hi[0] && y >= lo[1] && y <= hi[1]
    }

    /// The cell whose footprint (half a cell around its centre) holds `(x, y)`.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.origin_xy[0]) / self.resolution).round();
        let r = ((y - self.origin_xy[1]) / self.resolution).round();
        if c < 0.0 || r < 0.0 || c >= self.cols as f64 || r >= self.rows as f64 || c.is_nan() || r.is_nan() {
            return None;
        }
        Some((r as usize, c as usize))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    /// Visible surface height, vegetation included.
    Geometric,
    /// Load-bearing height used for contact.
    Support,
    /// Thickness of the soft layer between the two.
    SoftDepth,
    Stiffness,
    Damping,
    Friction,
}

impl Layer {
    pub const ALL: [Layer; 6] = [
        Layer::Geometric,
        Layer::Support,
        Layer::SoftDepth,
        Layer::Stiffness,
        Layer::Damping,
        Layer::Friction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Layer::Geometric => "geometric",
            Layer::Support => "support",
            Layer::SoftDepth => "soft_depth",
            Layer::Stiffness => "stiffness",
            Layer::Damping => "damping",
            Layer::Friction => "friction",
        }
    }

    pub fn from_name(s: &str) -> Option<Layer> {
        Layer::ALL.into_iter().find(|l| l.name() == s)
    }
}

/// What a query outside the grid extent does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundsPolicy {
    /// Clamp the query onto the border, which continues the border cells
    /// with zero slope.
    #[default]
    Clamp,
    Error,
}

/// Surface properties at a query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TerrainSample {
    pub height: f64,
    pub normal: [f64; 3],
    pub stiffness: f64,
    pub damping: f64,
    pub friction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerrainGrid {
    spec: GridSpec,
    h_geom: Vec<f64>,
    h_support: Vec<f64>,
    delta_h: Vec<f64>,
    stiffness: Vec<f64>,
    damping: Vec<f64>,
    friction: Vec<f64>,
    policy: BoundsPolicy,
}

impl TerrainGrid {
    /// Flat ground at height zero with default material constants.
    pub fn flat(spec: GridSpec) -> Result<Self> {
        Self::from_support_heights(spec, vec![0.0; spec.len()])
    }

    /// Rigid terrain (no soft layer) with default material constants.
    pub fn from_support_heights(spec: GridSpec, heights: Vec<f64>) -> Result<Self> {
        let n = spec.len();
        Self::from_layers(
            spec,
            heights,
            vec![0.0; n],
            vec![DEFAULT_STIFFNESS; n],
            vec![DEFAULT_DAMPING; n],
            vec![DEFAULT_FRICTION; n],
        )
    }

    /// Builds a grid from the geometric height and soft-layer thickness; the
    /// supporting height is derived as `h_geom - delta_h`. Heights are
    /// clamped into the admissible range.
    pub fn from_layers(
        spec: GridSpec,
        h_geom: Vec<f64>,
        delta_h: Vec<f64>,
        stiffness: Vec<f64>,
        damping: Vec<f64>,
        friction: Vec<f64>,
    ) -> Result<Self> {
        spec.validate()?;
        let n = spec.len();
        for (name, layer) in [
            ("geometric", &h_geom),
            ("soft_depth", &delta_h),
            ("stiffness", &stiffness),
            ("damping", &damping),
            ("friction", &friction),
        ] {
            if layer.len() != n {
                return Err(Error::Shape(format!(
                    "layer {name} has {} values, grid has {n} cells",
                    layer.len()
                )));
            }
            if let Some(i) = layer.iter().position(|v| !v.is_finite()) {
                return Err(Error::Config(format!("layer {name} has a non-finite value at cell {i}")));
            }
        }
        for (name, layer) in [("stiffness", &stiffness), ("damping", &damping), ("friction", &friction)] {
            if let Some(i) = layer.iter().position(|&v| v < 0.0) {
                return Err(Error::Config(format!("layer {name} is negative at cell {i}")));
            }
        }
        let h_support = h_geom.iter().zip(&delta_h).map(|(g, d)| g - d).collect();
        let grid = TerrainGrid {
            spec,
            h_geom,
            h_support,
            delta_h,
            stiffness,
            damping,
            friction,
            policy: BoundsPolicy::Clamp,
        };
        Ok(grid.clamp_heights())
    }

    pub fn with_policy(mut self, policy: BoundsPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_uniform(mut self, layer: Layer, value: f64) -> Result<Self> {
        let n = self.spec.len();
        self.set_layer(layer, vec![value; n])?;
        Ok(self)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn policy(&self) -> BoundsPolicy {
        self.policy
    }

    pub fn layer(&self, layer: Layer) -> &[f64] {
        match layer {
            Layer::Geometric => &self.h_geom,
            Layer::Support => &self.h_support,
            Layer::SoftDepth => &self.delta_h,
            Layer::Stiffness => &self.stiffness,
            Layer::Damping => &self.damping,
            Layer::Friction => &self.friction,
        }
    }

    /// Replaces one layer. Height layers keep `support = geometric - soft`
    /// by adjusting the geometric height (for `Support` and `SoftDepth`) or
    /// the support height (for `Geometric`).
    pub fn set_layer(&mut self, layer: Layer, values: Vec<f64>) -> Result<()> {
        if values.len() != self.spec.len() {
            return Err(Error::Shape(format!(
                "layer {} needs {} values, got {}",
                layer.name(),
                self.spec.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("layer {} has non-finite values", layer.name())));
        }
        match layer {
            Layer::Geometric => {
                self.h_geom = values;
                self.h_support = self.h_geom.iter().zip(&self.delta_h).map(|(g, d)| g - d).collect();
            }
            Layer::Support => {
                self.h_support = values;
                self.h_geom = self.h_support.iter().zip(&self.delta_h).map(|(s, d)| s + d).collect();
            }
            Layer::SoftDepth => {
                self.delta_h = values;
                self.h_geom = self.h_support.iter().zip(&self.delta_h).map(|(s, d)| s + d).collect();
            }
            Layer::Stiffness | Layer::Damping | Layer::Friction => {
                if values.iter().any(|&v| v < 0.0) {
                    return Err(Error::Config(format!("layer {} must be non-negative", layer.name())));
                }
                match layer {
                    Layer::Stiffness => self.stiffness = values,
                    Layer::Damping => self.damping = values,
                    _ => self.friction = values,
                }
            }
        }
        *self = std::mem::replace(self, Self::placeholder()).clamp_heights();
        Ok(())
    }

    fn placeholder() -> Self {
        TerrainGrid {
            spec: GridSpec {
                origin_xy: [0.0, 0.0],
                resolution: 1.0,
                rows: 0,
                cols: 0,
            },
            h_geom: Vec::new(),
            h_support: Vec::new(),
            delta_h: Vec::new(),
            stiffness: Vec::new(),
            damping: Vec::new(),
            friction: Vec::new(),
            policy: BoundsPolicy::Clamp,
        }
    }

    /// Clips both height layers into `[-1, 1]` m and re-derives the soft
    /// layer thickness from them. Material layers are untouched.
    pub fn clamp_heights(mut self) -> Self {
        let clip = |v: &mut f64| *v = v.clamp(-HEIGHT_LIMIT, HEIGHT_LIMIT);
        self.h_geom.iter_mut().for_each(clip);
        self.h_support.iter_mut().for_each(clip);
        for ((d, g), s) in self.delta_h.iter_mut().zip(&self.h_geom).zip(&self.h_support) {
            *d = g - s;
        }
        self
    }

    /// Bilinear value of `layer` at world `(x, y)`.
    pub fn sample_at(&self, layer: Layer, x: f64, y: f64) -> Result<f64> {
        let st = stencil(&self.spec, self.policy, x, y)?;
        Ok(st.interpolate(self.layer(layer)))
    }

    /// Height, unit normal and material values at `(x, y)` on the surface
    /// given by `height_layer`.
    pub fn surface_sample(&self, height_layer: Layer, x: f64, y: f64) -> Result<TerrainSample> {
        let heights = self.layer(height_layer);
        let st = stencil(&self.spec, self.policy, x, y)?;
        let normal = surface_normal(&self.spec, heights, x, y);
        Ok(TerrainSample {
            height: st.interpolate(heights),
            normal: normal.value(),
            stiffness: st.interpolate(&self.stiffness),
            damping: st.interpolate(&self.damping),
            friction: st.interpolate(&self.friction),
        })
    }

    /// Contact view used by the engine: support heights and materials in
    /// scalar type `R`.
    pub fn contact_field<R: Real>(&self) -> ContactField<R> {
        let conv = |v: &[f64]| v.iter().map(|&x| R::from_f64(x)).collect();
        ContactField {
            spec: self.spec,
            policy: self.policy,
            support: conv(&self.h_support),
            stiffness: conv(&self.stiffness),
            damping: conv(&self.damping),
            friction: conv(&self.friction),
        }
    }
}

/// Interpolation stencil: the lower-left corner index and fractional
/// offsets inside the cell.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil<R> {
    base: usize,
    cols: usize,
    tx: R,
    ty: R,
}

impl<R: Real> Stencil<R> {
    #[inline(always)]
    pub(crate) fn interpolate(&self, values: &[R]) -> R {
        let c = self.cols;
        let v = &values[self.base..self.base + c + 2];
        R::bilerp(v[0], v[1], v[c], v[c + 1], self.tx, self.ty)
    }
}

impl Stencil<f64> {
    /// Bilinear weights of the four corners, in the order
    /// `(base, base + 1, base + cols, base + cols + 1)`.
    #[cfg(test)]
    pub(crate) fn weights(&self) -> [(usize, f64); 4] {
        let (x, y) = (self.tx, self.ty);
        let b = self.base;
        let c = self.cols;
        [
            (b, (1.0 - x) * (1.0 - y)),
            (b + 1, x * (1.0 - y)),
            (b + c, (1.0 - x) * y),
            (b + c + 1, x * y),
        ]
    }
}

#[inline(always)]
pub(crate) fn stencil<R: Real>(spec: &GridSpec, policy: BoundsPolicy, x: R, y: R) -> Result<Stencil<R>> {
    let (gx, gy) = grid_coords(spec, x, y);
    let (maxc, maxr) = ((spec.cols - 1) as f64, (spec.rows - 1) as f64);
    let (vx, vy) = (gx.value(), gy.value());
    if !(vx.is_finite() && vy.is_finite()) {
        return Err(Error::OutOfBounds {
            x: x.value(),
            y: y.value(),
        });
    }
    if policy == BoundsPolicy::Error && (vx < 0.0 || vy < 0.0 || vx > maxc || vy > maxr) {
        return Err(Error::OutOfBounds {
            x: x.value(),
            y: y.value(),
        });
    }
    Ok(clamped_stencil(spec, gx, gy))
}

/// Continuous grid coordinates: column and row measured in cells from the
/// first centre.
#[inline(always)]
fn grid_coords<R: Real>(spec: &GridSpec, x: R, y: R) -> (R, R) {
    let inv = 1.0 / spec.resolution;
    let gx = (x - R::from_f64(spec.origin_xy[0])).scale(inv);
    let gy = (y - R::from_f64(spec.origin_xy[1])).scale(inv);
    (gx, gy)
}

/// Stencil at finite grid coordinates, clamped onto the grid.
#[inline(always)]
fn clamped_stencil<R: Real>(spec: &GridSpec, gx: R, gy: R) -> Stencil<R> {
    let gx = gx.clamp_const(0.0, (spec.cols - 1) as f64);
    let gy = gy.clamp_const(0.0, (spec.rows - 1) as f64);
    // Clamped coordinates are non-negative, so truncation is the floor.
    let c0 = (gx.value() as i32 as usize).min(spec.cols - 2);
    let r0 = (gy.value() as i32 as usize).min(spec.rows - 2);
    Stencil {
        base: r0 * spec.cols + c0,
        cols: spec.cols,
        tx: gx - R::from_f64(c0 as f64),
        ty: gy - R::from_f64(r0 as f64),
    }
}

/// Unit normal `normalize([-∂h/∂x, -∂h/∂y, 1])` with slopes from central
/// differences of the interpolated surface, one cell either side. Offsets
/// that leave the grid are clamped onto the border, so the estimate never
/// fails.
#[inline(always)]
pub(crate) fn surface_normal<R: Real>(spec: &GridSpec, heights: &[R], x: R, y: R) -> Vec3<R> {
    let (gx, gy) = grid_coords(spec, x, y);
    let one = R::one();
    let at = |px: R, py: R| clamped_stencil(spec, px, py).interpolate(heights);
    let inv_2d = 0.5 / spec.resolution;
    let sx = (at(gx + one, gy) - at(gx - one, gy)).scale(inv_2d);
    let sy = (at(gx, gy + one) - at(gx, gy - one)).scale(inv_2d);
    let n = Vec3::new(-sx, -sy, R::one());
    n.scale(R::one() / n.norm())
}

/// Terrain quantities at a contact query, in scalar type `R`.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceSample<R> {
    pub height: R,
    pub normal: Vec3<R>,
    pub stiffness: R,
    pub damping: R,
    pub friction: R,
}

/// The layers the contact model reads, converted to the engine's scalar.
#[derive(Debug, Clone)]
pub struct ContactField<R> {
    pub spec: GridSpec,
    pub policy: BoundsPolicy,
    pub support: Vec<R>,
    pub stiffness: Vec<R>,
    pub damping: Vec<R>,
    pub friction: Vec<R>,
}

impl<R: Real> ContactField<R> {
    #[inline(always)]
    pub fn surface(&self, x: R, y: R) -> Result<SurfaceSample<R>> {
        let g = self.geometry(x, y)?;
        Ok(self.complete(g))
    }

    /// Height and normal only; [`ContactField::complete`] adds materials.
    #[inline(always)]
    pub fn geometry(&self, x: R, y: R) -> Result<SurfaceGeometry<R>> {
        let st = stencil(&self.spec, self.policy, x, y)?;
        Ok(SurfaceGeometry {
            stencil: st,
            height: st.interpolate(&self.support),
            normal: surface_normal(&self.spec, &self.support, x, y),
        })
    }

    #[inline(always)]
    pub fn complete(&self, g: SurfaceGeometry<R>) -> SurfaceSample<R> {
        let st = g.stencil;
        SurfaceSample {
            height: g.height,
            normal: g.normal,
            stiffness: st.interpolate(&self.stiffness),
            damping: st.interpolate(&self.damping),
            friction: st.interpolate(&self.friction),
        }
    }
}

/// Surface height and normal at a query, plus the stencil for the material
/// layers.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceGeometry<R> {
    stencil: Stencil<R>,
    pub height: R,
    pub normal: Vec3<R>,
}

impl<R: Real> SurfaceGeometry<R> {
    /// True when the point is on or above the surface and not approaching
    /// it: the normal force is then exactly zero for any non-negative
    /// stiffness and damping.
    #[inline(always)]
    pub fn separating(&self, z: R, vel: &Vec3<R>) -> bool {
        (self.height - z).value() <= 0.0 && vel.dot(&self.normal).value() >= 0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Var};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_with(spec: GridSpec, f: impl Fn(f64, f64) -> f64) -> TerrainGrid {
        let mut h = vec![0.0; spec.len()];
        for r in 0..spec.rows {
            for c in 0..spec.cols {
                let [x, y] = spec.cell_center(r, c);
                h[spec.index(r, c)] = f(x, y);
            }
        }
        TerrainGrid::from_support_heights(spec, h).unwrap()
    }

    /// Independent four-corner oracle: locate the enclosing centres directly
    /// and weight them by the opposite sub-rectangle areas.
    fn four_corner_oracle(spec: &GridSpec, values: &[f64], x: f64, y: f64) -> f64 {
        let res = spec.resolution;
        let mut acc = 0.0;
        for r in 0..spec.rows {
            for c in 0..spec.cols {
                let [cx, cy] = spec.cell_center(r, c);
                let wx = 1.0 - (x - cx).abs() / res;
                let wy = 1.0 - (y - cy).abs() / res;
                if wx > 0.0 && wy > 0.0 {
                    acc += wx * wy * values[spec.index(r, c)];
                }
            }
        }
        acc
    }

    #[test]
    fn grid_spec_validation() {
        assert!(GridSpec::new([0.0, 0.0], 0.0, 4, 4).is_err());
        assert!(GridSpec::new([0.0, 0.0], 0.1, 1, 4).is_err());
        assert!(GridSpec::new([0.0, 0.0], 0.1, 2, 2).is_ok());
    }

    #[test]
    fn exact_at_cell_centres() {
        let spec = GridSpec::new([0.0, 0.0], 0.1, 4, 5).unwrap();
        let mut g = TerrainGrid::flat(spec).unwrap();
        let mut f = vec![0.5; spec.len()];
        f[spec.index(2, 3)] = 0.37;
        g.set_layer(Layer::Friction, f).unwrap();
        let [x, y] = spec.cell_center(2, 3);
        // 0.1 is not representable, so the centre itself carries an ulp
        assert!((g.sample_at(Layer::Friction, x, y).unwrap() - 0.37).abs() <= 1e-15);

        let spec = GridSpec::new([-1.0, 0.5], 0.25, 4, 5).unwrap();
        let mut f = vec![0.5; spec.len()];
        f[spec.index(2, 3)] = 0.37;
        let mut g = TerrainGrid::flat(spec).unwrap();
        g.set_layer(Layer::Friction, f).unwrap();
        let [x, y] = spec.cell_center(2, 3);
        assert_eq!(g.sample_at(Layer::Friction, x, y).unwrap(), 0.37);
    }

    #[test]
    fn midpoint_between_two_cells() {
        let spec = GridSpec::new([0.0, 0.0], 1.0, 2, 2).unwrap();
        let g = TerrainGrid::from_support_heights(spec, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(g.sample_at(Layer::Support, 0.5, 0.0).unwrap(), 0.5);
        assert_eq!(g.sample_at(Layer::Support, 0.5, 1.0).unwrap(), 0.5);
    }

    #[test]
    fn random_queries_match_four_corner_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = GridSpec::new([-0.3, 1.1], 0.1, 16, 16).unwrap();
        let h: Vec<f64> = (0..spec.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = TerrainGrid::from_support_heights(spec, h.clone()).unwrap();
        let (lo, hi) = spec.extent();
        for _ in 0..100 {
            let x = rng.random_range(lo[0]..hi[0]);
            let y = rng.random_range(lo[1]..hi[1]);
            let got = g.sample_at(Layer::Support, x, y).unwrap();
            let want = four_corner_oracle(&spec, &h, x, y);
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn flat_normal_points_up() {
        let g = TerrainGrid::flat(GridSpec::centered(8, 0.1).unwrap()).unwrap();
        let s = g.surface_sample(Layer::Support, 0.05, -0.12).unwrap();
        assert_eq!(s.normal, [0.0, 0.0, 1.0]);
        assert_eq!(s.stiffness, DEFAULT_STIFFNESS);
    }

    #[test]
    fn inclined_plane_normal() {
        let t = 30f64.to_radians().tan();
        // keep the plane inside the ±1 m height range
        let spec = GridSpec::centered(16, 0.1).unwrap();
        let g = grid_with(spec, |x, _| x * t);
        let s = g.surface_sample(Layer::Support, 0.02, 0.03).unwrap();
        let want = [-0.5, 0.0, 3f64.sqrt() / 2.0];
        for (a, b) in s.normal.iter().zip(want) {
            assert!((a - b).abs() < 1e-3, "{:?}", s.normal);
        }
    }

    #[test]
    fn clamp_heights_bounds() {
        let spec = GridSpec::new([0.0, 0.0], 0.1, 2, 2).unwrap();
        let g = TerrainGrid::from_support_heights(spec, vec![1.7, -0.3, 0.0, -4.0]).unwrap();
        assert_eq!(g.layer(Layer::Support), &[1.0, -0.3, 0.0, -1.0]);
        assert_eq!(g.layer(Layer::Geometric), &[1.0, -0.3, 0.0, -1.0]);
        let zero = TerrainGrid::flat(spec).unwrap();
        assert_eq!(zero.clone().clamp_heights(), zero);
    }

    #[test]
    fn soft_layer_invariant() {
        let spec = GridSpec::new([0.0, 0.0], 0.1, 2, 2).unwrap();
        let n = spec.len();
        let g = TerrainGrid::from_layers(
            spec,
            vec![0.4, 0.2, 0.0, 0.1],
            vec![0.1, 0.0, 0.05, 0.3],
            vec![1000.0; n],
            vec![50.0; n],
            vec![0.8; n],
        )
        .unwrap();
        for i in 0..n {
            let (geo, sup, soft) = (g.layer(Layer::Geometric)[i], g.layer(Layer::Support)[i], g.layer(Layer::SoftDepth)[i]);
            assert!((sup - (geo - soft)).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_bounds_policies() {
        let spec = GridSpec::new([0.0, 0.0], 0.1, 4, 4).unwrap();
        let g = grid_with(spec, |x, y| x + y);
        let strict = g.clone().with_policy(BoundsPolicy::Error);
        assert!(matches!(strict.sample_at(Layer::Support, -0.5, 0.1), Err(Error::OutOfBounds { .. })));
        let border = g.sample_at(Layer::Support, 0.0, 0.1).unwrap();
        assert_eq!(g.sample_at(Layer::Support, -0.5, 0.1).unwrap(), border);
        assert!(g.sample_at(Layer::Support, f64::NAN, 0.1).is_err());
    }

    #[test]
    fn negative_material_rejected() {
        let spec = GridSpec::new([0.0, 0.0], 0.1, 2, 2).unwrap();
        let mut g = TerrainGrid::flat(spec).unwrap();
        assert!(g.set_layer(Layer::Friction, vec![0.5, -0.1, 0.5, 0.5]).is_err());
        assert!(g.set_layer(Layer::Damping, vec![0.5; 3]).is_err());
    }

    #[test]
    fn corner_gradients_equal_bilinear_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = GridSpec::new([0.0, 0.0], 0.1, 6, 6).unwrap();
        let h: Vec<f64> = (0..spec.len()).map(|_| rng.random_range(-0.5..0.5)).collect();
        for _ in 0..20 {
            let (x, y) = (rng.random_range(0.01..0.49), rng.random_range(0.01..0.49));
            let tape = Tape::new();
            let leaves: Vec<Var> = h.iter().map(|&v| tape.var(v)).collect();
            let st = stencil(&spec, BoundsPolicy::Clamp, Var::constant(x), Var::constant(y)).unwrap();
            let out = st.interpolate(&leaves);
            let grads = tape.backward(out).unwrap();
            let plain = stencil(&spec, BoundsPolicy::Clamp, x, y).unwrap();
            let mut touched = 0;
            for (idx, w) in plain.weights() {
                // central finite difference on the cell value
                let eps = 1e-6;
                let mut hp = h.clone();
                hp[idx] += eps;
                let mut hm = h.clone();
                hm[idx] -= eps;
                let fd = (plain.interpolate(&hp) - plain.interpolate(&hm)) / (2.0 * eps);
                let g = grads.wrt(leaves[idx]);
                assert!((g - w).abs() <= 1e-15);
                assert!((g - fd).abs() <= 1e-6 * g.abs().max(1e-3), "{g} vs {fd}");
                touched += 1;
            }
            assert_eq!(touched, 4);
            let nonzero = leaves.iter().filter(|&&l| grads.wrt(l) != 0.0).count();
            assert!(nonzero <= 4);
        }
    }

    proptest! {
        #[test]
        fn normals_are_unit_with_positive_z(seed in 0u64..1000, qx in 0.0f64..1.0, qy in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = GridSpec::new([0.0, 0.0], 0.1, 8, 8).unwrap();
            let h: Vec<f64> = (0..spec.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = TerrainGrid::from_support_heights(spec, h).unwrap();
            let s = g.surface_sample(Layer::Support, qx * 0.7, qy * 0.7).unwrap();
            let n = s.normal;
            let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-9);
            prop_assert!(n[2] > 0.0);
        }

        #[test]
        fn sampling_is_lipschitz(seed in 0u64..1000, qx in 0.0f64..0.69, qy in 0.0f64..0.69, dx in -1e-3f64..1e-3, dy in -1e-3f64..1e-3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = GridSpec::new([0.0, 0.0], 0.1, 8, 8).unwrap();
            let h: Vec<f64> = (0..spec.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut lmax = 0.0f64;
            for r in 0..spec.rows {
                for c in 0..spec.cols {
                    if c + 1 < spec.cols { lmax = lmax.max((h[spec.index(r, c + 1)] - h[spec.index(r, c)]).abs()); }
                    if r + 1 < spec.rows { lmax = lmax.max((h[spec.index(r + 1, c)] - h[spec.index(r, c)]).abs()); }
                }
            }
            let g = TerrainGrid::from_support_heights(spec, h).unwrap();
            let a = g.sample_at(Layer::Support, qx, qy).unwrap();
            let b = g.sample_at(Layer::Support, qx + dx, qy + dy).unwrap();
            let eps = (dx * dx + dy * dy).sqrt();
            // the bound holds per axis; the diagonal step needs the ℓ1 length
            prop_assert!((a - b).abs() <= lmax / spec.resolution * (dx.abs() + dy.abs()) + 1e-12, "eps {eps}");
        }
    }
}
