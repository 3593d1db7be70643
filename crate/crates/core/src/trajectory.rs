//! Rollout results and their file formats.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{Mat3, Vec3};
use crate::real::Real;

/// Pose and velocities of the rigid body. `rot` maps body to world;
/// `omega` is expressed in the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidState<R> {
    pub pos: Vec3<R>,
    pub vel: Vec3<R>,
    pub rot: Mat3<R>,
    pub omega: Vec3<R>,
}

impl<R: Real> RigidState<R> {
    pub fn value(&self) -> RigidState<f64> {
        RigidState {
            pos: Vec3::from_f64(self.pos.value()),
            vel: Vec3::from_f64(self.vel.value()),
            rot: Mat3::from_f64(self.rot.value()),
            omega: Vec3::from_f64(self.omega.value()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pos.is_finite() && self.vel.is_finite() && self.rot.is_finite() && self.omega.is_finite()
    }
}

impl RigidState<f64> {
    /// At rest at `pos`, heading `yaw` about world z.
    pub fn at_rest(pos: [f64; 3], yaw: f64) -> Self {
        RigidState {
            pos: Vec3::from_f64(pos),
            vel: Vec3::ZERO,
            rot: Mat3::from_yaw(yaw),
            omega: Vec3::ZERO,
        }
    }

    pub fn cast<R: Real>(&self) -> RigidState<R> {
        RigidState {
            pos: Vec3::from_f64(self.pos.to_array()),
            vel: Vec3::from_f64(self.vel.to_array()),
            rot: Mat3::from_f64(self.rot.m),
            omega: Vec3::from_f64(self.omega.to_array()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::Config("state has non-finite components".into()));
        }
        if self.rot.orthonormality_error() > 1e-6 || (self.rot.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::Config("state rotation is not a proper rotation".into()));
        }
        Ok(())
    }

    pub fn yaw(&self) -> f64 {
        self.rot.m[1][0].atan2(self.rot.m[0][0])
    }

    /// Flattened as `[x(3), v(3), R(9, row-major), ω(3)]`.
    pub fn to_flat(&self) -> [f64; 18] {
        let mut out = [0.0; 18];
        out[0..3].copy_from_slice(&self.pos.to_array());
        out[3..6].copy_from_slice(&self.vel.to_array());
        for i in 0..3 {
            out[6 + 3 * i..9 + 3 * i].copy_from_slice(&self.rot.m[i]);
        }
        out[15..18].copy_from_slice(&self.omega.to_array());
        out
    }
}

/// Per-point forces of one integration step, world frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointForces {
    pub normal: Vec<[f64; 3]>,
    pub friction: Vec<[f64; 3]>,
    pub total: Vec<[f64; 3]>,
    pub contact: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<RigidState<f64>>,
    /// Sum of the normal forces over all points, one entry per integration
    /// step (evaluated at `states[k]`, used to advance to `states[k + 1]`).
    pub normal_totals: Vec<[f64; 3]>,
    /// Full per-point forces, present only when requested.
    pub point_forces: Option<Vec<PointForces>>,
    /// Contacts where the forward axis was parallel to the terrain normal
    /// and friction was dropped.
    pub degenerate_tangents: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.states.iter().map(|s| s.pos.to_array())
    }

    pub fn last(&self) -> Option<&RigidState<f64>> {
        self.states.last()
    }

    /// Polyline length of the position track.
    pub fn path_length(&self) -> f64 {
        self.states
            .windows(2)
            .map(|w| (w[1].pos - w[0].pos).norm())
            .sum()
    }

    /// Linear interpolation of the position at time `t` (clamped to the
    /// covered range).
    pub fn position_at(&self, t: f64) -> Option<[f64; 3]> {
        if self.is_empty() {
            return None;
        }
        let k = self.times.partition_point(|&x| x <= t);
        if k == 0 {
            return Some(self.states[0].pos.to_array());
        }
        if k >= self.times.len() {
            return Some(self.states[self.len() - 1].pos.to_array());
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let a = (t - t0) / (t1 - t0);
        let (p0, p1) = (self.states[k - 1].pos, self.states[k].pos);
        Some((p0 + (p1 - p0).scale(a)).to_array())
    }

    pub const CSV_HEADER: &'static str =
        "t_s,x_m,y_m,z_m,qw,qx,qy,qz,vx_mps,vy_mps,vz_mps,wx_radps,wy_radps,wz_radps";

    /// Pose/velocity table: time, position, orientation quaternion
    /// `(w, x, y, z)`, world linear velocity and body angular velocity.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for (t, s) in self.times.iter().zip(&self.states) {
            let q = s.rot.to_quaternion();
            let p = s.pos;
            let v = s.vel;
            let o = s.omega;
            writeln!(
                w,
                "{t:.6},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                p.x, p.y, p.z, q[0], q[1], q[2], q[3], v.x, v.y, v.z, o.x, o.y, o.z
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        crate::io::write_atomic(path, |w| self.write_csv(w))
    }

    /// Reads a pose table written by [`Trajectory::write_csv`]. Forces are
    /// not part of the table.
    pub fn read_csv<R: Read>(r: R, origin: &Path) -> Result<Trajectory> {
        let mut out = Trajectory::default();
        for (lineno, line) in BufReader::new(r).lines().enumerate() {
            let line = line.map_err(|e| Error::io(origin, e))?;
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(origin, format!("line {}: {e}", lineno + 1)))?;
            if vals.len() != 14 {
                return Err(Error::parse(origin, format!("line {}: expected 14 columns", lineno + 1)));
            }
            out.times.push(vals[0]);
            out.states.push(RigidState {
                pos: Vec3::new(vals[1], vals[2], vals[3]),
                rot: Mat3::from_quaternion([vals[4], vals[5], vals[6], vals[7]]),
                vel: Vec3::new(vals[8], vals[9], vals[10]),
                omega: Vec3::new(vals[11], vals[12], vals[13]),
            });
        }
        if out.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::parse(origin, "times must be strictly increasing"));
        }
        Ok(out)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Trajectory> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(f, path)
    }

    const MAGIC: &'static [u8; 8] = b"TRKTRJ01";

    /// Binary dump with per-point forces. Layout, little-endian:
    /// magic `TRKTRJ01`, `u64` state count, `u64` point count (0 when forces
    /// were not recorded), then per state `t` and the 18 flattened state
    /// values as `f64`, then per step the normal, friction and total force
    /// of every point (`f64 × 3` each) followed by one contact byte per point.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&(self.states.len() as u64).to_le_bytes())?;
        let points = self
            .point_forces
            .as_ref()
            .and_then(|f| f.first())
            .map_or(0, |f| f.normal.len());
        w.write_all(&(points as u64).to_le_bytes())?;
        for (t, s) in self.times.iter().zip(&self.states) {
            w.write_all(&t.to_le_bytes())?;
            for v in s.to_flat() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        if let Some(forces) = &self.point_forces {
            w.write_all(&(forces.len() as u64).to_le_bytes())?;
            for f in forces {
                for set in [&f.normal, &f.friction, &f.total] {
                    for v in set.iter().flatten() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                let flags: Vec<u8> = f.contact.iter().map(|&c| c as u8).collect();
                w.write_all(&flags)?;
            }
        }
        Ok(())
    }

    pub fn save_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), |w| self.write_binary(w))
    }
}
