//! Differentiable physics for tracked robots on heightmap terrain.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod batch;
pub mod dynamics;
pub mod error;
pub mod geom;
pub mod identify;
pub mod io;
pub mod liftsplat;
pub mod losses;
pub mod real;
pub mod robot;
pub mod scenario;
pub mod shooting;
pub mod terrain;
pub mod terrain_io;
pub mod trajectory;

pub use error::{Error, Result};
pub use geom::{Mat3, Vec3};
pub use real::Real;
pub use trajectory::{RigidState, Trajectory};
