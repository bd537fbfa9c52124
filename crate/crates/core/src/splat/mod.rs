//! 3D Gaussian splat primitives, the differentiable CPU renderer, and
//! viewer-compatible PLY export.

mod render;
pub mod io;

pub use render::{render, render_gradients, render_with_stats, RenderStats, SplatGradients};

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// One anisotropic Gaussian primitive.
///
/// `scale` holds per-axis standard deviations in world units; `rotation` is a
/// unit quaternion in (w, x, y, z) order.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSplat {
    pub position: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl GaussianSplat {
    pub fn validate(&self) -> Result<()> {
        let n = quat_norm(&self.rotation);
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "splat quaternion must be unit length, |q| = {n}"
            )));
        }
        if !(self.scale.x > 0.0 && self.scale.y > 0.0 && self.scale.z > 0.0) {
            return Err(Error::Config(format!(
                "splat scale must be positive, got {:?}",
                self.scale
            )));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::Config(format!(
                "splat opacity must be in [0,1], got {}",
                self.opacity
            )));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config(format!(
                "splat color must be in [0,1]^3, got {:?}",
                self.color
            )));
        }
        Ok(())
    }
}

/// Ordered collection of splats.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplatCloud {
    pub splats: Vec<GaussianSplat>,
}

impl SplatCloud {
    pub fn new(splats: Vec<GaussianSplat>) -> Self {
        Self { splats }
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.splats.iter().try_for_each(GaussianSplat::validate)
    }
}

/// Forward-render output: rgb and accumulated alpha, both in [0,1].
#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub rgb: Array3<f64>,
    pub alpha: Array2<f64>,
}

impl RenderedImage {
    pub fn height(&self) -> usize {
        self.rgb.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.rgb.shape()[1]
    }
}

pub(crate) fn quat_norm(q: &[f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Rotation matrix of the normalized quaternion (w, x, y, z); a near-zero
/// quaternion falls back to the identity rotation.
pub fn quat_to_rotation(q: &[f64; 4]) -> Matrix3<f64> {
    let n = quat_norm(q);
    if n < 1e-12 {
        return Matrix3::identity();
    }
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// World-space covariance Σ = R(q)·diag(s²)·R(q)ᵀ.
pub fn covariance(splat: &GaussianSplat) -> Matrix3<f64> {
    let r = quat_to_rotation(&splat.rotation);
    let m = Matrix3::from_diagonal(&Vector3::new(
        splat.scale.x * splat.scale.x,
        splat.scale.y * splat.scale.y,
        splat.scale.z * splat.scale.z,
    ));
    r * m * r.transpose()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    (p / (1.0 - p)).ln()
}
