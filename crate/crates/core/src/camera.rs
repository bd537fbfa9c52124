//! Cameras, the azimuth view ring, Plücker ray maps, and cross-system
//! extrinsic recomputation.
//!
//! Conventions (internal, used everywhere in the crate):
//! - World frame is right-handed with +y up.
//! - Azimuth is measured counterclockwise about +y; azimuth 0 places the
//!   camera on the +z axis looking toward −z (the "front" view).
//! - Camera frame follows the OpenCV convention: x right, y down, z forward;
//!   world→camera is `X_cam = R·X_world + t`, so the camera center is
//!   `c = −Rᵀ·t`.
//! - Intrinsics: vertical field of view, square pixels, principal point at
//!   the image center; pixel (row i, col j) has center (j+0.5, i+0.5).

use nalgebra::{Matrix3, Vector3};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Default ring radius in world units for a unit-scale head.
pub const DEFAULT_RING_RADIUS: f64 = 2.7;
/// Default vertical field of view in degrees.
pub const DEFAULT_FOV_DEG: f64 = 50.0;
/// Elevation magnitude of the two extra cameras in the 8-view ring.
pub const DEFAULT_EIGHT_VIEW_ELEVATION_DEG: f64 = 30.0;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Pinhole intrinsics with the principal point fixed at the image center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fov_deg: f64, width: usize, height: usize) -> Result<Self> {
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(Error::Config(format!(
                "fov_deg must be in (0, 180), got {fov_deg}"
            )));
        }
        if width < 1 || height < 1 {
            return Err(Error::Config(format!(
                "image size must be at least 1x1, got {width}x{height}"
            )));
        }
        Ok(Self {
            fov_deg,
            width,
            height,
        })
    }

    /// Focal length in pixels (vertical fov, square pixels).
    pub fn focal_px(&self) -> f64 {
        (self.height as f64 / 2.0) / (self.fov_deg.to_radians() / 2.0).tan()
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.width as f64 / 2.0, self.height as f64 / 2.0)
    }
}

/// World→camera rigid transform.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let err = (gram - Matrix3::identity()).abs().max();
        if err > ORTHONORMAL_TOL {
            return Err(Error::Config(format!(
                "rotation is not orthonormal (RᵀR deviates from I by {err:.2e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::Config(format!(
                "rotation determinant must be +1, got {det}"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates, `c = −Rᵀ·t`.
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    /// Pose of a camera at `center` looking at the world origin.
    pub fn look_at_origin(center: Vector3<f64>) -> Result<Self> {
        let dist = center.norm();
        if dist < 1e-12 {
            return Err(Error::DegenerateCamera);
        }
        let forward = (-center / dist).normalize();
        let up = Vector3::new(0.0, 1.0, 0.0);
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            // Camera looks straight up/down the world up axis.
            right = forward.cross(&Vector3::new(0.0, 0.0, -1.0));
        }
        let right = right.normalize();
        let down = forward.cross(&right); // camera y points down
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let translation = -rotation * center;
        Self::new(rotation, translation)
    }

    /// Pose on the origin-centered sphere of `radius` at the given azimuth
    /// (CCW about +y, 0 = front) and elevation, looking at the origin.
    pub fn from_azimuth_elevation(azimuth_deg: f64, elevation_deg: f64, radius: f64) -> Result<Self> {
        if radius <= 0.0 {
            return Err(Error::Config(format!("radius must be > 0, got {radius}")));
        }
        let az = azimuth_deg.to_radians();
        let el = elevation_deg.to_radians();
        let center = Vector3::new(
            radius * az.sin() * el.cos(),
            radius * el.sin(),
            radius * az.cos() * el.cos(),
        );
        Self::look_at_origin(center)
    }

    /// World→camera transform applied to a point.
    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_world + self.translation
    }
}

/// One camera slot in a rig.
#[derive(Debug, Clone)]
pub struct RigView {
    pub pose: CameraPose,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

/// A set of cameras sharing intrinsics, all looking at the world origin.
#[derive(Debug, Clone)]
pub struct ViewRig {
    pub intrinsics: Intrinsics,
    pub views: Vec<RigView>,
    pub radius: f64,
}

impl ViewRig {
    /// Rig from explicit (azimuth, elevation) pairs on the `radius` sphere.
    pub fn from_az_el(
        intrinsics: Intrinsics,
        radius: f64,
        az_el_deg: &[(f64, f64)],
    ) -> Result<Self> {
        let views = az_el_deg
            .iter()
            .map(|&(az, el)| {
                Ok(RigView {
                    pose: CameraPose::from_azimuth_elevation(az, el, radius)?,
                    azimuth_deg: az,
                    elevation_deg: el,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            intrinsics,
            views,
            radius,
        })
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn pixel_count(&self) -> usize {
        self.len() * self.intrinsics.width * self.intrinsics.height
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let doc = RigJson::from(self);
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &doc)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|_| Error::MissingFile(path.display().to_string()))?;
        let doc: RigJson = serde_json::from_reader(std::io::BufReader::new(file))?;
        doc.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct RigFrameJson {
    azimuth_deg: f64,
    elevation_deg: f64,
    rotation: Vec<f64>,
    translation: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RigJson {
    fov_deg: f64,
    width: usize,
    height: usize,
    frames: Vec<RigFrameJson>,
}

impl From<&ViewRig> for RigJson {
    fn from(rig: &ViewRig) -> Self {
        let frames = rig
            .views
            .iter()
            .map(|v| RigFrameJson {
                azimuth_deg: v.azimuth_deg,
                elevation_deg: v.elevation_deg,
                rotation: v.pose.rotation().transpose().as_slice().to_vec(),
                translation: v.pose.translation().as_slice().to_vec(),
            })
            .collect();
        RigJson {
            fov_deg: rig.intrinsics.fov_deg,
            width: rig.intrinsics.width,
            height: rig.intrinsics.height,
            frames,
        }
    }
}

impl TryFrom<RigJson> for ViewRig {
    type Error = Error;

    fn try_from(doc: RigJson) -> Result<Self> {
        let intrinsics = Intrinsics::new(doc.fov_deg, doc.width, doc.height)?;
        let mut views = Vec::with_capacity(doc.frames.len());
        let mut radius_sum = 0.0;
        for f in &doc.frames {
            if f.rotation.len() != 9 || f.translation.len() != 3 {
                return Err(Error::Parse(
                    "rig frame must carry 9 rotation and 3 translation floats".into(),
                ));
            }
            // Row-major on disk; nalgebra fills column-major, so transpose.
            let rotation =
                Matrix3::from_column_slice(&f.rotation).transpose();
            let translation = Vector3::from_column_slice(&f.translation);
            let pose = CameraPose::new(rotation, translation)?;
            radius_sum += pose.center().norm();
            views.push(RigView {
                pose,
                azimuth_deg: f.azimuth_deg,
                elevation_deg: f.elevation_deg,
            });
        }
        let radius = if views.is_empty() {
            0.0
        } else {
            radius_sum / views.len() as f64
        };
        Ok(ViewRig {
            intrinsics,
            views,
            radius,
        })
    }
}

/// Azimuth offsets (relative to the input azimuth) for each ring size.
/// The first slot is always the input view.
fn ring_offsets(n_views: usize) -> Result<Vec<(f64, f64)>> {
    let flat = |az: f64| (az, 0.0);
    match n_views {
        4 => Ok(vec![flat(0.0), flat(-90.0), flat(90.0), flat(180.0)]),
        6 => Ok(vec![
            flat(0.0),
            flat(-45.0),
            flat(45.0),
            flat(-90.0),
            flat(90.0),
            flat(180.0),
        ]),
        8 => {
            let e = DEFAULT_EIGHT_VIEW_ELEVATION_DEG;
            Ok(vec![
                flat(0.0),
                flat(-45.0),
                flat(45.0),
                flat(-90.0),
                flat(90.0),
                flat(180.0),
                (0.0, e),
                (0.0, -e),
            ])
        }
        other => Err(Error::Config(format!(
            "n_views must be one of 4, 6, 8; got {other}"
        ))),
    }
}

/// The generation/supervision camera ring: the input view at `input_azimuth`
/// plus the fixed azimuth pattern for 4, 6 or 8 views. Elevation is 0 for
/// every ring camera; the two extra cameras of the 8-view ring sit at
/// ±[`DEFAULT_EIGHT_VIEW_ELEVATION_DEG`].
pub fn make_view_ring(
    input_azimuth: f64,
    n_views: usize,
    radius: f64,
    intrinsics: Intrinsics,
) -> Result<ViewRig> {
    let az_el: Vec<(f64, f64)> = ring_offsets(n_views)?
        .into_iter()
        .map(|(off, el)| (input_azimuth + off, el))
        .collect();
    ViewRig::from_az_el(intrinsics, radius, &az_el)
}

/// Per-pixel Plücker ray map: 6 channels (moment `m = c×d`, unit direction
/// `d`), both in world coordinates, for the ray through each pixel center.
#[derive(Debug, Clone)]
pub struct PluckerMap {
    /// H×W×6, channels [m0, m1, m2, d0, d1, d2].
    pub data: Array3<f64>,
}

impl PluckerMap {
    pub fn moment(&self, row: usize, col: usize) -> Vector3<f64> {
        Vector3::new(
            self.data[[row, col, 0]],
            self.data[[row, col, 1]],
            self.data[[row, col, 2]],
        )
    }

    pub fn direction(&self, row: usize, col: usize) -> Vector3<f64> {
        Vector3::new(
            self.data[[row, col, 3]],
            self.data[[row, col, 4]],
            self.data[[row, col, 5]],
        )
    }
}

/// World-frame unit direction of the ray through pixel (row, col).
pub fn pixel_ray_direction(
    intrinsics: &Intrinsics,
    pose: &CameraPose,
    row: usize,
    col: usize,
) -> Vector3<f64> {
    let f = intrinsics.focal_px();
    let (cx, cy) = intrinsics.principal_point();
    let u = col as f64 + 0.5;
    let v = row as f64 + 0.5;
    let d_cam = Vector3::new((u - cx) / f, (v - cy) / f, 1.0).normalize();
    pose.rotation().transpose() * d_cam
}

/// Plücker coordinates for every pixel of the view.
pub fn plucker_map(intrinsics: &Intrinsics, pose: &CameraPose) -> PluckerMap {
    let (h, w) = (intrinsics.height, intrinsics.width);
    let center = pose.center();
    let mut data = Array3::zeros((h, w, 6));
    for row in 0..h {
        for col in 0..w {
            let d = pixel_ray_direction(intrinsics, pose, row, col);
            let m = center.cross(&d);
            data[[row, col, 0]] = m.x;
            data[[row, col, 1]] = m.y;
            data[[row, col, 2]] = m.z;
            data[[row, col, 3]] = d.x;
            data[[row, col, 4]] = d.y;
            data[[row, col, 5]] = d.z;
        }
    }
    PluckerMap { data }
}

/// Transfer a test camera pose from a dataset's coordinate system into a
/// method's coordinate system.
///
/// Optionally re-centers the dataset world origin at the mean of the given
/// camera centers, then computes the relative rotation
/// `R_rel = R_test·R_inputᵀ` in the dataset system, applies it to the
/// method's input pose, and rescales the translation so the resulting camera
/// sits at `method_radius` from the origin.
pub fn recompute_extrinsic(
    dataset_input: &CameraPose,
    dataset_test: &CameraPose,
    method_input: &CameraPose,
    method_radius: f64,
    recenter: Option<&[Vector3<f64>]>,
) -> Result<CameraPose> {
    if method_radius <= 0.0 {
        return Err(Error::Config(format!(
            "method_radius must be > 0, got {method_radius}"
        )));
    }
    let (input, test) = match recenter {
        Some(centers) => {
            if centers.is_empty() {
                return Err(Error::Config(
                    "recenter camera list must be non-empty".into(),
                ));
            }
            let shift =
                centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
            // c' = c − shift ⇒ t' = t + R·shift.
            let recentered = |p: &CameraPose| {
                CameraPose::new(*p.rotation(), p.translation() + p.rotation() * shift)
            };
            (recentered(dataset_input)?, recentered(dataset_test)?)
        }
        None => (dataset_input.clone(), dataset_test.clone()),
    };

    let r_rel = test.rotation() * input.rotation().transpose();
    let t_rel = test.translation() - r_rel * input.translation();

    // The relative translation carries the dataset's length scale; convert
    // to method units by the ratio of camera distances before composing.
    let input_dist = input.center().norm();
    if input_dist < 1e-12 {
        return Err(Error::DegenerateCamera);
    }
    let unit_scale = method_radius / input_dist;

    let r_method = r_rel * method_input.rotation();
    let t_raw = r_rel * method_input.translation() + t_rel * unit_scale;
    let c_raw = -r_method.transpose() * t_raw;
    let dist = c_raw.norm();
    if dist < 1e-12 {
        return Err(Error::DegenerateCamera);
    }
    let c_scaled = c_raw * (method_radius / dist);
    CameraPose::new(r_method, -r_method * c_scaled)
}
