//! Forward splatting with alpha compositing and the analytic backward pass.
//!
//! Per view, splats are projected with the local-affine (EWA) approximation
//! of perspective projection, globally depth-sorted by camera-space z, and
//! composited front-to-back per pixel. The only approximations are the 3σ
//! bounding-box reject and the 1/255 contribution skip; both are applied
//! identically in the forward and backward passes so analytic gradients
//! match finite differences of this exact renderer.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use ndarray::{Array2, Array3};
use rayon::prelude::*;

use super::{quat_norm, GaussianSplat, RenderedImage, SplatCloud};
use crate::camera::{CameraPose, Intrinsics};

/// Low-pass term added to the projected covariance diagonal (px²).
const LOW_PASS: f64 = 0.3;
/// Camera-space near plane; splats at or behind it are culled.
const NEAR_PLANE: f64 = 0.01;
/// Contributions below this alpha are skipped.
const MIN_ALPHA: f64 = 1.0 / 255.0;
/// Rows per parallel work chunk; fixed so accumulation order is
/// machine-independent.
const ROWS_PER_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderStats {
    /// Splats dropped for a non-invertible projected covariance.
    pub skipped_degenerate: usize,
    /// Splats behind the near plane.
    pub culled_behind: usize,
}

/// Per-splat gradients of a rendered-pixel loss.
#[derive(Debug, Clone)]
pub struct SplatGradients {
    pub position: Vec<Vector3<f64>>,
    pub scale: Vec<Vector3<f64>>,
    pub rotation: Vec<[f64; 4]>,
    pub opacity: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl SplatGradients {
    fn zeros(n: usize) -> Self {
        Self {
            position: vec![Vector3::zeros(); n],
            scale: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            opacity: vec![0.0; n],
            color: vec![[0.0; 3]; n],
        }
    }
}

/// A splat projected into one view, with everything the backward pass needs.
struct Prepared {
    idx: usize,
    mean_cam: Vector3<f64>,
    mean_px: Vector2<f64>,
    /// Inverse of the low-passed 2D covariance.
    inv_cov: Matrix2<f64>,
    alpha: f64,
    color: [f64; 3],
    // Cached intermediates for the backward chain.
    jac: Matrix2x3<f64>,
    sigma_cam: Matrix3<f64>,
    rot_world: Matrix3<f64>,
    min_x: i64,
    max_x: i64,
    min_y: i64,
    max_y: i64,
}

fn project_all(
    cloud: &SplatCloud,
    intr: &Intrinsics,
    pose: &CameraPose,
) -> (Vec<Prepared>, RenderStats) {
    let f = intr.focal_px();
    let (cx, cy) = intr.principal_point();
    let (w_img, h_img) = (intr.width as i64, intr.height as i64);
    let r_wc = *pose.rotation();
    let mut stats = RenderStats::default();

    let mut prepared: Vec<Prepared> = Vec::with_capacity(cloud.len());
    for (idx, splat) in cloud.splats.iter().enumerate() {
        let mean_cam = pose.to_camera(&splat.position);
        if mean_cam.z <= NEAR_PLANE {
            stats.culled_behind += 1;
            continue;
        }
        let (x, y, z) = (mean_cam.x, mean_cam.y, mean_cam.z);
        let mean_px = Vector2::new(f * x / z + cx, f * y / z + cy);

        let rot_world = super::quat_to_rotation(&splat.rotation);
        let s2 = Vector3::new(
            splat.scale.x * splat.scale.x,
            splat.scale.y * splat.scale.y,
            splat.scale.z * splat.scale.z,
        );
        let sigma_world = rot_world * Matrix3::from_diagonal(&s2) * rot_world.transpose();
        let sigma_cam = r_wc * sigma_world * r_wc.transpose();

        let jac = Matrix2x3::new(
            f / z, 0.0, -f * x / (z * z),
            0.0, f / z, -f * y / (z * z),
        );
        let mut cov2 = jac * sigma_cam * jac.transpose();
        cov2[(0, 0)] += LOW_PASS;
        cov2[(1, 1)] += LOW_PASS;

        let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(1, 0)];
        if !det.is_finite() || det <= 1e-12 {
            stats.skipped_degenerate += 1;
            continue;
        }
        let inv_cov = Matrix2::new(cov2[(1, 1)], -cov2[(0, 1)], -cov2[(1, 0)], cov2[(0, 0)]) / det;

        // 3σ bounding box from the largest eigenvalue of the 2D covariance.
        let trace = cov2[(0, 0)] + cov2[(1, 1)];
        let disc = ((cov2[(0, 0)] - cov2[(1, 1)]).powi(2) + 4.0 * cov2[(0, 1)].powi(2)).sqrt();
        let lambda_max = 0.5 * (trace + disc);
        let radius = 3.0 * lambda_max.max(0.0).sqrt();
        let min_x = ((mean_px.x - radius).floor() as i64).max(0);
        let max_x = ((mean_px.x + radius).ceil() as i64).min(w_img - 1);
        let min_y = ((mean_px.y - radius).floor() as i64).max(0);
        let max_y = ((mean_px.y + radius).ceil() as i64).min(h_img - 1);
        if min_x > max_x || min_y > max_y {
            continue;
        }

        prepared.push(Prepared {
            idx,
            mean_cam,
            mean_px,
            inv_cov,
            alpha: splat.opacity,
            color: splat.color,
            jac,
            sigma_cam,
            rot_world,
            min_x,
            max_x,
            min_y,
            max_y,
        });
    }
    // Global near→far depth sort by splat center.
    prepared.sort_by(|a, b| a.mean_cam.z.total_cmp(&b.mean_cam.z));
    (prepared, stats)
}

/// Per-row lists of prepared-splat indices, preserving depth order.
fn bucket_rows(prepared: &[Prepared], height: usize) -> Vec<Vec<u32>> {
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); height];
    for (pi, p) in prepared.iter().enumerate() {
        for row in p.min_y..=p.max_y {
            rows[row as usize].push(pi as u32);
        }
    }
    rows
}

pub fn render(
    cloud: &SplatCloud,
    intr: &Intrinsics,
    pose: &CameraPose,
    background: [f64; 3],
) -> RenderedImage {
    render_with_stats(cloud, intr, pose, background).0
}

pub fn render_with_stats(
    cloud: &SplatCloud,
    intr: &Intrinsics,
    pose: &CameraPose,
    background: [f64; 3],
) -> (RenderedImage, RenderStats) {
    let (h, w) = (intr.height, intr.width);
    let (prepared, stats) = project_all(cloud, intr, pose);
    let rows = bucket_rows(&prepared, h);

    let mut rgb = Array3::zeros((h, w, 3));
    let mut alpha = Array2::zeros((h, w));
    {
        let rgb_rows: Vec<_> = rgb
            .as_slice_mut()
            .expect("contiguous")
            .chunks_mut(w * 3)
            .collect();
        let alpha_rows: Vec<_> = alpha
            .as_slice_mut()
            .expect("contiguous")
            .chunks_mut(w)
            .collect();
        rgb_rows
            .into_par_iter()
            .zip(alpha_rows.into_par_iter())
            .enumerate()
            .for_each(|(row, (rgb_row, alpha_row))| {
                for col in 0..w {
                    let px = Vector2::new(col as f64 + 0.5, row as f64 + 0.5);
                    let mut transmittance = 1.0;
                    let mut acc = [0.0f64; 3];
                    for &pi in &rows[row] {
                        let p = &prepared[pi as usize];
                        if (col as i64) < p.min_x || (col as i64) > p.max_x {
                            continue;
                        }
                        let d = px - p.mean_px;
                        let q = p.inv_cov[(0, 0)] * d.x * d.x
                            + 2.0 * p.inv_cov[(0, 1)] * d.x * d.y
                            + p.inv_cov[(1, 1)] * d.y * d.y;
                        let a = p.alpha * (-0.5 * q).exp();
                        if a < MIN_ALPHA {
                            continue;
                        }
                        let weight = a * transmittance;
                        acc[0] += p.color[0] * weight;
                        acc[1] += p.color[1] * weight;
                        acc[2] += p.color[2] * weight;
                        transmittance *= 1.0 - a;
                    }
                    for c in 0..3 {
                        rgb_row[col * 3 + c] = acc[c] + background[c] * transmittance;
                    }
                    alpha_row[col] = 1.0 - transmittance;
                }
            });
    }
    (RenderedImage { rgb, alpha }, stats)
}

/// Accumulators per prepared splat for one gradient chunk.
#[derive(Clone)]
struct GradAccum {
    d_mean_px: Vec<Vector2<f64>>,
    d_inv_cov: Vec<Matrix2<f64>>,
    d_alpha: Vec<f64>,
    d_color: Vec<[f64; 3]>,
}

impl GradAccum {
    fn zeros(n: usize) -> Self {
        Self {
            d_mean_px: vec![Vector2::zeros(); n],
            d_inv_cov: vec![Matrix2::zeros(); n],
            d_alpha: vec![0.0; n],
            d_color: vec![[0.0; 3]; n],
        }
    }

    fn add(&mut self, other: &Self) {
        for i in 0..self.d_mean_px.len() {
            self.d_mean_px[i] += other.d_mean_px[i];
            self.d_inv_cov[i] += other.d_inv_cov[i];
            self.d_alpha[i] += other.d_alpha[i];
            for c in 0..3 {
                self.d_color[i][c] += other.d_color[i][c];
            }
        }
    }
}

/// Gradients of `sum(upstream ⊙ rgb)` with respect to every splat parameter.
///
/// `upstream` is the H×W×3 per-pixel gradient of the loss with respect to
/// the rendered rgb. Returns the forward image alongside the gradients.
pub fn render_gradients(
    cloud: &SplatCloud,
    intr: &Intrinsics,
    pose: &CameraPose,
    background: [f64; 3],
    upstream: &Array3<f64>,
) -> (RenderedImage, SplatGradients) {
    let (h, w) = (intr.height, intr.width);
    assert_eq!(upstream.shape(), &[h, w, 3], "upstream must be HxWx3");
    let (prepared, _stats) = project_all(cloud, intr, pose);
    let rows = bucket_rows(&prepared, h);

    let mut rgb = Array3::zeros((h, w, 3));
    let mut alpha = Array2::zeros((h, w));

    // Per-chunk pixel accumulation, reduced in fixed chunk order.
    let row_chunks: Vec<std::ops::Range<usize>> = (0..h)
        .step_by(ROWS_PER_CHUNK)
        .map(|r0| r0..(r0 + ROWS_PER_CHUNK).min(h))
        .collect();
    let rgb_slices: Vec<_> = rgb
        .as_slice_mut()
        .expect("contiguous")
        .chunks_mut(w * 3 * ROWS_PER_CHUNK)
        .collect();
    let alpha_slices: Vec<_> = alpha
        .as_slice_mut()
        .expect("contiguous")
        .chunks_mut(w * ROWS_PER_CHUNK)
        .collect();

    let chunk_accums: Vec<GradAccum> = row_chunks
        .into_par_iter()
        .zip(rgb_slices.into_par_iter())
        .zip(alpha_slices.into_par_iter())
        .map(|((chunk, rgb_chunk), alpha_chunk)| {
            let mut acc = GradAccum::zeros(prepared.len());
            // (prepared idx, alpha', T before, dx, dy) per contribution.
            let mut contribs: Vec<(u32, f64, f64, f64, f64)> = Vec::with_capacity(64);
            let chunk_start = chunk.start;
            for row in chunk {
                for col in 0..w {
                    let px = Vector2::new(col as f64 + 0.5, row as f64 + 0.5);
                    contribs.clear();
                    let mut transmittance = 1.0;
                    let mut rgb_acc = [0.0f64; 3];
                    for &pi in &rows[row] {
                        let p = &prepared[pi as usize];
                        if (col as i64) < p.min_x || (col as i64) > p.max_x {
                            continue;
                        }
                        let d = px - p.mean_px;
                        let q = p.inv_cov[(0, 0)] * d.x * d.x
                            + 2.0 * p.inv_cov[(0, 1)] * d.x * d.y
                            + p.inv_cov[(1, 1)] * d.y * d.y;
                        let a = p.alpha * (-0.5 * q).exp();
                        if a < MIN_ALPHA {
                            continue;
                        }
                        contribs.push((pi, a, transmittance, d.x, d.y));
                        let weight = a * transmittance;
                        for c in 0..3 {
                            rgb_acc[c] += p.color[c] * weight;
                        }
                        transmittance *= 1.0 - a;
                    }
                    let local = (row - chunk_start) * w + col;
                    for c in 0..3 {
                        rgb_chunk[local * 3 + c] = rgb_acc[c] + background[c] * transmittance;
                    }
                    alpha_chunk[local] = 1.0 - transmittance;

                    let up = [
                        upstream[[row, col, 0]],
                        upstream[[row, col, 1]],
                        upstream[[row, col, 2]],
                    ];
                    if up == [0.0, 0.0, 0.0] {
                        continue;
                    }
                    // Back-to-front: s_rest is the color composited behind
                    // the current splat per unit transmittance at its exit.
                    let mut s_rest = background;
                    for &(pi, a, t_before, dx, dy) in contribs.iter().rev() {
                        let p = &prepared[pi as usize];
                        let i = pi as usize;
                        let mut d_aprime = 0.0;
                        for c in 0..3 {
                            acc.d_color[i][c] += up[c] * a * t_before;
                            d_aprime += up[c] * (p.color[c] - s_rest[c]) * t_before;
                        }
                        for c in 0..3 {
                            s_rest[c] = p.color[c] * a + (1.0 - a) * s_rest[c];
                        }
                        // α' = α·exp(−q/2): dα = dα'·w, dq = −dα'·α'/2.
                        let weight = a / p.alpha;
                        acc.d_alpha[i] += d_aprime * weight;
                        let dq = -0.5 * d_aprime * a;
                        // ∂q/∂A = ΔΔᵀ, ∂q/∂μ' = −2·A·Δ.
                        acc.d_inv_cov[i] += dq
                            * Matrix2::new(dx * dx, dx * dy, dx * dy, dy * dy);
                        let a_delta = p.inv_cov * Vector2::new(dx, dy);
                        acc.d_mean_px[i] += -2.0 * dq * a_delta;
                    }
                }
            }
            acc
        })
        .collect();

    let mut total = GradAccum::zeros(prepared.len());
    for acc in &chunk_accums {
        total.add(acc);
    }

    // Per-splat chain from 2D accumulators to the 3D parameters.
    let f = intr.focal_px();
    let r_wc = *pose.rotation();
    let mut grads = SplatGradients::zeros(cloud.len());
    for (pi, p) in prepared.iter().enumerate() {
        let splat = &cloud.splats[p.idx];
        let d_mean_px = total.d_mean_px[pi];
        let d_inv = total.d_inv_cov[pi];

        grads.opacity[p.idx] += total.d_alpha[pi];
        for c in 0..3 {
            grads.color[p.idx][c] += total.d_color[pi][c];
        }

        // A = Σ'⁻¹ ⇒ dΣ' = −A·dA·A.
        let d_cov2 = -p.inv_cov * d_inv * p.inv_cov;
        // Σ' = J·Σc·Jᵀ + low-pass ⇒ dΣc = Jᵀ·dΣ'·J, dJ = 2·dΣ'·J·Σc.
        let d_sigma_cam = p.jac.transpose() * d_cov2 * p.jac;
        let d_jac = 2.0 * d_cov2 * p.jac * p.sigma_cam;
        // Σc = R·Σw·Rᵀ ⇒ dΣw = Rᵀ·dΣc·R.
        let d_sigma_world = r_wc.transpose() * d_sigma_cam * r_wc;
        // Σw = Rq·M·Rqᵀ with M = diag(s²).
        let m = Matrix3::from_diagonal(&Vector3::new(
            splat.scale.x * splat.scale.x,
            splat.scale.y * splat.scale.y,
            splat.scale.z * splat.scale.z,
        ));
        let d_rot = 2.0 * d_sigma_world * p.rot_world * m;
        let d_m = p.rot_world.transpose() * d_sigma_world * p.rot_world;
        grads.scale[p.idx].x += 2.0 * splat.scale.x * d_m[(0, 0)];
        grads.scale[p.idx].y += 2.0 * splat.scale.y * d_m[(1, 1)];
        grads.scale[p.idx].z += 2.0 * splat.scale.z * d_m[(2, 2)];

        let dq = rotation_backward(&splat.rotation, &d_rot);
        for k in 0..4 {
            grads.rotation[p.idx][k] += dq[k];
        }

        // Projection and Jacobian both depend on the camera-space mean.
        let (x, y, z) = (p.mean_cam.x, p.mean_cam.y, p.mean_cam.z);
        let fz = f / z;
        let fz2 = f / (z * z);
        let d_mean_cam = Vector3::new(
            d_mean_px.x * fz - d_jac[(0, 2)] * fz2,
            d_mean_px.y * fz - d_jac[(1, 2)] * fz2,
            -d_mean_px.x * x * fz2 - d_mean_px.y * y * fz2
                - (d_jac[(0, 0)] + d_jac[(1, 1)]) * fz2
                + d_jac[(0, 2)] * 2.0 * f * x / (z * z * z)
                + d_jac[(1, 2)] * 2.0 * f * y / (z * z * z),
        );
        grads.position[p.idx] += r_wc.transpose() * d_mean_cam;
    }

    (RenderedImage { rgb, alpha }, grads)
}

/// Chain dL/dR(q̂) to the raw quaternion components, including the
/// normalization q̂ = q/|q|.
fn rotation_backward(q_raw: &[f64; 4], d_rot: &Matrix3<f64>) -> [f64; 4] {
    let n = quat_norm(q_raw);
    if n < 1e-12 {
        return [0.0; 4];
    }
    let q = [q_raw[0] / n, q_raw[1] / n, q_raw[2] / n, q_raw[3] / n];
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);

    let dr_dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dr_dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dr_dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dr_dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);

    let dot = |a: &Matrix3<f64>, b: &Matrix3<f64>| -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += a[(i, j)] * b[(i, j)];
            }
        }
        s
    };
    let d_hat = [
        dot(d_rot, &dr_dw),
        dot(d_rot, &dr_dx),
        dot(d_rot, &dr_dy),
        dot(d_rot, &dr_dz),
    ];
    // ∂q̂/∂q = (I − q̂q̂ᵀ)/|q|.
    let inner = q[0] * d_hat[0] + q[1] * d_hat[1] + q[2] * d_hat[2] + q[3] * d_hat[3];
    [
        (d_hat[0] - q[0] * inner) / n,
        (d_hat[1] - q[1] * inner) / n,
        (d_hat[2] - q[2] * inner) / n,
        (d_hat[3] - q[3] * inner) / n,
    ]
}
