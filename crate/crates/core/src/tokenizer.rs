//! Patchify/unpatchify between multi-view image+Plücker stacks and
//! transformer token grids, and decoding of tokens into per-pixel Gaussian
//! parameters.
//!
//! Patch layout: within a p×p patch, pixels are flattened in raster order
//! with 9 channels each (rgb, then the 6 Plücker channels), giving 9p²
//! values per patch. Decoded Gaussian parameters use 14 raw channels per
//! pixel: 1 ray distance, 3 scale, 4 quaternion, 1 opacity, 3 color and 2
//! reserved-zero padding channels.

use nalgebra::Vector3;
use ndarray::{Array1, Array2, Array4};

use crate::camera::{pixel_ray_direction, ViewRig};
use crate::error::{Error, Result};
use crate::splat::{quat_norm, sigmoid, GaussianSplat, SplatCloud, SplatGradients};

/// Raw channels per pixel in the Gaussian decode.
pub const GAUSSIAN_CHANNELS: usize = 14;
/// Input channels per pixel (rgb + Plücker).
pub const INPUT_CHANNELS: usize = 9;
/// Default near/far ray-distance bracket around the ring radius.
pub const DEFAULT_NEAR: f64 = 1.5;
pub const DEFAULT_FAR: f64 = 4.5;
/// Raw scale channels are clamped to this range before exponentiation.
pub const SCALE_CLAMP: (f64, f64) = (-8.0, 1.0);

/// Multi-view token matrix with view/patch provenance.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    /// (V · H/p · W/p) × D, views concatenated in order, patches in raster
    /// order within each view.
    pub tokens: Array2<f64>,
    pub views: usize,
    pub patch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl TokenGrid {
    pub fn tokens_per_view(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn token_count(&self) -> usize {
        self.views * self.tokens_per_view()
    }

    /// (view, patch row, patch col) of a token index.
    pub fn provenance(&self, token: usize) -> (usize, usize, usize) {
        let per_view = self.tokens_per_view();
        let view = token / per_view;
        let rem = token % per_view;
        (view, rem / self.grid_w, rem % self.grid_w)
    }

    pub fn token_index(&self, view: usize, patch_row: usize, patch_col: usize) -> usize {
        view * self.tokens_per_view() + patch_row * self.grid_w + patch_col
    }
}

fn check_divisible(h: usize, w: usize, p: usize) -> Result<()> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!(
            "image size {h}x{w} must be divisible by patch size {p}"
        )));
    }
    Ok(())
}

/// Flatten images+Plücker maps into per-patch rows of 9p² values.
///
/// `images` is V×H×W×3 and `pluckers` V×H×W×6; the output has one row per
/// patch, V·(H/p)·(W/p) rows total.
pub fn flatten_patches(
    images: &Array4<f64>,
    pluckers: &Array4<f64>,
    p: usize,
) -> Result<Array2<f64>> {
    let (v, h, w, c) = images.dim();
    if c != 3 {
        return Err(Error::Shape(format!("images must have 3 channels, got {c}")));
    }
    if pluckers.dim() != (v, h, w, 6) {
        return Err(Error::Shape(format!(
            "pluckers must be {v}x{h}x{w}x6, got {:?}",
            pluckers.dim()
        )));
    }
    check_divisible(h, w, p)?;

    let (gh, gw) = (h / p, w / p);
    let dim = INPUT_CHANNELS * p * p;
    let mut out = Array2::zeros((v * gh * gw, dim));
    for view in 0..v {
        for pr in 0..gh {
            for pc in 0..gw {
                let row = view * gh * gw + pr * gw + pc;
                for py in 0..p {
                    for px in 0..p {
                        let (iy, ix) = (pr * p + py, pc * p + px);
                        let base = (py * p + px) * INPUT_CHANNELS;
                        for ch in 0..3 {
                            out[[row, base + ch]] = images[[view, iy, ix, ch]];
                        }
                        for ch in 0..6 {
                            out[[row, base + 3 + ch]] = pluckers[[view, iy, ix, ch]];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`flatten_patches`].
pub fn unflatten_patches(
    rows: &Array2<f64>,
    p: usize,
    views: usize,
    h: usize,
    w: usize,
) -> Result<(Array4<f64>, Array4<f64>)> {
    check_divisible(h, w, p)?;
    let (gh, gw) = (h / p, w / p);
    if rows.dim() != (views * gh * gw, INPUT_CHANNELS * p * p) {
        return Err(Error::Shape(format!(
            "expected {}x{} patch rows, got {:?}",
            views * gh * gw,
            INPUT_CHANNELS * p * p,
            rows.dim()
        )));
    }
    let mut images = Array4::zeros((views, h, w, 3));
    let mut pluckers = Array4::zeros((views, h, w, 6));
    for view in 0..views {
        for pr in 0..gh {
            for pc in 0..gw {
                let row = view * gh * gw + pr * gw + pc;
                for py in 0..p {
                    for px in 0..p {
                        let (iy, ix) = (pr * p + py, pc * p + px);
                        let base = (py * p + px) * INPUT_CHANNELS;
                        for ch in 0..3 {
                            images[[view, iy, ix, ch]] = rows[[row, base + ch]];
                        }
                        for ch in 0..6 {
                            pluckers[[view, iy, ix, ch]] = rows[[row, base + 3 + ch]];
                        }
                    }
                }
            }
        }
    }
    Ok((images, pluckers))
}

/// Patch-flatten a C-channel image stack: one row of C·p² values per patch,
/// pixels in raster order within the patch.
pub fn flatten_image_patches(images: &Array4<f64>, p: usize) -> Result<Array2<f64>> {
    let (v, h, w, c) = images.dim();
    check_divisible(h, w, p)?;
    let (gh, gw) = (h / p, w / p);
    let mut out = Array2::zeros((v * gh * gw, c * p * p));
    for view in 0..v {
        for pr in 0..gh {
            for pc in 0..gw {
                let row = view * gh * gw + pr * gw + pc;
                for py in 0..p {
                    for px in 0..p {
                        let (iy, ix) = (pr * p + py, pc * p + px);
                        let base = (py * p + px) * c;
                        for ch in 0..c {
                            out[[row, base + ch]] = images[[view, iy, ix, ch]];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`flatten_image_patches`].
pub fn unflatten_image_patches(
    rows: &Array2<f64>,
    p: usize,
    views: usize,
    h: usize,
    w: usize,
    c: usize,
) -> Result<Array4<f64>> {
    check_divisible(h, w, p)?;
    let (gh, gw) = (h / p, w / p);
    if rows.dim() != (views * gh * gw, c * p * p) {
        return Err(Error::Shape(format!(
            "expected {}x{} patch rows, got {:?}",
            views * gh * gw,
            c * p * p,
            rows.dim()
        )));
    }
    let mut images = Array4::zeros((views, h, w, c));
    for view in 0..views {
        for pr in 0..gh {
            for pc in 0..gw {
                let row = view * gh * gw + pr * gw + pc;
                for py in 0..p {
                    for px in 0..p {
                        let (iy, ix) = (pr * p + py, pc * p + px);
                        let base = (py * p + px) * c;
                        for ch in 0..c {
                            images[[view, iy, ix, ch]] = rows[[row, base + ch]];
                        }
                    }
                }
            }
        }
    }
    Ok(images)
}

/// Patchify and embed: per patch, concat(rgb, plücker) → 9p² vector → D-dim
/// token via the linear map (weight 9p²×D, bias D).
pub fn patchify(
    images: &Array4<f64>,
    pluckers: &Array4<f64>,
    p: usize,
    embed_w: &Array2<f64>,
    embed_b: &Array1<f64>,
) -> Result<TokenGrid> {
    let raw = flatten_patches(images, pluckers, p)?;
    if embed_w.dim().0 != raw.dim().1 || embed_w.dim().1 != embed_b.len() {
        return Err(Error::Shape(format!(
            "embed map must be {}xD with matching bias, got {:?} / {}",
            raw.dim().1,
            embed_w.dim(),
            embed_b.len()
        )));
    }
    let mut tokens = raw.dot(embed_w);
    tokens += embed_b;
    let (v, h, w, _) = images.dim();
    Ok(TokenGrid {
        tokens,
        views: v,
        patch: p,
        grid_h: h / p,
        grid_w: w / p,
    })
}

/// Per-pixel raw Gaussian channels in view-major raster order
/// (V·H·W rows × 14), reassembled from per-token decode outputs (rows of
/// 14p² values).
pub fn unflatten_gaussian_raw(decoded: &Array2<f64>, grid: &TokenGrid) -> Result<Array2<f64>> {
    let p = grid.patch;
    if decoded.dim() != (grid.token_count(), GAUSSIAN_CHANNELS * p * p) {
        return Err(Error::Shape(format!(
            "decoded tokens must be {}x{}, got {:?}",
            grid.token_count(),
            GAUSSIAN_CHANNELS * p * p,
            decoded.dim()
        )));
    }
    let (h, w) = (grid.grid_h * p, grid.grid_w * p);
    let mut raw = Array2::zeros((grid.views * h * w, GAUSSIAN_CHANNELS));
    for token in 0..grid.token_count() {
        let (view, pr, pc) = grid.provenance(token);
        for py in 0..p {
            for px in 0..p {
                let (iy, ix) = (pr * p + py, pc * p + px);
                let pixel = view * h * w + iy * w + ix;
                let base = (py * p + px) * GAUSSIAN_CHANNELS;
                for ch in 0..GAUSSIAN_CHANNELS {
                    raw[[pixel, ch]] = decoded[[token, base + ch]];
                }
            }
        }
    }
    Ok(raw)
}

/// Scatter per-pixel raw-channel gradients back to per-token rows; exact
/// adjoint of [`unflatten_gaussian_raw`].
pub fn flatten_gaussian_raw_grad(d_raw: &Array2<f64>, grid: &TokenGrid) -> Array2<f64> {
    let p = grid.patch;
    let (h, w) = (grid.grid_h * p, grid.grid_w * p);
    let mut d_decoded = Array2::zeros((grid.token_count(), GAUSSIAN_CHANNELS * p * p));
    for token in 0..grid.token_count() {
        let (view, pr, pc) = grid.provenance(token);
        for py in 0..p {
            for px in 0..p {
                let (iy, ix) = (pr * p + py, pc * p + px);
                let pixel = view * h * w + iy * w + ix;
                let base = (py * p + px) * GAUSSIAN_CHANNELS;
                for ch in 0..GAUSSIAN_CHANNELS {
                    d_decoded[[token, base + ch]] = d_raw[[pixel, ch]];
                }
            }
        }
    }
    d_decoded
}

/// Per-pixel camera centers and ray directions for a rig, in the same
/// view-major raster order as the raw Gaussian channels.
pub fn rig_rays(rig: &ViewRig) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let (h, w) = (rig.intrinsics.height, rig.intrinsics.width);
    let mut centers = Vec::with_capacity(rig.len() * h * w);
    let mut dirs = Vec::with_capacity(rig.len() * h * w);
    for view in &rig.views {
        let c = view.pose.center();
        for row in 0..h {
            for col in 0..w {
                centers.push(c);
                dirs.push(pixel_ray_direction(&rig.intrinsics, &view.pose, row, col));
            }
        }
    }
    (centers, dirs)
}

/// Activate raw per-pixel channels into splats pinned to their pixel rays:
/// distance t = near + σ(raw)·(far−near), position = center + t·dir,
/// scale = exp(clamp(raw, −8, 1)), rotation = normalized raw quaternion
/// (zero falls back to identity), opacity and color through sigmoids.
pub fn cloud_from_raw(
    raw: &Array2<f64>,
    centers: &[Vector3<f64>],
    dirs: &[Vector3<f64>],
    near: f64,
    far: f64,
) -> Result<SplatCloud> {
    let n = raw.dim().0;
    if raw.dim().1 != GAUSSIAN_CHANNELS {
        return Err(Error::Shape(format!(
            "raw Gaussian rows must have {GAUSSIAN_CHANNELS} channels, got {}",
            raw.dim().1
        )));
    }
    if centers.len() != n || dirs.len() != n {
        return Err(Error::Shape(format!(
            "ray buffers must match pixel count {n}, got {}/{}",
            centers.len(),
            dirs.len()
        )));
    }
    let mut splats = Vec::with_capacity(n);
    for i in 0..n {
        let t = near + sigmoid(raw[[i, 0]]) * (far - near);
        let scale = Vector3::new(
            raw[[i, 1]].clamp(SCALE_CLAMP.0, SCALE_CLAMP.1).exp(),
            raw[[i, 2]].clamp(SCALE_CLAMP.0, SCALE_CLAMP.1).exp(),
            raw[[i, 3]].clamp(SCALE_CLAMP.0, SCALE_CLAMP.1).exp(),
        );
        let q = [raw[[i, 4]], raw[[i, 5]], raw[[i, 6]], raw[[i, 7]]];
        let qn = quat_norm(&q);
        let rotation = if qn < 1e-12 {
            [1.0, 0.0, 0.0, 0.0]
        } else {
            [q[0] / qn, q[1] / qn, q[2] / qn, q[3] / qn]
        };
        splats.push(GaussianSplat {
            position: centers[i] + t * dirs[i],
            scale,
            rotation,
            opacity: sigmoid(raw[[i, 8]]),
            color: [
                sigmoid(raw[[i, 9]]),
                sigmoid(raw[[i, 10]]),
                sigmoid(raw[[i, 11]]),
            ],
        });
    }
    Ok(SplatCloud::new(splats))
}

/// Backward of [`cloud_from_raw`]: splat-parameter gradients → raw-channel
/// gradients. Padding channels receive zero.
pub fn cloud_from_raw_backward(
    raw: &Array2<f64>,
    dirs: &[Vector3<f64>],
    near: f64,
    far: f64,
    grads: &SplatGradients,
) -> Array2<f64> {
    let n = raw.dim().0;
    let mut d_raw = Array2::zeros((n, GAUSSIAN_CHANNELS));
    for i in 0..n {
        // Distance: position = c + t·d with t = near + σ(r0)·(far−near).
        let s0 = sigmoid(raw[[i, 0]]);
        let dt = grads.position[i].dot(&dirs[i]);
        d_raw[[i, 0]] = dt * s0 * (1.0 - s0) * (far - near);

        for k in 0..3 {
            let r = raw[[i, 1 + k]];
            if r > SCALE_CLAMP.0 && r < SCALE_CLAMP.1 {
                d_raw[[i, 1 + k]] = grads.scale[i][k] * r.exp();
            }
        }

        // Quaternion normalization: dq = (I − q̂q̂ᵀ)/|q| · dq̂.
        let q = [raw[[i, 4]], raw[[i, 5]], raw[[i, 6]], raw[[i, 7]]];
        let qn = quat_norm(&q);
        if qn >= 1e-12 {
            let qh = [q[0] / qn, q[1] / qn, q[2] / qn, q[3] / qn];
            let g = grads.rotation[i];
            let inner = qh[0] * g[0] + qh[1] * g[1] + qh[2] * g[2] + qh[3] * g[3];
            for k in 0..4 {
                d_raw[[i, 4 + k]] = (g[k] - qh[k] * inner) / qn;
            }
        }

        let so = sigmoid(raw[[i, 8]]);
        d_raw[[i, 8]] = grads.opacity[i] * so * (1.0 - so);
        for k in 0..3 {
            let sc = sigmoid(raw[[i, 9 + k]]);
            d_raw[[i, 9 + k]] = grads.color[i][k] * sc * (1.0 - sc);
        }
    }
    d_raw
}

/// Decode tokens into pixel-aligned Gaussians: linear map D→14p², unpatchify
/// to per-pixel channels, activate along the rig's pixel rays. The output
/// cloud has V·H·W splats in view-major raster order.
pub fn unpatchify_gaussians(
    grid: &TokenGrid,
    decode_w: &Array2<f64>,
    decode_b: &Array1<f64>,
    rig: &ViewRig,
    near: f64,
    far: f64,
) -> Result<SplatCloud> {
    let p = grid.patch;
    let expected_tokens = rig.pixel_count() / (p * p);
    if grid.token_count() != expected_tokens || rig.len() != grid.views {
        return Err(Error::Shape(format!(
            "token grid ({} tokens, {} views) does not match rig ({} expected tokens, {} views)",
            grid.token_count(),
            grid.views,
            expected_tokens,
            rig.len()
        )));
    }
    if decode_w.dim() != (grid.tokens.dim().1, GAUSSIAN_CHANNELS * p * p)
        || decode_b.len() != GAUSSIAN_CHANNELS * p * p
    {
        return Err(Error::Shape(format!(
            "decode map must be Dx{}, got {:?}",
            GAUSSIAN_CHANNELS * p * p,
            decode_w.dim()
        )));
    }
    let mut decoded = grid.tokens.dot(decode_w);
    decoded += decode_b;
    let raw = unflatten_gaussian_raw(&decoded, grid)?;
    let (centers, dirs) = rig_rays(rig);
    cloud_from_raw(&raw, &centers, &dirs, near, far)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{make_view_ring, Intrinsics};
    use rand::Rng;

    fn random_stack(seed: u64, v: usize, h: usize, w: usize) -> (Array4<f64>, Array4<f64>) {
        let mut rng = crate::rng::derive("tok", seed, 0);
        let mut images = Array4::zeros((v, h, w, 3));
        let mut pluckers = Array4::zeros((v, h, w, 6));
        images.iter_mut().for_each(|x| *x = rng.gen_range(0.0..1.0));
        pluckers.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        (images, pluckers)
    }

    fn identity_embed(p: usize) -> (Array2<f64>, Array1<f64>) {
        let d = INPUT_CHANNELS * p * p;
        (Array2::eye(d), Array1::zeros(d))
    }

    #[test]
    fn token_counts() {
        let (images, pluckers) = random_stack(0, 2, 16, 16);
        let (w, b) = identity_embed(4);
        let grid = patchify(&images, &pluckers, 4, &w, &b).unwrap();
        assert_eq!(grid.tokens_per_view(), 16);
        assert_eq!(grid.token_count(), 32);
        assert_eq!(grid.tokens.dim(), (32, 9 * 16));
    }

    #[test]
    fn single_pixel_patch_is_one_token() {
        let (images, pluckers) = random_stack(1, 1, 4, 4);
        let (w, b) = identity_embed(4);
        let grid = patchify(&images, &pluckers, 4, &w, &b).unwrap();
        assert_eq!(grid.token_count(), 1);
    }

    #[test]
    fn divisibility_enforced() {
        let (images, pluckers) = random_stack(2, 1, 10, 10);
        let (w, b) = identity_embed(4);
        assert!(patchify(&images, &pluckers, 4, &w, &b).is_err());
    }

    #[test]
    fn identity_embed_roundtrip_bit_exact() {
        let (images, pluckers) = random_stack(3, 3, 8, 12);
        let (w, b) = identity_embed(4);
        let grid = patchify(&images, &pluckers, 4, &w, &b).unwrap();
        let (ri, rp) = unflatten_patches(&grid.tokens, 4, 3, 8, 12).unwrap();
        assert_eq!(images, ri);
        assert_eq!(pluckers, rp);
    }

    #[test]
    fn view_permutation_permutes_token_blocks() {
        let (images, pluckers) = random_stack(4, 3, 8, 8);
        let (w, b) = identity_embed(4);
        let grid = patchify(&images, &pluckers, 4, &w, &b).unwrap();

        // Swap views 0 and 2.
        let mut images2 = images.clone();
        let mut pluckers2 = pluckers.clone();
        for (dst, src) in [(0usize, 2usize), (2, 0)] {
            images2
                .index_axis_mut(ndarray::Axis(0), dst)
                .assign(&images.index_axis(ndarray::Axis(0), src));
            pluckers2
                .index_axis_mut(ndarray::Axis(0), dst)
                .assign(&pluckers.index_axis(ndarray::Axis(0), src));
        }
        let grid2 = patchify(&images2, &pluckers2, 4, &w, &b).unwrap();

        let per = grid.tokens_per_view();
        for t in 0..per {
            for d in 0..grid.tokens.dim().1 {
                assert_eq!(grid2.tokens[[t, d]], grid.tokens[[2 * per + t, d]]);
                assert_eq!(grid2.tokens[[2 * per + t, d]], grid.tokens[[t, d]]);
                assert_eq!(grid2.tokens[[per + t, d]], grid.tokens[[per + t, d]]);
            }
        }
        // Provenance bookkeeping matches the block layout.
        assert_eq!(grid.provenance(per + 3).0, 1);
        assert_eq!(grid.token_index(1, 0, 3), per + 3);
    }

    fn small_rig(views: usize, size: usize) -> crate::camera::ViewRig {
        let intr = Intrinsics::new(50.0, size, size).unwrap();
        make_view_ring(0.0, views, 2.7, intr).unwrap()
    }

    #[test]
    fn zero_raw_decodes_to_midrange_cloud() {
        let rig = small_rig(4, 8);
        let (centers, dirs) = rig_rays(&rig);
        let raw = Array2::zeros((rig.pixel_count(), GAUSSIAN_CHANNELS));
        let cloud = cloud_from_raw(&raw, &centers, &dirs, 1.0, 5.0).unwrap();
        assert_eq!(cloud.len(), rig.pixel_count());
        for (i, s) in cloud.splats.iter().enumerate() {
            // Distance 3 along the pixel ray, σ(0) opacity/color, unit scale.
            let expect = centers[i] + 3.0 * dirs[i];
            assert!((s.position - expect).norm() < 1e-12);
            assert_eq!(s.opacity, 0.5);
            assert_eq!(s.color, [0.5, 0.5, 0.5]);
            assert!((s.scale - nalgebra::Vector3::new(1.0, 1.0, 1.0)).norm() < 1e-12);
            assert_eq!(s.rotation, [1.0, 0.0, 0.0, 0.0]);
        }
        cloud.validate().unwrap();
    }

    #[test]
    fn splats_lie_on_pixel_rays() {
        let rig = small_rig(6, 8);
        let (centers, dirs) = rig_rays(&rig);
        let mut rng = crate::rng::derive("tok-rays", 0, 0);
        let mut raw = Array2::zeros((rig.pixel_count(), GAUSSIAN_CHANNELS));
        raw.iter_mut().for_each(|x| *x = rng.gen_range(-2.0..2.0));
        let cloud = cloud_from_raw(&raw, &centers, &dirs, DEFAULT_NEAR, DEFAULT_FAR).unwrap();
        for (i, s) in cloud.splats.iter().enumerate() {
            let rel = s.position - centers[i];
            assert!(rel.cross(&dirs[i]).norm() < 1e-6);
            let along = rel.dot(&dirs[i]);
            assert!((DEFAULT_NEAR..=DEFAULT_FAR).contains(&along));
        }
    }

    #[test]
    fn unpatchify_count_matches_rig_pixels() {
        let rig = small_rig(6, 16);
        let (images, pluckers) = random_stack(5, 6, 16, 16);
        let (w, b) = identity_embed(4);
        let grid = patchify(&images, &pluckers, 4, &w, &b).unwrap();
        let d = grid.tokens.dim().1;
        let decode_w = Array2::zeros((d, GAUSSIAN_CHANNELS * 16));
        let decode_b = Array1::zeros(GAUSSIAN_CHANNELS * 16);
        let cloud = unpatchify_gaussians(&grid, &decode_w, &decode_b, &rig, 1.0, 5.0).unwrap();
        assert_eq!(cloud.len(), 6 * 16 * 16);
    }

    #[test]
    fn unpatchify_shape_mismatch_errors() {
        let rig = small_rig(4, 16);
        let (images, pluckers) = random_stack(6, 6, 16, 16);
        let (w, b) = identity_embed(4);
        let grid = patchify(&images, &pluckers, 4, &w, &b).unwrap();
        let d = grid.tokens.dim().1;
        let decode_w = Array2::zeros((d, GAUSSIAN_CHANNELS * 16));
        let decode_b = Array1::zeros(GAUSSIAN_CHANNELS * 16);
        assert!(unpatchify_gaussians(&grid, &decode_w, &decode_b, &rig, 1.0, 5.0).is_err());
    }

    #[test]
    fn raw_unflatten_roundtrip() {
        let (images, pluckers) = random_stack(7, 2, 8, 8);
        let (w, b) = identity_embed(4);
        let grid = patchify(&images, &pluckers, 4, &w, &b).unwrap();
        let mut rng = crate::rng::derive("tok-raw", 0, 0);
        let mut decoded = Array2::zeros((grid.token_count(), GAUSSIAN_CHANNELS * 16));
        decoded.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        let raw = unflatten_gaussian_raw(&decoded, &grid).unwrap();
        let back = flatten_gaussian_raw_grad(&raw, &grid);
        assert_eq!(decoded, back);
    }

    #[test]
    fn raw_activation_gradients_match_fd() {
        let rig = small_rig(4, 4);
        let (centers, dirs) = rig_rays(&rig);
        let n = rig.pixel_count();
        let mut rng = crate::rng::derive("tok-grad", 0, 0);
        let mut raw = Array2::zeros((n, GAUSSIAN_CHANNELS));
        raw.iter_mut().for_each(|x| *x = rng.gen_range(-1.5..1.5));

        // Random linear loss over every splat parameter.
        let pos_w: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let misc_w: Vec<[f64; 11]> = (0..n)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
            .collect();

        let loss = |raw: &Array2<f64>| -> f64 {
            let cloud = cloud_from_raw(raw, &centers, &dirs, DEFAULT_NEAR, DEFAULT_FAR).unwrap();
            cloud
                .splats
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    s.position.dot(&pos_w[i])
                        + s.scale.x * misc_w[i][0]
                        + s.scale.y * misc_w[i][1]
                        + s.scale.z * misc_w[i][2]
                        + s.rotation[0] * misc_w[i][3]
                        + s.rotation[1] * misc_w[i][4]
                        + s.rotation[2] * misc_w[i][5]
                        + s.rotation[3] * misc_w[i][6]
                        + s.opacity * misc_w[i][7]
                        + s.color[0] * misc_w[i][8]
                        + s.color[1] * misc_w[i][9]
                        + s.color[2] * misc_w[i][10]
                })
                .sum()
        };

        let grads = SplatGradients {
            position: pos_w.clone(),
            scale: misc_w.iter().map(|m| Vector3::new(m[0], m[1], m[2])).collect(),
            rotation: misc_w.iter().map(|m| [m[3], m[4], m[5], m[6]]).collect(),
            opacity: misc_w.iter().map(|m| m[7]).collect(),
            color: misc_w.iter().map(|m| [m[8], m[9], m[10]]).collect(),
        };
        let d_raw = cloud_from_raw_backward(&raw, &dirs, DEFAULT_NEAR, DEFAULT_FAR, &grads);

        let h = 1e-6;
        for i in (0..n).step_by(7) {
            for ch in 0..GAUSSIAN_CHANNELS {
                let mut plus = raw.clone();
                let mut minus = raw.clone();
                plus[[i, ch]] += h;
                minus[[i, ch]] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let a = d_raw[[i, ch]];
                assert!(
                    (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-4,
                    "pixel {i} ch {ch}: analytic {a} vs fd {fd}"
                );
            }
        }
    }
}
