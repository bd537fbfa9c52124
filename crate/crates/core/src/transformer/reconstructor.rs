//! Feed-forward pixel-aligned Gaussian reconstructor: patchify multi-view
//! images with their Plücker ray maps, run the joint-attention block stack,
//! decode every token into per-pixel Gaussian parameters.

use ndarray::{Array2, Array4};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::block::{BlockConfig, Blocks};
use super::ops::{HasTensors, LayerNorm, Linear, TensorMut, TensorRef};
use crate::camera::ViewRig;
use crate::error::{Error, Result};
use crate::splat::{SplatCloud, SplatGradients};
use crate::tokenizer::{
    cloud_from_raw, cloud_from_raw_backward, flatten_gaussian_raw_grad, flatten_patches,
    rig_rays, unflatten_gaussian_raw, TokenGrid, GAUSSIAN_CHANNELS, INPUT_CHANNELS,
};

/// Initial decode bias on the raw scale channels. exp(−3) ≈ 0.05 world
/// units, so freshly initialized splats stay around one pixel.
const SCALE_BIAS_INIT: f64 = -3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructorConfig {
    pub block: BlockConfig,
    pub patch: usize,
    pub image_size: usize,
    pub fov_deg: f64,
    pub radius: f64,
    pub near: f64,
    pub far: f64,
}

impl ReconstructorConfig {
    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} must be divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Config(format!(
                "need 0 < near < far, got ({}, {})",
                self.near, self.far
            )));
        }
        Ok(())
    }

    pub fn patch_dim_in(&self) -> usize {
        INPUT_CHANNELS * self.patch * self.patch
    }

    pub fn patch_dim_out(&self) -> usize {
        GAUSSIAN_CHANNELS * self.patch * self.patch
    }
}

#[derive(Debug, Clone)]
pub struct Reconstructor {
    pub cfg: ReconstructorConfig,
    pub embed: Linear,
    pub blocks: Blocks,
    pub final_ln: LayerNorm,
    pub decode: Linear,
}

/// Gradient mirror of [`Reconstructor`]; tensor names match one to one.
#[derive(Debug, Clone)]
pub struct ReconstructorGrads {
    pub embed: Linear,
    pub blocks: Blocks,
    pub final_ln: LayerNorm,
    pub decode: Linear,
}

/// Activations cached by the forward pass for the backward pass.
pub struct ReconstructorCache {
    pub raw_patches: Array2<f64>,
    pub block_inputs: Vec<Array2<f64>>,
    pub stack_out: Array2<f64>,
    pub normed: Array2<f64>,
    pub raw_pixels: Array2<f64>,
    pub grid: TokenGrid,
    pub dirs: Vec<Vector3<f64>>,
}

impl Reconstructor {
    pub fn init(cfg: ReconstructorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::rng::derive("reconstructor-init", cfg.block.seed, 0);
        let d = cfg.block.dim;
        let embed = Linear::init(cfg.patch_dim_in(), d, 0.02, &mut rng);
        let blocks = Blocks::init(&cfg.block, &mut rng)?;
        let mut decode = Linear::init(d, cfg.patch_dim_out(), 0.02, &mut rng);
        for pix in 0..cfg.patch * cfg.patch {
            for k in 1..4 {
                decode.b[pix * GAUSSIAN_CHANNELS + k] = SCALE_BIAS_INIT;
            }
        }
        Ok(Self {
            final_ln: LayerNorm::new(d),
            cfg,
            embed,
            blocks,
            decode,
        })
    }

    pub fn zero_grads(&self) -> ReconstructorGrads {
        ReconstructorGrads {
            embed: Linear::zeros(self.embed.w.nrows(), self.embed.w.ncols()),
            blocks: self.blocks.zeros_like(),
            final_ln: LayerNorm::zeros(self.final_ln.gamma.len()),
            decode: Linear::zeros(self.decode.w.nrows(), self.decode.w.ncols()),
        }
    }

    fn check_inputs(&self, images: &Array4<f64>, pluckers: &Array4<f64>, rig: &ViewRig) -> Result<()> {
        let s = self.cfg.image_size;
        let v = rig.len();
        if images.dim() != (v, s, s, 3) || pluckers.dim() != (v, s, s, 6) {
            return Err(Error::Shape(format!(
                "expected {v} views of {s}x{s} images/pluckers, got {:?} and {:?}",
                images.dim(),
                pluckers.dim()
            )));
        }
        if rig.intrinsics.width != s || rig.intrinsics.height != s {
            return Err(Error::Shape(format!(
                "rig resolution {}x{} does not match model image size {s}",
                rig.intrinsics.width, rig.intrinsics.height
            )));
        }
        Ok(())
    }

    /// Full forward pass: images + Plücker maps → pixel-aligned splats.
    pub fn forward(
        &self,
        images: &Array4<f64>,
        pluckers: &Array4<f64>,
        rig: &ViewRig,
    ) -> Result<(SplatCloud, ReconstructorCache)> {
        self.check_inputs(images, pluckers, rig)?;
        let p = self.cfg.patch;
        let raw_patches = flatten_patches(images, pluckers, p)?;
        let tokens0 = self.embed.forward(&raw_patches);
        let (stack_out, block_inputs) = self.blocks.forward_cached(&tokens0);
        let normed = self.final_ln.forward(&stack_out);
        let decoded = self.decode.forward(&normed);

        let (v, h, w, _) = images.dim();
        let grid = TokenGrid {
            tokens: tokens0,
            views: v,
            patch: p,
            grid_h: h / p,
            grid_w: w / p,
        };
        let raw_pixels = unflatten_gaussian_raw(&decoded, &grid)?;
        let (centers, dirs) = rig_rays(rig);
        let cloud = cloud_from_raw(&raw_pixels, &centers, &dirs, self.cfg.near, self.cfg.far)?;
        Ok((
            cloud,
            ReconstructorCache {
                raw_patches,
                block_inputs,
                stack_out,
                normed,
                raw_pixels,
                grid,
                dirs,
            },
        ))
    }

    /// Backward from per-splat gradients to parameter gradients.
    pub fn backward(
        &self,
        cache: &ReconstructorCache,
        splat_grads: &SplatGradients,
        grads: &mut ReconstructorGrads,
    ) {
        let d_raw = cloud_from_raw_backward(
            &cache.raw_pixels,
            &cache.dirs,
            self.cfg.near,
            self.cfg.far,
            splat_grads,
        );
        let d_decoded = flatten_gaussian_raw_grad(&d_raw, &cache.grid);
        let d_normed = self.decode.backward(&cache.normed, &d_decoded, &mut grads.decode);
        let d_stack = self
            .final_ln
            .backward(&cache.stack_out, &d_normed, &mut grads.final_ln);
        let d_tokens0 = self.blocks.backward(&cache.block_inputs, &d_stack, &mut grads.blocks);
        let _ = self
            .embed
            .backward(&cache.raw_patches, &d_tokens0, &mut grads.embed);
    }
}

impl HasTensors for Reconstructor {
    fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out = Vec::new();
        super::linear_refs(&mut out, "embed", &self.embed);
        super::blocks_refs(&mut out, "blocks", &self.blocks);
        super::ln_refs(&mut out, "final_ln", &self.final_ln);
        super::linear_refs(&mut out, "decode", &self.decode);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        let mut out = Vec::new();
        super::linear_muts(&mut out, "embed", &mut self.embed);
        super::blocks_muts(&mut out, "blocks", &mut self.blocks);
        super::ln_muts(&mut out, "final_ln", &mut self.final_ln);
        super::linear_muts(&mut out, "decode", &mut self.decode);
        out
    }
}

impl HasTensors for ReconstructorGrads {
    fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out = Vec::new();
        super::linear_refs(&mut out, "embed", &self.embed);
        super::blocks_refs(&mut out, "blocks", &self.blocks);
        super::ln_refs(&mut out, "final_ln", &self.final_ln);
        super::linear_refs(&mut out, "decode", &self.decode);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        let mut out = Vec::new();
        super::linear_muts(&mut out, "embed", &mut self.embed);
        super::blocks_muts(&mut out, "blocks", &mut self.blocks);
        super::ln_muts(&mut out, "final_ln", &mut self.final_ln);
        super::linear_muts(&mut out, "decode", &mut self.decode);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{make_view_ring, plucker_map, Intrinsics};
    use crate::splat::render_gradients;
    use ndarray::Array3;
    use rand::Rng;

    pub(crate) fn mini_config(depth: usize, dim: usize, size: usize, patch: usize) -> ReconstructorConfig {
        ReconstructorConfig {
            block: BlockConfig {
                depth,
                dim,
                heads: 2,
                mlp_ratio: 2.0,
                seed: 7,
            },
            patch,
            image_size: size,
            fov_deg: 50.0,
            radius: 2.7,
            near: 1.5,
            far: 4.5,
        }
    }

    fn rig_and_inputs(
        views: usize,
        size: usize,
        seed: u64,
    ) -> (ViewRig, Array4<f64>, Array4<f64>) {
        let intr = Intrinsics::new(50.0, size, size).unwrap();
        let rig = if [4, 6, 8].contains(&views) {
            make_view_ring(0.0, views, 2.7, intr).unwrap()
        } else {
            let az_el: Vec<(f64, f64)> =
                (0..views).map(|i| (i as f64 * 360.0 / views as f64, 0.0)).collect();
            ViewRig::from_az_el(intr, 2.7, &az_el).unwrap()
        };
        let mut rng = crate::rng::derive("recon-test", seed, 0);
        let mut images = Array4::zeros((views, size, size, 3));
        images.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
        let mut pluckers = Array4::zeros((views, size, size, 6));
        for (vi, view) in rig.views.iter().enumerate() {
            let pm = plucker_map(&rig.intrinsics, &view.pose);
            pluckers
                .index_axis_mut(ndarray::Axis(0), vi)
                .assign(&pm.data);
        }
        (rig, images, pluckers)
    }

    #[test]
    fn zero_decode_gives_midrange_cloud() {
        let mut model = Reconstructor::init(mini_config(2, 16, 8, 4)).unwrap();
        model.decode = Linear::zeros(model.decode.w.nrows(), model.decode.w.ncols());
        let (rig, images, pluckers) = rig_and_inputs(4, 8, 0);
        let (cloud, _) = model.forward(&images, &pluckers, &rig).unwrap();
        assert_eq!(cloud.len(), 4 * 8 * 8);
        for s in &cloud.splats {
            assert_eq!(s.opacity, 0.5);
            assert_eq!(s.color, [0.5, 0.5, 0.5]);
            assert_eq!(s.rotation, [1.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn output_count_follows_views() {
        let model = Reconstructor::init(mini_config(1, 16, 8, 4)).unwrap();
        for views in [4usize, 6, 8] {
            let (rig, images, pluckers) = rig_and_inputs(views, 8, 1);
            let (cloud, _) = model.forward(&images, &pluckers, &rig).unwrap();
            assert_eq!(cloud.len(), views * 64);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Reconstructor::init(mini_config(2, 16, 8, 4)).unwrap();
        let (rig, images, pluckers) = rig_and_inputs(4, 8, 2);
        let (a, _) = model.forward(&images, &pluckers, &rig).unwrap();
        let (b, _) = model.forward(&images, &pluckers, &rig).unwrap();
        assert_eq!(a, b);
    }

    /// Rendered-pixel loss gradcheck through renderer, activations, decode,
    /// blocks and embed, for every parameter tensor of a miniature model.
    #[test]
    fn full_model_gradients_match_fd() {
        let cfg = mini_config(2, 32, 8, 4);
        let mut model = Reconstructor::init(cfg).unwrap();
        // Residual projections start at zero; randomize them so gradients
        // reach every tensor (qkv, ln1) through non-trivial paths.
        let mut prng = crate::rng::derive("recon-perturb", 0, 0);
        for b in &mut model.blocks.blocks {
            b.proj = Linear::init(b.proj.w.nrows(), b.proj.w.ncols(), 0.05, &mut prng);
            b.fc2 = Linear::init(b.fc2.w.nrows(), b.fc2.w.ncols(), 0.05, &mut prng);
        }
        let (rig, images, pluckers) = rig_and_inputs(2, 8, 3);

        let mut rng = crate::rng::derive("recon-up", 0, 0);
        let upstreams: Vec<Array3<f64>> = (0..rig.len())
            .map(|_| {
                let mut u = Array3::zeros((8, 8, 3));
                u.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
                u
            })
            .collect();

        let loss = |m: &Reconstructor| -> f64 {
            let (cloud, _) = m.forward(&images, &pluckers, &rig).unwrap();
            let mut total = 0.0;
            for (view, up) in rig.views.iter().zip(upstreams.iter()) {
                let img = crate::splat::render(&cloud, &rig.intrinsics, &view.pose, [0.2; 3]);
                total += img.rgb.iter().zip(up.iter()).map(|(a, b)| a * b).sum::<f64>();
            }
            total
        };

        // Analytic gradients.
        let (cloud, cache) = model.forward(&images, &pluckers, &rig).unwrap();
        let mut splat_grads = crate::splat::SplatGradients {
            position: vec![nalgebra::Vector3::zeros(); cloud.len()],
            scale: vec![nalgebra::Vector3::zeros(); cloud.len()],
            rotation: vec![[0.0; 4]; cloud.len()],
            opacity: vec![0.0; cloud.len()],
            color: vec![[0.0; 3]; cloud.len()],
        };
        for (view, up) in rig.views.iter().zip(upstreams.iter()) {
            let (_, g) = render_gradients(&cloud, &rig.intrinsics, &view.pose, [0.2; 3], up);
            for i in 0..cloud.len() {
                splat_grads.position[i] += g.position[i];
                splat_grads.scale[i] += g.scale[i];
                for k in 0..4 {
                    splat_grads.rotation[i][k] += g.rotation[i][k];
                }
                splat_grads.opacity[i] += g.opacity[i];
                for k in 0..3 {
                    splat_grads.color[i][k] += g.color[i][k];
                }
            }
        }
        let mut grads = model.zero_grads();
        model.backward(&cache, &splat_grads, &mut grads);

        // Spot-check a spread of parameters in every tensor via FD.
        let h = 1e-5;
        let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let (len, analytic_vals) = {
                let gt = grads.tensors();
                let (_, g) = gt.iter().find(|(n, _)| *n == name).unwrap();
                let vals: Vec<f64> = g.iter().cloned().collect();
                (vals.len(), vals)
            };
            // Probe up to 3 entries per tensor, spread across it.
            let probes: Vec<usize> = [0, len / 2, len.saturating_sub(1)]
                .into_iter()
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            for idx in probes {
                let mut mp = model.clone();
                let mut mm = model.clone();
                for (n, mut t) in mp.tensors_mut() {
                    if n == name {
                        t.apply_flat(|i, v| {
                            if i == idx {
                                *v += h;
                            }
                        });
                    }
                }
                for (n, mut t) in mm.tensors_mut() {
                    if n == name {
                        t.apply_flat(|i, v| {
                            if i == idx {
                                *v -= h;
                            }
                        });
                    }
                }
                let fd = (loss(&mp) - loss(&mm)) / (2.0 * h);
                let a = analytic_vals[idx];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-3, "{name}[{idx}]: analytic {a} vs fd {fd} (rel {rel:.2e})");
            }
        }
    }
}
