//! Toy pixel-space noise predictor for multi-view diffusion.
//!
//! The joint token sequence holds every noisy view's patch tokens followed
//! by the condition image's patch tokens, so self-attention couples all
//! views and the condition. Conditioning enters as: the condition image
//! patchified and appended to the sequence, a sinusoidal timestep embedding
//! projected and added to every token, and a learned per-view-slot embedding
//! added to each view's tokens. Dropping the condition (the classifier-free
//! branch) replaces every condition token with one learned null vector.

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::block::{BlockConfig, Blocks};
use super::ops::{timestep_embedding, HasTensors, LayerNorm, Linear, TensorMut, TensorRef};
use crate::error::{Error, Result};
use crate::tokenizer::{flatten_image_patches, unflatten_image_patches};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePredictorConfig {
    pub block: BlockConfig,
    pub patch: usize,
    pub image_size: usize,
    /// Number of generated views N.
    pub views: usize,
    pub t_embed_dim: usize,
    /// Diffusion chain length; forward rejects t outside [1, train_steps].
    pub train_steps: usize,
}

impl NoisePredictorConfig {
    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if ![4, 6, 8].contains(&self.views) {
            return Err(Error::Config(format!(
                "view count must be 4, 6 or 8, got {}",
                self.views
            )));
        }
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} must be divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.t_embed_dim % 2 != 0 || self.t_embed_dim == 0 {
            return Err(Error::Config("t_embed_dim must be even and positive".into()));
        }
        if self.train_steps == 0 {
            return Err(Error::Config("train_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn patches_per_view(&self) -> usize {
        (self.image_size / self.patch) * (self.image_size / self.patch)
    }
}

#[derive(Debug, Clone)]
pub struct NoisePredictor {
    pub cfg: NoisePredictorConfig,
    pub patch_embed: Linear,
    pub cond_embed: Linear,
    /// Learned per-view-slot embeddings, one row per view.
    pub view_embed: Array2<f64>,
    /// Added to every condition token to mark it as conditioning.
    pub cond_tag: Array1<f64>,
    /// Learned null-condition vector for the classifier-free branch.
    pub null_embed: Array1<f64>,
    pub t_proj: Linear,
    pub blocks: Blocks,
    pub final_ln: LayerNorm,
    pub out: Linear,
}

/// Gradient mirror of [`NoisePredictor`].
#[derive(Debug, Clone)]
pub struct NoisePredictorGrads {
    pub patch_embed: Linear,
    pub cond_embed: Linear,
    pub view_embed: Array2<f64>,
    pub cond_tag: Array1<f64>,
    pub null_embed: Array1<f64>,
    pub t_proj: Linear,
    pub blocks: Blocks,
    pub final_ln: LayerNorm,
    pub out: Linear,
}

pub struct NoiseCache {
    noisy_patches: Array2<f64>,
    cond_patches: Option<Array2<f64>>,
    t_sin: Array1<f64>,
    block_inputs: Vec<Array2<f64>>,
    stack_out: Array2<f64>,
    normed: Array2<f64>,
}

impl NoisePredictor {
    pub fn init(cfg: NoisePredictorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::rng::derive("noise-init", cfg.block.seed, 0);
        let d = cfg.block.dim;
        let pd = cfg.patch_dim();
        let patch_embed = Linear::init(pd, d, 0.02, &mut rng);
        let cond_embed = Linear::init(pd, d, 0.02, &mut rng);
        let mut view_embed = Array2::zeros((cfg.views, d));
        view_embed
            .iter_mut()
            .for_each(|v| *v = super::ops::trunc_normal(&mut rng, 0.02));
        let mut cond_tag = Array1::zeros(d);
        cond_tag
            .iter_mut()
            .for_each(|v| *v = super::ops::trunc_normal(&mut rng, 0.02));
        let mut null_embed = Array1::zeros(d);
        null_embed
            .iter_mut()
            .for_each(|v| *v = super::ops::trunc_normal(&mut rng, 0.02));
        let t_proj = Linear::init(cfg.t_embed_dim, d, 0.02, &mut rng);
        let blocks = Blocks::init(&cfg.block, &mut rng)?;
        let out = Linear::init(d, pd, 0.02, &mut rng);
        Ok(Self {
            final_ln: LayerNorm::new(d),
            cfg,
            patch_embed,
            cond_embed,
            view_embed,
            cond_tag,
            null_embed,
            t_proj,
            blocks,
            out,
        })
    }

    pub fn zero_grads(&self) -> NoisePredictorGrads {
        NoisePredictorGrads {
            patch_embed: Linear::zeros(self.patch_embed.w.nrows(), self.patch_embed.w.ncols()),
            cond_embed: Linear::zeros(self.cond_embed.w.nrows(), self.cond_embed.w.ncols()),
            view_embed: Array2::zeros(self.view_embed.raw_dim()),
            cond_tag: Array1::zeros(self.cond_tag.len()),
            null_embed: Array1::zeros(self.null_embed.len()),
            t_proj: Linear::zeros(self.t_proj.w.nrows(), self.t_proj.w.ncols()),
            blocks: self.blocks.zeros_like(),
            final_ln: LayerNorm::zeros(self.final_ln.gamma.len()),
            out: Linear::zeros(self.out.w.nrows(), self.out.w.ncols()),
        }
    }

    fn check_inputs(&self, noisy: &Array4<f64>, t: usize) -> Result<()> {
        let s = self.cfg.image_size;
        if noisy.dim() != (self.cfg.views, s, s, 3) {
            return Err(Error::Shape(format!(
                "expected {}x{s}x{s}x3 noisy views, got {:?}",
                self.cfg.views,
                noisy.dim()
            )));
        }
        if t < 1 || t > self.cfg.train_steps {
            return Err(Error::Config(format!(
                "timestep {t} outside [1, {}]",
                self.cfg.train_steps
            )));
        }
        Ok(())
    }

    /// Predict per-view noise for the joint stack `x_t^{1:N}`. `cond` is
    /// the condition image; `None` evaluates the null-condition branch.
    pub fn forward(
        &self,
        noisy: &Array4<f64>,
        t: usize,
        cond: Option<&Array3<f64>>,
    ) -> Result<(Array4<f64>, NoiseCache)> {
        self.check_inputs(noisy, t)?;
        let p = self.cfg.patch;
        let s = self.cfg.image_size;
        let d = self.cfg.block.dim;
        let per_view = self.cfg.patches_per_view();
        let view_rows = self.cfg.views * per_view;

        let noisy_patches = flatten_image_patches(noisy, p)?;
        let t_sin = timestep_embedding(t as f64, self.cfg.t_embed_dim);
        let t_vec = self
            .t_proj
            .forward(&t_sin.clone().insert_axis(Axis(0)).to_owned())
            .index_axis(Axis(0), 0)
            .to_owned();

        let mut seq = Array2::zeros((view_rows + per_view, d));
        let embedded = self.patch_embed.forward(&noisy_patches);
        for v in 0..self.cfg.views {
            for r in 0..per_view {
                let row = v * per_view + r;
                for j in 0..d {
                    seq[[row, j]] = embedded[[row, j]] + self.view_embed[[v, j]] + t_vec[j];
                }
            }
        }
        let cond_patches = match cond {
            Some(y) => {
                if y.dim() != (s, s, 3) {
                    return Err(Error::Shape(format!(
                        "condition image must be {s}x{s}x3, got {:?}",
                        y.dim()
                    )));
                }
                let stack = y.clone().insert_axis(Axis(0));
                let patches = flatten_image_patches(&stack, p)?;
                let emb = self.cond_embed.forward(&patches);
                for r in 0..per_view {
                    for j in 0..d {
                        seq[[view_rows + r, j]] = emb[[r, j]] + self.cond_tag[j] + t_vec[j];
                    }
                }
                Some(patches)
            }
            None => {
                for r in 0..per_view {
                    for j in 0..d {
                        seq[[view_rows + r, j]] = self.null_embed[j] + self.cond_tag[j] + t_vec[j];
                    }
                }
                None
            }
        };

        let (stack_out, block_inputs) = self.blocks.forward_cached(&seq);
        let normed = self.final_ln.forward(&stack_out);
        let out_rows = self.out.forward(&normed.slice(s![..view_rows, ..]).to_owned());
        let noise = unflatten_image_patches(&out_rows, p, self.cfg.views, s, s, 3)?;
        Ok((
            noise,
            NoiseCache {
                noisy_patches,
                cond_patches,
                t_sin,
                block_inputs,
                stack_out,
                normed,
            },
        ))
    }

    /// Backward from per-pixel noise gradients to parameter gradients.
    pub fn backward(
        &self,
        cache: &NoiseCache,
        d_noise: &Array4<f64>,
        grads: &mut NoisePredictorGrads,
    ) -> Result<()> {
        let p = self.cfg.patch;
        let d = self.cfg.block.dim;
        let per_view = self.cfg.patches_per_view();
        let view_rows = self.cfg.views * per_view;

        let d_out_rows = flatten_image_patches(d_noise, p)?;
        let normed_view = cache.normed.slice(s![..view_rows, ..]).to_owned();
        let d_normed_view = self.out.backward(&normed_view, &d_out_rows, &mut grads.out);
        let mut d_normed = Array2::zeros(cache.normed.raw_dim());
        d_normed
            .slice_mut(s![..view_rows, ..])
            .assign(&d_normed_view);

        let d_stack = self
            .final_ln
            .backward(&cache.stack_out, &d_normed, &mut grads.final_ln);
        let d_seq = self
            .blocks
            .backward(&cache.block_inputs, &d_stack, &mut grads.blocks);

        // View tokens: patch embedding, per-view slot embeddings.
        let d_view_tokens = d_seq.slice(s![..view_rows, ..]).to_owned();
        let _ = self
            .patch_embed
            .backward(&cache.noisy_patches, &d_view_tokens, &mut grads.patch_embed);
        for v in 0..self.cfg.views {
            for r in 0..per_view {
                for j in 0..d {
                    grads.view_embed[[v, j]] += d_view_tokens[[v * per_view + r, j]];
                }
            }
        }

        // Condition tokens: embed or null vector, plus the tag.
        let d_cond = d_seq.slice(s![view_rows.., ..]).to_owned();
        match &cache.cond_patches {
            Some(patches) => {
                let _ = self
                    .cond_embed
                    .backward(patches, &d_cond, &mut grads.cond_embed);
            }
            None => {
                for r in 0..per_view {
                    for j in 0..d {
                        grads.null_embed[j] += d_cond[[r, j]];
                    }
                }
            }
        }
        for r in 0..per_view {
            for j in 0..d {
                grads.cond_tag[j] += d_cond[[r, j]];
            }
        }

        // Timestep vector reaches every token.
        let d_t_vec = d_seq.sum_axis(Axis(0));
        let t_in = cache.t_sin.clone().insert_axis(Axis(0)).to_owned();
        let d_t = d_t_vec.insert_axis(Axis(0)).to_owned();
        let _ = self.t_proj.backward(&t_in, &d_t, &mut grads.t_proj);
        Ok(())
    }
}

fn np_refs<'a>(m: NoisePredictor_<'a>) -> Vec<(String, TensorRef<'a>)> {
    let mut out = Vec::new();
    super::linear_refs(&mut out, "patch_embed", m.patch_embed);
    super::linear_refs(&mut out, "cond_embed", m.cond_embed);
    out.push(("view_embed".into(), TensorRef::M(m.view_embed)));
    out.push(("cond_tag".into(), TensorRef::V(m.cond_tag)));
    out.push(("null_embed".into(), TensorRef::V(m.null_embed)));
    super::linear_refs(&mut out, "t_proj", m.t_proj);
    super::blocks_refs(&mut out, "blocks", m.blocks);
    super::ln_refs(&mut out, "final_ln", m.final_ln);
    super::linear_refs(&mut out, "out", m.out);
    out
}

/// Borrowed field bundle so the parameter and gradient structs share one
/// naming implementation.
struct NoisePredictor_<'a> {
    patch_embed: &'a Linear,
    cond_embed: &'a Linear,
    view_embed: &'a Array2<f64>,
    cond_tag: &'a Array1<f64>,
    null_embed: &'a Array1<f64>,
    t_proj: &'a Linear,
    blocks: &'a Blocks,
    final_ln: &'a LayerNorm,
    out: &'a Linear,
}

macro_rules! np_tensors_mut {
    ($self:ident) => {{
        let mut out = Vec::new();
        super::linear_muts(&mut out, "patch_embed", &mut $self.patch_embed);
        super::linear_muts(&mut out, "cond_embed", &mut $self.cond_embed);
        out.push(("view_embed".into(), TensorMut::M(&mut $self.view_embed)));
        out.push(("cond_tag".into(), TensorMut::V(&mut $self.cond_tag)));
        out.push(("null_embed".into(), TensorMut::V(&mut $self.null_embed)));
        super::linear_muts(&mut out, "t_proj", &mut $self.t_proj);
        super::blocks_muts(&mut out, "blocks", &mut $self.blocks);
        super::ln_muts(&mut out, "final_ln", &mut $self.final_ln);
        super::linear_muts(&mut out, "out", &mut $self.out);
        out
    }};
}

impl HasTensors for NoisePredictor {
    fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        np_refs(NoisePredictor_ {
            patch_embed: &self.patch_embed,
            cond_embed: &self.cond_embed,
            view_embed: &self.view_embed,
            cond_tag: &self.cond_tag,
            null_embed: &self.null_embed,
            t_proj: &self.t_proj,
            blocks: &self.blocks,
            final_ln: &self.final_ln,
            out: &self.out,
        })
    }

    fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        np_tensors_mut!(self)
    }
}

impl HasTensors for NoisePredictorGrads {
    fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        np_refs(NoisePredictor_ {
            patch_embed: &self.patch_embed,
            cond_embed: &self.cond_embed,
            view_embed: &self.view_embed,
            cond_tag: &self.cond_tag,
            null_embed: &self.null_embed,
            t_proj: &self.t_proj,
            blocks: &self.blocks,
            final_ln: &self.final_ln,
            out: &self.out,
        })
    }

    fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        np_tensors_mut!(self)
    }
}
