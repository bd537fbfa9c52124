//! Pre-LayerNorm transformer blocks with residual connections, multi-head
//! self-attention and an MLP, plus the multi-view attention reshape.
//!
//! Backward passes recompute block internals from the cached block input
//! (checkpointing), so the stack only stores one activation per block.

use ndarray::{s, Array2, Array5, Axis};
use rand_chacha::ChaCha20Rng;

use super::ops::{
    gelu, gelu_grad, softmax_rows, softmax_rows_backward, LayerNorm, Linear,
};
use crate::error::{Error, Result};

/// Transformer stack shape.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlockConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub seed: u64,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 || self.mlp_ratio <= 0.0 {
            return Err(Error::Config("depth and mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// One Pre-LN block: x + MHSA(LN(x)), then + MLP(LN(·)).
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl Block {
    pub fn init(cfg: &BlockConfig, rng: &mut ChaCha20Rng) -> Self {
        let d = cfg.dim;
        Self {
            ln1: LayerNorm::new(d),
            qkv: Linear::init(d, 3 * d, 0.02, rng),
            // Output projections start at zero so a fresh block is the
            // identity along the residual path.
            proj: Linear::zeros(d, d),
            ln2: LayerNorm::new(d),
            fc1: Linear::init(d, cfg.mlp_dim(), 0.02, rng),
            fc2: Linear::zeros(cfg.mlp_dim(), d),
            heads: cfg.heads,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            ln1: LayerNorm::zeros(self.ln1.gamma.len()),
            qkv: Linear::zeros(self.qkv.w.nrows(), self.qkv.w.ncols()),
            proj: Linear::zeros(self.proj.w.nrows(), self.proj.w.ncols()),
            ln2: LayerNorm::zeros(self.ln2.gamma.len()),
            fc1: Linear::zeros(self.fc1.w.nrows(), self.fc1.w.ncols()),
            fc2: Linear::zeros(self.fc2.w.nrows(), self.fc2.w.ncols()),
            heads: self.heads,
        }
    }

    /// Multi-head self-attention over already-normalized tokens.
    fn attend(&self, xn: &Array2<f64>) -> Array2<f64> {
        let (t, d) = xn.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qkv = self.qkv.forward(xn);
        let mut out = Array2::zeros((t, d));
        for h in 0..self.heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut scores = q.dot(&k.t());
            scores *= scale;
            softmax_rows(&mut scores);
            let o = scores.dot(&v);
            out.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&o);
        }
        self.proj.forward(&out)
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let xn = self.ln1.forward(x);
        let mut y = x + &self.attend(&xn);
        let yn = self.ln2.forward(&y);
        let mut hidden = self.fc1.forward(&yn);
        hidden.mapv_inplace(gelu);
        y += &self.fc2.forward(&hidden);
        y
    }

    /// Backward from the cached block input; recomputes internals. Returns
    /// dx and accumulates parameter gradients into `grad`.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Block) -> Array2<f64> {
        let (t, d) = x.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // Recompute forward intermediates.
        let xn = self.ln1.forward(x);
        let qkv = self.qkv.forward(&xn);
        let mut probs: Vec<Array2<f64>> = Vec::with_capacity(self.heads);
        let mut attn_cat = Array2::zeros((t, d));
        for h in 0..self.heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut scores = q.dot(&k.t());
            scores *= scale;
            softmax_rows(&mut scores);
            attn_cat
                .slice_mut(s![.., h * dh..(h + 1) * dh])
                .assign(&scores.dot(&v));
            probs.push(scores);
        }
        let y_mid = x + &self.proj.forward(&attn_cat);
        let yn = self.ln2.forward(&y_mid);
        let pre_act = self.fc1.forward(&yn);
        let hidden = pre_act.mapv(gelu);

        // MLP backward: y = y_mid + fc2(gelu(fc1(ln2(y_mid)))).
        let d_hidden = self.fc2.backward(&hidden, dy, &mut grad.fc2);
        let d_pre: Array2<f64> = &d_hidden * &pre_act.mapv(gelu_grad);
        let d_yn = self.fc1.backward(&yn, &d_pre, &mut grad.fc1);
        let mut d_y_mid = self.ln2.backward(&y_mid, &d_yn, &mut grad.ln2);
        d_y_mid += dy;

        // Attention backward: y_mid = x + proj(attn_cat).
        let d_attn_cat = self.proj.backward(&attn_cat, &d_y_mid, &mut grad.proj);
        let mut d_qkv = Array2::zeros((t, 3 * d));
        for h in 0..self.heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let p = &probs[h];
            let d_o = d_attn_cat.slice(s![.., h * dh..(h + 1) * dh]);

            let d_p = d_o.dot(&v.t());
            let d_v = p.t().dot(&d_o);
            let mut d_scores = softmax_rows_backward(p, &d_p);
            d_scores *= scale;
            let d_q = d_scores.dot(&k);
            let d_k = d_scores.t().dot(&q);

            d_qkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&d_q);
            d_qkv
                .slice_mut(s![.., d + h * dh..d + (h + 1) * dh])
                .assign(&d_k);
            d_qkv
                .slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh])
                .assign(&d_v);
        }
        let d_xn = self.qkv.backward(&xn, &d_qkv, &mut grad.qkv);
        let mut dx = self.ln1.backward(x, &d_xn, &mut grad.ln1);
        dx += &d_y_mid;
        dx
    }
}

/// A stack of blocks sharing one config.
#[derive(Debug, Clone)]
pub struct Blocks {
    pub blocks: Vec<Block>,
}

impl Blocks {
    pub fn init(cfg: &BlockConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            blocks: (0..cfg.depth).map(|_| Block::init(cfg, rng)).collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.clone();
        for b in &self.blocks {
            y = b.forward(&y);
        }
        y
    }

    /// Forward keeping each block's input for the backward pass.
    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, Vec<Array2<f64>>) {
        let mut inputs = Vec::with_capacity(self.blocks.len());
        let mut y = x.clone();
        for b in &self.blocks {
            inputs.push(y.clone());
            y = b.forward(&y);
        }
        (y, inputs)
    }

    pub fn backward(
        &self,
        inputs: &[Array2<f64>],
        dy: &Array2<f64>,
        grad: &mut Blocks,
    ) -> Array2<f64> {
        let mut d = dy.clone();
        for (b, (x, g)) in self
            .blocks
            .iter()
            .zip(inputs.iter().zip(grad.blocks.iter_mut()))
            .rev()
        {
            d = b.backward(x, &d, g);
        }
        d
    }
}

/// B×V×H×W×C feature grid with explicit axis tags.
#[derive(Debug, Clone)]
pub struct MultiViewTensor {
    pub data: Array5<f64>,
}

impl MultiViewTensor {
    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        self.data.dim()
    }
}

/// Joint attention over all views: reshape B×V×H×W×C to B×(VHW)×C, run the
/// block stack over the unified token sequence, reshape back.
pub fn multiview_attend(x: &MultiViewTensor, blocks: &Blocks) -> MultiViewTensor {
    let (b, v, h, w, c) = x.dims();
    let mut out = Array5::zeros((b, v, h, w, c));
    for bi in 0..b {
        let flat = x
            .data
            .index_axis(Axis(0), bi)
            .to_owned()
            .into_shape_with_order((v * h * w, c))
            .expect("contiguous reshape");
        let y = blocks.forward(&flat);
        let back = y
            .into_shape_with_order((v, h, w, c))
            .expect("contiguous reshape");
        out.index_axis_mut(Axis(0), bi).assign(&back);
    }
    MultiViewTensor { data: out }
}
