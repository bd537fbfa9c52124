//! The shared transformer backbone: Pre-LN blocks with multi-head
//! self-attention, the multi-view attention reshape, the pixel-aligned
//! Gaussian reconstructor, and the toy pixel-space noise predictor for
//! multi-view diffusion.

pub mod block;
pub mod checkpoint;
pub mod noise;
pub mod ops;
pub mod reconstructor;

pub use block::{multiview_attend, Block, BlockConfig, Blocks, MultiViewTensor};
pub use noise::{NoisePredictor, NoisePredictorConfig, NoisePredictorGrads};
pub use ops::{HasTensors, LayerNorm, Linear, TensorMut, TensorRef};
pub use reconstructor::{Reconstructor, ReconstructorConfig, ReconstructorGrads};

use ops::{TensorMut as TM, TensorRef as TR};

/// Named-tensor plumbing shared by the model structs.
pub(crate) fn linear_refs<'a>(out: &mut Vec<(String, TR<'a>)>, name: &str, l: &'a Linear) {
    out.push((format!("{name}.w"), TR::M(&l.w)));
    out.push((format!("{name}.b"), TR::V(&l.b)));
}

pub(crate) fn linear_muts<'a>(out: &mut Vec<(String, TM<'a>)>, name: &str, l: &'a mut Linear) {
    out.push((format!("{name}.w"), TM::M(&mut l.w)));
    out.push((format!("{name}.b"), TM::V(&mut l.b)));
}

pub(crate) fn ln_refs<'a>(out: &mut Vec<(String, TR<'a>)>, name: &str, l: &'a LayerNorm) {
    out.push((format!("{name}.gamma"), TR::V(&l.gamma)));
    out.push((format!("{name}.beta"), TR::V(&l.beta)));
}

pub(crate) fn ln_muts<'a>(out: &mut Vec<(String, TM<'a>)>, name: &str, l: &'a mut LayerNorm) {
    out.push((format!("{name}.gamma"), TM::V(&mut l.gamma)));
    out.push((format!("{name}.beta"), TM::V(&mut l.beta)));
}

pub(crate) fn blocks_refs<'a>(out: &mut Vec<(String, TR<'a>)>, prefix: &str, blocks: &'a Blocks) {
    for (i, b) in blocks.blocks.iter().enumerate() {
        ln_refs(out, &format!("{prefix}.{i}.ln1"), &b.ln1);
        linear_refs(out, &format!("{prefix}.{i}.qkv"), &b.qkv);
        linear_refs(out, &format!("{prefix}.{i}.proj"), &b.proj);
        ln_refs(out, &format!("{prefix}.{i}.ln2"), &b.ln2);
        linear_refs(out, &format!("{prefix}.{i}.fc1"), &b.fc1);
        linear_refs(out, &format!("{prefix}.{i}.fc2"), &b.fc2);
    }
}

pub(crate) fn blocks_muts<'a>(
    out: &mut Vec<(String, TM<'a>)>,
    prefix: &str,
    blocks: &'a mut Blocks,
) {
    for (i, b) in blocks.blocks.iter_mut().enumerate() {
        ln_muts(out, &format!("{prefix}.{i}.ln1"), &mut b.ln1);
        linear_muts(out, &format!("{prefix}.{i}.qkv"), &mut b.qkv);
        linear_muts(out, &format!("{prefix}.{i}.proj"), &mut b.proj);
        ln_muts(out, &format!("{prefix}.{i}.ln2"), &mut b.ln2);
        linear_muts(out, &format!("{prefix}.{i}.fc1"), &mut b.fc1);
        linear_muts(out, &format!("{prefix}.{i}.fc2"), &mut b.fc2);
    }
}
