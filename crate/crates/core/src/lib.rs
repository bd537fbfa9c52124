//! Single-image to 3D Gaussian head pipeline.
//!
//! The pipeline runs in three stages: a multi-view diffusion model generates
//! an azimuth ring of head views from one input image, a transformer-based
//! reconstructor lifts those views (with per-pixel Plücker ray conditioning)
//! into pixel-aligned 3D Gaussian splats, and a differentiable CPU splatting
//! renderer closes the training loop. A small autoregressive deformation
//! network extends static reconstructions to video. Everything runs at desk
//! scale in double precision on procedurally generated data.

pub mod camera;
pub mod deform4d;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod rng;
pub mod splat;
pub mod synthdata;
pub mod tokenizer;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
