//! Lightweight monocular stereo view synthesis.
//!
//! A shared MobileNet-style encoder feeds two decoders that estimate the
//! left-to-right and right-to-left disparity maps. Each branch warps its input
//! with a parameter-free sampler, refines the warped view, and merges the two
//! using a learned per-pixel weight trained against forward-backward
//! disparity consistency.
//!
//! The crate is organized by stage:
//!
//! - [`netdef`]: layer tables, graph construction and parameter counting
//! - [`warp`], [`consistency`]: sampling, confidence maps and blending
//! - [`losses`]: the three phase objectives
//! - [`datapipe`]: stereo folder ingestion, cropping and augmentation
//! - [`trainer`]: the phased training schedule and checkpoints
//! - [`metrics`]: PSNR, SSIM and directory evaluation
//! - [`synth`]: view synthesis and interpolation from a checkpoint
//! - [`cli`]: the `monoview` command line

pub mod cli;
pub mod config;
pub mod consistency;
pub mod datapipe;
pub mod error;
pub mod gradcheck;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod netdef;
pub mod nn;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod warp;

pub use consistency::{
    blend, confidence_maps, occlusion_mask, ConsistencyParams, PredictionBundle,
};
pub use error::{Error, Result};
pub use losses::LossWeights;
pub use netdef::{build_model, count_parameters, ModelGraph, NetworkComponent, ParameterCount};
pub use tensor::{ConfidenceMap, DisparityMap, ImageTensor, Mask, Shape, Tensor};
pub use warp::{warp, WarpDirection};
