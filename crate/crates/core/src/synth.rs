//! View synthesis and disparity-scaled interpolation from a trained model.
//!
//! Inputs whose sides are not multiples of 64 are reflection-padded on the
//! bottom/right edges before inference and every output is cropped back to
//! the input size.
//!
//! The exported confidence map is `1 - v`, where `v` is the merger's
//! blending weight: `v` grows where the warped view is unreliable, so its
//! complement reads as a per-pixel confidence in the DBP prediction.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::consistency::PredictionBundle;
use crate::datapipe::{self, EVAL_CROP};
use crate::error::{Error, Result};
use crate::imageio;
use crate::netdef::{ModelGraph, ENCODER_STRIDE};
use crate::params::ParamStore;
use crate::tensor::{ImageTensor, Tensor};
use crate::trainer::Checkpoint;
use crate::warp::{warp, WarpDirection};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Artifact {
    /// Final blended view (PNG).
    View,
    /// Disparity map (PFM).
    Disparity,
    /// `1 - v` (PFM).
    Confidence,
    /// Warped view before refinement (PNG).
    Dbp,
    /// Refiner output (PNG).
    Ref,
}

impl Artifact {
    pub const ALL: [Artifact; 5] = [
        Artifact::View,
        Artifact::Disparity,
        Artifact::Confidence,
        Artifact::Dbp,
        Artifact::Ref,
    ];

    fn name(self) -> &'static str {
        match self {
            Artifact::View => "view",
            Artifact::Disparity => "disparity",
            Artifact::Confidence => "confidence",
            Artifact::Dbp => "dbp",
            Artifact::Ref => "ref",
        }
    }

    fn extension(self) -> &'static str {
        match self {
            Artifact::Disparity | Artifact::Confidence => "pfm",
            _ => "png",
        }
    }
}

impl fmt::Display for Artifact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Artifact {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Artifact::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown output `{s}`")))
    }
}

/// Parses a comma-separated artifact list such as `view,disparity`.
pub fn parse_artifacts(s: &str) -> Result<BTreeSet<Artifact>> {
    let set = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(Artifact::from_str)
        .collect::<Result<BTreeSet<_>>>()?;
    if set.is_empty() {
        return Err(Error::InvalidArgument("no outputs requested".into()));
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisRequest {
    pub input: PathBuf,
    pub direction: WarpDirection,
    pub checkpoint: PathBuf,
    pub outputs: BTreeSet<Artifact>,
    pub out_dir: PathBuf,
    /// Center-crop the input to [`EVAL_CROP`] first, as for benchmark frames.
    pub eval_crop: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterpolationRequest {
    pub input: PathBuf,
    pub direction: WarpDirection,
    /// Ascending values in [0, 1].
    pub alphas: Vec<f64>,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

/// Builds the graph and fills every parameter from a checkpoint or weight directory.
pub fn load_graph(checkpoint: &Path) -> Result<ModelGraph> {
    let mut graph = ModelGraph::zeroed()?;
    let weights = ParamStore::load(&Checkpoint::model_dir(checkpoint))?;
    graph.params.copy_from(&weights, |_| true)?;
    Ok(graph)
}

fn padding(n: usize) -> usize {
    n.div_ceil(ENCODER_STRIDE) * ENCODER_STRIDE - n
}

fn pad(input: &ImageTensor) -> Result<ImageTensor> {
    let (pb, pr) = (padding(input.height()), padding(input.width()));
    if pb == 0 && pr == 0 {
        Ok(input.clone())
    } else {
        input.pad_reflect(pb, pr)
    }
}

fn crop_to(t: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    if t.height() == h && t.width() == w {
        Ok(t.clone())
    } else {
        t.crop(0, 0, h, w)
    }
}

/// Runs one branch on an arbitrary-size image.
pub fn synthesize_tensor(
    graph: &ModelGraph,
    input: &ImageTensor,
    direction: WarpDirection,
) -> Result<PredictionBundle> {
    if input.channels() != 3 {
        return Err(Error::shape("synthesize", "3-channel image", input.shape()));
    }
    let (h, w) = (input.height(), input.width());
    let b = graph.predict(&pad(input)?, direction)?;
    Ok(PredictionBundle {
        input: input.clone(),
        dbp: crop_to(&b.dbp, h, w)?,
        refined: crop_to(&b.refined, h, w)?,
        blended: crop_to(&b.blended, h, w)?,
        disparity: crop_to(&b.disparity, h, w)?,
        v: crop_to(&b.v, h, w)?,
        c: None,
    })
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".into())
}

/// Writes the requested artifacts of `bundle`; returns the written paths in artifact order.
pub fn write_artifacts(
    bundle: &PredictionBundle,
    outputs: &BTreeSet<Artifact>,
    out_dir: &Path,
    prefix: &str,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for &a in outputs {
        let path = out_dir.join(format!("{prefix}_{}.{}", a.name(), a.extension()));
        match a {
            Artifact::View => imageio::save_image(&path, &bundle.blended)?,
            Artifact::Dbp => imageio::save_image(&path, &bundle.dbp)?,
            Artifact::Ref => imageio::save_image(&path, &bundle.refined)?,
            Artifact::Disparity => imageio::write_pfm(&path, &bundle.disparity)?,
            Artifact::Confidence => imageio::write_pfm(&path, &bundle.v.map(|v| 1.0 - v))?,
        }
        written.push(path);
    }
    Ok(written)
}

pub fn synthesize(req: &SynthesisRequest) -> Result<(PredictionBundle, Vec<PathBuf>)> {
    let graph = load_graph(&req.checkpoint)?;
    let mut input = imageio::load_image(&req.input)?;
    if req.eval_crop {
        input = datapipe::center_crop_image(&input, EVAL_CROP)?;
    }
    let bundle = synthesize_tensor(&graph, &input, req.direction)?;
    let prefix = format!("{}_{}", stem(&req.input), req.direction.short_name());
    let written = write_artifacts(&bundle, &req.outputs, &req.out_dir, &prefix)?;
    Ok((bundle, written))
}

/// One interpolated view.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub alpha: f64,
    /// Input warped with `alpha * d`.
    pub warped: ImageTensor,
    pub refined: ImageTensor,
    pub v: Tensor<f32>,
    /// Final blended frame.
    pub frame: ImageTensor,
}

pub fn validate_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.is_empty() {
        return Err(Error::InvalidArgument(
            "no interpolation factors given".into(),
        ));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::InvalidArgument(format!(
            "interpolation factor {a} outside [0, 1]"
        )));
    }
    if alphas.windows(2).any(|p| p[0] > p[1]) {
        return Err(Error::InvalidArgument(
            "interpolation factors must be sorted".into(),
        ));
    }
    Ok(())
}

/// For each `alpha`: warp with the scaled disparity, then refine, estimate
/// the blending weight from the scaled disparity, and blend.
pub fn interpolate_tensor(
    graph: &ModelGraph,
    input: &ImageTensor,
    direction: WarpDirection,
    alphas: &[f64],
) -> Result<Vec<Frame>> {
    validate_alphas(alphas)?;
    let (h, w) = (input.height(), input.width());
    let padded = pad(input)?;
    let d = graph.predict_disparity(&padded, direction)?;
    alphas
        .iter()
        .map(|&alpha| {
            let a = alpha as f32;
            let scaled = d.map(|v| a * v);
            let warped = warp(&padded, &scaled, direction)?;
            let m = graph.refine_and_merge(direction, &warped, &scaled)?;
            Ok(Frame {
                alpha,
                warped: crop_to(&warped, h, w)?,
                refined: crop_to(&m.refined, h, w)?,
                v: crop_to(&m.v, h, w)?,
                frame: crop_to(&m.blended, h, w)?,
            })
        })
        .collect()
}

/// File name of frame `index`; zero-padded so lexical order follows alpha order.
pub fn frame_name(prefix: &str, index: usize, alpha: f64) -> String {
    format!("{prefix}_frame{index:03}_a{alpha:.3}.png")
}

pub fn interpolate(req: &InterpolationRequest) -> Result<(Vec<Frame>, Vec<PathBuf>)> {
    validate_alphas(&req.alphas)?;
    let graph = load_graph(&req.checkpoint)?;
    let input = imageio::load_image(&req.input)?;
    let frames = interpolate_tensor(&graph, &input, req.direction, &req.alphas)?;
    fs::create_dir_all(&req.out_dir).map_err(|e| Error::io(&req.out_dir, e))?;
    let prefix = format!("{}_{}", stem(&req.input), req.direction.short_name());
    let mut written = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        let p = req.out_dir.join(frame_name(&prefix, i, f.alpha));
        imageio::save_image(&p, &f.frame)?;
        written.push(p);
    }
    Ok((frames, written))
}
