//! Inference through one branch: disparity, warp, refinement and merging.

use crate::consistency::{blend, confidence_maps, ConsistencyParams, PredictionBundle};
use crate::error::Result;
use crate::netdef::{ModelGraph, Taps, SKIP_LAYERS};
use crate::tensor::{DisparityMap, ImageTensor, Tensor};
use crate::warp::{warp, WarpDirection};

/// Stacks the warped view and its disparity into the merger input.
pub fn cbm_input(dbp: &ImageTensor, disparity: &DisparityMap) -> Result<Tensor<f32>> {
    Tensor::concat_channels(&[dbp, disparity])
}

/// Output of the refiner and merger applied to one warped view.
#[derive(Clone, Debug)]
pub struct Merged {
    pub refined: ImageTensor,
    pub v: Tensor<f32>,
    pub blended: ImageTensor,
}

impl ModelGraph {
    /// Disparity map estimated by the branch's encoder and decoder.
    pub fn predict_disparity(
        &self,
        input: &ImageTensor,
        direction: WarpDirection,
    ) -> Result<DisparityMap> {
        let b = self.branch(direction);
        let (features, skips) =
            b.encoder
                .forward_with_taps(&self.params, input, &Taps::new(), &SKIP_LAYERS)?;
        b.decoder.forward(&self.params, &features, &skips)
    }

    /// Refines `warped`, estimates the blending weight from `(warped, disparity)`
    /// and merges the two images.
    pub fn refine_and_merge(
        &self,
        direction: WarpDirection,
        warped: &ImageTensor,
        disparity: &DisparityMap,
    ) -> Result<Merged> {
        let b = self.branch(direction);
        let refined = b.refiner.forward(&self.params, warped, &Taps::new())?;
        let v = b
            .cbm
            .forward(&self.params, &cbm_input(warped, disparity)?, &Taps::new())?;
        let blended = blend(warped, &refined, &v)?;
        Ok(Merged {
            refined,
            v,
            blended,
        })
    }

    /// Runs the full branch on one input view.
    pub fn predict(
        &self,
        input: &ImageTensor,
        direction: WarpDirection,
    ) -> Result<PredictionBundle> {
        let disparity = self.predict_disparity(input, direction)?;
        let dbp = warp(input, &disparity, direction)?;
        let merged = self.refine_and_merge(direction, &dbp, &disparity)?;
        Ok(PredictionBundle {
            input: input.clone(),
            dbp,
            refined: merged.refined,
            blended: merged.blended,
            disparity,
            v: merged.v,
            c: None,
        })
    }

    /// Runs both branches on a stereo pair and attaches the consistency confidences.
    pub fn predict_pair(
        &self,
        left: &ImageTensor,
        right: &ImageTensor,
        params: ConsistencyParams,
    ) -> Result<(PredictionBundle, PredictionBundle)> {
        let mut lr = self.predict(left, WarpDirection::LeftToRight)?;
        let mut rl = self.predict(right, WarpDirection::RightToLeft)?;
        let (c_lr, c_rl) = confidence_maps(&lr.disparity, &rl.disparity, params)?;
        lr.c = Some(c_lr);
        rl.c = Some(c_rl);
        Ok((lr, rl))
    }
}
