//! Renders intermediate viewpoints by scaling the estimated disparity.
//!
//! Usage: `interpolate_views [CHECKPOINT]`

use std::path::PathBuf;

use monoview::datapipe::synthetic_pair;
use monoview::synth::{interpolate_tensor, load_graph};
use monoview::{build_model, WarpDirection};

fn main() -> monoview::Result<()> {
    let graph = match std::env::args().nth(1) {
        Some(ck) => load_graph(&PathBuf::from(ck))?,
        None => {
            let mut g = build_model(0, None)?;
            // stand-in for a trained decoder: a constant disparity of 4 px
            g.params
                .get_mut("decoder_lr.l47.bias")
                .expect("decoder bias")
                .data[0] = 4.0;
            g
        }
    };
    let input = synthetic_pair(64, 128, 4.0, 9).left;
    let alphas = [0.0, 0.25, 0.5, 0.75, 1.0];
    let frames = interpolate_tensor(&graph, &input, WarpDirection::LeftToRight, &alphas)?;
    for f in &frames {
        let shift = f
            .warped
            .data()
            .iter()
            .zip(input.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / input.data().len() as f32;
        println!("alpha {:.2}: mean |warped - input| {shift:.4}", f.alpha);
    }
    Ok(())
}
