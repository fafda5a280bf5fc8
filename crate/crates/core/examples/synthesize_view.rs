//! Synthesizes the right view of a left image and writes every artifact.
//!
//! Usage: `synthesize_view [CHECKPOINT] [OUT_DIR]`. Without a checkpoint a
//! randomly initialized model is used, which is enough to see the outputs.

use std::path::PathBuf;

use monoview::datapipe::synthetic_pair;
use monoview::synth::{load_graph, synthesize_tensor, write_artifacts, Artifact};
use monoview::{build_model, WarpDirection};

fn main() -> monoview::Result<()> {
    let mut args = std::env::args().skip(1);
    let graph = match args.next() {
        Some(ck) => load_graph(&PathBuf::from(ck))?,
        None => build_model(0, None)?,
    };
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("monoview-synth"));

    // any size works; the input is padded to the encoder stride internally
    let pair = synthetic_pair(90, 150, 3.0, 5);
    let bundle = synthesize_tensor(&graph, &pair.left, WarpDirection::LeftToRight)?;
    let written = write_artifacts(
        &bundle,
        &Artifact::ALL.into_iter().collect(),
        &out,
        "synthetic_lr",
    )?;
    println!(
        "disparity range [{:.3}, {:.3}], blend weight range [{:.3}, {:.3}]",
        bundle.disparity.min_value(),
        bundle.disparity.max_value(),
        bundle.v.min_value(),
        bundle.v.max_value()
    );
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}
