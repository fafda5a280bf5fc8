//! PSNR and SSIM on folders of predictions, with a disocclusion mask.
//!
//! Usage: `evaluate_metrics [DIR]`

use std::path::PathBuf;

use monoview::datapipe::synthetic_pair;
use monoview::imageio::{save_image, save_mask};
use monoview::metrics::evaluate_directory;
use monoview::tensor::Mask;

fn main() -> monoview::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("monoview-eval"));
    let (pred, gt, masks) = (root.join("pred"), root.join("gt"), root.join("masks"));
    for d in [&pred, &gt, &masks] {
        std::fs::create_dir_all(d).map_err(|e| monoview::Error::Io {
            path: d.clone(),
            source: e,
        })?;
    }

    // predictions are the ground truth shifted by a growing disparity error
    for i in 0..3u64 {
        let truth = synthetic_pair(64, 96, 2.0, i);
        let guess = synthetic_pair(64, 96, 2.0 + 0.5 * i as f32, i);
        let name = format!("{i:03}.png");
        save_image(&gt.join(&name), &truth.right)?;
        save_image(&pred.join(&name), &guess.right)?;
        save_mask(&masks.join(&name), &Mask::from_fn(64, 96, |_, x| x >= 88))?;
    }

    let report = evaluate_directory(&pred, &gt, Some(&masks), None)?;
    print!("{}", report.to_table());
    report.write(&root)?;
    println!("metrics written to {}", root.display());
    Ok(())
}
