//! Writes a tiny stereo folder, indexes it, and draws training patches.
//!
//! Usage: `load_dataset [DIR]` (defaults to a folder under the temp dir).

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use monoview::datapipe::{
    augment, extract_patch, load_dataset, synthetic_pair, DatasetSpec, Split,
};
use monoview::imageio::save_image;

fn main() -> monoview::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("monoview-dataset"));
    for side in ["left", "right"] {
        std::fs::create_dir_all(root.join(side)).map_err(|e| monoview::Error::Io {
            path: root.join(side),
            source: e,
        })?;
    }
    for i in 0..6 {
        let pair = synthetic_pair(96, 160, 4.0, i);
        save_image(&root.join("left").join(format!("{i:06}.png")), &pair.left)?;
        save_image(&root.join("right").join(format!("{i:06}.png")), &pair.right)?;
    }

    let spec = DatasetSpec {
        root: root.clone(),
        patch: (64, 64),
        val_count: 2,
        ..Default::default()
    };
    let index = load_dataset(&spec, 42)?;
    for split in [Split::Train, Split::Val] {
        let ids: Vec<&str> = index
            .entries(split)
            .iter()
            .map(|e| e.source_id.as_str())
            .collect();
        println!("{split:?}: {ids:?}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sample = index.entries(Split::Train)[0].load()?;
    for _ in 0..3 {
        let p = augment(
            &extract_patch(&sample, spec.patch, &mut rng)?,
            &mut rng,
            0.5,
        );
        println!(
            "patch {}x{} from {}, left mean {:+.4}",
            p.height(),
            p.width(),
            p.source_id,
            p.left.data().iter().sum::<f32>() / p.left.data().len() as f32
        );
    }
    println!("dataset written to {}", root.display());
    Ok(())
}
