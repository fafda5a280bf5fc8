//! Warps a synthetic view with its true disparity, then shows how the
//! forward-backward check flags a region where the two disparities disagree.

use monoview::datapipe::synthetic_pair;
use monoview::tensor::{Shape, Tensor};
use monoview::{confidence_maps, occlusion_mask, warp, ConsistencyParams, WarpDirection};

fn main() -> monoview::Result<()> {
    let (h, w, d) = (32, 48, 3.0f32);
    let pair = synthetic_pair(h, w, d, 11);
    let disp = Tensor::filled(Shape::new(1, h, w), d);

    // the right view is the left texture shifted by d; sampling left at x - d
    // reproduces it away from the clamped border
    let left_from_right = warp(&pair.right, &disp, WarpDirection::RightToLeft)?;
    let err = (0..h)
        .flat_map(|y| (d as usize..w).map(move |x| (y, x)))
        .map(|(y, x)| (left_from_right.get(0, y, x) - pair.left.get(0, y, x)).abs())
        .fold(0.0f32, f32::max);
    println!("reconstruction error away from the border: {err:.2e}");

    // consistent maps give full confidence; a bump in one map does not
    let mut d_lr = disp.clone();
    for y in 10..20 {
        for x in 20..30 {
            d_lr.set(0, y, x, 12.0);
        }
    }
    let params = ConsistencyParams::default();
    let (c_lr, _) = confidence_maps(&d_lr, &disp, params)?;
    let mask = occlusion_mask(&c_lr, 0.9);
    println!(
        "confidence in [{:.3}, {:.3}], {} of {} pixels below 0.9",
        c_lr.min_value(),
        c_lr.max_value(),
        mask.count(),
        h * w
    );
    for y in (8..22).step_by(2) {
        let row: String = (16..34)
            .map(|x| if mask.get(y, x) { '#' } else { '.' })
            .collect();
        println!("  {row}");
    }
    Ok(())
}
