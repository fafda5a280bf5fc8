//! Parameter-free horizontal warping.
//!
//! The synthesized right view samples the left image at `x + d`, the
//! synthesized left view samples the right image at `x - d`. Sampling is
//! linear along the row, with coordinates clamped to the image border, so
//! the output is differentiable in both the source pixels and the disparity.
//!
//! At exact integer sample positions the derivative with respect to the
//! disparity uses the right-hand slope `s[x0 + 1] - s[x0]`; at a clamped
//! coordinate (including exactly the last column) it is zero.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WarpDirection {
    /// Source is the left view; the output is the synthesized right view.
    LeftToRight,
    /// Source is the right view; the output is the synthesized left view.
    RightToLeft,
}

impl WarpDirection {
    #[inline]
    pub fn sign<T: Float>(self) -> T {
        match self {
            WarpDirection::LeftToRight => T::one(),
            WarpDirection::RightToLeft => -T::one(),
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            WarpDirection::LeftToRight => WarpDirection::RightToLeft,
            WarpDirection::RightToLeft => WarpDirection::LeftToRight,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            WarpDirection::LeftToRight => "lr",
            WarpDirection::RightToLeft => "rl",
        }
    }
}

impl std::str::FromStr for WarpDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lr" | "left_to_right" => Ok(WarpDirection::LeftToRight),
            "rl" | "right_to_left" => Ok(WarpDirection::RightToLeft),
            other => Err(Error::InvalidArgument(format!(
                "unknown direction `{other}` (expected lr or rl)"
            ))),
        }
    }
}

/// Linear interpolation coordinates for one sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<T> {
    x0: usize,
    x1: usize,
    frac: T,
    /// False when the coordinate was clamped to the border.
    inside: bool,
}

impl<T: Float> Tap<T> {
    #[inline]
    pub(crate) fn new(pos: T, width: usize) -> Self {
        let last = T::from(width - 1).unwrap();
        let inside = pos >= T::zero() && pos <= last;
        let p = pos.max(T::zero()).min(last);
        let x0 = p.floor().to_usize().unwrap_or(0).min(width - 1);
        let x1 = (x0 + 1).min(width - 1);
        let frac = p - T::from(x0).unwrap();
        Tap {
            x0,
            x1,
            frac,
            inside,
        }
    }

    #[inline]
    pub(crate) fn sample(&self, row: &[T]) -> T {
        // lerp form: exact for integer positions and for constant rows
        let a = row[self.x0];
        if self.frac == T::zero() {
            a
        } else {
            a + self.frac * (row[self.x1] - a)
        }
    }

    /// d(sample)/d(position).
    #[inline]
    pub(crate) fn slope(&self, row: &[T]) -> T {
        if self.inside && self.x1 != self.x0 {
            row[self.x1] - row[self.x0]
        } else {
            T::zero()
        }
    }

    /// Scatters `g` into the gradient row of the sampled source.
    #[inline]
    pub(crate) fn scatter(&self, grad_row: &mut [T], g: T) {
        grad_row[self.x0] = grad_row[self.x0] + (T::one() - self.frac) * g;
        if self.frac != T::zero() {
            grad_row[self.x1] = grad_row[self.x1] + self.frac * g;
        }
    }
}

fn check_inputs<T: Float>(source: &Tensor<T>, disparity: &Tensor<T>) -> Result<()> {
    if disparity.channels() != 1 {
        return Err(Error::shape(
            "warp",
            "single-channel disparity",
            disparity.shape(),
        ));
    }
    source.expect_same_grid("warp", disparity)?;
    if source.width() == 0 {
        return Err(Error::InvalidArgument("warp of an empty image".into()));
    }
    Ok(())
}

/// Warps every channel of `source` along x by the single-channel `disparity`.
pub fn warp<T: Float>(
    source: &Tensor<T>,
    disparity: &Tensor<T>,
    direction: WarpDirection,
) -> Result<Tensor<T>> {
    check_inputs(source, disparity)?;
    let (h, w) = (source.height(), source.width());
    let sign = direction.sign::<T>();
    let mut out = Tensor::zeros(source.shape());
    for y in 0..h {
        let taps: Vec<Tap<T>> = disparity
            .row(0, y)
            .iter()
            .enumerate()
            .map(|(x, &d)| Tap::new(T::from(x).unwrap() + sign * d, w))
            .collect();
        for c in 0..source.channels() {
            let src = source.row(c, y);
            let dst = out.row_mut(c, y);
            for (o, tap) in dst.iter_mut().zip(&taps) {
                *o = tap.sample(src);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct WarpGrads<T> {
    pub source: Tensor<T>,
    pub disparity: Tensor<T>,
}

/// Vector-Jacobian product of [`warp`] for an upstream gradient `grad_out`.
pub fn warp_backward<T: Float>(
    source: &Tensor<T>,
    disparity: &Tensor<T>,
    direction: WarpDirection,
    grad_out: &Tensor<T>,
) -> Result<WarpGrads<T>> {
    check_inputs(source, disparity)?;
    grad_out.expect_shape("warp_backward", source.shape())?;
    let (h, w) = (source.height(), source.width());
    let sign = direction.sign::<T>();
    let mut g_src = Tensor::zeros(source.shape());
    let mut g_disp = Tensor::zeros(disparity.shape());
    for y in 0..h {
        let taps: Vec<Tap<T>> = disparity
            .row(0, y)
            .iter()
            .enumerate()
            .map(|(x, &d)| Tap::new(T::from(x).unwrap() + sign * d, w))
            .collect();
        let mut gd_row = vec![T::zero(); w];
        for c in 0..source.channels() {
            let src = source.row(c, y);
            let go = grad_out.row(c, y);
            for x in 0..w {
                gd_row[x] = gd_row[x] + go[x] * taps[x].slope(src) * sign;
            }
            let gs = g_src.row_mut(c, y);
            for x in 0..w {
                taps[x].scatter(gs, go[x]);
            }
        }
        g_disp.row_mut(0, y).copy_from_slice(&gd_row);
    }
    Ok(WarpGrads {
        source: g_src,
        disparity: g_disp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use proptest::prelude::*;

    fn ramp() -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, 1, 4), vec![0.0, 1.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn integer_shift_clamps_last_column() {
        let d = Tensor::filled(Shape::new(1, 1, 4), 1.0);
        let out = warp(&ramp(), &d, WarpDirection::LeftToRight).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn half_pixel_shift_averages_neighbours() {
        let d = Tensor::filled(Shape::new(1, 1, 4), 0.5);
        let out = warp(&ramp(), &d, WarpDirection::LeftToRight).unwrap();
        assert_eq!(out.data(), &[0.5, 1.5, 2.5, 3.0]);
    }

    #[test]
    fn right_to_left_samples_behind() {
        let d = Tensor::filled(Shape::new(1, 1, 4), 1.0);
        let out = warp(&ramp(), &d, WarpDirection::RightToLeft).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn rejects_mismatched_grid() {
        let src = Tensor::<f32>::zeros(Shape::new(3, 4, 4));
        let d = Tensor::<f32>::zeros(Shape::new(1, 4, 5));
        assert!(warp(&src, &d, WarpDirection::LeftToRight).is_err());
        let d2 = Tensor::<f32>::zeros(Shape::new(2, 4, 4));
        assert!(warp(&src, &d2, WarpDirection::LeftToRight).is_err());
    }

    #[test]
    fn constant_image_has_zero_disparity_gradient() {
        let src = Tensor::<f64>::filled(Shape::new(3, 4, 4), 0.3);
        let d = Tensor::<f64>::zeros(Shape::new(1, 4, 4));
        let go = Tensor::<f64>::filled(Shape::new(3, 4, 4), 1.0);
        let g = warp_backward(&src, &d, WarpDirection::LeftToRight, &go).unwrap();
        assert!(g.disparity.data().iter().all(|&v| v == 0.0));
    }

    fn image_strategy() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
        (2usize..6, 2usize..8).prop_flat_map(|(h, w)| {
            let n = 2 * h * w;
            (
                proptest::collection::vec(-1.0f64..1.0, n),
                proptest::collection::vec(-1.0f64..1.0, n),
                proptest::collection::vec(0.0f64..4.0, h * w),
            )
                .prop_map(move |(a, b, d)| {
                    (
                        Tensor::from_vec(Shape::new(2, h, w), a).unwrap(),
                        Tensor::from_vec(Shape::new(2, h, w), b).unwrap(),
                        Tensor::from_vec(Shape::new(1, h, w), d).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn zero_disparity_is_exact_identity((a, _b, d) in image_strategy()) {
            let zero = d.map(|_| 0.0);
            for dir in [WarpDirection::LeftToRight, WarpDirection::RightToLeft] {
                prop_assert_eq!(warp(&a, &zero, dir).unwrap(), a.clone());
            }
        }

        #[test]
        fn output_stays_in_source_range((a, _b, d) in image_strategy()) {
            let out = warp(&a, &d, WarpDirection::RightToLeft).unwrap();
            prop_assert!(out.min_value() >= a.min_value() - 1e-12);
            prop_assert!(out.max_value() <= a.max_value() + 1e-12);
        }

        #[test]
        fn linear_in_source((a, b, d) in image_strategy(), s in -2.0f64..2.0, t in -2.0f64..2.0) {
            let mix = a.zip_map(&b, |x, y| s * x + t * y).unwrap();
            let lhs = warp(&mix, &d, WarpDirection::LeftToRight).unwrap();
            let wa = warp(&a, &d, WarpDirection::LeftToRight).unwrap();
            let wb = warp(&b, &d, WarpDirection::LeftToRight).unwrap();
            let rhs = wa.zip_map(&wb, |x, y| s * x + t * y).unwrap();
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() < 1e-12);
            }
        }

        #[test]
        fn rows_are_independent((a, b, d) in image_strategy()) {
            // replacing every row but the first must leave row 0 of the output unchanged
            let mut mixed = b.clone();
            for c in 0..a.channels() {
                mixed.row_mut(c, 0).copy_from_slice(a.row(c, 0));
            }
            let oa = warp(&a, &d, WarpDirection::LeftToRight).unwrap();
            let om = warp(&mixed, &d, WarpDirection::LeftToRight).unwrap();
            for c in 0..a.channels() {
                prop_assert_eq!(oa.row(c, 0), om.row(c, 0));
            }
        }
    }
}
