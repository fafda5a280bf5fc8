//! Forward-backward disparity consistency, confidence maps and blending.

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::{ConfidenceMap, DisparityMap, ImageTensor, Mask, Tensor};
use crate::warp::{warp, warp_backward, WarpDirection};

pub const DEFAULT_GAMMA: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyParams {
    gamma: f64,
}

impl ConsistencyParams {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gamma must be positive, got {gamma}"
            )));
        }
        Ok(ConsistencyParams { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        ConsistencyParams {
            gamma: DEFAULT_GAMMA,
        }
    }
}

/// Everything one branch produces for a single input view.
#[derive(Clone, Debug)]
pub struct PredictionBundle {
    pub input: ImageTensor,
    pub dbp: ImageTensor,
    pub refined: ImageTensor,
    pub blended: ImageTensor,
    pub disparity: DisparityMap,
    /// Learned blending weight, an estimate of `1 - C`.
    pub v: ConfidenceMap,
    /// Consistency confidence, only available when both disparities are known.
    pub c: Option<ConfidenceMap>,
}

fn check_pair<T: Float>(d_lr: &Tensor<T>, d_rl: &Tensor<T>) -> Result<()> {
    if d_lr.channels() != 1 {
        return Err(Error::shape("confidence_maps", "1 channel", d_lr.shape()));
    }
    d_lr.expect_shape("confidence_maps", d_rl.shape())
}

/// Residuals `d_LR(x) - d_RL(x + d_LR(x))` and `d_RL(x) - d_LR(x - d_RL(x))`.
fn residuals<T: Float>(d_lr: &Tensor<T>, d_rl: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let rl_at_lr = warp(d_rl, d_lr, WarpDirection::LeftToRight)?;
    let lr_at_rl = warp(d_lr, d_rl, WarpDirection::RightToLeft)?;
    Ok((
        d_lr.zip_map(&rl_at_lr, |a, b| a - b)?,
        d_rl.zip_map(&lr_at_rl, |a, b| a - b)?,
    ))
}

/// Returns `(C_LR, C_RL)` with `C = exp(-gamma * |residual|)`.
pub fn confidence_maps<T: Float>(
    d_lr: &DisparityMap<T>,
    d_rl: &DisparityMap<T>,
    params: ConsistencyParams,
) -> Result<(ConfidenceMap<T>, ConfidenceMap<T>)> {
    check_pair(d_lr, d_rl)?;
    let gamma = T::from(params.gamma).unwrap();
    let (r_lr, r_rl) = residuals(d_lr, d_rl)?;
    let conf = |r: T| (-gamma * r.abs()).exp();
    Ok((r_lr.map(conf), r_rl.map(conf)))
}

/// Gradients of `sum(g_lr * C_LR + g_rl * C_RL)` with respect to both disparities.
pub fn confidence_backward<T: Float>(
    d_lr: &DisparityMap<T>,
    d_rl: &DisparityMap<T>,
    params: ConsistencyParams,
    grad_c_lr: &ConfidenceMap<T>,
    grad_c_rl: &ConfidenceMap<T>,
) -> Result<(DisparityMap<T>, DisparityMap<T>)> {
    check_pair(d_lr, d_rl)?;
    grad_c_lr.expect_shape("confidence_backward", d_lr.shape())?;
    grad_c_rl.expect_shape("confidence_backward", d_lr.shape())?;
    let gamma = T::from(params.gamma).unwrap();
    let (r_lr, r_rl) = residuals(d_lr, d_rl)?;
    // dC/dr = -gamma * sign(r) * C
    let d_res = |r: &Tensor<T>, g: &Tensor<T>| {
        r.zip_map(g, |r, g| {
            let sign = if r > T::zero() {
                T::one()
            } else if r < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            -gamma * sign * (-gamma * r.abs()).exp() * g
        })
    };
    let g_r_lr = d_res(&r_lr, grad_c_lr)?;
    let g_r_rl = d_res(&r_rl, grad_c_rl)?;

    // r_lr = d_lr - warp(d_rl, d_lr, LR); r_rl = d_rl - warp(d_lr, d_rl, RL)
    let neg_lr = g_r_lr.map(|v| -v);
    let neg_rl = g_r_rl.map(|v| -v);
    let w1 = warp_backward(d_rl, d_lr, WarpDirection::LeftToRight, &neg_lr)?;
    let w2 = warp_backward(d_lr, d_rl, WarpDirection::RightToLeft, &neg_rl)?;

    let mut g_lr = g_r_lr;
    g_lr.add_assign(&w1.disparity)?;
    g_lr.add_assign(&w2.source)?;
    let mut g_rl = g_r_rl;
    g_rl.add_assign(&w1.source)?;
    g_rl.add_assign(&w2.disparity)?;
    Ok((g_lr, g_rl))
}

fn check_blend<T: Float>(dbp: &Tensor<T>, refined: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
    dbp.expect_shape("blend", refined.shape())?;
    if v.channels() != 1 {
        return Err(Error::shape("blend", "single-channel weight", v.shape()));
    }
    dbp.expect_same_grid("blend", v)?;
    if let Some(bad) = v
        .data()
        .iter()
        .find(|&&w| !(w >= T::zero() && w <= T::one()))
    {
        return Err(Error::InvalidArgument(format!(
            "blend weight {} outside [0, 1]",
            bad.to_f64().unwrap_or(f64::NAN)
        )));
    }
    Ok(())
}

/// `v * refined + (1 - v) * dbp`, with `v` broadcast over channels.
///
/// The endpoints are exact: `v = 0` copies the DBP pixel and `v = 1` copies
/// the refined pixel bit for bit.
pub fn blend<T: Float>(
    dbp: &ImageTensor<T>,
    refined: &ImageTensor<T>,
    v: &ConfidenceMap<T>,
) -> Result<ImageTensor<T>> {
    check_blend(dbp, refined, v)?;
    let plane = v.shape().plane();
    let mut out = dbp.clone();
    let w = v.data();
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let r = refined.channel(c);
        for i in 0..plane {
            let a = w[i];
            if a == T::one() {
                chunk[i] = r[i];
            } else if a != T::zero() {
                chunk[i] = a * r[i] + (T::one() - a) * chunk[i];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct BlendGrads<T> {
    pub dbp: Tensor<T>,
    pub refined: Tensor<T>,
    pub v: Tensor<T>,
}

pub fn blend_backward<T: Float>(
    dbp: &ImageTensor<T>,
    refined: &ImageTensor<T>,
    v: &ConfidenceMap<T>,
    grad_out: &ImageTensor<T>,
) -> Result<BlendGrads<T>> {
    check_blend(dbp, refined, v)?;
    grad_out.expect_shape("blend_backward", dbp.shape())?;
    let plane = v.shape().plane();
    let mut g_dbp = Tensor::zeros(dbp.shape());
    let mut g_ref = Tensor::zeros(dbp.shape());
    let mut g_v = Tensor::zeros(v.shape());
    let w = v.data();
    for c in 0..dbp.channels() {
        let (d, r, g) = (dbp.channel(c), refined.channel(c), grad_out.channel(c));
        let off = c * plane;
        for i in 0..plane {
            g_dbp.data_mut()[off + i] = (T::one() - w[i]) * g[i];
            g_ref.data_mut()[off + i] = w[i] * g[i];
            g_v.data_mut()[i] = g_v.data()[i] + (r[i] - d[i]) * g[i];
        }
    }
    Ok(BlendGrads {
        dbp: g_dbp,
        refined: g_ref,
        v: g_v,
    })
}

/// Marks pixels whose confidence falls strictly below `threshold`.
pub fn occlusion_mask<T: Float>(c: &ConfidenceMap<T>, threshold: T) -> Mask {
    Mask::from_fn(c.height(), c.width(), |y, x| c.get(0, y, x) < threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct per-pixel evaluation with its own linear interpolation.
    fn brute_force(
        d_lr: &Tensor<f64>,
        d_rl: &Tensor<f64>,
        gamma: f64,
    ) -> (Tensor<f64>, Tensor<f64>) {
        let (h, w) = (d_lr.height(), d_lr.width());
        let lookup = |map: &Tensor<f64>, y: usize, pos: f64| {
            let p = pos.clamp(0.0, (w - 1) as f64);
            let i = p.floor() as usize;
            let j = (i + 1).min(w - 1);
            let t = p - i as f64;
            map.get(0, y, i) * (1.0 - t) + map.get(0, y, j) * t
        };
        let mut c_lr = Tensor::zeros(d_lr.shape());
        let mut c_rl = Tensor::zeros(d_lr.shape());
        for y in 0..h {
            for x in 0..w {
                let a = d_lr.get(0, y, x);
                let b = d_rl.get(0, y, x);
                let r1 = a - lookup(d_rl, y, x as f64 + a);
                let r2 = b - lookup(d_lr, y, x as f64 - b);
                c_lr.set(0, y, x, (-gamma * r1.abs()).exp());
                c_rl.set(0, y, x, (-gamma * r2.abs()).exp());
            }
        }
        (c_lr, c_rl)
    }

    #[test]
    fn constant_consistent_disparity_gives_unit_confidence() {
        let d = Tensor::<f32>::filled(Shape::new(1, 6, 9), 2.5);
        let (a, b) = confidence_maps(&d, &d, ConsistencyParams::default()).unwrap();
        assert!(a.data().iter().chain(b.data()).all(|&v| v == 1.0));
    }

    #[test]
    fn inconsistency_of_ten_decays_to_exp_minus_point_seven() {
        // d_LR = 10 at column 0 only, d_RL = 0: residual for C_LR at (0,0) is 10 - d_RL(10) = 10
        let mut d_lr = Tensor::<f64>::zeros(Shape::new(1, 1, 16));
        d_lr.set(0, 0, 0, 10.0);
        let d_rl = Tensor::<f64>::zeros(Shape::new(1, 1, 16));
        let (c_lr, _) = confidence_maps(&d_lr, &d_rl, ConsistencyParams::default()).unwrap();
        assert!((c_lr.get(0, 0, 0) - (-0.7f64).exp()).abs() < 1e-12);
        assert!((c_lr.get(0, 0, 0) - 0.4966).abs() < 1e-4);
        let mask = occlusion_mask(&c_lr, 0.5);
        assert_eq!(mask.count(), 1);
        assert!(mask.get(0, 0));
    }

    #[test]
    fn matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let s = Shape::new(1, 8, 8);
            let a = Tensor::from_fn(s, |_, _, _| rng.gen_range(0.0..5.0));
            let b = Tensor::from_fn(s, |_, _, _| rng.gen_range(0.0..5.0));
            let (c1, c2) = confidence_maps(&a, &b, ConsistencyParams::default()).unwrap();
            let (o1, o2) = brute_force(&a, &b, DEFAULT_GAMMA);
            for (x, y) in c1
                .data()
                .iter()
                .chain(c2.data())
                .zip(o1.data().iter().chain(o2.data()))
            {
                assert!((x - y).abs() < 1e-6);
                assert!(*x > 0.0 && *x <= 1.0);
            }
        }
    }

    #[test]
    fn swapping_arguments_swaps_maps_for_symmetric_lookup() {
        // with constant maps the lookup sign does not matter, so swapping must swap outputs
        let a = Tensor::<f64>::filled(Shape::new(1, 3, 7), 1.0);
        let b = Tensor::<f64>::filled(Shape::new(1, 3, 7), 1.75);
        let (c1, c2) = confidence_maps(&a, &b, ConsistencyParams::default()).unwrap();
        let (s1, s2) = confidence_maps(&b, &a, ConsistencyParams::default()).unwrap();
        assert_eq!(c1, s2);
        assert_eq!(c2, s1);
    }

    #[test]
    fn gamma_must_be_positive() {
        assert!(ConsistencyParams::new(0.0).is_err());
        assert!(ConsistencyParams::new(-1.0).is_err());
        assert!(ConsistencyParams::new(f64::NAN).is_err());
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let s = Shape::new(3, 4, 5);
        let dbp =
            Tensor::<f32>::from_fn(s, |c, y, x| (c as f32 - y as f32) * 0.1 - x as f32 * 0.03);
        let refined =
            Tensor::<f32>::from_fn(s, |c, y, x| (x as f32 + c as f32) * 0.07 - y as f32 * 0.2);
        let zero = Tensor::zeros(Shape::new(1, 4, 5));
        let one = Tensor::filled(Shape::new(1, 4, 5), 1.0);
        assert_eq!(blend(&dbp, &refined, &zero).unwrap(), dbp);
        assert_eq!(blend(&dbp, &refined, &one).unwrap(), refined);

        let q = Tensor::filled(Shape::new(1, 4, 5), 0.25);
        let out = blend(&Tensor::zeros(s), &Tensor::filled(s, 1.0), &q).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn blend_rejects_weights_outside_unit_interval() {
        let s = Shape::new(3, 2, 2);
        let img = Tensor::<f32>::zeros(s);
        let v = Tensor::filled(Shape::new(1, 2, 2), 1.5);
        assert!(blend(&img, &img, &v).is_err());
    }

    #[test]
    fn mask_count_is_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Tensor::<f64>::from_fn(Shape::new(1, 8, 8), |_, _, _| rng.gen_range(0.01..1.0));
        let mut last = 0;
        for t in 1..100 {
            let n = occlusion_mask(&c, t as f64 / 100.0).count();
            assert!(n >= last);
            last = n;
        }
        let ones = Tensor::<f64>::filled(Shape::new(1, 8, 8), 1.0);
        assert_eq!(occlusion_mask(&ones, 0.999).count(), 0);
    }
}
