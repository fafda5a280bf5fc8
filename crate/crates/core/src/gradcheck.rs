//! Central finite-difference checks of the hand-written gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::consistency::{confidence_backward, confidence_maps, ConsistencyParams};
use crate::error::{Error, Result};
use crate::losses::{
    disparity_gradient_scale, loss_phase1_grad, loss_phase2_scaled_grad, loss_phase3_grad,
    BranchTerms, LossWeights,
};
use crate::tensor::{Shape, Tensor};
use crate::warp::{warp, warp_backward, WarpDirection};

/// Denominator floor for relative errors of near-zero gradients.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
        }
    }

    pub fn merge(self, other: GradCheckReport) -> Self {
        let checked = self.checked + other.checked;
        let keep_other = other.worst.is_some()
            && (self.worst.is_none() || other.max_rel_error > self.max_rel_error);
        let mut out = if keep_other { other } else { self };
        out.checked = checked;
        out
    }

    pub fn ensure(self, tolerance: f64) -> Result<Self> {
        if self.max_rel_error < tolerance {
            Ok(self)
        } else {
            let (name, idx) = self.worst.clone().unwrap_or_default();
            Err(Error::InvalidArgument(format!(
                "gradient check failed: relative error {:.3e} >= {tolerance:.1e} at {name}[{idx}]",
                self.max_rel_error
            )))
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `f` over every coordinate of `inputs[which]`.
pub fn check_input(
    name: &str,
    inputs: &[Tensor<f64>],
    which: usize,
    analytic: &Tensor<f64>,
    h: f64,
    f: impl Fn(&[Tensor<f64>]) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::empty();
    let mut probe = inputs.to_vec();
    for i in 0..inputs[which].data().len() {
        let orig = inputs[which].data()[i];
        probe[which].data_mut()[i] = orig + h;
        let up = f(&probe);
        probe[which].data_mut()[i] = orig - h;
        let down = f(&probe);
        probe[which].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic.data()[i], numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((name.to_string(), i));
        }
        report.checked += 1;
    }
    report
}

/// Random source and disparity whose sample positions keep clear of the
/// integer kinks of linear interpolation and of the clamp boundaries.
pub fn random_warp_instance(
    rng: &mut ChaCha8Rng,
    channels: usize,
    height: usize,
    width: usize,
) -> (Tensor<f64>, Tensor<f64>) {
    let src = Tensor::from_fn(Shape::new(channels, height, width), |_, _, _| {
        rng.gen_range(-1.0..1.0)
    });
    let disp = Tensor::from_fn(Shape::new(1, height, width), |_, _, _| {
        rng.gen_range(0.0..2.0f64).floor() + rng.gen_range(0.1..0.9)
    });
    (src, disp)
}

/// Checks the warp gradients w.r.t. source and disparity on a random 4×4
/// instance, using the scalar loss `sum(weights * warp(src, d))`.
pub fn warp_gradient_check(h: f64, tolerance: f64) -> Result<GradCheckReport> {
    warp_gradient_check_seeded(h, tolerance, 0)
}

pub fn warp_gradient_check_seeded(h: f64, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::empty();
    for direction in [WarpDirection::LeftToRight, WarpDirection::RightToLeft] {
        let (src, disp) = random_warp_instance(&mut rng, 3, 4, 4);
        let weights = Tensor::from_fn(src.shape(), |_, _, _| rng.gen_range(-1.0..1.0));
        let loss = |inp: &[Tensor<f64>]| -> f64 {
            let out = warp(&inp[0], &inp[1], direction).expect("shapes fixed");
            out.data()
                .iter()
                .zip(weights.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let grads = warp_backward(&src, &disp, direction, &weights)?;
        let inputs = [src, disp];
        report = report
            .merge(check_input("source", &inputs, 0, &grads.source, h, loss))
            .merge(check_input(
                "disparity",
                &inputs,
                1,
                &grads.disparity,
                h,
                loss,
            ));
    }
    report.ensure(tolerance)
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _| rng.gen_range(lo..hi))
}

fn kink_free_disparity(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Tensor<f64> {
    random_warp_instance(rng, 1, height, width).1
}

/// Checks both confidence maps against their disparities on a random 8×8
/// instance, using the scalar loss `sum(g_lr * C_LR + g_rl * C_RL)`.
pub fn confidence_gradient_check(h: f64, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ConsistencyParams::default();
    let d_lr = kink_free_disparity(&mut rng, 8, 8);
    let d_rl = kink_free_disparity(&mut rng, 8, 8);
    let g_lr = uniform(&mut rng, d_lr.shape(), -1.0, 1.0);
    let g_rl = uniform(&mut rng, d_lr.shape(), -1.0, 1.0);
    let loss = |inp: &[Tensor<f64>]| -> f64 {
        let (a, b) = confidence_maps(&inp[0], &inp[1], params).expect("shapes fixed");
        dot(&a, &g_lr) + dot(&b, &g_rl)
    };
    let (ga, gb) = confidence_backward(&d_lr, &d_rl, params, &g_lr, &g_rl)?;
    let inputs = [d_lr, d_rl];
    check_input("d_lr", &inputs, 0, &ga, h, loss)
        .merge(check_input("d_rl", &inputs, 1, &gb, h, loss))
        .ensure(tolerance)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn check_all(
    names: &[&str],
    inputs: &[Tensor<f64>],
    grads: &[&Tensor<f64>],
    h: f64,
    f: impl Fn(&[Tensor<f64>]) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::empty();
    for (i, name) in names.iter().enumerate() {
        report = report.merge(check_input(name, inputs, i, grads[i], h, &f));
    }
    report
}

/// Phase-I objective against all four image inputs.
pub fn phase1_gradient_check(h: f64, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = LossWeights::default();
    let shape = Shape::new(3, 8, 8);
    let inputs: Vec<Tensor<f64>> = (0..4)
        .map(|_| uniform(&mut rng, shape, -1.0, 1.0))
        .collect();
    let (_, g) = loss_phase1_grad(&inputs[0], &inputs[1], &inputs[2], &inputs[3], &w)?;
    let f = |x: &[Tensor<f64>]| {
        loss_phase1_grad(&x[0], &x[1], &x[2], &x[3], &w)
            .expect("shapes fixed")
            .0
            .total
    };
    check_all(
        &["l", "r", "l_dbp", "r_dbp"],
        &inputs,
        &[&g.l, &g.r, &g.l_dbp, &g.r_dbp],
        h,
        f,
    )
    .ensure(tolerance)
}

/// Phase-II objective with its disparity normalization held constant.
pub fn phase2_gradient_check(h: f64, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = LossWeights::default();
    let shape = Shape::new(3, 8, 8);
    let mut inputs: Vec<Tensor<f64>> = (0..4)
        .map(|_| uniform(&mut rng, shape, -1.0, 1.0))
        .collect();
    inputs.push(uniform(&mut rng, Shape::new(1, 8, 8), 0.0, 3.0));
    inputs.push(uniform(&mut rng, Shape::new(1, 8, 8), 0.0, 3.0));
    let (s_lr, s_rl) = (
        disparity_gradient_scale(&inputs[4]),
        disparity_gradient_scale(&inputs[5]),
    );
    let eval = |x: &[Tensor<f64>]| {
        loss_phase2_scaled_grad(&x[0], &x[1], &x[2], &x[3], &x[4], &x[5], s_lr, s_rl, &w)
    };
    let (_, g) = eval(&inputs)?;
    let f = |x: &[Tensor<f64>]| eval(x).expect("shapes fixed").0.total;
    check_all(
        &["l", "r", "l_dbp", "r_dbp", "d_lr", "d_rl"],
        &inputs,
        &[&g.l, &g.r, &g.l_dbp, &g.r_dbp, &g.d_lr, &g.d_rl],
        h,
        f,
    )
    .ensure(tolerance)
}

/// Phase-III objective against both targets and every per-branch term.
pub fn phase3_gradient_check(h: f64, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = LossWeights::default();
    let img = Shape::new(3, 8, 8);
    let map = Shape::new(1, 8, 8);
    let mut inputs: Vec<Tensor<f64>> = (0..2).map(|_| uniform(&mut rng, img, -1.0, 1.0)).collect();
    for _ in 0..2 {
        inputs.push(uniform(&mut rng, img, -1.0, 1.0));
        inputs.push(uniform(&mut rng, img, -1.0, 1.0));
        inputs.push(uniform(&mut rng, map, 0.05, 0.95));
        inputs.push(uniform(&mut rng, map, 0.05, 0.95));
    }
    let eval = |x: &[Tensor<f64>]| {
        loss_phase3_grad(
            &x[0],
            &x[1],
            &BranchTerms {
                refined: &x[2],
                blended: &x[3],
                v: &x[4],
                c: &x[5],
            },
            &BranchTerms {
                refined: &x[6],
                blended: &x[7],
                v: &x[8],
                c: &x[9],
            },
            &w,
        )
    };
    let (_, g) = eval(&inputs)?;
    let f = |x: &[Tensor<f64>]| eval(x).expect("shapes fixed").0.total;
    check_all(
        &[
            "l",
            "r",
            "lr.refined",
            "lr.blended",
            "lr.v",
            "lr.c",
            "rl.refined",
            "rl.blended",
            "rl.v",
            "rl.c",
        ],
        &inputs,
        &[
            &g.l,
            &g.r,
            &g.lr.refined,
            &g.lr.blended,
            &g.lr.v,
            &g.lr.c,
            &g.rl.refined,
            &g.rl.blended,
            &g.rl.v,
            &g.rl.c,
        ],
        h,
        f,
    )
    .ensure(tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warp_gradients_pass_on_several_seeds() {
        for seed in 0..5 {
            let r = warp_gradient_check_seeded(1e-5, 1e-4, seed).unwrap();
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn confidence_and_loss_gradients_pass() {
        for seed in 0..3 {
            confidence_gradient_check(1e-5, 1e-4, seed).unwrap();
            phase1_gradient_check(1e-5, 1e-4, seed).unwrap();
            phase2_gradient_check(1e-5, 1e-4, seed).unwrap();
            phase3_gradient_check(1e-5, 1e-4, seed).unwrap();
        }
    }

    #[test]
    fn a_wrong_gradient_is_reported() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2), vec![0.3, -0.2]).unwrap();
        let wrong = Tensor::from_vec(Shape::new(1, 1, 2), vec![1.0, 0.0]).unwrap();
        // f = x0^2 + x1^2, true gradient (0.6, -0.4)
        let report = check_input("x", &[x], 0, &wrong, 1e-5, |t| {
            t[0].data().iter().map(|v| v * v).sum()
        });
        assert!(report.ensure(1e-4).is_err());
    }
}
